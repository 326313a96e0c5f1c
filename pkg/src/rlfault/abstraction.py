"""Transitive approximate Q-irrelevance state abstraction.

Two states are merged when every per-action Q-value lands in the same bucket
of width ``level``: key(s) = (ceil(Q(s, a) / level) for each action a). Key
equality is an equivalence relation, so grouping by key-table lookup yields
exactly the same partition as the pairwise scan over all previously seen
states, in O(n) instead of O(n^2).

All functions take the Q-function as a callable mapping a batch of states
(n, obs_dim) to a Q-matrix (n, n_actions); a trained ``QNetwork`` is one.
"""

from __future__ import annotations

import math

import numpy as np

from .store import read_json_artifact, write_json_artifact

# Id reported for keys never seen while building the index; it maps to no
# feature column, so unknown states simply drop out of the encoding.
UNKNOWN_STATE = -1


def abstract_key(q, level: float) -> tuple[int, ...]:
    """Bucket a Q-value vector: elementwise ceil(q_i / level).

    Values that are exact multiples of ``level`` map to their own bucket
    boundary (mathematical ceiling, no epsilon nudging).
    """
    if level <= 0:
        raise ValueError("abstraction level must be positive")
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q-values must be finite")
    return tuple(math.ceil(v / level) for v in q)


def state_keys(states, q_fn, level: float) -> list[tuple[int, ...]]:
    """Abstract keys for a batch of states, one Q-network evaluation."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states.reshape(1, -1)
    if states.shape[0] == 0:
        return []
    q = np.asarray(q_fn(states), dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q-values must be finite")
    buckets = np.ceil(q / level).astype(np.int64)
    return [tuple(int(v) for v in row) for row in buckets]


def same_abstract(s1, s2, q_fn, level: float) -> bool:
    k1, k2 = state_keys(np.stack([np.asarray(s1), np.asarray(s2)]), q_fn, level)
    return k1 == k2


class AbstractionIndex:
    """Frozen mapping from abstract keys to dense feature column ids.

    Ids are assigned in first-seen order while building and never change
    afterwards; keys that were not seen during the build resolve to
    ``UNKNOWN_STATE``.
    """

    def __init__(self, level: float, n_actions: int, key_to_id=None):
        if level <= 0:
            raise ValueError("abstraction level must be positive")
        self.level = float(level)
        self.n_actions = int(n_actions)
        self._key_to_id: dict[tuple[int, ...], int] = dict(key_to_id or {})

    @classmethod
    def build(cls, states, q_fn, level: float) -> "AbstractionIndex":
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[0] == 0:
            raise ValueError("need a nonempty (n, obs_dim) batch of states")
        keys = state_keys(states, q_fn, level)
        index = cls(level, len(keys[0]))
        for key in keys:
            if key not in index._key_to_id:
                index._key_to_id[key] = len(index._key_to_id)
        return index

    @property
    def n_states(self) -> int:
        return len(self._key_to_id)

    def id_for_key(self, key) -> int:
        return self._key_to_id.get(tuple(key), UNKNOWN_STATE)

    def ids_for_states(self, states, q_fn) -> list[int]:
        return [self.id_for_key(k) for k in state_keys(states, q_fn, self.level)]

    def items(self):
        return self._key_to_id.items()

    def __eq__(self, other):
        return (
            isinstance(other, AbstractionIndex)
            and self.level == other.level
            and self.n_actions == other.n_actions
            and self._key_to_id == other._key_to_id
        )

    def save(self, path, meta=None):
        entries = [[list(key), idx] for key, idx in self._key_to_id.items()]
        write_json_artifact(
            path,
            "abstraction-index",
            1,
            {
                "level": self.level,
                "n_actions": self.n_actions,
                "entries": entries,
            },
            meta,
        )

    @classmethod
    def load(cls, path) -> tuple["AbstractionIndex", dict]:
        record = read_json_artifact(path, "abstraction-index", 1)
        key_to_id = {tuple(key): idx for key, idx in record["entries"]}
        index = cls(record["level"], record["n_actions"], key_to_id)
        return index, record["meta"]
