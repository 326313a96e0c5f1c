"""Shared estimator plumbing and input validation helpers.

The learners in this package follow the scikit-learn estimator protocol
(constructor parameters stored verbatim, ``fit`` returns ``self``, fitted
attributes carry a trailing underscore, ``get_params``/``set_params`` for
introspection) without depending on scikit-learn itself.
"""

from __future__ import annotations

import inspect

import numpy as np


class ParamsMixin:
    """get_params/set_params backed by the constructor signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"unknown parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self


def clone(estimator):
    """Fresh, unfitted copy of an estimator with identical parameters."""
    return type(estimator)(**estimator.get_params())


def check_rng(rng=None):
    """Coerce ``None``, an int seed, or a Generator into a numpy Generator."""
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def check_state(s, dim=None):
    """Validate a state vector: 1-D, finite, optionally of fixed dimension."""
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"state must be a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"state has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("state contains non-finite entries")
    return arr


def check_binary_matrix(X, n_features=None):
    """Validate a binary feature matrix (rows = episodes, columns = abstract states)."""
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(
            f"feature matrix has {arr.shape[1]} columns, expected {n_features}"
        )
    arr = arr.astype(np.uint8, copy=False)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("feature matrix entries must be 0 or 1")
    return arr


def check_labels(y, n_rows=None):
    """Validate binary class labels."""
    arr = np.asarray(y).astype(np.int64)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ValueError(f"got {arr.shape[0]} labels for {n_rows} rows")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return arr
