"""Versioned JSON artifact files.

Every stage output embeds the kind/version of the record plus free-form
metadata (config hash, seed) so later stages can refuse mismatched inputs.
Floats are serialised with ``repr`` semantics, which round-trips IEEE doubles
exactly, so rereading an artifact reproduces it bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path


class ArtifactError(Exception):
    """Problem reading an artifact file."""


class CorruptArtifactError(ArtifactError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json_artifact(path, kind: str, version: int, payload: dict, meta=None):
    record = {"kind": kind, "version": version, "meta": dict(meta or {})}
    record.update(payload)
    Path(path).write_text(dump_json(record) + "\n")


def read_json_artifact(path, kind: str, version: int) -> dict:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptArtifactError(f"{path}: not a valid artifact file: {exc}") from exc
    if not isinstance(record, dict) or record.get("kind") != kind:
        raise CorruptArtifactError(
            f"{path}: expected a {kind!r} artifact, got {record.get('kind')!r}"
            if isinstance(record, dict)
            else f"{path}: expected a {kind!r} artifact"
        )
    if record.get("version") != version:
        raise ArtifactVersionError(
            f"{path}: {kind} version {record.get('version')!r}, expected {version}"
        )
    return record


def write_jsonl(path, header: dict, records) -> int:
    """Write a header line followed by one JSON record per line."""
    n = 0
    with open(path, "w") as fh:
        fh.write(dump_json(header) + "\n")
        for record in records:
            fh.write(dump_json(record) + "\n")
            n += 1
    return n


def read_jsonl(path, kind: str, version: int):
    """Read a JSONL artifact; returns (header, list of records)."""
    path = Path(path)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    if not lines:
        raise CorruptArtifactError(f"{path}: empty artifact file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line]
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"{path}: malformed line: {exc}") from exc
    if not isinstance(header, dict) or header.get("kind") != kind:
        raise CorruptArtifactError(f"{path}: expected a {kind!r} artifact")
    if header.get("version") != version:
        raise ArtifactVersionError(
            f"{path}: {kind} version {header.get('version')!r}, expected {version}"
        )
    return header, records
