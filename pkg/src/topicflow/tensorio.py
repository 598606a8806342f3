"""Versioned JSON tensor envelope shared by every checkpoint in the package."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(
    path: str | Path,
    kind: str,
    config: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray],
    vocab_hash: str | None = None,
    extra: Mapping[str, Any] | None = None,
) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    envelope = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "vocab_hash": vocab_hash,
        "tensors": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(tensors.items())
        },
    }
    if extra:
        envelope["extra"] = dict(extra)
    Path(path).write_text(json.dumps(envelope, sort_keys=True))


def load_tensors(
    path: str | Path,
    kind: str | None = None,
    vocab_hash: str | None = None,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(envelope_without_tensors, tensors)``; validate version, kind and vocab hash."""
    env = json.loads(Path(path).read_text())
    version = env.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and env.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {env.get('kind')!r}")
    if vocab_hash is not None and env.get("vocab_hash") != vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {env.get('vocab_hash')}, expected {vocab_hash})"
        )
    tensors = {
        name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        for name, t in env.pop("tensors").items()
    }
    return env, tensors
