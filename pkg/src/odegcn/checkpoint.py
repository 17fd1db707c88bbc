"""JSON checkpoints for trained parameter arrays.

Floats are written with ``repr`` precision by the json module, so a
write/read cycle reproduces every array bit for bit.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .graph import DirectedGraph

FORMAT = "odegcn-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: str, graph: DirectedGraph, arrays: dict, meta: dict | None = None) -> None:
    payload = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "model": model,
        "n": graph.n,
        "num_edges": graph.num_edges,
        "edge_hash": graph.edge_hash(),
        "arrays": {},
        "meta": meta or {},
    }
    for name, arr in arrays.items():
        values = np.asarray(arr, dtype=float).reshape(-1).tolist()
        if not all(math.isfinite(v) for v in values):
            raise CheckpointError(f"array {name!r} has non-finite entries")
        payload["arrays"][name] = values
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path, graph: DirectedGraph | None = None) -> dict:
    """Read a checkpoint; when ``graph`` is given its edge hash must match."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if graph is not None:
        if payload["n"] != graph.n or payload["edge_hash"] != graph.edge_hash():
            raise CheckpointError(f"{path}: checkpoint was trained on a different graph")
    payload["arrays"] = {k: np.asarray(v, dtype=float) for k, v in payload["arrays"].items()}
    return payload
