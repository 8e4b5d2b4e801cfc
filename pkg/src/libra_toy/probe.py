"""Attention-diversity probes.

Captured attention probabilities are sliced to (answer query -> image key)
blocks, then compared across layers and across heads. Differences are mean
absolute deviations from the corresponding mean map, averaged over the
spatial (key) axis and over query positions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LibraModel, forward
from .seqio import MultimodalSequence, collate


@dataclass
class AttentionRecord:
    maps: np.ndarray  # (layers, heads, queries, keys)
    query_span: tuple
    key_span: tuple

    @property
    def n_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def n_heads(self) -> int:
        return self.maps.shape[1]


def record_attention(model: LibraModel, seq: MultimodalSequence, query_span, key_span) -> AttentionRecord:
    """Run one forward pass with capture on and keep probs[query_span, key_span] per layer and head.

    Spans are half-open ``(start, stop)`` position ranges.
    """
    q0, q1 = query_span
    k0, k1 = key_span
    if q1 <= q0 or k1 <= k0:
        raise ValueError("record_attention: empty span")
    if q1 > len(seq) or k1 > len(seq) or q0 < 0 or k0 < 0:
        raise ValueError("record_attention: span outside the sequence")
    captured: list[np.ndarray] = []
    forward(model.leaves(), collate([seq]), model.cfg, capture=captured)
    maps = np.stack([p[0, :, q0:q1, k0:k1] for p in captured])
    return AttentionRecord(maps, (q0, q1), (k0, k1))


def _wide(maps: np.ndarray) -> np.ndarray:
    # extended precision keeps means of identical maps exact and rounds only once at the end
    return np.asarray(maps, dtype=np.longdouble)


def cross_layer_diff(record: AttentionRecord) -> np.ndarray:
    """Per layer: spatial mean of |head-mean map of the layer - mean over layers|."""
    per_layer = _wide(record.maps).mean(axis=1)
    ref = per_layer.mean(axis=0, keepdims=True)
    return np.abs(per_layer - ref).mean(axis=(1, 2)).astype(np.float64)


def inner_layer_diff(record: AttentionRecord) -> np.ndarray:
    """(layers, heads): spatial mean of |head map - mean over heads of that layer|."""
    maps = _wide(record.maps)
    ref = maps.mean(axis=1, keepdims=True)
    return np.abs(maps - ref).mean(axis=(2, 3)).astype(np.float64)


def activation_map(record: AttentionRecord, layer: int | None = None, grid: tuple | None = None) -> np.ndarray:
    """Head-averaged attention of a single query over the image keys, laid out on the patch grid.

    ``layer=None`` also averages over layers.
    """
    if record.maps.shape[2] != 1:
        raise ValueError("activation_map: expects a single query position")
    row = record.maps[:, :, 0, :].mean(axis=1)
    row = row.mean(axis=0) if layer is None else row[layer]
    p = row.shape[0]
    if grid is None:
        side = int(round(np.sqrt(p)))
        grid = (side, side)
    if grid[0] * grid[1] != p:
        raise ValueError(f"activation_map: {p} keys do not fill a {grid[0]}x{grid[1]} grid")
    return row.reshape(grid)


def write_diff_csv(path, rows: list[tuple]) -> None:
    """Rows of (sample_id, layer, head or "mean", value)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "layer", "head", "diff"])
        for sid, layer, head, val in rows:
            w.writerow([sid, layer, head, f"{val:.10g}"])


def diff_rows(sample_id, record: AttentionRecord) -> list[tuple]:
    rows = [(sample_id, l, "mean", float(v)) for l, v in enumerate(cross_layer_diff(record))]
    inner = inner_layer_diff(record)
    for l in range(inner.shape[0]):
        rows.extend((sample_id, l, h, float(inner[l, h])) for h in range(inner.shape[1]))
    return rows


def write_grids(path, grids: dict) -> None:
    Path(path).write_text(json.dumps({str(k): np.round(v, 10).tolist() for k, v in grids.items()}, sort_keys=True))
