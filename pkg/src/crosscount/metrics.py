"""Counting metrics: GAME(l), MAE and RMSE, with a per-illumination breakdown."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor

LEVELS = (0, 1, 2, 3)


def as_map(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        if any(d != 1 for d in a.shape[:-2]):
            raise UsageError(f"density map must hold a single image, got shape {a.shape}")
        a = a.reshape(a.shape[-2:])
    if a.ndim != 2:
        raise UsageError(f"density map must be 2-D, got shape {a.shape}")
    return a


def tile_bounds(dim: int, level: int) -> list[tuple[int, int]]:
    """Cut points floor(k * dim / 2**level); trailing tiles absorb the remainder."""
    n = 2 ** level
    cuts = [(k * dim) // n for k in range(n + 1)]
    return list(zip(cuts[:-1], cuts[1:]))


def region_counts(m, level: int) -> np.ndarray:
    """(2**level, 2**level) array of per-tile sums."""
    a = as_map(m)
    rows, cols = tile_bounds(a.shape[0], level), tile_bounds(a.shape[1], level)
    out = np.zeros((len(rows), len(cols)))
    for i, (y0, y1) in enumerate(rows):
        for j, (x0, x1) in enumerate(cols):
            out[i, j] = a[y0:y1, x0:x1].sum()
    return out


def _pairs(preds, gts):
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise UsageError("metrics need at least one image")
    pairs = [(as_map(p), as_map(g)) for p, g in zip(preds, gts)]
    for i, (p, g) in enumerate(pairs):
        if p.shape != g.shape:
            raise UsageError(f"image {i}: prediction shape {p.shape} != ground truth shape {g.shape}")
    return pairs


def game(preds: Sequence, gts: Sequence, level: int) -> float:
    if level < 0:
        raise UsageError(f"GAME level must be >= 0, got {level}")
    pairs = _pairs(preds, gts)
    total = math.fsum(float(np.abs(region_counts(p, level) - region_counts(g, level)).sum()) for p, g in pairs)
    return total / len(pairs)


def count_errors(preds: Sequence, gts: Sequence) -> np.ndarray:
    return np.array([p.sum() - g.sum() for p, g in _pairs(preds, gts)])


def mae(preds: Sequence, gts: Sequence) -> float:
    return math.fsum(np.abs(count_errors(preds, gts))) / len(preds)


def rmse(preds: Sequence, gts: Sequence) -> float:
    err = count_errors(preds, gts)
    return math.sqrt(math.fsum(err * err) / len(err))


@dataclass
class MetricsReport:
    game: dict[int, float]
    rmse: float
    n_images: int
    per_illumination: dict[str, "MetricsReport"] = field(default_factory=dict)

    @property
    def mae(self) -> float:
        return self.game[0]

    def rows(self, split: str = "all") -> list[tuple[str, str, float]]:
        out = [(split, f"GAME{lvl}", v) for lvl, v in sorted(self.game.items())]
        out.append((split, "RMSE", self.rmse))
        for tag, sub in sorted(self.per_illumination.items()):
            out.extend(sub.rows(tag))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "level_or_metric", "value"])
            for split, key, v in self.rows():
                w.writerow([split, key, repr(float(v))])

    def __str__(self) -> str:
        return "\n".join(f"{s:>7} {k:<6} {v:.4f}" for s, k, v in self.rows())


def report(preds: Sequence, gts: Sequence, tags: Sequence[str] | None = None) -> MetricsReport:
    """GAME(0..3) and RMSE overall, plus the same per distinct tag."""
    if tags is not None and len(tags) != len(preds):
        raise UsageError(f"{len(tags)} tags for {len(preds)} images")
    rep = MetricsReport({lvl: game(preds, gts, lvl) for lvl in LEVELS}, rmse(preds, gts), len(preds))
    if tags is not None:
        for tag in sorted(set(tags)):
            idx = [i for i, t in enumerate(tags) if t == tag]
            rep.per_illumination[tag] = report([preds[i] for i in idx], [gts[i] for i in idx])
    return rep


def read_csv(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["split", "level_or_metric", "value"]:
        raise UsageError(f"{path}: not a metrics CSV")
    return [(s, k, float(v)) for s, k, v in rows[1:]]
