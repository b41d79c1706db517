"""Overlap and surface-distance metrics plus the soft dice training loss.

Voxel-set metrics per structure:
    dss  = 2|P&G| / (|P|+|G|)
    jss  = |P&G| / (|P|+|G|-|P&G|)
    hd95 = max over directions of the 95th-percentile (nearest rank) of
           per-surface-voxel nearest distances
    assd = mean of the two directed average surface distances

Surfaces are foreground voxels with at least one background 6-neighbor
(out-of-bounds counts as background). Distances are Euclidean in voxel units
scaled by the grid spacing. Distance metrics are undefined (None) when either
surface is empty; dss/jss score 1.0 when both masks are empty and 0.0 when
exactly one is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import Tensor


def dss(p: np.ndarray, g: np.ndarray) -> float:
    """Dice similarity of two binary masks."""
    p, g = _as_masks(p, g)
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / (sp + sg)


def jss(p: np.ndarray, g: np.ndarray) -> float:
    """Jaccard similarity of two binary masks."""
    p, g = _as_masks(p, g)
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    inter = int((p & g).sum())
    return inter / (sp + sg - inter)


def _as_masks(p, g):
    p = np.asarray(p).astype(bool)
    g = np.asarray(g).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {g.shape}")
    return p, g


def surface_extract(mask: np.ndarray) -> np.ndarray:
    """Coordinates [n,3] of foreground voxels with a background 6-neighbor."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
                & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
                & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2])
    return np.argwhere(m & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Nearest-neighbor distance from every src surface voxel into dst."""
    scale = np.asarray(spacing, dtype=np.float64)
    d, _ = cKDTree(dst * scale).query(src * scale)
    return np.atleast_1d(d)


def _nearest_rank_p95(values: np.ndarray) -> float:
    v = np.sort(values)
    idx = int(np.ceil(0.95 * v.size)) - 1
    return float(v[idx])


def hd95(p: np.ndarray, g: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Symmetric 95th-percentile surface distance; None if a surface is empty."""
    p, g = _as_masks(p, g)
    sp, sg = surface_extract(p), surface_extract(g)
    if sp.size == 0 or sg.size == 0:
        return None
    fwd = _directed_distances(sp, sg, spacing)
    bwd = _directed_distances(sg, sp, spacing)
    return max(_nearest_rank_p95(fwd), _nearest_rank_p95(bwd))


def assd(p: np.ndarray, g: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Average symmetric surface distance; None if a surface is empty."""
    p, g = _as_masks(p, g)
    sp, sg = surface_extract(p), surface_extract(g)
    if sp.size == 0 or sg.size == 0:
        return None
    fwd = _directed_distances(sp, sg, spacing)
    bwd = _directed_distances(sg, sp, spacing)
    return float((fwd.mean() + bwd.mean()) / 2.0)


@dataclass
class StructureMetrics:
    name: str
    dss: float
    jss: float
    hd95: float | None
    assd: float | None

    @property
    def distances_defined(self) -> bool:
        return self.hd95 is not None and self.assd is not None


@dataclass
class MetricsReport:
    """Per-structure metrics plus averages over the defined values."""

    structures: list

    def _defined(self, key):
        vals = [getattr(s, key) for s in self.structures]
        return [v for v in vals if v is not None]

    def average(self, key) -> float | None:
        vals = self._defined(key)
        return float(np.mean(vals)) if vals else None

    def to_lines(self) -> list[str]:
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"

        lines = []
        for s in self.structures:
            lines.append(f"{s.name} dss={fmt(s.dss)} jss={fmt(s.jss)} "
                         f"hd95={fmt(s.hd95)} assd={fmt(s.assd)}")
        lines.append(f"average dss={fmt(self.average('dss'))} "
                     f"jss={fmt(self.average('jss'))} "
                     f"hd95={fmt(self.average('hd95'))} "
                     f"assd={fmt(self.average('assd'))}")
        return lines

    def to_json(self) -> str:
        doc = {
            "structures": {
                s.name: {"dss": s.dss, "jss": s.jss,
                         "hd95": s.hd95, "assd": s.assd}
                for s in self.structures
            },
            "average": {key: self.average(key)
                        for key in ("dss", "jss", "hd95", "assd")},
        }
        return json.dumps(doc, sort_keys=True)


def evaluate(pred: np.ndarray, gt: np.ndarray, num_classes: int,
             spacing=(1.0, 1.0, 1.0), class_names=None) -> MetricsReport:
    """All four metrics for every foreground class of two label maps."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label extents differ: {pred.shape} vs {gt.shape}")
    if class_names is None:
        class_names = [f"class{c}" for c in range(1, num_classes)]
    if len(class_names) != num_classes - 1:
        raise ValueError(
            f"need {num_classes - 1} class names, got {len(class_names)}")
    structures = []
    for c in range(1, num_classes):
        p = pred == c
        g = gt == c
        structures.append(StructureMetrics(
            name=class_names[c - 1],
            dss=dss(p, g),
            jss=jss(p, g),
            hd95=hd95(p, g, spacing),
            assd=assd(p, g, spacing),
        ))
    return MetricsReport(structures)


def soft_dice_loss(probs: Tensor, target: Tensor, eps: float = 1e-5) -> Tensor:
    """1 - mean soft dice over foreground classes; differentiable.

    probs and target are [N,classes,D,H,W]; target is one-hot. Background is
    excluded from the mean because it dwarfs every structure.
    """
    if probs.shape != target.shape:
        raise ValueError(
            f"probs/target shapes differ: {probs.shape} vs {target.shape}")
    axes = (0, 2, 3, 4)
    inter = T.tensor_sum(T.mul(probs, target), axis=axes)
    psum = T.tensor_sum(probs, axis=axes)
    gsum = T.tensor_sum(target, axis=axes)
    num = T.add(T.mul(inter, 2.0), eps)
    den = T.add(T.add(psum, gsum), eps)
    dice = T.div(num, den)
    fg = T.slice_axes(dice, (slice(1, probs.shape[1]),))
    return T.sub(1.0, T.tensor_mean(fg))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[D,H,W] integer labels -> [classes,D,H,W] one-hot planes."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels outside [0, {num_classes}): "
            f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = labels == c
    return out


def mean_foreground_dss(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean dice over foreground classes; the training/selection scalar."""
    vals = [dss(pred == c, gt == c) for c in range(1, num_classes)]
    return float(np.mean(vals))
