"""Similarity between two interpretations: rank correlation, top-k
intersection and center-of-mass shift."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput, DegenerateSaliency, InvalidK, LengthMismatch, ShapeMismatch


@dataclass
class MetricReport:
    rank_correlation: float
    topk_intersection: float
    k: int
    center_shift: float

    def __post_init__(self):
        for v in (self.rank_correlation, self.topk_intersection, self.center_shift):
            if not math.isfinite(v):
                raise ValueError("metric values must be finite")


def _flat(v):
    if hasattr(v, "values"):
        v = v.values
    return np.asarray(v, dtype=np.float64).ravel()


def spearman(a, b):
    """Spearman's rho with average ranks for ties."""
    a, b = _flat(a), _flat(b)
    if a.size != b.size:
        raise LengthMismatch(f"lengths {a.size} and {b.size} differ")
    if a.size < 2:
        raise LengthMismatch("need at least two entries")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise DegenerateInput("rank correlation undefined for a constant vector")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def topk_indices(v, k):
    """Indices of the k largest entries; ties go to the smaller index."""
    v = _flat(v)
    if not 1 <= k <= v.size:
        raise InvalidK(f"k={k} outside [1, {v.size}]")
    return np.argsort(-v, kind="stable")[:k]


def topk_intersection(a, b, k):
    a, b = _flat(a), _flat(b)
    if a.size != b.size:
        raise LengthMismatch(f"lengths {a.size} and {b.size} differ")
    common = np.intersect1d(topk_indices(a, k), topk_indices(b, k), assume_unique=True)
    return common.size / k


def _grid(s):
    v = s.values if hasattr(s, "values") else s
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        v = v.sum(axis=0)
    if v.ndim != 2:
        raise ShapeMismatch(f"center of mass needs a 2-D map, got shape {v.shape}")
    return v


def center_of_mass(s):
    """Saliency-weighted mean (row, col), 1-based; channels summed first."""
    v = _grid(s)
    total = v.sum()
    if not total > 1e-12:
        raise DegenerateSaliency("saliency map has no mass")
    v = v / total
    rows = np.arange(1, v.shape[0] + 1, dtype=np.float64)
    cols = np.arange(1, v.shape[1] + 1, dtype=np.float64)
    return float(rows @ v.sum(axis=1)), float(cols @ v.sum(axis=0))


def center_shift(a, b):
    if _grid(a).shape != _grid(b).shape:
        raise ShapeMismatch("maps live on different grids")
    (r1, c1), (r2, c2) = center_of_mass(a), center_of_mass(b)
    return math.hypot(r1 - r2, c1 - c2)


def compare(before, after, k):
    """All three measures for a before/after pair of saliency maps."""
    values = _flat(before)
    if np.ptp(values) == 0 and np.ptp(_flat(after)) == 0:
        rho = 1.0
    else:
        try:
            rho = spearman(before, after)
        except DegenerateInput:
            rho = 0.0
    try:
        shift = center_shift(before, after)
    except ShapeMismatch:
        shift = 0.0
    return MetricReport(rho, topk_intersection(before, after, k), k, shift)
