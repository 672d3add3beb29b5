"""Dice overlap, head-consistency scores and rank correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .segnet import PredictionSet, binarize, predict


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    l_dsc: float
    m_dsc: float
    mean_score: float
    r_dsc: Optional[float] = None
    round: int = 0


def dsc(a, b) -> float:
    """Dice coefficient ``2|a & b| / (|a| + |b|)`` of two binary masks.

    Two empty masks agree perfectly (1.0); one empty mask against a non-empty
    one gives 0.0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def consistency_scores(preds: PredictionSet, sample_id: str = "", round: int = 0,
                       truth: Optional[np.ndarray] = None) -> ScoreRecord:
    """Agreement of the lower and middle heads with the final head on one sample.

    ``preds`` holds maps for a single image (leading batch axis of 1, or
    none). If ``truth`` is given, the final-head DSC against it is recorded.
    """
    maps = [np.asarray(p.data if hasattr(p, "data") else p) for p in preds]
    masks = [binarize(m[0] if m.ndim == 4 else m) for m in maps]
    mask_l, mask_m, mask_f = masks
    l = dsc(mask_l, mask_f)
    m = dsc(mask_m, mask_f)
    r = None if truth is None else dsc(mask_f, truth)
    return ScoreRecord(sample_id, l, m, (l + m) / 2, r, round)


def evaluate(model, images: np.ndarray, masks: np.ndarray, batch_size: int = 32) -> float:
    """Mean over samples of DSC(final-head mask, ground truth)."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(model, images, batch_size=batch_size, heads=("f",))["f"]
    pred = binarize(probs)
    return float(np.mean([dsc(p, t) for p, t in zip(pred, masks)]))


def rankdata(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rank(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Pearson correlation of average-tie ranks.

    Returns ``None`` when either input has no rank variance (all values tied),
    in which case no correlation is defined.
    """
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 3:
        raise ValueError("spearman_rank needs at least 3 pairs")
    rx = rankdata(xs)
    ry = rankdata(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return None
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))
