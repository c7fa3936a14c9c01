"""Pixel overlap metrics and boundary surface distances for binary masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("IoU", "Dice", "Precision", "Recall", "FOR", "HD95", "ASD")
HEADERS = ("IoU", "Dice", "Prec.", "Rec.", "FOR", "HD95", "ASD")


def as_binary(mask, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} is not binary")
        arr = arr.astype(bool)
    return arr


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = as_binary(pred, "pred"), as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    return p, t


def confusion(pred, truth) -> tuple[int, int, int, int]:
    p, t = _check_pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def pixel_metrics(pred, truth) -> dict[str, float]:
    """IoU, Dice, Precision, Recall and FOR from the confusion counts.

    A 0/0 ratio scores 1 for IoU, Dice, Precision and Recall (nothing to find,
    nothing wrongly found) and 0 for FOR.
    """
    tp, fp, fn, tn = confusion(pred, truth)
    return {
        "IoU": _ratio(tp, tp + fp + fn, 1.0),
        "Dice": _ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        "Precision": _ratio(tp, tp + fp, 1.0),
        "Recall": _ratio(tp, tp + fn, 1.0),
        "FOR": _ratio(fn, fn + tn, 0.0),
    }


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour; outside counts as background."""
    m = np.pad(mask, 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = core & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each ``src`` pixel to the nearest ``dst`` pixel.

    The feature transform gives the nearest target index; distances are then
    recomputed from integer offsets so results are exact.
    """
    _, (ri, ci) = ndimage.distance_transform_edt(~dst, return_indices=True)
    rows, cols = np.nonzero(src)
    dr = (rows - ri[rows, cols]).astype(np.float64)
    dc = (cols - ci[rows, cols]).astype(np.float64)
    return np.sqrt(dr * dr + dc * dc)


def distance_pool(pred, truth) -> np.ndarray:
    """Symmetric boundary-to-boundary distance pool (both directions concatenated)."""
    p, t = _check_pair(pred, truth)
    bp, bt = boundary(p), boundary(t)
    return np.concatenate([_nearest_distances(bp, bt), _nearest_distances(bt, bp)])


def percentile_linear(values: np.ndarray, q: float) -> float:
    """``q``-th percentile with linear interpolation between order statistics.

    Written out as ``s[lo] + (s[hi] - s[lo]) * frac`` so the rounding is
    fixed by this formula rather than by a library's internal variant.
    """
    s = np.sort(np.asarray(values, dtype=np.float64))
    rank = q / 100.0 * (len(s) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(s) - 1)
    return float(s[lo] + (s[hi] - s[lo]) * (rank - lo))


def surface_distances(pred, truth) -> dict[str, float]:
    """HD95 (linear-interpolated 95th percentile) and ASD of the symmetric pool.

    Both masks empty scores 0; exactly one empty scores the image diagonal.
    ASD uses a correctly rounded sum, so it does not depend on pool order.
    """
    p, t = _check_pair(pred, truth)
    has_p, has_t = bool(p.any()), bool(t.any())
    if not has_p and not has_t:
        return {"HD95": 0.0, "ASD": 0.0}
    if has_p != has_t:
        diag = math.hypot(*p.shape)
        return {"HD95": diag, "ASD": diag}
    pool = distance_pool(p, t)
    return {"HD95": percentile_linear(pool, 95), "ASD": math.fsum(pool.tolist()) / len(pool)}


def all_metrics(pred, truth) -> dict[str, float]:
    out = pixel_metrics(pred, truth)
    out.update(surface_distances(pred, truth))
    return out


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {
            "metrics": list(METRIC_NAMES),
            "mean": self.means,
            "samples": [{"id": i, **r} for i, r in zip(self.ids, self.rows)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, per_sample: bool = True) -> str:
        width = max([len("mean")] + [len(i) for i in self.ids]) if per_sample else 4
        head = f"{'sample':<{width}}  " + "  ".join(f"{h:>8}" for h in HEADERS)
        lines = [head]

        def fmt(label, vals):
            return f"{label:<{width}}  " + "  ".join(f"{vals[k]:8.4f}" for k in METRIC_NAMES)

        if per_sample:
            lines += [fmt(i, r) for i, r in zip(self.ids, self.rows)]
        lines.append(fmt("mean", self.means))
        return "\n".join(lines)


def evaluate_dataset(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                     ids: Iterable[str] | None = None) -> MetricReport:
    """Per-sample metrics in input order plus unweighted means."""
    if len(pairs) == 0:
        raise ValueError("evaluate_dataset needs at least one (pred, truth) pair")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise ValueError(f"{len(ids)} ids for {len(pairs)} pairs")
    return MetricReport(ids, [all_metrics(p, t) for p, t in pairs])
