"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops over pixels and pairs so it
shares no code path with the library.
"""

import math

import numpy as np


def brute_confusion(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(truth).ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_pixel_metrics(pred, truth):
    tp, fp, fn, tn = brute_confusion(pred, truth)

    def ratio(a, b, empty):
        return a / b if b else empty

    return {
        "IoU": ratio(tp, tp + fp + fn, 1.0),
        "Dice": ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        "Precision": ratio(tp, tp + fp, 1.0),
        "Recall": ratio(tp, tp + fn, 1.0),
        "FOR": ratio(fn, fn + tn, 0.0),
    }


def brute_boundary(mask):
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    out.append((i, j))
                    break
    return out


def brute_pool(pred, truth):
    bp, bt = brute_boundary(pred), brute_boundary(truth)

    def directed(src, dst):
        return [min(math.sqrt((i - k) ** 2 + (j - m) ** 2) for k, m in dst) for i, j in src]

    return directed(bp, bt) + directed(bt, bp)


def linear_percentile(values, q):
    s = sorted(values)
    rank = q / 100.0 * (len(s) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (rank - lo)


def brute_surface(pred, truth):
    has_p, has_t = bool(np.any(pred)), bool(np.any(truth))
    if not has_p and not has_t:
        return {"HD95": 0.0, "ASD": 0.0}
    if has_p != has_t:
        d = math.sqrt(pred.shape[0] ** 2 + pred.shape[1] ** 2)
        return {"HD95": d, "ASD": d}
    pool = brute_pool(pred, truth)
    return {"HD95": linear_percentile(pool, 95), "ASD": math.fsum(pool) / len(pool)}


def random_mask_pairs(count, max_side=8, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        h, w = rng.integers(1, max_side + 1, size=2)
        dp, dt = rng.uniform(0, 1, size=2)
        pairs.append((rng.uniform(size=(h, w)) < dp, rng.uniform(size=(h, w)) < dt))
    return pairs


def brute_axis_cover(n, patch, origins):
    """True iff every index of [0, max(n, patch)) lies in some window and all windows fit."""
    length = max(n, patch)
    covered = [False] * length
    for o in origins:
        if o < 0 or o + patch > length:
            return False
        for i in range(o, o + patch):
            covered[i] = True
    return all(covered)
