"""Saliency evaluation metrics.

Distribution metrics (KLD, CC, SIM, EMD) compare a prediction with a density
map; location metrics (NSS, the AUC family, IG) compare it with a binary
fixation map. Predictions are renormalised where a metric needs a
distribution, but never otherwise post-processed.
"""

from __future__ import annotations

import os

import numpy as np

from .fixations import FixationMap

DEFAULT_EPS = 1e-7
DEFAULT_SPLITS = 100
DEFAULT_EMD_GRID = (40, 40)


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. a constant map for CC)."""


def _as_map(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d saliency map, got shape {np.shape(x)}")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")


def as_distribution(x) -> np.ndarray:
    arr = _as_map(x)
    if (arr < 0).any():
        raise ValueError("saliency map has negative values; cannot treat as a distribution")
    total = arr.sum()
    if not total > 0:
        raise UndefinedMetric("saliency map has zero mass")
    return arr / total


def _check_fixations(saliency: np.ndarray, fixations: FixationMap) -> None:
    if fixations.shape != saliency.shape:
        raise ValueError(f"fixation map {fixations.shape} does not match saliency map {saliency.shape}")
    if len(fixations) == 0:
        raise UndefinedMetric("fixation map is empty")


# --- distribution-based ----------------------------------------------------------


def metric_kld(pred, target, eps: float = DEFAULT_EPS) -> float:
    """sum Q ln(eps + Q / (eps + P)) with P the prediction and Q the target."""
    p, q = as_distribution(pred), as_distribution(target)
    _same_shape(p, q)
    on = q > 0
    return float(np.sum(q[on] * np.log(eps + q[on] / (eps + p[on]))))


def metric_cc(pred, target) -> float:
    p, q = _as_map(pred), _as_map(target)
    _same_shape(p, q)
    p = p - p.mean()
    q = q - q.mean()
    sp, sq = np.sqrt(np.mean(p * p)), np.sqrt(np.mean(q * q))
    if sp == 0 or sq == 0:
        raise UndefinedMetric("CC undefined for a constant map")
    return float(np.clip(np.mean(p * q) / (sp * sq), -1.0, 1.0))


def metric_sim(pred, target) -> float:
    p, q = as_distribution(pred), as_distribution(target)
    _same_shape(p, q)
    return float(np.minimum(p, q).sum())


# --- location-based ----------------------------------------------------------------


def metric_nss(pred, fixations: FixationMap) -> float:
    s = _as_map(pred)
    _check_fixations(s, fixations)
    std = s.std()
    if std == 0:
        raise UndefinedMetric("NSS undefined for a constant map")
    return float(np.mean(fixations.values((s - s.mean()) / std)))


def _roc_area(fpr: np.ndarray, tpr: np.ndarray) -> float:
    x = np.concatenate([[0.0], fpr, [1.0]])
    y = np.concatenate([[0.0], tpr, [1.0]])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def _rate_at_or_above(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Fraction of ``values`` >= each threshold."""
    srt = np.sort(values)
    return (len(srt) - np.searchsorted(srt, thresholds, side="left")) / len(srt)


def auc_threshold_sweep(positives: np.ndarray, negatives: np.ndarray,
                        thresholds: np.ndarray | None = None) -> float:
    """ROC area from a descending ">=" threshold sweep, anchored at (0,0) and (1,1).

    Thresholds default to every distinct value among positives and negatives.
    """
    if thresholds is None:
        thresholds = np.unique(np.concatenate([positives, negatives]))
    thresholds = np.sort(thresholds)[::-1]
    tpr = _rate_at_or_above(positives, thresholds)
    fpr = _rate_at_or_above(negatives, thresholds)
    return _roc_area(fpr, tpr)


def metric_auc_judd(pred, fixations: FixationMap) -> float:
    s = _as_map(pred)
    _check_fixations(s, fixations)
    mask = fixations.to_mask()
    pos, neg = s[mask], s[~mask]
    if neg.size == 0:
        raise UndefinedMetric("AUC-Judd needs at least one non-fixated pixel")
    return auc_threshold_sweep(pos, neg, thresholds=np.unique(pos))


def _split_negatives(rng, pool: np.ndarray, n_splits: int, per_split: int) -> np.ndarray:
    return pool[rng.integers(0, len(pool), size=(n_splits, per_split))]


def metric_auc_borji(pred, fixations: FixationMap, n_splits: int = DEFAULT_SPLITS,
                     seed: int = 0) -> float:
    """Mean AUC over splits with |F| negatives drawn uniformly (with replacement) off-fixation."""
    s = _as_map(pred)
    _check_fixations(s, fixations)
    flat = s.ravel()
    pool = np.flatnonzero(~fixations.to_mask().ravel())
    if pool.size == 0:
        raise UndefinedMetric("AUC-Borji needs at least one non-fixated pixel")
    pos = flat[fixations.flat_indices()]
    rng = np.random.default_rng(seed)
    draws = _split_negatives(rng, pool, n_splits, len(fixations))
    return float(np.mean([auc_threshold_sweep(pos, flat[d]) for d in draws]))


def shuffled_pool(fixations: FixationMap, other_fixations) -> np.ndarray:
    """Flat indices of the union of the other maps' fixation locations."""
    others = list(other_fixations)
    if not others:
        raise ValueError("sAUC needs a non-empty pool of other fixation maps")
    for o in others:
        if o.shape != fixations.shape:
            raise ValueError(f"pool fixation map {o.shape} does not match {fixations.shape}")
    pool = np.unique(np.concatenate([o.flat_indices() for o in others]))
    if pool.size == 0:
        raise ValueError("sAUC negative pool is empty: the other fixation maps have no locations")
    return pool


def metric_sauc(pred, fixations: FixationMap, other_fixations, n_splits: int = DEFAULT_SPLITS,
                seed: int = 0) -> float:
    """AUC-Borji with negatives drawn from other images' fixation locations."""
    s = _as_map(pred)
    _check_fixations(s, fixations)
    pool = shuffled_pool(fixations, other_fixations)
    flat = s.ravel()
    pos = flat[fixations.flat_indices()]
    rng = np.random.default_rng(seed)
    draws = _split_negatives(rng, pool, n_splits, len(fixations))
    return float(np.mean([auc_threshold_sweep(pos, flat[d]) for d in draws]))


def center_prior(shape: tuple[int, int], sigma: float | None = None) -> np.ndarray:
    """Isotropic Gaussian at the image centre, default sigma = width / 4, unit sum."""
    h, w = shape
    sigma = w / 4 if sigma is None else sigma
    rr, cc = np.mgrid[0:h, 0:w]
    g = np.exp(-((rr - (h - 1) / 2) ** 2 + (cc - (w - 1) / 2) ** 2) / (2 * sigma**2))
    return g / g.sum()


def metric_ig(pred, fixations: FixationMap, baseline=None, eps: float = DEFAULT_EPS) -> float:
    """Mean information gain (bits per fixation) of the prediction over a baseline."""
    p = as_distribution(pred)
    _check_fixations(p, fixations)
    b = center_prior(p.shape) if baseline is None else as_distribution(baseline)
    _same_shape(p, b)
    return float(np.mean(np.log2(eps + fixations.values(p)) - np.log2(eps + fixations.values(b))))


# --- earth mover's distance ------------------------------------------------------


def _bins(n: int, k: int) -> np.ndarray:
    return (np.arange(n) * k) // n


def block_downsample(dist: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Block-sum a map onto at most ``grid`` cells; also return cell centres in source pixels."""
    h, w = dist.shape
    gh, gw = min(grid[0], h), min(grid[1], w)
    rb, cb = _bins(h, gh), _bins(w, gw)
    out = np.zeros((gh, gw))
    np.add.at(out, (rb[:, None], cb[None, :]), dist)
    row_c = np.bincount(rb, weights=np.arange(h)) / np.bincount(rb)
    col_c = np.bincount(cb, weights=np.arange(w)) / np.bincount(cb)
    centers = np.stack(np.meshgrid(row_c, col_c, indexing="ij"), axis=-1).reshape(-1, 2)
    return out, centers


def _solve_transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> float:
    for flag in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{flag}", "1")
    import ot

    return float(ot.emd2(a, b, cost, numItermax=10_000_000))


def metric_emd(pred, target, grid: tuple[int, int] = DEFAULT_EMD_GRID) -> float:
    """Exact transport cost (Euclidean ground distance, source-pixel units) on a coarse grid."""
    p, q = as_distribution(pred), as_distribution(target)
    _same_shape(p, q)
    pd, centers = block_downsample(p, grid)
    qd, _ = block_downsample(q, grid)
    a, b = pd.ravel(), qd.ravel()
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    if len(ia) == len(ib) and np.array_equal(ia, ib) and np.array_equal(a, b):
        return 0.0
    ca, cb = centers[ia], centers[ib]
    cost = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
    a, b = a[ia], b[ib]
    return max(0.0, _solve_transport(a / a.sum(), b / b.sum(), cost))


# --- registry ----------------------------------------------------------------------

# name -> True when higher is better
METRIC_DIRECTIONS = {
    "AUC_J": True, "SIM": True, "EMD": False, "AUC_B": True,
    "sAUC": True, "CC": True, "NSS": True, "KLD": False, "IG": True,
}
METRIC_NAMES = tuple(METRIC_DIRECTIONS)
