"""Evaluation metrics: scene features, Fréchet distance, MMD, segmentation scores
and SSIM-based nearest-neighbour retrieval.

The feature extractor here is hand-crafted and deterministic, so F3D and MMD
values are only comparable between runs of this package.  Any callable mapping
a :class:`SemanticGrid` to a 1-D vector can be passed in its place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial.distance import cdist, pdist

from .grid import SemanticGrid

F3D_SCALE = 1e-3
SSIM_WINDOW = (7, 7, 3)
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
ENTROPY_CELLS = (4, 4, 2)

FeatureExtractor = Callable[[SemanticGrid], np.ndarray]


# -- features -------------------------------------------------------------------


def extract_features(grid: SemanticGrid, ignore_index: int = 0) -> np.ndarray:
    """Histogram (K), per-class centre and spread per axis (6K), per-z occupancy (d)
    and the class entropy of each cell of a 4 x 4 x 2 partition (32)."""
    labels = grid.labels
    K = grid.num_classes
    h, w, d = grid.dims
    n = labels.size
    counts = np.bincount(labels.ravel(), minlength=K).astype(np.float64)
    hist = counts / n

    # voxel centres normalised to (0, 1) so that a flip maps c -> 1 - c
    axes = [(np.arange(m) + 0.5) / m for m in (h, w, d)]
    moments = np.zeros((K, 6))
    for axis, coords in enumerate(axes):
        other = tuple(a for a in range(3) if a != axis)
        per = np.stack([(labels == c).sum(axis=other) for c in range(K)]).astype(np.float64)  # (K, m)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = (per @ coords) / counts
            var = (per @ coords**2) / counts - mean**2
        present = counts > 0
        moments[present, axis] = mean[present]
        moments[present, 3 + axis] = np.sqrt(np.maximum(var[present], 0.0))

    occupancy = (labels != ignore_index).mean(axis=(0, 1))

    entropy = []
    for xs in np.array_split(np.arange(h), ENTROPY_CELLS[0]):
        for ys in np.array_split(np.arange(w), ENTROPY_CELLS[1]):
            for zs in np.array_split(np.arange(d), ENTROPY_CELLS[2]):
                cell = labels[np.ix_(xs, ys, zs)]
                if cell.size == 0:
                    entropy.append(0.0)
                    continue
                p = np.bincount(cell.ravel(), minlength=K) / cell.size
                p = p[p > 0]
                entropy.append(float(-(p * np.log(p)).sum()) + 0.0)
    return np.concatenate([hist, moments.ravel(), occupancy, np.asarray(entropy)])


def feature_matrix(grids: Sequence[SemanticGrid], extractor: FeatureExtractor = extract_features) -> np.ndarray:
    feats = [np.asarray(extractor(g), dtype=np.float64) for g in grids]
    if not feats:
        raise ValueError("no scenes to featurise")
    if len({f.shape for f in feats}) != 1:
        raise ValueError("feature vectors differ in length; scenes must share dims and K")
    out = np.stack(feats)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite feature values")
    return out


# -- Fréchet distance -----------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean, cov = np.asarray(self.mean, dtype=np.float64), np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance {cov.shape} does not match mean of length {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian statistics must be finite")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(cov).max(initial=0.0)):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2)


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Mean and unbiased covariance of the rows of ``features`` (needs n >= 2)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    return GaussianStats(features.mean(axis=0), np.cov(features, rowvar=False, ddof=1).reshape(features.shape[1], -1))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(stats_g: GaussianStats, stats_r: GaussianStats) -> float:
    """``|mu_g - mu_r|^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2})`` (unscaled)."""
    if stats_g.mean.shape != stats_r.mean.shape:
        raise ValueError("feature dimensions differ")
    if np.array_equal(stats_g.mean, stats_r.mean) and np.array_equal(stats_g.cov, stats_r.cov):
        return 0.0  # exact in closed form; skips eigen round-off on rank-deficient covariances
    root_g = _psd_sqrt(stats_g.cov)
    inner = root_g @ stats_r.cov @ root_g
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = stats_g.mean - stats_r.mean
    value = diff @ diff + np.trace(stats_g.cov) + np.trace(stats_r.cov) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def f3d(features_g: np.ndarray, features_r: np.ndarray) -> float:
    """Fréchet distance between feature sets, reported at the 1e-3 scale."""
    return F3D_SCALE * frechet_distance(gaussian_stats(features_g), gaussian_stats(features_r))


# -- MMD ------------------------------------------------------------------------


def median_bandwidth(features_g: np.ndarray, features_r: np.ndarray) -> float:
    """``sigma`` with ``sigma^2`` = median pooled squared distance / 2."""
    pooled = np.vstack([features_g, features_r])
    if pooled.shape[0] < 2:
        raise ValueError("the median heuristic needs at least two points")
    med = float(np.median(pdist(pooled, "sqeuclidean")))
    if med <= 0.0:
        raise ValueError("all pooled features coincide (sigma = 0); add jitter or pass a fixed sigma")
    return float(np.sqrt(med / 2.0))


def mmd2(features_g: np.ndarray, features_r: np.ndarray, sigma: float | None = None) -> float:
    """Biased squared MMD with a Gaussian kernel ``exp(-|a - b|^2 / (2 sigma^2))``."""
    fg = np.atleast_2d(np.asarray(features_g, dtype=np.float64))
    fr = np.atleast_2d(np.asarray(features_r, dtype=np.float64))
    if fg.shape[0] == 0 or fr.shape[0] == 0:
        raise ValueError("MMD needs two non-empty sets")
    if fg.shape[1] != fr.shape[1]:
        raise ValueError("feature dimensions differ")
    if sigma is None:
        sigma = median_bandwidth(fg, fr)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    scale = -1.0 / (2.0 * sigma**2)
    k_gg = np.exp(scale * cdist(fg, fg, "sqeuclidean")).mean()
    k_rr = np.exp(scale * cdist(fr, fr, "sqeuclidean")).mean()
    k_gr = np.exp(scale * cdist(fg, fr, "sqeuclidean")).mean()
    return float(k_gg + k_rr - 2.0 * k_gr)


# -- segmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class SegmentationReport:
    miou: float
    mean_accuracy: float
    per_class_iou: np.ndarray  # NaN for classes absent from the truth or ignored
    confusion: np.ndarray


def confusion_matrix(pairs, num_classes: int) -> np.ndarray:
    """``K x K`` counts, rows = truth, columns = prediction."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for truth, pred in pairs:
        t = truth.labels if isinstance(truth, SemanticGrid) else np.asarray(truth)
        p = pred.labels if isinstance(pred, SemanticGrid) else np.asarray(pred)
        if t.shape != p.shape:
            raise ValueError(f"truth {t.shape} and prediction {p.shape} differ in shape")
        cm += np.bincount(
            t.astype(np.int64).ravel() * num_classes + p.astype(np.int64).ravel(),
            minlength=num_classes**2,
        ).reshape(num_classes, num_classes)
    return cm


def segmentation_metrics(pairs, num_classes: int, ignore_index: int | None = 0) -> SegmentationReport:
    """mIoU and mean accuracy over classes present in the truth.

    Voxels whose truth is ``ignore_index`` are dropped; that class gets no score.
    A non-ignored voxel predicted as ``ignore_index`` still counts as a miss.
    """
    cm = confusion_matrix(pairs, num_classes)
    if ignore_index is not None:
        cm[ignore_index, :] = 0
    tp = np.diag(cm).astype(np.float64)
    gt = cm.sum(axis=1).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    present = gt > 0
    if ignore_index is not None:
        present[ignore_index] = False
    iou = np.full(num_classes, np.nan)
    iou[present] = tp[present] / (gt[present] + pred[present] - tp[present])
    if not present.any():
        raise ValueError("no scored class occurs in the truth")
    recall = tp[present] / gt[present]
    return SegmentationReport(float(iou[present].mean()), float(recall.mean()), iou, cm)


# -- SSIM -----------------------------------------------------------------------


def _local_mean(vol: np.ndarray) -> np.ndarray:
    return uniform_filter(vol, size=SSIM_WINDOW, mode="reflect")


class _SSIMStats:
    """Per-class binary channels with their local means and second moments."""

    def __init__(self, grid: SemanticGrid, classes: Sequence[int]):
        self.channels = {c: (grid.labels == c).astype(np.float64) for c in classes}
        self.mu = {c: _local_mean(v) for c, v in self.channels.items()}
        self.sq = {c: _local_mean(v * v) for c, v in self.channels.items()}


def _ssim_channel(a: _SSIMStats, b: _SSIMStats, c: int) -> float:
    mu_a, mu_b = a.mu[c], b.mu[c]
    var_a = a.sq[c] - mu_a**2
    var_b = b.sq[c] - mu_b**2
    cov = _local_mean(a.channels[c] * b.channels[c]) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def _check_pair(a: SemanticGrid, b: SemanticGrid):
    if a.dims != b.dims or a.num_classes != b.num_classes:
        raise ValueError(f"cannot compare grids {a.dims}/K={a.num_classes} and {b.dims}/K={b.num_classes}")


def ssim3d(a: SemanticGrid, b: SemanticGrid) -> float:
    """Windowed SSIM of the binary class channels, averaged over classes present in either grid."""
    _check_pair(a, b)
    classes = np.union1d(np.unique(a.labels), np.unique(b.labels)).tolist()
    sa, sb = _SSIMStats(a, classes), _SSIMStats(b, classes)
    return float(np.mean([_ssim_channel(sa, sb, c) for c in classes]))


@dataclass(frozen=True)
class RetrievalResult:
    best_ssim: np.ndarray
    index: np.ndarray
    # value such that p% of queries are at least this similar to their match
    percentiles: dict


def retrieve_nearest(queries: Sequence[SemanticGrid], corpus: Sequence[SemanticGrid], percentiles=(10, 50, 90)) -> RetrievalResult:
    """Exhaustive max-SSIM search; ties go to the lowest corpus index.

    Percentile ``p`` follows the "top p%" reading: the 10th percentile is the
    similarity reached by the most similar tenth of the queries.
    """
    if not corpus:
        raise ValueError("retrieval corpus is empty")
    if not queries:
        raise ValueError("no query scenes")
    best = np.full(len(queries), -np.inf)
    index = np.zeros(len(queries), dtype=np.int64)
    for qi, q in enumerate(queries):
        for ci, c in enumerate(corpus):
            _check_pair(q, c)
            s = ssim3d(q, c)
            if s > best[qi]:
                best[qi], index[qi] = s, ci
    table = {int(p): float(np.percentile(best, 100 - p)) for p in percentiles}
    return RetrievalResult(best, index, table)


# -- report ---------------------------------------------------------------------


def evaluate(
    generated: Sequence[SemanticGrid],
    reference: Sequence[SemanticGrid],
    pairs=None,
    ignore_index: int = 0,
    extractor: FeatureExtractor = extract_features,
    sigma: float | None = None,
) -> dict:
    """Metric report ``{f3d, mmd2, miou, ma, per_class_iou, ssim_percentiles}``.

    Segmentation scores need paired labelings and are ``None`` without them.
    """
    fg, fr = feature_matrix(generated, extractor), feature_matrix(reference, extractor)
    report = {
        "f3d": f3d(fg, fr),
        "mmd2": mmd2(fg, fr, sigma),
        "miou": None,
        "ma": None,
        "per_class_iou": None,
    }
    if pairs:
        seg = segmentation_metrics(pairs, pairs[0][0].num_classes, ignore_index)
        report.update(
            miou=seg.miou,
            ma=seg.mean_accuracy,
            per_class_iou=[None if np.isnan(v) else float(v) for v in seg.per_class_iou],
        )
    report["ssim_percentiles"] = {str(k): v for k, v in retrieve_nearest(generated, reference).percentiles.items()}
    return report
