"""Generation-quality and saliency-detection metrics.

Two metric families live here:

* Frechet distance between Gaussian fits of feature embeddings, for scoring
  generated image sets against real ones.  The desk-scale embedder is the
  frozen autoencoder trunk, so absolute values are not comparable to scores
  from other embedders; ``extractor_id`` guards against mixing them.

* The four saliency-map scores (structure measure, mean absolute error,
  enhanced-alignment measure, F-measure), each following its published
  definition, with the threshold-swept maximum form for E and F.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

_EPS = np.finfo(np.float64).eps

# 256 evenly spaced binarization levels in [0, 1).
DEFAULT_THRESHOLDS = np.arange(256, dtype=np.float64) / 256.0

METRIC_KEYS = ("fid", "s_measure", "mae", "e_measure", "f_measure")

# (name, display header, higher-is-better) in the canonical table column order.
SALIENCY_COLUMNS = (
    ("s_measure", "S↑", True),
    ("mae", "M↓", False),
    ("e_measure", "E↑", True),
    ("f_measure", "F↑", True),
)


# ---------------------------------------------------------------------------
# feature embeddings and Frechet distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSet:
    """One embedding vector per image, tagged with the extractor that made it."""

    features: np.ndarray  # (N, d) float64
    extractor_id: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be (N, d), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]


def extract_features(images: np.ndarray, extractor) -> FeatureSet:
    """Embed a stack of images with `extractor` (callable with .extractor_id)."""
    if len(images) == 0:
        raise ValueError("cannot extract features from an empty image set")
    feats = np.asarray(extractor(images), dtype=np.float64)
    return FeatureSet(features=feats, extractor_id=extractor.extractor_id)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    if np.min(vals) < -1e-8:
        raise ValueError(f"matrix has negative eigenvalue {np.min(vals):.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T

def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussians fitted to the two feature sets.

    ||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2)), with the trace of
    the principal square root obtained from the eigenvalues of the symmetrized
    product C_g^(1/2) C_r C_g^(1/2).
    """
    if real.extractor_id != gen.extractor_id:
        raise ValueError(
            f"extractor mismatch: {real.extractor_id!r} vs {gen.extractor_id!r}"
        )
    if real.features.shape[1] != gen.features.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("need at least 2 samples per set to fit a covariance")
    xr = real.features.astype(np.float64)
    xg = gen.features.astype(np.float64)
    mu_r, mu_g = xr.mean(axis=0), xg.mean(axis=0)
    c_r = np.atleast_2d(np.cov(xr, rowvar=False))
    c_g = np.atleast_2d(np.cov(xg, rowvar=False))
    sqrt_cg = _psd_sqrt(c_g)
    cross = sqrt_cg @ c_r @ sqrt_cg
    vals = np.linalg.eigvalsh(cross)
    if np.min(vals) < -1e-8:
        raise ValueError(f"cross covariance has negative eigenvalue {np.min(vals):.3e}")
    trace_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    value = float(
        np.sum((mu_r - mu_g) ** 2) + np.trace(c_r) + np.trace(c_g) - 2.0 * trace_sqrt
    )
    if value < -1e-6:
        raise ValueError(f"FID computed as {value:.3e}; numerical failure")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# saliency metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaliencyEval:
    """A real-valued prediction map in [0, 1] against a binary ground truth."""

    prediction: np.ndarray  # (H, W) float in [0, 1]
    ground_truth: np.ndarray  # (H, W) {0, 1}

    def __post_init__(self):
        if self.prediction.shape != self.ground_truth.shape:
            raise ValueError(
                f"shape mismatch: prediction {self.prediction.shape} "
                f"vs ground truth {self.ground_truth.shape}"
            )
        if self.prediction.ndim != 2:
            raise ValueError("maps must be 2-D")
        p = self.prediction
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("prediction values must lie in [0, 1]")
        g = np.unique(self.ground_truth)
        if not np.all(np.isin(g, (0.0, 1.0))):
            raise ValueError("ground truth must be binary")


def mae(ev: SaliencyEval) -> float:
    """Mean absolute pixel error."""
    return float(
        np.abs(
            ev.prediction.astype(np.float64) - ev.ground_truth.astype(np.float64)
        ).mean()
    )


def _threshold_counts(pred, gt_bool, thresholds):
    """True/false positive counts of (pred > t) for every threshold t.

    Strictly-greater binarization makes an all-zero prediction carry no
    positives at any threshold (including t = 0).
    """
    fg = np.sort(pred[gt_bool].ravel())
    bg = np.sort(pred[~gt_bool].ravel())
    tp = fg.size - np.searchsorted(fg, thresholds, side="right")
    fp = bg.size - np.searchsorted(bg, thresholds, side="right")
    return tp.astype(np.float64), fp.astype(np.float64)


def f_measure_max(ev: SaliencyEval, beta_sq: float = 0.3, thresholds=None) -> float:
    """Maximum F-measure over the binarization threshold sweep.

    F = (1 + beta^2) P R / (beta^2 P + R); thresholds where the prediction has
    no positives or no overlap with the ground truth score 0.
    """
    if beta_sq <= 0:
        raise ValueError(f"beta_sq must be positive, got {beta_sq}")
    gt = ev.ground_truth.astype(bool)
    n_fg = int(gt.sum())
    if n_fg == 0:
        raise ValueError("F-measure is undefined for an all-zero ground truth")
    thr = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, float)
    tp, fp = _threshold_counts(ev.prediction.astype(np.float64), gt, thr)
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = tp / n_fg
    num = (1.0 + beta_sq) * precision * recall
    den = beta_sq * precision + recall
    f = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    f[tp == 0] = 0.0
    return float(f.max())


def _object_similarity(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + _EPS))


def _s_object(pred, gt):
    o_fg = _object_similarity(pred[gt])
    o_bg = _object_similarity((1.0 - pred)[~gt])
    u = gt.mean()
    return u * o_fg + (1.0 - u) * o_bg


def _region_ssim(pred_block, gt_block):
    n = pred_block.size
    x, y = pred_block.mean(), gt_block.mean()
    if n > 1:
        var_x = ((pred_block - x) ** 2).sum() / (n - 1)
        var_y = ((gt_block - y) ** 2).sum() / (n - 1)
        cov_xy = ((pred_block - x) * (gt_block - y)).sum() / (n - 1)
    else:
        var_x = var_y = cov_xy = 0.0
    aligned = 4.0 * x * y * cov_xy
    spread = (x * x + y * y) * (var_x + var_y)
    if aligned != 0.0:
        return float(aligned / (spread + _EPS))
    return 1.0 if spread == 0.0 else 0.0


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _s_region(pred, gt):
    rows, cols = gt.shape
    area = float(gt.sum())
    # Centroid in 1-indexed coordinates, rounding half up.
    if area == 0:
        cx, cy = _round_half_up(cols / 2.0), _round_half_up(rows / 2.0)
    else:
        cx = _round_half_up(float((gt.sum(axis=0) * np.arange(1, cols + 1)).sum()) / area)
        cy = _round_half_up(float((gt.sum(axis=1) * np.arange(1, rows + 1)).sum()) / area)
    total = rows * cols
    score = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, cols)),
                   (slice(cy, rows), slice(0, cx)), (slice(cy, rows), slice(cx, cols))):
        gt_block = gt[rs, cs]
        weight = gt_block.size / total
        if gt_block.size:
            score += weight * _region_ssim(pred[rs, cs], gt_block.astype(np.float64))
    return score


def s_measure(ev: SaliencyEval, alpha: float = 0.5) -> float:
    """Structure measure: object-aware similarity blended with 4-quadrant
    region SSIM around the ground-truth centroid."""
    pred = ev.prediction.astype(np.float64)
    gt = ev.ground_truth.astype(bool)
    y = gt.mean()
    if y == 0.0:  # all-background ground truth: reward all-dark predictions
        return float(1.0 - pred.mean())
    if y == 1.0:  # all-foreground: reward all-bright predictions
        return float(pred.mean())
    q = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(max(q, 0.0))


def _alignment_score(fm_bool, gt_bool):
    """Enhanced-alignment score of one binary foreground map, averaged over pixels."""
    n = gt_bool.size
    n_fg = int(gt_bool.sum())
    dfm = fm_bool.astype(np.float64)
    if n_fg == 0:  # degenerate ground truths reduce to plain agreement rates
        return float((1.0 - dfm).mean())
    if n_fg == n:
        return float(dfm.mean())
    d_gt = gt_bool.astype(np.float64) - n_fg / n
    d_fm = dfm - dfm.mean()
    align = 2.0 * d_gt * d_fm / (d_gt * d_gt + d_fm * d_fm + _EPS)
    return float(((align + 1.0) ** 2 / 4.0).mean())


def e_measure_max(ev: SaliencyEval, thresholds=None) -> float:
    """Maximum enhanced-alignment measure over the binarization sweep.

    For each threshold the binary map is scored by the enhanced alignment of
    mean-centered prediction and ground truth, averaged over all pixels (so a
    perfect map scores 1); all-zero / all-one ground truths fall back to the
    plain agreement rate.
    """
    gt = ev.ground_truth.astype(bool)
    thr = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, float)
    pred = ev.prediction.astype(np.float64)
    n = gt.size
    n_fg = int(gt.sum())
    tp, fp = _threshold_counts(pred, gt, thr)
    if n_fg == 0:
        scores = 1.0 - (tp + fp) / n
        return float(scores.max())
    if n_fg == n:
        scores = (tp + fp) / n
        return float(scores.max())
    n_bg = n - n_fg
    fn, tn = n_fg - tp, n_bg - fp
    mu_fm = (tp + fp) / n
    d_gt_fg, d_gt_bg = 1.0 - n_fg / n, -n_fg / n
    best = 0.0
    # Pixels fall into 4 (gt, fm) classes per threshold; score each class once.
    for count, d_gt, fm in (
        (tp, d_gt_fg, 1.0),
        (fn, d_gt_fg, 0.0),
        (fp, d_gt_bg, 1.0),
        (tn, d_gt_bg, 0.0),
    ):
        d_fm = fm - mu_fm
        align = 2.0 * d_gt * d_fm / (d_gt * d_gt + d_fm * d_fm + _EPS)
        best = best + count * ((align + 1.0) ** 2 / 4.0)
    return float((best / n).max())


def saliency_scores(ev: SaliencyEval, beta_sq: float = 0.3, alpha: float = 0.5) -> dict:
    """All four saliency metrics for one prediction; F is None on empty gt."""
    empty = not bool(ev.ground_truth.any())
    return {
        "s_measure": s_measure(ev, alpha=alpha),
        "mae": mae(ev),
        "e_measure": e_measure_max(ev),
        "f_measure": None if empty else f_measure_max(ev, beta_sq=beta_sq),
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


_BOUNDS = {
    "fid": (0.0, np.inf),
    "s_measure": (0.0, 1.0),
    "mae": (0.0, 1.0),
    "e_measure": (0.0, 1.0),
    "f_measure": (0.0, 1.0),
}


@dataclass
class MetricReport:
    """Per-category and aggregate metric values with run provenance."""

    per_category: dict[str, dict[str, float]]
    aggregate: dict[str, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for cat, values in self.per_category.items():
            for key, val in values.items():
                self._check(f"{cat}/{key}", key, val)
        if not self.aggregate:
            self.aggregate = self._aggregate()
        for key, val in self.aggregate.items():
            self._check(f"aggregate/{key}", key, val)

    @staticmethod
    def _check(label, key, val):
        if key not in _BOUNDS:
            raise ValueError(f"unknown metric {label}")
        if val is None:
            return
        lo, hi = _BOUNDS[key]
        if not np.isfinite(val) or val < lo - 1e-6 or val > hi + 1e-6:
            raise ValueError(f"metric {label}={val} outside [{lo}, {hi}]")

    def _aggregate(self) -> dict[str, float]:
        out = {}
        keys = {k for vals in self.per_category.values() for k in vals}
        for key in sorted(keys):
            vals = [v[key] for v in self.per_category.values() if v.get(key) is not None]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def metric_keys(self) -> list[str]:
        present = {k for vals in self.per_category.values() for k, v in vals.items() if v is not None}
        return [k for k in METRIC_KEYS if k in present]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "metric", "value"])
        for cat in sorted(self.per_category):
            for key in self.metric_keys():
                val = self.per_category[cat].get(key)
                if val is not None:
                    writer.writerow([cat, key, f"{val:.9g}"])
        for key in self.metric_keys():
            if key in self.aggregate:
                writer.writerow(["AVG", key, f"{self.aggregate[key]:.9g}"])
        return buf.getvalue()

    def to_text(self) -> str:
        keys = self.metric_keys()
        headers = []
        for key in keys:
            col = next((c[1] for c in SALIENCY_COLUMNS if c[0] == key), None)
            headers.append(col if col else "FID↓")
        lines = ["category    " + "  ".join(f"{h:>8}" for h in headers)]
        rows = sorted(self.per_category) + ["AVG"]
        for cat in rows:
            vals = self.aggregate if cat == "AVG" else self.per_category[cat]
            cells = []
            for key in keys:
                v = vals.get(key)
                cells.append(f"{v:8.4f}" if v is not None else " " * 8)
            lines.append(f"{cat:<12}" + "  ".join(cells))
        return "\n".join(lines) + "\n"
