"""Evaluation metrics for imbalanced classification and sample quality.

Classification side: confusion matrix, balanced accuracy (macro recall),
per-class precision/recall, macro-F, and the geometric mean of recalls.
Sample quality side: windowed SSIM (and mean pairwise SSIM per class as a
variability score), a Frechet distance between Gaussian feature fits, and
"battle" cross-accuracy ratios pitting each generator against the other
model's discriminator. ROC/AUC covers threshold-based minority detection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ClassTooSmall,
    DegenerateCovariance,
    EmptyClass,
    ShapeMismatch,
    SingleClass,
)


@dataclass
class ConfusionMatrix:
    """Rows = true class, columns = predicted slot.

    Extra columns beyond the square part are predicted-only slots (the
    "generated" capsule, say): they earn no recall row but do count against
    precision and BA stays the mean of per-class recalls.
    """

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] < self.counts.shape[0]:
            raise ValueError(f"confusion matrix must be [c x p], p >= c, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(y_true, y_pred, num_classes: int, num_slots: int | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"labels {y_true.shape} vs predictions {y_pred.shape}")
    num_slots = num_classes if num_slots is None else num_slots
    counts = np.zeros((num_classes, num_slots), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    ba: float
    recall: tuple
    precision: tuple
    f_measure: float
    g_mean: float
    ssim_variability: float | None = None
    fid: float | None = None
    battle: dict | None = None
    auc: float | None = None
    flags: tuple = ()

    def to_dict(self) -> dict:
        out = {
            "ba": self.ba,
            "recall": list(self.recall),
            "precision": list(self.precision),
            "f_measure": self.f_measure,
            "g_mean": self.g_mean,
            "flags": list(self.flags),
        }
        for key in ("ssim_variability", "fid", "battle", "auc"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def classification_report(cm: ConfusionMatrix) -> MetricsReport:
    """BA / P / R / macro-F / G-mean from a confusion matrix.

    Zero-denominator precision (nothing predicted in a slot) scores 0 and
    sets a flag rather than erroring.
    """
    counts = cm.counts
    c = counts.shape[0]
    row_sums = counts.sum(axis=1)
    if (row_sums == 0).any():
        empty = np.flatnonzero(row_sums == 0).tolist()
        raise EmptyClass(f"no samples for true class(es) {empty}")
    diag = counts[np.arange(c), np.arange(c)].astype(np.float64)
    recall = diag / row_sums
    col_sums = counts.sum(axis=0)[:c]
    flags = []
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col_sums > 0, diag / np.where(col_sums > 0, col_sums, 1), 0.0)
    if (col_sums == 0).any():
        flags.append("zero_division_precision")
    ba = float(recall.mean())
    macro_p, macro_r = float(precision.mean()), float(recall.mean())
    f_measure = (
        2.0 * macro_p * macro_r / (macro_p + macro_r) if macro_p + macro_r > 0 else 0.0
    )
    if macro_p + macro_r == 0:
        flags.append("zero_division_f")
    g_mean = float(np.prod(recall) ** (1.0 / c))
    return MetricsReport(
        ba=ba,
        recall=tuple(float(r) for r in recall),
        precision=tuple(float(p) for p in precision),
        f_measure=float(f_measure),
        g_mean=g_mean,
        flags=tuple(flags),
    )


# -- SSIM ---------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    a,
    b,
    window: int = 7,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> float:
    """Mean windowed structural similarity of two equal-shape images.

    Accepts HxW or CxHxW (channels averaged). The window shrinks to
    min(window, H, W) so tiny images still evaluate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim inputs differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[i], b[i], window, sigma, k1, k2, dynamic_range)
                              for i in range(a.shape[0])]))
    if a.ndim != 2:
        raise ShapeMismatch(f"ssim expects 2-d images, got shape {a.shape}")
    win = min(window, a.shape[0], a.shape[1])
    w = _gaussian_window(win, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def filt(img):
        patches = sliding_window_view(img, (win, win))
        return np.tensordot(patches, w, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def sample_set_variability(images, labels, **ssim_kwargs) -> float:
    """Mean pairwise SSIM within each class, then mean over classes.

    Values near 1 mean the set is self-similar (low variability). Every
    class needs at least 2 images.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = []
    for cid in sorted(set(labels.tolist())):
        rows = images[labels == cid]
        if rows.shape[0] < 2:
            raise ClassTooSmall(f"class {cid} has {rows.shape[0]} image(s); need >= 2")
        vals = [
            ssim(rows[i], rows[j], **ssim_kwargs)
            for i in range(rows.shape[0])
            for j in range(i + 1, rows.shape[0])
        ]
        per_class.append(np.mean(vals))
    return float(np.mean(per_class))


# -- Frechet distance ---------------------------------------------------------


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -tol * max(1.0, abs(vals.max())):
        raise DegenerateCovariance(
            f"matrix has negative eigenvalue {vals.min():.3e} beyond tolerance"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu1, cov1, mu2, cov2, ridge: float = 1e-6) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 sqrt(S1^0.5 S2 S1^0.5)), with a ridge
    added to both covariances for conditioning."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64) + ridge * np.eye(len(mu1))
    cov2 = np.asarray(cov2, dtype=np.float64) + ridge * np.eye(len(mu2))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ShapeMismatch("moment shapes disagree")
    root1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(root1 @ cov2 @ root1)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    if not np.isfinite(value):
        raise DegenerateCovariance("non-finite Frechet distance")
    return max(value, 0.0)


def fid(feat_real, feat_fake, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(feat_real, dtype=np.float64)
    b = np.asarray(feat_fake, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets must share width, got {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ClassTooSmall("need >= 2 feature rows per set")
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    return fid_from_moments(a.mean(axis=0), np.atleast_2d(cov_a), b.mean(axis=0),
                            np.atleast_2d(cov_b), ridge=ridge)


# -- battle ratios ------------------------------------------------------------


@dataclass
class BattleResult:
    """Cross-accuracy ratios; a ratio is None when its denominator is 0."""

    r_generated: float | None
    r_real: float | None
    accuracies: dict = field(default_factory=dict)


def battle_ratio(d1, g1, d2, g2, test_images, z_batch, fake_slot: int) -> BattleResult:
    """Pit each generator against the other model's discriminator.

    ``d1``/``d2`` map an image batch to predicted slot indices; ``g1``/``g2``
    map latents to images. Accuracy on generated data = fraction predicted
    ``fake_slot``; on real data = fraction predicted anything else.
    r_generated = acc(d1 on g2) / acc(d2 on g1); r_real similarly on the
    test images.
    """
    acc = {
        "d1_on_g2": float(np.mean(np.asarray(d1(g2(z_batch))) == fake_slot)),
        "d2_on_g1": float(np.mean(np.asarray(d2(g1(z_batch))) == fake_slot)),
        "d1_on_real": float(np.mean(np.asarray(d1(test_images)) != fake_slot)),
        "d2_on_real": float(np.mean(np.asarray(d2(test_images)) != fake_slot)),
    }
    r_gen = acc["d1_on_g2"] / acc["d2_on_g1"] if acc["d2_on_g1"] > 0 else None
    r_real = acc["d1_on_real"] / acc["d2_on_real"] if acc["d2_on_real"] > 0 else None
    return BattleResult(r_generated=r_gen, r_real=r_real, accuracies=acc)


# -- ROC / AUC ----------------------------------------------------------------


def roc_auc(scores, labels) -> tuple[np.ndarray, float]:
    """ROC points [(fpr, tpr, threshold)...] and trapezoidal AUC.

    ``labels`` are binary with 1 = positive (minority); tied scores move
    together, so the curve is threshold-consistent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise SingleClass("ROC needs both a positive and a negative sample")
    order = np.argsort(-scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    points = [(0.0, 0.0, np.inf)]
    tp = fp = 0
    i = 0
    while i < len(s_sorted):
        thr = s_sorted[i]
        while i < len(s_sorted) and s_sorted[i] == thr:
            tp += int(l_sorted[i] == 1)
            fp += int(l_sorted[i] == 0)
            i += 1
        points.append((fp / neg, tp / pos, float(thr)))
    pts = np.array([(f, t, th) for f, t, th in points])
    fpr, tpr = pts[:, 0], pts[:, 1]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return pts, auc
