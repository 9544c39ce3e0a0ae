"""Classification and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _labels(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.size == 0:
        raise ValueError("empty label vector")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label lengths differ: {y_true.size} vs {y_pred.size}")
    if y_true.min() < 0 or y_pred.min() < 0:
        raise ValueError("labels must be nonnegative integers")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, num_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true, y_pred = _labels(y_true, y_pred)
    k = max(int(y_true.max()), int(y_pred.max())) + 1 if num_classes is None else num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Unweighted mean of per-class recall over classes present in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    recalls = [Fraction(int(cm[c, c]), int(support[c])) for c in range(len(cm)) if support[c] > 0]
    # exact rational arithmetic, rounded once
    return float(sum(recalls, Fraction(0)) / len(recalls))


@dataclass
class ClassificationReport:
    confusion: np.ndarray
    balanced_accuracy: float
    weighted_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    count: int


def _prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted mean of per-class F1; a class with P + R = 0 scores 0."""
    cm = confusion_matrix(y_true, y_pred)
    pred, true = cm.sum(axis=0), cm.sum(axis=1)
    total = Fraction(0)
    for c in range(len(cm)):
        # F1 = 2 tp / (n_pred + n_true), exact when both counts are integers
        if cm[c, c] > 0:
            total += Fraction(int(true[c]), int(true.sum())) * Fraction(2 * int(cm[c, c]), int(pred[c] + true[c]))
    return float(total)


def classification_report(y_true, y_pred, num_classes: int | None = None) -> ClassificationReport:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    p, r, f1 = _prf(cm)
    return ClassificationReport(cm, balanced_accuracy(y_true, y_pred), weighted_f1(y_true, y_pred),
                                p, r, f1, int(cm.sum()))


def _images(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give the 99 dB cap."""
    a, b = _images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid Gaussian windows; color images are averaged to grayscale first."""
    a, b = _images(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if a.ndim != 2:
        raise ValueError(f"expected H x W or H x W x C images, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = gaussian_window()
    f = kernels.valid_filter2d
    mu_a, mu_b = f(a, w), f(b, w)
    saa = f(a * a, w) - mu_a**2
    sbb = f(b * b, w) - mu_b**2
    sab = f(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
