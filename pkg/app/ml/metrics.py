"""Figures of merit for blind deconvolution: errors, support accuracy and community recovery."""

from typing import Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score

from app.core.errors import DimensionMismatchError, InvalidParameterError, ZeroScaleError

DEFAULT_KAPPA = 0.1


def _pair(x_hat, x) -> Tuple[np.ndarray, np.ndarray]:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise DimensionMismatchError(f"estimate {x_hat.shape} vs reference {x.shape}")
    return x_hat, x


def align_sign(x_hat, x) -> Tuple[float, np.ndarray]:
    """
    Global sign that brings ``x_hat`` closest to ``x``; ties keep +1.

    Returns:
        Tuple of (sign, sign * x_hat)
    """
    x_hat, x = _pair(x_hat, x)
    if np.linalg.norm(x_hat - x) <= np.linalg.norm(x_hat + x):
        return 1.0, x_hat
    return -1.0, -x_hat


def relative_error_signed(x_hat, x) -> float:
    """min over s in {+1, -1} of ||s X^ - X||_F / ||X||_F."""
    x_hat, x = _pair(x_hat, x)
    scale = np.linalg.norm(x)
    if scale == 0:
        raise ZeroScaleError("relative error is undefined for an all-zero reference")
    return float(min(np.linalg.norm(x_hat - x), np.linalg.norm(x_hat + x)) / scale)


def reference_scale(g_hat, g0) -> float:
    """Least-squares scalar s* = <g^, g0> / ||g^||^2 that best maps ``g_hat`` onto ``g0``."""
    g_hat, g0 = _pair(np.ravel(g_hat), np.ravel(g0))
    hat_sq = float(g_hat @ g_hat)
    if hat_sq == 0 or not np.any(g0):
        raise ZeroScaleError("aligned error needs two nonzero vectors")
    return float(g_hat @ g0) / hat_sq


def relative_error_aligned(g_hat, g0) -> float:
    """
    Error of ``g_hat`` after the least-squares rescaling s* = <g^, g0> / ||g^||^2.

    Scale and sign of a recovered inverse filter are not identifiable, so the
    comparison is made along the best multiple of ``g_hat``.
    """
    s = reference_scale(g_hat, g0)
    g_hat, g0 = np.ravel(g_hat), np.ravel(g0)
    return float(np.linalg.norm(s * g_hat - g0) / np.linalg.norm(g0))


def relative_error_normalized(g_hat, g0, scale_c: float = 1.0) -> float:
    """Unaligned error of ``g_hat`` against ``g0`` rescaled to 1^T g0 = c."""
    g_hat, g0 = _pair(np.ravel(g_hat), np.ravel(g0))
    total = float(g0.sum())
    if total == 0:
        raise ZeroScaleError("reference response sums to zero; 1^T g = c normalization is undefined")
    target = (scale_c / total) * g0
    return float(np.linalg.norm(g_hat - target) / np.linalg.norm(target))


def support_accuracy(x_hat, x, kappa: float = DEFAULT_KAPPA) -> float:
    """
    Entrywise accuracy of the supports {|X^_ij| >= kappa} and {|X_ij| >= kappa}.

    X^ is sign-aligned first, which leaves magnitudes unchanged.
    """
    if kappa <= 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    _, aligned = align_sign(x_hat, x)
    estimated = np.abs(aligned).ravel() >= kappa
    truth = np.abs(np.asarray(x, dtype=np.float64)).ravel() >= kappa
    return float(accuracy_score(truth, estimated))


def community_estimate(x_hat, communities: Sequence[int]) -> int:
    """Block of the node with the largest |x^_i|; argmax keeps the lowest index on ties."""
    x_hat = np.ravel(np.asarray(x_hat, dtype=np.float64))
    if len(communities) != x_hat.shape[0]:
        raise DimensionMismatchError("community labels must cover every node")
    return int(communities[int(np.argmax(np.abs(x_hat)))])


def community_accuracy(x_hat, labels: Sequence[int], communities: Sequence[int]) -> float:
    """Fraction of columns of X^ whose estimated block equals the planted one."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    labels = np.ravel(np.asarray(labels))
    if x_hat.ndim != 2 or x_hat.shape[1] != labels.shape[0]:
        raise DimensionMismatchError(f"{labels.shape[0]} labels for estimates of shape {x_hat.shape}")
    estimates = [community_estimate(x_hat[:, p], communities) for p in range(x_hat.shape[1])]
    return float(accuracy_score(labels, estimates))
