"""Overflow-free sums of exponentials."""
import numpy as np
from scipy.special import logsumexp


def log_abs_sum(log_mag, phase=None, axis=-1):
    """log|sum_k exp(log_mag_k + i phase_k)| with a shared max shift.

    Returns ``(log_abs, angle)``.  Terms with ``log_mag = -inf`` drop out.
    """
    log_mag = np.asarray(log_mag, dtype=float)
    shift = np.max(log_mag, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    z = np.exp(log_mag - shift)
    if phase is not None:
        z = z * np.exp(1j * np.asarray(phase))
    s = np.sum(z, axis=axis)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(s)) + np.squeeze(shift, axis=axis), np.angle(s)


def softmax(log_w, axis=-1):
    log_w = np.asarray(log_w, dtype=float)
    shift = np.max(log_w, axis=axis, keepdims=True)
    w = np.exp(log_w - shift)
    return w / np.sum(w, axis=axis, keepdims=True)


def moving_average(values, window: int):
    """Centered moving average in index space; windows shrink at the edges."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1 or v.size == 0:
        return v.copy()
    half_lo = (window - 1) // 2
    half_hi = window - 1 - half_lo
    # averaging deviations from a reference keeps constant inputs exact
    ref = v[0]
    c = np.concatenate(([0.0], np.cumsum(v - ref)))
    idx = np.arange(v.size)
    lo = np.maximum(idx - half_lo, 0)
    hi = np.minimum(idx + half_hi + 1, v.size)
    return ref + (c[hi] - c[lo]) / (hi - lo)


__all__ = ["log_abs_sum", "logsumexp", "moving_average", "softmax"]
