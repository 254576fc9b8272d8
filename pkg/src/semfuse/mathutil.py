"""Small numeric helpers used across modules."""

from __future__ import annotations

import numpy as np


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (float64 output)."""
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row of a nonnegative array to sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sum(x, axis=-1, keepdims=True)
    return x / s


def normalize_log_rows(logp: np.ndarray) -> np.ndarray:
    """exp-and-normalize rows of log weights with max subtraction."""
    logp = np.asarray(logp, dtype=np.float64)
    z = logp - np.max(logp, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def rigid_inverse(pose: np.ndarray) -> np.ndarray:
    """Invert a 4x4 rigid transform using the rotation transpose."""
    pose = np.asarray(pose, dtype=np.float64)
    inv = np.eye(4, dtype=np.float64)
    rt = pose[:3, :3].T
    inv[:3, :3] = rt
    inv[:3, 3] = -rt @ pose[:3, 3]
    return inv
