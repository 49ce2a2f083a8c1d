"""Small numeric helpers used across modules."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y, eps=1e-6):
    y = np.clip(np.asarray(y, dtype=np.float64), eps, 1.0 - eps)
    return np.log(y / (1.0 - y))


def normalize_rows(v, eps=1e-8):
    """Row-wise v / max(|v|, eps); works on (..., k) arrays."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def quat_to_rotmat(q):
    """Unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_rotmat_vjp(q_unit, grad_R):
    """Backprop grad wrt R(q) onto the unit quaternion, (N,4),(N,3,3)->(N,4)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    g = grad_R
    gw = (
        -2 * z * g[:, 0, 1] + 2 * y * g[:, 0, 2]
        + 2 * z * g[:, 1, 0] - 2 * x * g[:, 1, 2]
        - 2 * y * g[:, 2, 0] + 2 * x * g[:, 2, 1]
    )
    gx = (
        2 * y * g[:, 0, 1] + 2 * z * g[:, 0, 2]
        + 2 * y * g[:, 1, 0] - 4 * x * g[:, 1, 1] - 2 * w * g[:, 1, 2]
        + 2 * z * g[:, 2, 0] + 2 * w * g[:, 2, 1] - 4 * x * g[:, 2, 2]
    )
    gy = (
        -4 * y * g[:, 0, 0] + 2 * x * g[:, 0, 1] + 2 * w * g[:, 0, 2]
        + 2 * x * g[:, 1, 0] + 2 * z * g[:, 1, 2]
        - 2 * w * g[:, 2, 0] + 2 * z * g[:, 2, 1] - 4 * y * g[:, 2, 2]
    )
    gz = (
        -4 * z * g[:, 0, 0] - 2 * w * g[:, 0, 1] + 2 * x * g[:, 0, 2]
        + 2 * w * g[:, 1, 0] - 4 * z * g[:, 1, 1] + 2 * y * g[:, 1, 2]
        + 2 * x * g[:, 2, 0] + 2 * y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=1)


def quat_normalize_vjp(q_raw, grad_unit):
    """Backprop through q_unit = q_raw / |q_raw|."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_unit = q_raw / norm
    inner = np.sum(q_unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - q_unit * inner) / norm


def class_palette(class_count, seed=0):
    """Deterministic (C, 3) palette in [0, 1], golden-ratio hue walk."""
    hues = (np.arange(class_count) * 0.61803398875 + 0.1 + 0.01 * seed) % 1.0
    sat = np.full(class_count, 0.65)
    val = np.where(np.arange(class_count) % 2 == 0, 0.95, 0.75)
    i = np.floor(hues * 6).astype(int)
    f = hues * 6 - i
    p = val * (1 - sat)
    q = val * (1 - f * sat)
    t = val * (1 - (1 - f) * sat)
    i = i % 6
    out = np.empty((class_count, 3))
    tables = [
        np.stack([val, t, p], 1),
        np.stack([q, val, p], 1),
        np.stack([p, val, t], 1),
        np.stack([p, q, val], 1),
        np.stack([t, p, val], 1),
        np.stack([val, p, q], 1),
    ]
    for k in range(6):
        out[i == k] = tables[k][i == k]
    return out
