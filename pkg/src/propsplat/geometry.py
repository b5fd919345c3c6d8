"""Quaternion rotations, covariance assembly and point-to-segment projection.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Every function accepts
plain sequences or numpy arrays; the rotation helpers also broadcast over a
leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSegmentError, InvalidArgumentError

QUAT_NORM_TOL = 1e-9

# Default clamp range for Gaussian scales, in meters.
S_MIN = 0.1
S_MAX = 10_000.0


def as_point(p, name: str = "point") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise InvalidArgumentError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite components: {arr}")
    return arr


def normalize_quaternion(q) -> np.ndarray:
    """Project quaternion(s) onto the unit sphere along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidArgumentError("zero quaternion cannot be normalized")
    return q / norm


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` applied first)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion; shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise InvalidArgumentError(f"quaternion must have 4 components, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("quaternion has non-finite components")
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > QUAT_NORM_TOL):
        raise InvalidArgumentError(f"quaternion is not unit length (norm={norm})")
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotation` for a single proper rotation (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(q)
    return -q if q[0] < 0 else q


def build_covariance(log_scale, q) -> np.ndarray:
    """``R S^2 R^T`` with ``S = diag(exp(log_scale))``.

    Only used for inspection and tests; influence evaluation never inverts it.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not np.all(np.isfinite(log_scale)):
        raise InvalidArgumentError("log-scale has non-finite components")
    R = quat_to_rotation(q)
    s2 = np.exp(2.0 * log_scale)
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class SegmentProjection:
    l_proj: float
    p_line: np.ndarray
    delta: np.ndarray
    relevant: bool
    length: float


def project_point_onto_segment(tx, rx, mu) -> SegmentProjection:
    """Closest point to ``mu`` on the infinite line through ``tx`` and ``rx``.

    ``relevant`` uses the strict gate ``0 < l_proj < d``: a center whose
    foot point lands exactly on an endpoint does not touch the link.
    """
    tx = as_point(tx, "tx")
    rx = as_point(rx, "rx")
    mu = as_point(mu, "mu")
    v = rx - tx
    d = float(np.linalg.norm(v))
    if d == 0.0:
        raise DegenerateSegmentError(f"tx and rx coincide at {tx}")
    u = v / d
    l_proj = float(np.dot(mu - tx, u))
    p_line = tx + l_proj * u
    return SegmentProjection(
        l_proj=l_proj,
        p_line=p_line,
        delta=p_line - mu,
        relevant=0.0 < l_proj < d,
        length=d,
    )


def local_displacement(delta, q) -> np.ndarray:
    """Express a world-frame displacement in the Gaussian's local frame (``R^T delta``)."""
    delta = np.asarray(delta, dtype=np.float64)
    R = quat_to_rotation(q)
    return np.swapaxes(R, -1, -2) @ delta
