"""Attitude-frame math: DCMs, modified Rodrigues parameters, 3-2-1 Euler
sets, and orbit (Hill/LVLH) frame construction.

Conventions used throughout the package:
  * A direction cosine matrix (DCM) maps reference-frame components into
    body-frame components; row i of the matrix is body axis b_i expressed
    in the reference frame.
  * Euler angles follow the 3-2-1 (yaw, pitch, roll) sequence, radians.
  * MRP vectors are kept on the |sigma| <= 1 branch via the shadow set.

All functions are pure and operate on plain float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Type aliases for readability; everything is a float64 ndarray.
Vec3 = np.ndarray   # shape (3,)
Dcm = np.ndarray    # shape (3, 3)
Mrp = np.ndarray    # shape (3,)

DCM_ORTHO_TOL = 1e-9


class DegenerateFrameError(ValueError):
    """Orbit state cannot define a frame (position parallel to velocity)."""


@dataclass(frozen=True)
class EulerYpr:
    """3-2-1 Euler angle set in radians, pitch restricted to (-pi/2, pi/2)."""

    yaw: float
    pitch: float
    roll: float

    def validate(self) -> "EulerYpr":
        if not (math.isfinite(self.yaw) and math.isfinite(self.pitch)
                and math.isfinite(self.roll)):
            raise ValueError("Euler angles must be finite")
        return self


def _r1(a: float) -> Dcm:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _r2(a: float) -> Dcm:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _r3(a: float) -> Dcm:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def dcm_from_euler321(angles: EulerYpr) -> Dcm:
    """DCM of a frame reached by yaw about 3, pitch about 2, roll about 1.

    Returns R1(roll) @ R2(pitch) @ R3(yaw).
    """
    angles.validate()
    return _r1(angles.roll) @ _r2(angles.pitch) @ _r3(angles.yaw)


def euler321_from_dcm(d: Dcm) -> EulerYpr:
    """Inverse of dcm_from_euler321 for pitch away from +/- pi/2."""
    pitch = -math.asin(max(-1.0, min(1.0, float(d[0, 2]))))
    yaw = math.atan2(float(d[0, 1]), float(d[0, 0]))
    roll = math.atan2(float(d[1, 2]), float(d[2, 2]))
    return EulerYpr(yaw=yaw, pitch=pitch, roll=roll)


def hill_frame(r: Vec3, v: Vec3) -> Dcm:
    """Orbit (Hill) frame DCM: o1 along position, o3 along orbit normal.

    Rows are o1 = r_hat, o2 = o3 x o1, o3 = (r x v)/|r x v|.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    rnorm = float(np.linalg.norm(r))
    if rnorm <= 0.0:
        raise ValueError("position vector must be nonzero")
    h = np.cross(r, v)
    hnorm = float(np.linalg.norm(h))
    if hnorm <= 1e-12 * rnorm * max(float(np.linalg.norm(v)), 1.0):
        raise DegenerateFrameError("position parallel to velocity")
    o1 = r / rnorm
    o3 = h / hnorm
    o2 = np.cross(o3, o1)
    return np.vstack((o1, o2, o3))


def compose_bn(bo: Dcm, on: Dcm) -> Dcm:
    """Chain body-from-orbit and orbit-from-inertial DCMs: [BN] = [BO][ON]."""
    return np.asarray(bo, dtype=float) @ np.asarray(on, dtype=float)


def _quat_from_dcm(d: Dcm) -> np.ndarray:
    """Shepperd's method: quaternion (q0, q1, q2, q3) with q0 >= 0."""
    tr = d[0, 0] + d[1, 1] + d[2, 2]
    b2 = np.array([
        (1.0 + tr) / 4.0,
        (1.0 + 2.0 * d[0, 0] - tr) / 4.0,
        (1.0 + 2.0 * d[1, 1] - tr) / 4.0,
        (1.0 + 2.0 * d[2, 2] - tr) / 4.0,
    ])
    case = int(np.argmax(b2))
    q = np.empty(4)
    if case == 0:
        q[0] = math.sqrt(b2[0])
        q[1] = (d[1, 2] - d[2, 1]) / (4.0 * q[0])
        q[2] = (d[2, 0] - d[0, 2]) / (4.0 * q[0])
        q[3] = (d[0, 1] - d[1, 0]) / (4.0 * q[0])
    elif case == 1:
        q[1] = math.sqrt(b2[1])
        q[0] = (d[1, 2] - d[2, 1]) / (4.0 * q[1])
        q[2] = (d[0, 1] + d[1, 0]) / (4.0 * q[1])
        q[3] = (d[2, 0] + d[0, 2]) / (4.0 * q[1])
    elif case == 2:
        q[2] = math.sqrt(b2[2])
        q[0] = (d[2, 0] - d[0, 2]) / (4.0 * q[2])
        q[1] = (d[0, 1] + d[1, 0]) / (4.0 * q[2])
        q[3] = (d[1, 2] + d[2, 1]) / (4.0 * q[2])
    else:
        q[3] = math.sqrt(b2[3])
        q[0] = (d[0, 1] - d[1, 0]) / (4.0 * q[3])
        q[1] = (d[2, 0] + d[0, 2]) / (4.0 * q[3])
        q[2] = (d[1, 2] + d[2, 1]) / (4.0 * q[3])
    if q[0] < 0.0:
        q = -q
    return q


def mrp_from_dcm(d: Dcm) -> Mrp:
    """MRP vector of a DCM, on the |sigma| <= 1 branch.

    Conversion goes through the quaternion; if the long branch comes out,
    the shadow set sigma' = -sigma/|sigma|^2 is returned instead.
    """
    q = _quat_from_dcm(np.asarray(d, dtype=float))
    sigma = q[1:] / (1.0 + q[0])
    n2 = float(sigma @ sigma)
    if n2 > 1.0:
        sigma = -sigma / n2
    return sigma


def dcm_from_mrp(sigma: Mrp) -> Dcm:
    """DCM of an MRP vector (inverse of mrp_from_dcm up to shadow set)."""
    s = np.asarray(sigma, dtype=float)
    s1, s2, s3 = float(s[0]), float(s[1]), float(s[2])
    n2 = s1 * s1 + s2 * s2 + s3 * s3
    f = 1.0 - n2
    d = (1.0 + n2) ** 2
    c = np.array([
        [4.0 * (2.0 * s1 * s1 - n2) + f * f,
         8.0 * s1 * s2 + 4.0 * s3 * f,
         8.0 * s1 * s3 - 4.0 * s2 * f],
        [8.0 * s2 * s1 - 4.0 * s3 * f,
         4.0 * (2.0 * s2 * s2 - n2) + f * f,
         8.0 * s2 * s3 + 4.0 * s1 * f],
        [8.0 * s3 * s1 + 4.0 * s2 * f,
         8.0 * s3 * s2 - 4.0 * s1 * f,
         4.0 * (2.0 * s3 * s3 - n2) + f * f],
    ])
    return c / d


def rotation_about(axis: Vec3, angle: float) -> Dcm:
    """DCM of a frame rotated by +angle about a unit axis (Rodrigues form)."""
    a = np.asarray(axis, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    a1, a2, a3 = float(a[0]), float(a[1]), float(a[2])
    skew = np.array([[0.0, -a3, a2], [a3, 0.0, -a1], [-a2, a1, 0.0]])
    return c * np.eye(3) + (1.0 - c) * np.outer(a, a) - s * skew


def principal_rotation(d: Dcm) -> tuple[Vec3, float]:
    """Principal axis and angle of a DCM; angle in [0, pi].

    For the identity (angle 0) the axis is arbitrary and +x is returned.
    Inverse of rotation_about: rotation_about(*principal_rotation(d)) == d.
    """
    q = _quat_from_dcm(np.asarray(d, dtype=float))
    vnorm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * math.atan2(vnorm, q[0])
    if vnorm < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return q[1:] / vnorm, angle


def omega_bn(omega_bo_body: Vec3, r: Vec3, v: Vec3, bo: Dcm) -> Vec3:
    """Body rate relative to inertial, composed from the Hill-relative rate.

    Adds the orbit rate n = |r x v|/|r|^2 about the orbit normal, mapped
    into the body frame: omega_BN = omega_BO + [BO] (0, 0, n).
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    h = np.cross(r, v)
    hnorm = float(np.linalg.norm(h))
    r2 = float(r @ r)
    if r2 <= 0.0 or hnorm <= 0.0:
        raise DegenerateFrameError("orbit rate undefined for degenerate state")
    n = hnorm / r2
    return np.asarray(omega_bo_body, dtype=float) + np.asarray(bo, dtype=float) @ np.array([0.0, 0.0, n])


def principal_angle(a: Dcm, b: Dcm) -> float:
    """Rotation angle between two DCMs, arccos((trace(a^T b) - 1)/2)."""
    m = np.asarray(a, dtype=float).T @ np.asarray(b, dtype=float)
    c = (float(np.trace(m)) - 1.0) / 2.0
    return math.acos(max(-1.0, min(1.0, c)))


def is_dcm(d: Dcm, tol: float = DCM_ORTHO_TOL) -> bool:
    """True when d is orthonormal with determinant +1 within tol."""
    d = np.asarray(d, dtype=float)
    if d.shape != (3, 3) or not np.all(np.isfinite(d)):
        return False
    if not np.allclose(d.T @ d, np.eye(3), atol=tol, rtol=0.0):
        return False
    return abs(float(np.linalg.det(d)) - 1.0) <= tol
