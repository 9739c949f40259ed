"""Matrix Lie group kernels for SO(3) and the extended poses SE_2(3).

All rotations are plain 3x3 numpy arrays (direction cosine matrices), all
tangent vectors are flat numpy arrays: length 3 for SO(3) and length 9 for
SE_2(3), ordered (rotation, velocity, position). Every function returns a
new array; nothing is mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this angle the closed forms are replaced by 4th-order Taylor series
# to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-6

I3 = np.eye(3)


def so3_wedge(phi):
    x, y, z = phi
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _sin_coeffs(theta):
    """Coefficients a = sin(t)/t and b = (1-cos(t))/t^2.

    Both are written in cancellation-free half-angle form, so no explicit
    series branch is needed.
    """
    if theta == 0.0:
        return 1.0, 0.5
    half = math.sin(0.5 * theta) / (0.5 * theta)
    return math.sin(theta) / theta, 0.5 * half * half


def _cubic_coeff(theta):
    """(t - sin(t)) / t^3, with a series branch to dodge cancellation."""
    if theta < 1e-2:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 \
            - t2 * t2 * t2 / 362880.0
    return (theta - np.sin(theta)) / (theta ** 3)


def so3_exp(phi):
    """Rodrigues formula, with a series branch near zero."""
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(phi @ phi)
    S = so3_wedge(phi)
    a, b = _sin_coeffs(theta)
    return I3 + a * S + b * (S @ S)


def so3_log(R):
    """Rotation vector of R with norm <= pi.

    The angle-pi branch extracts the axis from the largest diagonal entry of
    (R + I)/2; the sign convention makes the first nonzero axis component
    positive.
    """
    tr = np.trace(R)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < SMALL_ANGLE:
        # Log(R) ~ vee(R - R^T)/2 * (1 + theta^2/6)
        return so3_vee(R - R.T) / 2.0 * (1.0 + theta * theta / 6.0)
    if np.pi - theta < 1e-6:
        B = (R + I3) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        axis = axis / np.linalg.norm(axis)
        for comp in axis:
            if abs(comp) > 1e-12:
                if comp < 0.0:
                    axis = -axis
                break
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * so3_vee(R - R.T)


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(phi @ phi)
    S = so3_wedge(phi)
    _, b = _sin_coeffs(theta)
    return I3 + b * S + _cubic_coeff(theta) * (S @ S)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    S = so3_wedge(phi)
    if theta < 1e-2:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta)
        )
    return I3 - 0.5 * S + c * (S @ S)


def is_rotation(R, tol=1e-9):
    return (
        np.linalg.norm(R.T @ R - I3) < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


@dataclass(frozen=True)
class ExtendedPose:
    """Orientation, velocity and position grouped as one SE_2(3) element."""

    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray

    @staticmethod
    def identity():
        return ExtendedPose(I3.copy(), np.zeros(3), np.zeros(3))

    def as_matrix(self):
        M = np.eye(5)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.velocity
        M[:3, 4] = self.position
        return M

    @staticmethod
    def from_matrix(M):
        return ExtendedPose(M[:3, :3].copy(), M[:3, 3].copy(), M[:3, 4].copy())


def se23_wedge(xi):
    xi = np.asarray(xi, dtype=float)
    M = np.zeros((5, 5))
    M[:3, :3] = so3_wedge(xi[:3])
    M[:3, 3] = xi[3:6]
    M[:3, 4] = xi[6:9]
    return M


def se23_vee(M):
    return np.concatenate([so3_vee(M[:3, :3]), M[:3, 3], M[:3, 4]])


def se23_exp(xi):
    xi = np.asarray(xi, dtype=float)
    phi = xi[:3]
    J = so3_left_jacobian(phi)
    return ExtendedPose(so3_exp(phi), J @ xi[3:6], J @ xi[6:9])


def se23_log(X):
    phi = so3_log(X.rotation)
    Jinv = so3_left_jacobian_inv(phi)
    return np.concatenate([phi, Jinv @ X.velocity, Jinv @ X.position])


def compose(X, Y):
    return ExtendedPose(
        X.rotation @ Y.rotation,
        X.rotation @ Y.velocity + X.velocity,
        X.rotation @ Y.position + X.position,
    )


def inverse(X):
    Rt = X.rotation.T
    return ExtendedPose(Rt, -(Rt @ X.velocity), -(Rt @ X.position))


def _se23_q_matrix(phi, rho):
    """Coupling block Q(phi, rho) of the SE_2(3)/SE(3) left Jacobian."""
    theta = np.linalg.norm(phi)
    P = so3_wedge(phi)
    Rho = so3_wedge(rho)
    if theta < 1e-2:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        # c3 = (c2 + 3*(th - sin th - th^3/6)/th^5) / 2
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        t3 = theta ** 3
        t4 = t3 * theta
        t5 = t4 * theta
        c1 = (theta - np.sin(theta)) / t3
        c2 = (theta * theta / 2.0 + np.cos(theta) - 1.0) / t4
        c3 = 0.5 * (c2 + 3.0 * (theta - np.sin(theta) - t3 / 6.0) / t5)
    PR = P @ Rho
    RP = Rho @ P
    PRP = PR @ P
    return (
        0.5 * Rho
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se23_adjoint_algebra(xi):
    """Little adjoint ad(xi) as a 9x9 matrix."""
    xi = np.asarray(xi, dtype=float)
    P = so3_wedge(xi[:3])
    ad = np.zeros((9, 9))
    ad[:3, :3] = P
    ad[3:6, 3:6] = P
    ad[6:9, 6:9] = P
    ad[3:6, :3] = so3_wedge(xi[3:6])
    ad[6:9, :3] = so3_wedge(xi[6:9])
    return ad


def se23_left_jacobian_series(xi, terms=30):
    """Numerical-series fallback J = sum ad^n / (n+1)!; cross-check only."""
    ad = se23_adjoint_algebra(xi)
    J = np.eye(9)
    T = np.eye(9)
    fact = 1.0
    for n in range(1, terms):
        T = T @ ad
        fact *= n + 1
        J = J + T / fact
    return J


def se23_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    phi = xi[:3]
    Jso3 = so3_left_jacobian(phi)
    J = np.zeros((9, 9))
    J[:3, :3] = Jso3
    J[3:6, 3:6] = Jso3
    J[6:9, 6:9] = Jso3
    J[3:6, :3] = _se23_q_matrix(phi, xi[3:6])
    J[6:9, :3] = _se23_q_matrix(phi, xi[6:9])
    return J


def se23_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    phi = xi[:3]
    Jinv = so3_left_jacobian_inv(phi)
    Qv = _se23_q_matrix(phi, xi[3:6])
    Qr = _se23_q_matrix(phi, xi[6:9])
    J = np.zeros((9, 9))
    J[:3, :3] = Jinv
    J[3:6, 3:6] = Jinv
    J[6:9, 6:9] = Jinv
    J[3:6, :3] = -Jinv @ Qv @ Jinv
    J[6:9, :3] = -Jinv @ Qr @ Jinv
    return J
