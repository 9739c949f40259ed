"""IMU-state parameterizations, landmarks, and the composite window state.

Two parameterizations of the 15-DoF IMU state are supported:

* ``Param.SEPARATE``: orientation, velocity, position and bias treated as
  independent blocks, with a right-invariant rotation difference.
* ``Param.GROUPED``: orientation/velocity/position grouped as one extended
  pose, with the full group difference, bias appended additively.

Conventions used throughout the library:

* ``eta(reference, other)`` is the (reference minus other) difference.
* ``oplus(X, d)`` applies the increment on the left, ``Exp(d) o X``, so
  that ``eta(oplus(X, d), X) == d``.
* Error-term Jacobians are derivatives with respect to the ``oplus``
  increment of each involved state.

The 4-DoF unobservable transformation rotates the navigation part about
the gravity axis and translates it globally; landmark parameters are
untouched by it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import lie
from .lie import ExtendedPose


class Param(enum.Enum):
    SEPARATE = "separate"
    GROUPED = "grouped"


@dataclass(frozen=True)
class ImuState:
    tag: Param
    rotation: np.ndarray  # 3x3 DCM, body to world
    velocity: np.ndarray  # m/s, world frame
    position: np.ndarray  # m, world frame
    bias: np.ndarray      # [gyro (rad/s); accel (m/s^2)]

    @staticmethod
    def identity(tag):
        return ImuState(tag, np.eye(3), np.zeros(3), np.zeros(3), np.zeros(6))

    @property
    def nav(self):
        return ExtendedPose(self.rotation, self.velocity, self.position)

    def with_tag(self, tag):
        return replace(self, tag=tag)

    @property
    def dof(self):
        return 15


@dataclass(frozen=True)
class Landmark:
    """Anchored inverse-depth parameters in the anchor's left camera."""

    alpha: float
    beta: float
    lam: float  # inverse depth, 1/m
    anchor_id: int
    anchor_camera: str = "left"

    @property
    def vector(self):
        return np.array([self.alpha, self.beta, self.lam])

    @property
    def dof(self):
        return 3


@dataclass(frozen=True)
class UnobservableDirection:
    """Rotation about gravity (rad) plus a global translation (m)."""

    phi: float
    translation: np.ndarray

    @staticmethod
    def zero():
        return UnobservableDirection(0.0, np.zeros(3))

    @property
    def vector(self):
        return np.concatenate([[self.phi], self.translation])


class TagMismatchError(ValueError):
    pass


# Inverse depths are clamped away from zero during increments; the counter
# lets long runs report how often the guard fired.
LAMBDA_FLOOR = 1e-6
lambda_clamp_count = 0


def eta(reference, other):
    """15-vector difference between two IMU states (reference minus other)."""
    if reference.tag is not other.tag:
        raise TagMismatchError(
            f"parameterization mismatch: {reference.tag} vs {other.tag}"
        )
    db = reference.bias - other.bias
    if reference.tag is Param.SEPARATE:
        return np.concatenate([
            lie.so3_log(reference.rotation @ other.rotation.T),
            reference.velocity - other.velocity,
            reference.position - other.position,
            db,
        ])
    diff = lie.compose(reference.nav, lie.inverse(other.nav))
    return np.concatenate([lie.se23_log(diff), db])


def oplus(X, dxi):
    """Increment an IMU state; consistent with :func:`eta` to first order."""
    dxi = np.asarray(dxi, dtype=float)
    b = X.bias + dxi[9:15]
    if X.tag is Param.SEPARATE:
        return ImuState(
            X.tag,
            lie.so3_exp(dxi[0:3]) @ X.rotation,
            X.velocity + dxi[3:6],
            X.position + dxi[6:9],
            b,
        )
    nav = lie.compose(lie.se23_exp(dxi[0:9]), X.nav)
    return ImuState(X.tag, nav.rotation, nav.velocity, nav.position, b)


def transform_unobservable(X, tau, gravity):
    """Rotate the navigation state about gravity and translate it."""
    C_T = lie.so3_exp(np.asarray(gravity, dtype=float) * tau.phi)
    return ImuState(
        X.tag,
        C_T @ X.rotation,
        C_T @ X.velocity,
        C_T @ X.position + tau.translation,
        X.bias.copy(),
    )


def transform_landmark(z, tau):
    """Landmarks ride with their anchor; the transformation is a no-op."""
    return z


def nullspace_block(X, gravity):
    """15x4 unobservable-direction block for one IMU state.

    Columns are (rotation about gravity, translation x/y/z). The grouped
    parameterization yields a constant matrix; the separate one depends on
    the state's velocity and position.
    """
    g = np.asarray(gravity, dtype=float)
    N = np.zeros((15, 4))
    N[0:3, 0] = g
    N[6:9, 1:4] = np.eye(3)
    if X.tag is Param.SEPARATE:
        N[3:6, 0] = -lie.so3_wedge(X.velocity) @ g
        N[6:9, 0] = -lie.so3_wedge(X.position) @ g
    return N


def landmark_to_world(z, anchor, C_bc, t_bc):
    """World position of an anchored inverse-depth landmark."""
    if z.lam <= 0.0:
        raise ValueError(f"inverse depth must be positive, got {z.lam}")
    p_c = np.array([z.alpha, z.beta, 1.0]) / z.lam
    return anchor.rotation @ (C_bc @ p_c + t_bc) + anchor.position


@dataclass
class SlamState:
    """Ordered window state: IMU states plus anchored landmarks.

    Stacked vectors/matrices order blocks by ascending IMU-state id, then
    ascending landmark id.
    """

    imu_states: dict[int, ImuState]
    landmarks: dict[int, Landmark]

    def __post_init__(self):
        tags = {X.tag for X in self.imu_states.values()}
        if len(tags) > 1:
            raise TagMismatchError("mixed IMU-state parameterizations")
        for lid, z in self.landmarks.items():
            if z.anchor_id not in self.imu_states:
                raise ValueError(f"landmark {lid} anchored to missing state")

    def copy(self):
        return SlamState(dict(self.imu_states), dict(self.landmarks))

    @property
    def imu_ids(self):
        return sorted(self.imu_states)

    @property
    def landmark_ids(self):
        return sorted(self.landmarks)

    def block_index(self):
        """Column offset and width for every state id, in stacking order."""
        index = {}
        off = 0
        for i in self.imu_ids:
            index[i] = (off, 15)
            off += 15
        for i in self.landmark_ids:
            index[i] = (off, 3)
            off += 3
        return index, off

    @property
    def dof(self):
        return 15 * len(self.imu_states) + 3 * len(self.landmarks)


def slam_eta(reference, other):
    if reference.imu_ids != other.imu_ids or (
        reference.landmark_ids != other.landmark_ids
    ):
        raise ValueError("state ordering mismatch")
    parts = [
        eta(reference.imu_states[i], other.imu_states[i])
        for i in reference.imu_ids
    ]
    parts += [
        reference.landmarks[i].vector - other.landmarks[i].vector
        for i in reference.landmark_ids
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def slam_oplus(state, dxi):
    dxi = np.asarray(dxi, dtype=float)
    index, dof = state.block_index()
    if dxi.shape != (dof,):
        raise ValueError(f"increment has wrong size {dxi.shape}, want {dof}")
    imu = {}
    for i in state.imu_ids:
        off, _ = index[i]
        imu[i] = oplus(state.imu_states[i], dxi[off:off + 15])
    lms = {}
    global lambda_clamp_count
    for i in state.landmark_ids:
        off, _ = index[i]
        z = state.landmarks[i]
        lam = z.lam + dxi[off + 2]
        if lam < LAMBDA_FLOOR:
            lam = LAMBDA_FLOOR
            lambda_clamp_count += 1
        lms[i] = replace(
            z,
            alpha=z.alpha + dxi[off],
            beta=z.beta + dxi[off + 1],
            lam=lam,
        )
    return SlamState(imu, lms)


def slam_transform(state, tau, gravity):
    imu = {
        i: transform_unobservable(X, tau, gravity)
        for i, X in state.imu_states.items()
    }
    return SlamState(imu, dict(state.landmarks))


def slam_nullspace(state, gravity):
    """Stacked (15j + 3L) x 4 null space; landmark rows are zero."""
    _, dof = state.block_index()
    N = np.zeros((dof, 4))
    off = 0
    for i in state.imu_ids:
        N[off:off + 15] = nullspace_block(state.imu_states[i], gravity)
        off += 15
    return N
