"""IMU models: propagation, preintegrated motion increments, error terms.

The one-step process model assumes piecewise-constant angular rate and
specific force over each sample interval:

    C_{k+1} = C_k Exp(T (u_g - b_g))
    v_{k+1} = v_k + T C_k (u_a - b_a) + T g
    r_{k+1} = r_k + T v_k + T^2/2 (C_k (u_a - b_a) + g)
    b_{k+1} = b_k

Relative motion increments (RMIs) summarize a measurement run between two
camera times. They are accumulated with the bias frozen at the value held
when the increment was started; bias updates do not trigger
re-accumulation. The sensitivity of the accumulated increment to that
frozen bias is propagated alongside and supplies the bias columns of the
preintegration error Jacobian.

All error Jacobians are derivatives with respect to the left ``oplus``
increment of the involved states (see :mod:`swfvi.state`) and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .state import ImuState, Param, eta

I3 = np.eye(3)
I6 = np.eye(6)


@dataclass(frozen=True)
class ImuMeasurement:
    gyro: np.ndarray   # rad/s
    accel: np.ndarray  # m/s^2
    stamp: float       # s


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities plus the camera pixel sigma.

    The matrices are per-axis power spectral densities (units squared per
    Hz); discrete sampling at interval T uses covariance PSD / T.
    """

    gyro_psd: np.ndarray
    accel_psd: np.ndarray
    gyro_walk_psd: np.ndarray
    accel_walk_psd: np.ndarray
    camera_pixel_sigma: float

    @staticmethod
    def from_sigmas(gyro, accel, gyro_walk, accel_walk, pixel):
        return NoiseParams(
            gyro ** 2 * I3,
            accel ** 2 * I3,
            gyro_walk ** 2 * I3,
            accel_walk ** 2 * I3,
            pixel,
        )

    def psd_block(self):
        return np.block([
            [self.gyro_psd, np.zeros((3, 9))],
            [np.zeros((3, 3)), self.accel_psd, np.zeros((3, 6))],
            [np.zeros((3, 6)), self.gyro_walk_psd, np.zeros((3, 3))],
            [np.zeros((3, 9)), self.accel_walk_psd],
        ])


def propagate_one_step(X, u, T, gravity):
    """Noise-free one-step propagation of the IMU state."""
    if T <= 0.0:
        raise ValueError(f"step length must be positive, got {T}")
    g = np.asarray(gravity, dtype=float)
    w = u.gyro - X.bias[:3]
    a = X.rotation @ (u.accel - X.bias[3:])
    return ImuState(
        X.tag,
        X.rotation @ lie.so3_exp(T * w),
        X.velocity + T * a + T * g,
        X.position + T * X.velocity + 0.5 * T * T * (a + g),
        X.bias.copy(),
    )


def propagate_recursive(X, seq, gravity):
    """Fold of the one-step model over a measurement sequence.

    Step lengths are taken as the stamp difference to the next measurement;
    the final measurement reuses the preceding interval length.
    """
    if len(seq) == 0:
        raise ValueError("empty measurement sequence")
    for u, T in zip(seq, step_lengths(seq)):
        X = propagate_one_step(X, u, T, gravity)
    return X


def step_lengths(seq):
    n = len(seq)
    if n == 1:
        raise ValueError("cannot infer a step length from one measurement")
    Ts = [seq[k + 1].stamp - seq[k].stamp for k in range(n - 1)]
    Ts.append(Ts[-1])
    return Ts


def propagate_sequence(X, seq, Ts, gravity):
    """Fold of the one-step model, without intermediate state objects."""
    g = np.asarray(gravity, dtype=float)
    C, v, r = X.rotation, X.velocity, X.position
    b_g, b_a = X.bias[:3], X.bias[3:]
    for u, T in zip(seq, Ts):
        a = C @ (u.accel - b_a) + g
        r = r + T * v + (0.5 * T * T) * a
        v = v + T * a
        C = C @ lie.so3_exp(T * (u.gyro - b_g))
    return ImuState(X.tag, C, v, r, X.bias.copy())


def process_jacobian(X, u, T, gravity, X_next=None):
    """15x15 Jacobian F of the one-step model w.r.t. the state increment.

    ``X_next`` may hold the already-propagated state to avoid recomputing
    it for the grouped parameterization.
    """
    g = np.asarray(gravity, dtype=float)
    C = X.rotation
    w = u.gyro - X.bias[:3]
    a = u.accel - X.bias[3:]
    Dbg = -T * C @ lie.so3_left_jacobian(T * w)  # d(rot)/d(gyro bias)
    F = np.eye(15)
    if X.tag is Param.SEPARATE:
        Ca_w = lie.so3_wedge(C @ a)
        F[3:6, 0:3] = -T * Ca_w
        F[6:9, 0:3] = -0.5 * T * T * Ca_w
        F[0:3, 9:12] = Dbg
        F[3:6, 12:15] = -T * C
        F[6:9, 12:15] = -0.5 * T * T * C
    else:
        Xp = X_next if X_next is not None else propagate_one_step(
            X, u, T, g)
        gw = lie.so3_wedge(g)
        F[3:6, 0:3] = T * gw
        F[6:9, 0:3] = 0.5 * T * T * gw
        F[0:3, 9:12] = Dbg
        F[3:6, 9:12] = lie.so3_wedge(Xp.velocity) @ Dbg
        F[6:9, 9:12] = lie.so3_wedge(Xp.position) @ Dbg
        F[3:6, 12:15] = -T * C
        F[6:9, 12:15] = -0.5 * T * T * C
    F[6:9, 3:6] = T * I3
    return F


def process_noise_jacobian(X, u, T, gravity):
    """15x12 Jacobian G mapping [w_g, w_a, w_bg, w_ba] into the state."""
    F = process_jacobian(X, u, T, gravity)
    G = np.zeros((15, 12))
    G[0:9, 0:6] = F[0:9, 9:15]  # noises enter exactly like the biases
    G[9:15, 6:12] = T * I6
    return G


def process_noise_cov(X, u, T, gravity, noise):
    G = process_noise_jacobian(X, u, T, gravity)
    return G @ (noise.psd_block() / T) @ G.T


@dataclass(frozen=True)
class Rmi:
    """Relative motion increment with covariance and bias sensitivity."""

    tag: Param
    delta_C: np.ndarray
    delta_v: np.ndarray
    delta_r: np.ndarray
    delta_b: np.ndarray      # always zero for a measured increment
    dt: float
    bias_lin: np.ndarray     # bias frozen at the start of accumulation
    cov: np.ndarray          # 15x15
    bias_jac: np.ndarray     # 9x6 sensitivity of (C,v,r) rows to bias_lin

    @staticmethod
    def fresh(tag, bias_lin):
        return Rmi(
            tag, I3.copy(), np.zeros(3), np.zeros(3), np.zeros(6), 0.0,
            np.asarray(bias_lin, dtype=float).copy(),
            np.zeros((15, 15)), np.zeros((9, 6)),
        )

    def as_state(self):
        """The increment viewed as a pseudo IMU state for eta()."""
        return ImuState(
            self.tag, self.delta_C, self.delta_v, self.delta_r, self.delta_b
        )


def rmi_accumulate(rmi, u, T, noise):
    """Fold one measurement into an RMI (increments, covariance, bias jac).

    The increment dynamics are the one-step model with zero gravity and the
    frozen linearization bias; position is advanced with the pre-update
    velocity and orientation.
    """
    if T <= 0.0:
        raise ValueError(f"step length must be positive, got {T}")
    pseudo = ImuState(
        rmi.tag, rmi.delta_C, rmi.delta_v, rmi.delta_r, rmi.bias_lin)
    g0 = np.zeros(3)
    F = process_jacobian(pseudo, u, T, g0)
    # Covariance: the error state is the increment's nav error together
    # with the in-run bias drift b(t) - b_i, which starts at exactly zero
    # and grows by the random walk; the full F couples that drift into
    # the navigation rows so the accumulated covariance matches the
    # residual's true scatter.
    G = process_noise_jacobian(pseudo, u, T, g0)
    Q = G @ (noise.psd_block() / T) @ G.T
    cov = F @ rmi.cov @ F.T + Q
    cov = 0.5 * (cov + cov.T)
    bias_jac = F[0:9, 0:9] @ rmi.bias_jac + F[0:9, 9:15]
    stepped = propagate_one_step(pseudo, u, T, g0)
    return Rmi(
        rmi.tag, stepped.rotation, stepped.velocity, stepped.position,
        np.zeros(6), rmi.dt + T, rmi.bias_lin, cov, bias_jac,
    )


def rmi_accumulate_sequence(rmi, seq, Ts, noise):
    for u, T in zip(seq, Ts):
        rmi = rmi_accumulate(rmi, u, T, noise)
    return rmi


def rmi_predicted(X_i, X_j, dt, gravity):
    """State-based increment between two IMU states over dt seconds."""
    g = np.asarray(gravity, dtype=float)
    Ci_t = X_i.rotation.T
    return Rmi(
        X_i.tag,
        Ci_t @ X_j.rotation,
        Ci_t @ (X_j.velocity - X_i.velocity - g * dt),
        Ci_t @ (
            X_j.position - X_i.position - X_i.velocity * dt
            - 0.5 * g * dt * dt
        ),
        X_j.bias - X_i.bias,
        dt,
        X_i.bias.copy(),
        np.zeros((15, 15)),
        np.zeros((9, 6)),
    )


class SingularCovarianceError(ValueError):
    pass


def floored_inverse(M, floor=1e-12):
    """Symmetric inverse with eigenvalues floored away from zero."""
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals[-1] <= 0.0:
        raise SingularCovarianceError("covariance has no positive spectrum")
    vals = np.maximum(vals, floor)
    return (vecs / vals) @ vecs.T


def group_jacobian_inv(tag, e, approximate):
    """Blockwise inverse left group Jacobian of an error vector.

    Acts on the rotation block (separate) or the grouped nav block; vector
    blocks get identity. With ``approximate`` the whole factor is identity.
    """
    J = np.eye(15)
    if approximate:
        return J
    if tag is Param.SEPARATE:
        J[0:3, 0:3] = lie.so3_left_jacobian_inv(e[0:3])
    else:
        J[0:9, 0:9] = lie.se23_left_jacobian_inv(e[0:9])
    return J


def chained_process_jacobian(X_i, seq, Ts, gravity):
    """Jacobian of the recursive model: product of one-step Jacobians.

    The propagation and the per-step Jacobian share their intermediate
    trigonometric terms; this loop is the direct-integration hot path.
    """
    g = np.asarray(gravity, dtype=float)
    tag = X_i.tag
    C, v, r = X_i.rotation, X_i.velocity, X_i.position
    b_g, b_a = X_i.bias[:3], X_i.bias[3:]
    F = np.eye(15)
    gw = lie.so3_wedge(g)
    for u, T in zip(seq, Ts):
        Tw = T * (u.gyro - b_g)
        a_b = u.accel - b_a
        a = C @ a_b + g
        v_n = v + T * a
        r_n = r + T * v + (0.5 * T * T) * a
        Dbg = (-T) * (C @ lie.so3_left_jacobian(Tw))
        Fk = np.eye(15)
        if tag is Param.SEPARATE:
            Ca_w = lie.so3_wedge(C @ a_b)
            Fk[3:6, 0:3] = -T * Ca_w
            Fk[6:9, 0:3] = (-0.5 * T * T) * Ca_w
        else:
            Fk[3:6, 0:3] = T * gw
            Fk[6:9, 0:3] = (0.5 * T * T) * gw
            Fk[3:6, 9:12] = lie.so3_wedge(v_n) @ Dbg
            Fk[6:9, 9:12] = lie.so3_wedge(r_n) @ Dbg
        Fk[0:3, 9:12] = Dbg
        Fk[3:6, 12:15] = -T * C
        Fk[6:9, 12:15] = (-0.5 * T * T) * C
        Fk[6:9, 3:6] = T * I3
        F = Fk @ F
        C, v, r = C @ lie.so3_exp(Tw), v_n, r_n
    return F, ImuState(tag, C, v, r, X_i.bias.copy())


def propagate_error_cov(X_i, seq, Ts, gravity, noise):
    """Accumulated 15x15 covariance of the direct-integration error."""
    X = X_i
    cov = np.zeros((15, 15))
    psd = noise.psd_block()
    for u, T in zip(seq, Ts):
        X_next = propagate_one_step(X, u, T, gravity)
        F = process_jacobian(X, u, T, gravity, X_next=X_next)
        G = np.zeros((15, 12))
        G[0:9, 0:6] = F[0:9, 9:15]
        G[9:15, 6:12] = T * I6
        cov = F @ cov @ F.T + G @ (psd / T) @ G.T
        cov = 0.5 * (cov + cov.T)
        X = X_next
    return cov


def direct_residual(X_i, X_j, seq, gravity, Ts=None):
    """Direct-integration error only (no Jacobians), for cost queries."""
    if Ts is None:
        Ts = step_lengths(seq)
    return eta(propagate_sequence(X_i, seq, Ts, gravity), X_j)


def corrected_increment(rmi, bias_i):
    """Measured increment updated to first order for a new start bias.

    The raw increment was accumulated with measurements corrected by the
    frozen ``bias_lin``; when the state's bias estimate moves away from
    it, the navigation part must shift by ``bias_jac @ (b_i - bias_lin)``
    or the residual carries an uncompensated systematic error far larger
    than the increment's noise covariance.
    """
    db = np.asarray(bias_i, dtype=float) - rmi.bias_lin
    state = rmi.as_state()
    if not db.any():
        return state
    from .state import oplus
    return oplus(state, np.concatenate([rmi.bias_jac @ db, np.zeros(6)]))


def preint_residual(X_i, X_j, rmi, gravity):
    """Preintegration error only (no Jacobians), for cost queries."""
    predicted = rmi_predicted(X_i, X_j, rmi.dt,
                              np.asarray(gravity, dtype=float))
    return eta(corrected_increment(rmi, X_i.bias), predicted.as_state())


def direct_error(X_i, X_j, seq, gravity, noise=None, weight=None,
                 approximate_group_jacobian=False, Ts=None):
    """Direct IMU integration error with Jacobians w.r.t. both states.

    Returns ``(e, W, J_i, J_j)`` with ``e = eta(f(X_i), X_j)``. Either a
    precomputed weight or noise parameters (to build one) must be given.
    """
    if X_i.tag is not X_j.tag:
        raise ValueError("parameterization mismatch between states")
    if Ts is None:
        Ts = step_lengths(seq)
    F, X_check = chained_process_jacobian(X_i, seq, Ts, gravity)
    e = eta(X_check, X_j)
    if weight is None:
        if noise is None:
            raise ValueError("need noise parameters or a precomputed weight")
        cov = propagate_error_cov(X_i, seq, Ts, gravity, noise)
        weight = floored_inverse(cov)
    Jpos = group_jacobian_inv(X_i.tag, e, approximate_group_jacobian)
    Jneg = group_jacobian_inv(X_i.tag, -e, approximate_group_jacobian)
    J_i = Jpos @ F
    J_j = -Jneg
    return e, weight, J_i, J_j


def preint_error(X_i, X_j, rmi, gravity, approximate_group_jacobian=False,
                 weight=None):
    """Preintegration error comparing measured and state-based increments.

    Returns ``(e, W, J_i, J_j)`` with ``e = eta(measured, predicted)`` in
    the parameterization shared by the states and the increment.
    """
    tag = X_i.tag
    if tag is not X_j.tag or tag is not rmi.tag:
        raise ValueError("parameterization mismatch")
    g = np.asarray(gravity, dtype=float)
    dt = rmi.dt
    predicted = rmi_predicted(X_i, X_j, dt, g)
    e = eta(corrected_increment(rmi, X_i.bias), predicted.as_state())
    if weight is None:
        weight = floored_inverse(rmi.cov)

    Ci_t = X_i.rotation.T
    D_i = np.zeros((15, 15))
    D_j = np.zeros((15, 15))
    D_i[9:15, 9:15] = -I6
    D_j[9:15, 9:15] = I6
    if tag is Param.SEPARATE:
        D_i[0:3, 0:3] = -Ci_t
        D_i[3:6, 0:3] = Ci_t @ lie.so3_wedge(
            X_i.rotation @ predicted.delta_v)
        D_i[3:6, 3:6] = -Ci_t
        D_i[6:9, 0:3] = Ci_t @ lie.so3_wedge(
            X_i.rotation @ predicted.delta_r)
        D_i[6:9, 3:6] = -dt * Ci_t
        D_i[6:9, 6:9] = -Ci_t
        D_j[0:3, 0:3] = Ci_t
        D_j[3:6, 3:6] = Ci_t
        D_j[6:9, 6:9] = Ci_t
    else:
        D_i[0:3, 0:3] = -Ci_t
        D_i[3:6, 0:3] = Ci_t @ lie.so3_wedge(X_i.velocity)
        D_i[3:6, 3:6] = -Ci_t
        D_i[6:9, 0:3] = Ci_t @ lie.so3_wedge(
            X_i.position + X_i.velocity * dt)
        D_i[6:9, 3:6] = -dt * Ci_t
        D_i[6:9, 6:9] = -Ci_t
        D_j[0:3, 0:3] = Ci_t
        D_j[3:6, 0:3] = -Ci_t @ lie.so3_wedge(X_i.velocity + g * dt)
        D_j[3:6, 3:6] = Ci_t
        D_j[6:9, 0:3] = -Ci_t @ lie.so3_wedge(
            X_i.position + X_i.velocity * dt + 0.5 * g * dt * dt)
        D_j[6:9, 6:9] = Ci_t
    # Measured-increment sensitivity: only the bias columns, through the
    # first-order correction applied on top of the accumulated increment.
    inc = rmi.bias_jac @ (X_i.bias - rmi.bias_lin)
    if tag is Param.SEPARATE:
        L = np.eye(9)
        L[0:3, 0:3] = lie.so3_left_jacobian(inc[0:3])
    else:
        L = lie.se23_left_jacobian(inc)
    D_y_i = np.zeros((15, 15))
    D_y_i[0:9, 9:15] = L @ rmi.bias_jac
    Jpos = group_jacobian_inv(tag, e, approximate_group_jacobian)
    Jneg = group_jacobian_inv(tag, -e, approximate_group_jacobian)
    J_i = Jpos @ D_y_i - Jneg @ D_i
    J_j = -Jneg @ D_j
    return e, weight, J_i, J_j
