"""Weighted nonlinear least-squares core for the sliding window.

Each error term exposes ``ids`` (the state ids it touches) and
``evaluate(state) -> (e, W, {id: jacobian block})``. The stacked system
orders rows by term insertion and columns by the window's state ordering
(IMU states by ascending id, then landmarks by ascending id).

Marginalization is performed by Schur complement over exactly the error
terms that touch the removed states, evaluated at the current estimate
and frozen thereafter; the result is a prior term on the retained states
it involved. This mirrors the standard sliding-window treatment and is
deliberately left un-patched (no first-estimates bookkeeping), since the
consistency behaviour under study emerges from that choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg


from . import imu as imu_mod
from . import vision as vision_mod
from .state import SlamState, eta, oplus, slam_oplus

# Diagnostics for long Monte Carlo runs.
marginalization_pivot_floor_count = 0
behind_camera_drop_count = 0


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular; carries the near-null directions."""

    def __init__(self, message, eigenvalues, eigenvectors):
        super().__init__(message)
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors


@dataclass
class PriorTerm:
    """Gaussian prior on a subset of the window, with identity Jacobians.

    ``mean`` holds reference values keyed by id (ImuState or Landmark);
    ``weight`` is the information matrix over the stacked involved blocks.
    """

    mean: dict
    weight: np.ndarray
    imu_ids: list
    landmark_ids: list
    kind: str = "prior"

    @property
    def ids(self):
        return self.imu_ids + self.landmark_ids

    def dof_of(self, i):
        return 15 if i in self.imu_ids else 3

    def residual(self, state):
        parts = [eta(self.mean[i], state.imu_states[i])
                 for i in self.imu_ids]
        parts += [self.mean[i].vector - state.landmarks[i].vector
                  for i in self.landmark_ids]
        return np.concatenate(parts)

    def evaluate(self, state):
        e = self.residual(state)
        jac = {}
        off = 0
        for i in self.ids:
            w = self.dof_of(i)
            J = np.zeros((e.size, w))
            J[off:off + w] = -np.eye(w)
            jac[i] = J
            off += w
        return e, self.weight, jac


@dataclass
class ImuDirectTerm:
    """Direct-integration odometry term between two IMU states.

    The mean is re-propagated through the raw measurements at every
    evaluation; the weight is fixed at construction.
    """

    id_i: int
    id_j: int
    seq: list
    gravity: np.ndarray
    weight: np.ndarray
    approximate_group_jacobian: bool = False
    kind: str = "imu_direct"
    Ts: list = None

    @staticmethod
    def create(id_i, id_j, X_i, seq, gravity, noise,
               approximate_group_jacobian=False, Ts=None):
        if Ts is None:
            Ts = imu_mod.step_lengths(seq)
        cov = imu_mod.propagate_error_cov(X_i, seq, Ts, gravity, noise)
        return ImuDirectTerm(id_i, id_j, seq, np.asarray(gravity, float),
                             imu_mod.floored_inverse(cov),
                             approximate_group_jacobian, Ts=Ts)

    @property
    def ids(self):
        return [self.id_i, self.id_j]

    def residual(self, state):
        return imu_mod.direct_residual(
            state.imu_states[self.id_i], state.imu_states[self.id_j],
            self.seq, self.gravity, Ts=self.Ts)

    def evaluate(self, state):
        e, W, J_i, J_j = imu_mod.direct_error(
            state.imu_states[self.id_i], state.imu_states[self.id_j],
            self.seq, self.gravity, weight=self.weight,
            approximate_group_jacobian=self.approximate_group_jacobian,
            Ts=self.Ts)
        return e, W, {self.id_i: J_i, self.id_j: J_j}


@dataclass
class ImuPreintTerm:
    """Preintegrated odometry term; the accumulated increment is reused."""

    id_i: int
    id_j: int
    rmi: imu_mod.Rmi
    gravity: np.ndarray
    weight: np.ndarray
    approximate_group_jacobian: bool = False
    kind: str = "imu_preint"

    @staticmethod
    def create(id_i, id_j, rmi, gravity, approximate_group_jacobian=False):
        return ImuPreintTerm(id_i, id_j, rmi, np.asarray(gravity, float),
                             imu_mod.floored_inverse(rmi.cov),
                             approximate_group_jacobian)

    @property
    def ids(self):
        return [self.id_i, self.id_j]

    def residual(self, state):
        return imu_mod.preint_residual(
            state.imu_states[self.id_i], state.imu_states[self.id_j],
            self.rmi, self.gravity)

    def evaluate(self, state):
        e, W, J_i, J_j = imu_mod.preint_error(
            state.imu_states[self.id_i], state.imu_states[self.id_j],
            self.rmi, self.gravity,
            approximate_group_jacobian=self.approximate_group_jacobian,
            weight=self.weight)
        return e, self.weight, {self.id_i: J_i, self.id_j: J_j}


@dataclass
class VisualTerm:
    """Stereo reprojection term linking observer, anchor, and landmark.

    If the predicted point falls behind the camera at some iterate, the
    term contributes nothing for that evaluation (measurement dropped,
    not fatal).
    """

    meas: vision_mod.VisualMeasurement
    anchor_id: int
    rig: vision_mod.CameraRig
    weight: np.ndarray = None
    kind: str = "visual"

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.linalg.inv(
                self.rig.measurement_cov(self.meas.camera))

    @property
    def ids(self):
        if self.meas.state_id == self.anchor_id:
            return [self.meas.state_id, self.meas.landmark_id]
        return [self.meas.state_id, self.anchor_id, self.meas.landmark_id]

    def residual(self, state):
        try:
            return vision_mod.visual_residual(
                self.meas, state.landmarks[self.meas.landmark_id],
                state.imu_states[self.anchor_id],
                state.imu_states[self.meas.state_id], self.rig)
        except vision_mod.BehindCameraError:
            return np.zeros(2)

    def evaluate(self, state):
        global behind_camera_drop_count
        X_k = state.imu_states[self.meas.state_id]
        X_i = state.imu_states[self.anchor_id]
        z = state.landmarks[self.meas.landmark_id]
        try:
            e, W, J_k, J_i, J_z = vision_mod.visual_error(
                self.meas, z, X_i, X_k, self.rig)
        except vision_mod.BehindCameraError:
            behind_camera_drop_count += 1
            zero15 = np.zeros((2, 15))
            jac = {self.meas.state_id: zero15,
                   self.meas.landmark_id: np.zeros((2, 3))}
            if self.anchor_id != self.meas.state_id:
                jac[self.anchor_id] = zero15
            return np.zeros(2), self.weight, jac
        if self.anchor_id == self.meas.state_id:
            jac = {self.meas.state_id: J_k + J_i,
                   self.meas.landmark_id: J_z}
        else:
            jac = {self.meas.state_id: J_k, self.anchor_id: J_i,
                   self.meas.landmark_id: J_z}
        return e, self.weight, jac


@dataclass
class GnConfig:
    max_iters: int = 20
    step_tol: float = 1e-8
    cost_tol: float = 1e-10
    rel_cost_tol: float = 0.0
    max_halvings: int = 5


@dataclass
class Window:
    state: SlamState
    terms: list
    prior: PriorTerm = None
    window_size: int = 10
    gn: GnConfig = field(default_factory=GnConfig)

    def all_terms(self):
        return ([self.prior] if self.prior is not None else []) + self.terms


class BlockWeights:
    """Block-diagonal weight stack applied slice-by-slice with ``@``."""

    def __init__(self, weights, rows, n_rows):
        self.weights = weights
        self.rows = rows
        self.n_rows = n_rows

    def __matmul__(self, other):
        out = np.empty((self.n_rows,) + other.shape[1:], dtype=float)
        for W, (_, sl) in zip(self.weights, self.rows):
            out[sl] = W @ other[sl]
        return out


@dataclass
class Assembled:
    e: np.ndarray
    H: np.ndarray
    W: BlockWeights
    rows: list  # (term, row slice) in stacking order


def assemble(state, terms):
    """Stack errors, Jacobians, and weights over the given terms."""
    index, dof = state.block_index()
    errors = []
    blocks = []
    weights = []
    rows = []
    row = 0
    for term in terms:
        for i in term.ids:
            if i not in index:
                raise KeyError(f"term references unknown state id {i}")
        e, W, jac = term.evaluate(state)
        H = np.zeros((e.size, dof))
        for i, J in jac.items():
            off, width = index[i]
            H[:, off:off + width] = J
        errors.append(e)
        blocks.append(H)
        weights.append(W)
        rows.append((term, slice(row, row + e.size)))
        row += e.size
    return Assembled(
        np.concatenate(errors) if errors else np.zeros(0),
        np.vstack(blocks) if blocks else np.zeros((0, dof)),
        BlockWeights(weights, rows, row),
        rows,
    )


def cost_of(state, terms):
    total = 0.0
    for term in terms:
        if hasattr(term, "residual"):
            e, W = term.residual(state), term.weight
        else:
            e, W, _ = term.evaluate(state)
        total += float(e @ W @ e)
    return 0.5 * total


def _solve_normal_equations(Lam, rhs):
    try:
        c, low = scipy.linalg.cho_factor(Lam)
        return scipy.linalg.cho_solve((c, low), rhs)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(Lam)
    near_null = vals < vals[-1] * 1e-12
    raise RankDeficiencyError(
        f"normal equations rank-deficient ({near_null.sum()} near-null "
        "directions); the window needs a prior",
        vals[near_null], vecs[:, near_null])


@dataclass
class IterationReport:
    iterations: int
    costs: list
    converged: bool
    step_norms: list


def gauss_newton(window):
    """Minimize the window cost; returns (state, covariance, report)."""
    cfg = window.gn
    state = window.state.copy()
    terms = window.all_terms()
    costs = [cost_of(state, terms)]
    step_norms = []
    converged = False
    for _ in range(cfg.max_iters):
        sys = assemble(state, terms)
        WH = sys.W @ sys.H
        Lam = sys.H.T @ WH
        Lam = 0.5 * (Lam + Lam.T)
        grad = WH.T @ sys.e
        step = -_solve_normal_equations(Lam, grad)
        step_norms.append(float(np.linalg.norm(step)))
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            candidate = slam_oplus(state, alpha * step)
            c = cost_of(candidate, terms)
            if c <= costs[-1]:
                state = candidate
                costs.append(c)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        if step_norms[-1] < cfg.step_tol:
            converged = True
            break
        decrease = costs[-2] - costs[-1]
        if decrease < cfg.cost_tol or \
                decrease < cfg.rel_cost_tol * abs(costs[-1]):
            converged = True
            break
    sys = assemble(state, terms)
    Lam = sys.H.T @ (sys.W @ sys.H)
    Lam = 0.5 * (Lam + Lam.T)
    try:
        c, low = scipy.linalg.cho_factor(Lam)
        cov = scipy.linalg.cho_solve((c, low), np.eye(Lam.shape[0]))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        vals, vecs = np.linalg.eigh(Lam)
        near_null = vals < vals[-1] * 1e-12
        raise RankDeficiencyError(
            "covariance unavailable: normal equations rank-deficient",
            vals[near_null], vecs[:, near_null])
    cov = 0.5 * (cov + cov.T)
    report = IterationReport(len(costs) - 1, costs, converged, step_norms)
    return state, cov, report


def _anchored_landmarks(state, imu_ids):
    return [
        lid for lid, z in state.landmarks.items() if z.anchor_id in imu_ids
    ]


def marginalize(window, ids_to_remove, pivot_floor=1e-12):
    """Schur-complement removed states into a prior on their neighbours."""
    global marginalization_pivot_floor_count
    state = window.state
    removed_imu = [i for i in ids_to_remove if i in state.imu_states]
    removed = set(ids_to_remove) | set(
        _anchored_landmarks(state, set(removed_imu)))
    touching = [
        t for t in window.all_terms() if removed & set(t.ids)
    ]
    involved_imu = sorted({
        i for t in touching for i in t.ids if i in state.imu_states
    })
    involved_lm = sorted({
        i for t in touching for i in t.ids if i in state.landmarks
    })
    retained_imu = [i for i in involved_imu if i not in removed]
    retained_lm = [i for i in involved_lm if i not in removed]
    if not retained_imu and not retained_lm:
        raise ValueError(
            "removed states share no error term with a retained state")

    # Local stacking: retained blocks first, then removed.
    order = (retained_imu + retained_lm
             + [i for i in involved_imu if i in removed]
             + [i for i in involved_lm if i in removed])
    widths = {i: (15 if i in state.imu_states else 3) for i in order}
    offsets = {}
    off = 0
    for i in order:
        offsets[i] = off
        off += widths[i]
    dof = off
    n_r = sum(widths[i] for i in retained_imu + retained_lm)

    Lam = np.zeros((dof, dof))
    grad = np.zeros(dof)
    for term in touching:
        e, W, jac = term.evaluate(state)
        H = np.zeros((e.size, dof))
        for i, J in jac.items():
            H[:, offsets[i]:offsets[i] + widths[i]] = J
        WH = W @ H
        Lam += H.T @ WH
        grad += WH.T @ e
    Lam = 0.5 * (Lam + Lam.T)

    Lam_rr = Lam[:n_r, :n_r]
    Lam_rm = Lam[:n_r, n_r:]
    Lam_mm = Lam[n_r:, n_r:]
    vals = np.linalg.eigvalsh(Lam_mm)
    if vals.min() < pivot_floor:
        marginalization_pivot_floor_count += 1
    Lam_mm_inv = imu_mod.floored_inverse(Lam_mm, floor=pivot_floor)
    Lam_pr = Lam_rr - Lam_rm @ Lam_mm_inv @ Lam_rm.T
    Lam_pr = 0.5 * (Lam_pr + Lam_pr.T)
    # The Schur complement is PSD in exact arithmetic; cancellation can
    # leave slightly negative eigenvalues that accumulate across slides,
    # so project back onto the PSD cone.
    vals, vecs = np.linalg.eigh(Lam_pr)
    if vals[0] < 0.0:
        Lam_pr = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        Lam_pr = 0.5 * (Lam_pr + Lam_pr.T)
    g_pr = grad[:n_r] - Lam_rm @ Lam_mm_inv @ grad[n_r:]

    # Mean shift: minimize the marginal quadratic (least-squares in case
    # the reduced information is singular without a prior).
    shift = -np.linalg.lstsq(Lam_pr, g_pr, rcond=None)[0]
    mean = {}
    off = 0
    for i in retained_imu:
        mean[i] = oplus(state.imu_states[i], shift[off:off + 15])
        off += 15
    for i in retained_lm:
        z = state.landmarks[i]
        mean[i] = replace(
            z, alpha=z.alpha + shift[off], beta=z.beta + shift[off + 1],
            lam=max(z.lam + shift[off + 2], 1e-6))
        off += 3
    return PriorTerm(mean, Lam_pr, retained_imu, retained_lm), removed


def drop_states(window, removed, prior):
    """Window with the removed states, their terms, and old prior gone."""
    imu_states = {
        i: X for i, X in window.state.imu_states.items() if i not in removed
    }
    landmarks = {
        i: z for i, z in window.state.landmarks.items() if i not in removed
    }
    terms = [t for t in window.terms if not (removed & set(t.ids))]
    if window.prior is not None and not (removed & set(window.prior.ids)):
        # The old prior was not folded into the marginalization; keep it
        # alongside the regular terms (consumers filter on `kind`).
        terms = [window.prior] + terms
    return Window(SlamState(imu_states, landmarks), terms, prior,
                  window.window_size, window.gn)


def slide(window, new_imu_id, new_state, new_terms,
          new_landmarks=None):
    """Add a state (and terms); marginalize the oldest one at capacity."""
    if len(window.state.imu_states) >= window.window_size:
        oldest = min(window.state.imu_states)
        prior, removed = marginalize(window, [oldest])
        window = drop_states(window, removed, prior)
    imu_states = dict(window.state.imu_states)
    imu_states[new_imu_id] = new_state
    landmarks = dict(window.state.landmarks)
    if new_landmarks:
        landmarks.update(new_landmarks)
    return Window(SlamState(imu_states, landmarks),
                  window.terms + list(new_terms), window.prior,
                  window.window_size, window.gn)
