"""Synthetic trajectory, measurement generation, and Monte Carlo driver.

Ground truth is generated *by the one-step IMU model itself*: ideal
angular-rate and specific-force inputs for a circular 3D sine-wave path
are synthesized at IMU rate and folded through ``propagate_one_step``, so
the truth satisfies the process model exactly and noise-free direct-IMU
errors vanish to machine precision.

The body x-axis tracks the radial direction, which points the (forward-
looking) stereo rig at a cylinder of landmarks surrounding the
trajectory.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import imu as imu_mod
from . import lie
from . import solver as solver_mod
from . import vision as vision_mod
from .state import ImuState, Landmark, Param, SlamState, oplus

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])

# initial-prior standard deviations (rot, vel, pos, bias); the
# deliberately weak attitude prior lets gravity-axis errors express
# themselves so spurious-information pathologies are measurable
PRIOR_SIGMAS = np.concatenate([
    np.full(3, 0.3), np.full(3, 0.05), np.full(3, 0.1),
    np.full(6, 0.01),
])

FIRST_LANDMARK_ID = 10_000


@dataclass
class ScenarioConfig:
    """World, sensor, and Monte Carlo settings.

    IMU and bias-walk sigmas are per-sample standard deviations at
    ``imu_rate`` (the corresponding continuous densities are derived);
    the pixel sigma is in pixels.
    """

    duration: float = 60.0
    imu_rate: float = 24.0
    cam_rate: float = 2.0
    radius: float = 5.0
    angular_rate: float = 0.2
    vertical_amplitude: float = 1.0
    vertical_freq: float = 0.1
    landmark_count: int = 60
    cylinder_radius: float = 10.0
    height_span: float = 4.0
    imu_sigma: float = 0.02
    bias_walk_sigma: float = 0.015
    pixel_sigma: float = 1.0
    gravity: np.ndarray = field(
        default_factory=lambda: DEFAULT_GRAVITY.copy())
    rig: vision_mod.CameraRig = field(
        default_factory=vision_mod.default_rig)
    mc_trials: int = 20
    seed: int = 0
    window_size: int = 8

    def __post_init__(self):
        if self.landmark_count <= 0:
            raise ValueError("landmark_count must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be divisible by cam_rate")

    @property
    def step(self):
        return 1.0 / self.imu_rate

    @property
    def steps_per_frame(self):
        return int(round(self.imu_rate / self.cam_rate))

    @property
    def noise(self):
        """Continuous-time densities matching the per-sample sigmas."""
        T = self.step
        return imu_mod.NoiseParams(
            self.imu_sigma ** 2 * T * np.eye(3),
            self.imu_sigma ** 2 * T * np.eye(3),
            self.bias_walk_sigma ** 2 / T * np.eye(3),
            self.bias_walk_sigma ** 2 / T * np.eye(3),
            self.pixel_sigma,
        )

    def full_scale(self):
        """The publication-scale configuration (long run, many trials)."""
        return replace(self, duration=250.0, imu_rate=200.0, cam_rate=10.0,
                       imu_sigma=0.01, bias_walk_sigma=0.001,
                       landmark_count=60, mc_trials=100, window_size=10)


@dataclass
class EstimatorConfig:
    tag: Param
    handling: str  # "direct" | "preint"
    approximate_group_jacobian: bool
    window_size: int = 8

    def __post_init__(self):
        if self.handling not in ("direct", "preint"):
            raise ValueError(f"unknown IMU handling {self.handling!r}")

    @property
    def name(self):
        flag = "approx" if self.approximate_group_jacobian else "exact"
        return f"{self.tag.value}-{self.handling}-{flag}"


def default_estimator_configs(window_size=8):
    """The six benchmarked estimator configurations."""
    out = []
    for tag in (Param.GROUPED, Param.SEPARATE):
        for handling in ("preint", "direct"):
            for approx in (True, False):
                if tag is Param.SEPARATE and not approx:
                    continue
                out.append(EstimatorConfig(tag, handling, approx,
                                           window_size))
    return out


@dataclass
class TrialData:
    """Per-trial measurement bundle with perfect data association.

    ``states`` holds the truth at camera stamps; ``imu_seqs[j]`` the IMU
    run from stamp j to stamp j+1; ``visual[j]`` the stereo observations
    at stamp j.
    """

    stamps: np.ndarray
    states: list
    landmarks: dict
    imu_seqs: list
    visual: list


def _make_landmarks(config):
    """Two rings equally spaced on the surrounding cylinder."""
    per_ring = (config.landmark_count + 1) // 2
    out = {}
    for i in range(config.landmark_count):
        ring, slot = divmod(i, per_ring)
        angle = 2.0 * math.pi * slot / per_ring
        z = (0.5 if ring == 0 else -0.5) * config.height_span
        out[i] = np.array([
            config.cylinder_radius * math.cos(angle),
            config.cylinder_radius * math.sin(angle), z,
        ])
    return out


def _observe(config, X, landmarks):
    """Noise-free stereo observations honoring the visibility model."""
    obs = []
    for lid in sorted(landmarks):
        for side in ("left", "right"):
            cam = config.rig.camera(side)
            p_c = vision_mod.to_camera_frame(landmarks[lid], X, cam)
            if p_c[2] <= 0.1:
                continue
            y = vision_mod.project(p_c)
            if not cam.in_pixel_plane(y):
                continue
            obs.append(vision_mod.VisualMeasurement(y, lid, -1, side))
    return obs


def generate_truth(config):
    """Noise-free TrialData; truth is integrated by the process model."""
    T = config.step
    n_per = config.steps_per_frame
    n_frames = int(round(config.duration * config.cam_rate)) + 1
    w = config.angular_rate
    wz = 2.0 * math.pi * config.vertical_freq
    R, A = config.radius, config.vertical_amplitude
    g = config.gravity

    def heading(t):
        return lie.so3_exp([0.0, 0.0, w * t])

    def accel_world(t):
        return np.array([-R * w * w * math.cos(w * t),
                         -R * w * w * math.sin(w * t),
                         -A * wz * wz * math.sin(wz * t)])

    X = ImuState(Param.GROUPED, heading(0.0),
                 np.array([0.0, R * w, A * wz]),
                 np.array([R, 0.0, 0.0]), np.zeros(6))
    states = [X]
    seqs = []
    for j in range(n_frames - 1):
        seq = []
        for s in range(n_per):
            t = (j * n_per + s) * T
            u_g = lie.so3_log(X.rotation.T @ heading(t + T)) / T
            u_a = X.rotation.T @ (accel_world(t) - g)
            m = imu_mod.ImuMeasurement(u_g, u_a, t)
            seq.append(m)
            X = imu_mod.propagate_one_step(X, m, T, g)
        seqs.append(seq)
        states.append(X)
    landmarks = _make_landmarks(config)
    visual = [_observe(config, Xk, landmarks) for Xk in states]
    stamps = np.arange(n_frames) / config.cam_rate
    return TrialData(stamps, states, landmarks, seqs, visual)


def corrupt(truth, config, seed):
    """Noisy copy of a trial: IMU white noise, bias random walks from
    zero, and pixel noise; noisy pixels leaving the image are dropped.

    Truth states keep their navigation part but carry the walked bias,
    so estimation errors include the bias states.
    """
    rng = np.random.default_rng(seed)
    T = config.step
    sig_u = config.imu_sigma
    sig_w = config.bias_walk_sigma
    bias = np.zeros(6)
    states = []
    seqs = []
    for j, seq in enumerate(truth.imu_seqs):
        states.append(replace(truth.states[j], bias=bias.copy()))
        noisy = []
        for m in seq:
            noisy.append(imu_mod.ImuMeasurement(
                m.gyro + bias[:3] + sig_u * rng.normal(size=3),
                m.accel + bias[3:] + sig_u * rng.normal(size=3),
                m.stamp))
            bias = bias + sig_w * rng.normal(size=6)
        seqs.append(noisy)
    states.append(replace(truth.states[-1], bias=bias.copy()))
    visual = []
    for obs in truth.visual:
        frame = []
        for z in obs:
            cam = config.rig.camera(z.camera)
            sigma = np.array([config.pixel_sigma / cam.f_u,
                              config.pixel_sigma / cam.f_v])
            y = z.y + sigma * rng.normal(size=2)
            if not cam.in_pixel_plane(y):
                continue
            frame.append(replace(z, y=y))
        visual.append(frame)
    return TrialData(truth.stamps, states, truth.landmarks, seqs, visual)


@dataclass
class TrialResult:
    stamps: np.ndarray
    estimates: list   # newest-state estimate per camera stamp
    covariances: list  # matching 15x15 covariance blocks
    truths: list      # truth states in the estimator's parameterization
    seed: int


class TrialFailure(RuntimeError):
    def __init__(self, seed, stamp, cause):
        super().__init__(f"trial seed={seed} failed at t={stamp:.2f}s: "
                         f"{cause}")
        self.seed = seed
        self.cause = cause


def _frame_visual(data, j):
    """Map landmark id -> {side: measurement} for camera stamp j."""
    per_lm = {}
    for z in data.visual[j]:
        per_lm.setdefault(z.landmark_id, {})[z.camera] = z
    return per_lm


def _imu_term(est, i, j, X_i, seq, Ts, config):
    if est.handling == "direct":
        return solver_mod.ImuDirectTerm.create(
            i, j, X_i, seq, config.gravity, config.noise,
            approximate_group_jacobian=est.approximate_group_jacobian,
            Ts=Ts)
    rmi = imu_mod.rmi_accumulate_sequence(
        imu_mod.Rmi.fresh(est.tag, X_i.bias), seq, Ts, config.noise)
    return solver_mod.ImuPreintTerm.create(
        i, j, rmi, config.gravity,
        approximate_group_jacobian=est.approximate_group_jacobian)


def run_trial(config, est, seed, truth=None):
    """Full sliding-window run over one noisy trial.

    Landmarks are initialized by stereo triangulation at their first
    stereo sighting, anchored there, and re-created under a fresh id if
    they are observed again after their anchor has been marginalized.
    """
    if truth is None:
        truth = generate_truth(config)
    data = corrupt(truth, config, seed)
    rng = np.random.default_rng([seed, 1])
    Ts = [config.step] * config.steps_per_frame
    gn = solver_mod.GnConfig(rel_cost_tol=1e-5)

    truths = [X.with_tag(est.tag) for X in data.states]
    prior_weight = np.diag(1.0 / PRIOR_SIGMAS ** 2)
    # The initial belief is a draw around the truth with the prior's own
    # covariance: centring the prior on the truth itself would start every
    # trial with near-zero error against a full-size covariance and bias
    # the NEES low.
    X0 = oplus(truths[0], PRIOR_SIGMAS * rng.normal(size=15))
    prior = solver_mod.PriorTerm({0: X0}, prior_weight, [0], [])
    window = solver_mod.Window(SlamState({0: X0}, {}), [], prior,
                               window_size=est.window_size, gn=gn)

    tracked = {}  # true landmark id -> (est landmark id, anchor imu id)
    next_lm = FIRST_LANDMARK_ID
    estimates, covariances = [], []

    def visual_package(j, surviving_imu_ids):
        """Terms plus new landmarks for camera stamp j."""
        nonlocal next_lm
        terms, new_lms = [], {}
        for true_id, sides in _frame_visual(data, j).items():
            entry = tracked.get(true_id)
            if entry is not None and entry[1] not in surviving_imu_ids:
                entry = None  # anchor is being marginalized
            if entry is None:
                if len(sides) < 2:
                    continue  # need a stereo pair to initialize
                try:
                    a, b, lam = vision_mod.triangulate_stereo(
                        sides["left"].y, sides["right"].y, config.rig)
                except ValueError:
                    continue
                entry = (next_lm, j)
                next_lm += 1
                tracked[true_id] = entry
                new_lms[entry[0]] = Landmark(a, b, lam, anchor_id=j)
            lid, anchor = entry
            for z in sides.values():
                terms.append(solver_mod.VisualTerm(
                    replace(z, landmark_id=lid, state_id=j),
                    anchor_id=anchor, rig=config.rig))
        return terms, new_lms

    def record(window, j):
        try:
            state, cov, _ = solver_mod.gauss_newton(window)
        except (np.linalg.LinAlgError, imu_mod.SingularCovarianceError,
                ValueError) as exc:
            raise TrialFailure(seed, data.stamps[j], exc) from exc
        index, _ = window.state.block_index()
        off, width = index[j]
        estimates.append(state.imu_states[j])
        covariances.append(cov[off:off + width, off:off + width])
        return solver_mod.Window(state, window.terms, window.prior,
                                 window.window_size, window.gn)

    terms0, lms0 = visual_package(0, {0})
    window = solver_mod.Window(SlamState({0: X0}, lms0), terms0, prior,
                               window_size=est.window_size, gn=gn)
    window = record(window, 0)

    for j in range(1, len(data.stamps)):
        surviving = set(window.state.imu_ids) | {j}
        if len(window.state.imu_states) >= window.window_size:
            surviving.discard(min(window.state.imu_states))
        X_prev = window.state.imu_states[j - 1]
        X_init = imu_mod.propagate_sequence(
            X_prev, data.imu_seqs[j - 1], Ts, config.gravity)
        terms = [_imu_term(est, j - 1, j, X_prev, data.imu_seqs[j - 1],
                           Ts, config)]
        vis_terms, new_lms = visual_package(j, surviving)
        window = solver_mod.slide(window, j, X_init,
                                  terms + vis_terms, new_lms)
        window = record(window, j)

    return TrialResult(data.stamps, estimates, covariances, truths, seed)


@dataclass
class MonteCarloResult:
    trials: list      # successful TrialResults
    failures: list    # TrialFailure instances


def run_monte_carlo(config, est, trials=None, base_seed=None,
                    truth=None):
    """Independent seeded trials; failures are collected, not fatal."""
    n = config.mc_trials if trials is None else trials
    if n < 1:
        raise ValueError("need at least one trial")
    base = config.seed if base_seed is None else base_seed
    if truth is None:
        truth = generate_truth(config)
    ok, bad = [], []
    for i in range(n):
        try:
            ok.append(run_trial(config, est, base + i, truth=truth))
        except TrialFailure as exc:
            bad.append(exc)
    return MonteCarloResult(ok, bad)
