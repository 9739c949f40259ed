import numpy as np
import pytest

from swfvi import consistency, imu, lie, solver, vision
from swfvi.state import (
    ImuState,
    Landmark,
    Param,
    SlamState,
    nullspace_block,
    slam_nullspace,
)

rng = np.random.default_rng(11)
GRAVITY = np.array([0.0, 0.0, -9.81])
NOISE = imu.NoiseParams.from_sigmas(0.01, 0.01, 0.001, 0.001, 1.0)
RIG = vision.default_rig()
T_STEP = 0.01
STEPS = 20


def make_trajectory(tag, n_states, seed=5):
    """Noise-free truth generated by the one-step model itself."""
    local = np.random.default_rng(seed)
    X = ImuState(tag, lie.so3_exp([0.05, -0.1, 0.2]),
                 np.array([0.5, 0.0, 0.1]),
                 np.array([0.0, 1.0, 0.0]), np.zeros(6))
    states = [X]
    seqs = []
    omega = np.array([0.05, -0.02, 0.3])
    for k in range(n_states - 1):
        seq = []
        for s in range(STEPS):
            a_w = 0.4 * np.array([np.sin(0.7 * (k + s * T_STEP)),
                                  np.cos(0.5 * (k + s * T_STEP)), 0.1])
            seq.append(imu.ImuMeasurement(
                omega, X.rotation.T @ (a_w - GRAVITY), k + s * T_STEP))
            X = imu.propagate_one_step(X, seq[-1], T_STEP, GRAVITY)
        seqs.append(seq)
        states.append(X)
    lm_world = [
        states[0].rotation @ np.array(
            [4.0 + local.uniform(0, 4), local.uniform(-3, 3),
             local.uniform(-1, 1)]) + states[0].position
        for _ in range(10)
    ]
    return states, seqs, lm_world


def stereo_terms(lm_world, states, anchor_id, observer_ids,
                 noise_rng=None):
    """Stereo observations of one batch of landmarks."""
    sigma = 1.0 / RIG.left.f_u

    def observe(p_w, sid, side):
        y = vision.project(vision.to_camera_frame(
            p_w, states[sid], RIG.camera(side)))
        if noise_rng is not None:
            y = y + sigma * noise_rng.normal(size=2)
        return y

    landmarks = {}
    terms = []
    for j, p_w in enumerate(lm_world):
        lid = 1000 * (anchor_id + 1) + j
        a, b, lam = vision.triangulate_stereo(
            observe(p_w, anchor_id, "left"),
            observe(p_w, anchor_id, "right"), RIG)
        landmarks[lid] = Landmark(a, b, lam, anchor_id=anchor_id)
        for sid in observer_ids:
            for side in ("left", "right"):
                terms.append(solver.VisualTerm(
                    vision.VisualMeasurement(
                        observe(p_w, sid, side), lid, sid, side),
                    anchor_id=anchor_id, rig=RIG))
    return landmarks, terms


def make_window(tag, handling, approx, n_states=3, prior_weight=None):
    states, seqs, lm_world = make_trajectory(tag, n_states)
    imu_terms = []
    for k, seq in enumerate(seqs):
        if handling == "direct":
            imu_terms.append(solver.ImuDirectTerm.create(
                k, k + 1, states[k], seq, GRAVITY, NOISE,
                approximate_group_jacobian=approx, Ts=[T_STEP] * STEPS))
        else:
            rmi = imu.rmi_accumulate_sequence(
                imu.Rmi.fresh(tag, states[k].bias), seq,
                [T_STEP] * STEPS, NOISE)
            imu_terms.append(solver.ImuPreintTerm.create(
                k, k + 1, rmi, GRAVITY,
                approximate_group_jacobian=approx))
    landmarks, vis_terms = stereo_terms(lm_world, states, 0,
                                        range(n_states))
    prior = None
    if prior_weight is not None:
        prior = solver.PriorTerm({0: states[0]},
                                 prior_weight * np.eye(15), [0], [])
    st = SlamState({k: X for k, X in enumerate(states)}, landmarks)
    return solver.Window(st, imu_terms + vis_terms, prior)


# Expected same-point (R1) verdicts over the eight configurations:
# only direct integration with exact group Jacobians violates it.
R1_TABLE = [
    ("direct", Param.GROUPED, True, "PASS"),
    ("direct", Param.GROUPED, False, "FAIL"),
    ("direct", Param.SEPARATE, True, "PASS"),
    ("direct", Param.SEPARATE, False, "FAIL"),
    ("preint", Param.GROUPED, True, "PASS"),
    ("preint", Param.GROUPED, False, "PASS"),
    ("preint", Param.SEPARATE, True, "PASS"),
    ("preint", Param.SEPARATE, False, "PASS"),
]


@pytest.mark.parametrize("handling,tag,approx,expected", R1_TABLE)
def test_r1_configuration_table(handling, tag, approx, expected):
    window = make_window(tag, handling, approx)
    report = consistency.check_r1(window, trials=5, seed=3)
    assert report.verdict == expected, report.to_text()


def test_r1_visual_terms_always_pass():
    window = make_window(Param.SEPARATE, "direct", False)
    report = consistency.check_r1(window, trials=5, seed=3)
    vis = [e for e in report.entries if e.kind == "visual"]
    assert vis and max(e.max_abs for e in vis) < consistency.PASS_TOL


def test_r1_excludes_prior():
    window = make_window(Param.GROUPED, "preint", False, prior_weight=1e4)
    report = consistency.check_r1(window, trials=3, seed=1)
    assert all(e.kind != "prior" for e in report.entries)
    assert report.verdict == "PASS"


@pytest.mark.parametrize("handling,approx", [("preint", False),
                                             ("direct", True)])
def test_r2_grouped_passes(handling, approx):
    window = make_window(Param.GROUPED, handling, approx)
    report = consistency.check_r2(window, trials=5, seed=7)
    assert report.verdict == "PASS", report.to_text()


@pytest.mark.parametrize("handling,approx", [("preint", False),
                                             ("direct", True)])
def test_r2_separate_fails(handling, approx):
    window = make_window(Param.SEPARATE, handling, approx)
    report = consistency.check_r2(window, trials=5, seed=7)
    assert report.verdict == "FAIL", report.to_text()


def test_r2_coincident_points_equals_r1_bitwise():
    window = make_window(Param.SEPARATE, "preint", False)
    r1 = consistency.check_r1(window, trials=4, seed=9)
    r2 = consistency.check_r2(window, trials=4, seed=9, coincident=True)
    assert [e.max_abs for e in r2.entries] == [
        e.max_abs for e in r1.entries]
    assert r2.aggregate == r1.aggregate


def test_grouped_nullspace_state_independent():
    blocks = [
        nullspace_block(
            ImuState(Param.GROUPED, lie.so3_exp(rng.normal(size=3)),
                     rng.normal(size=3), rng.normal(size=3),
                     rng.normal(size=6)), GRAVITY)
        for _ in range(4)
    ]
    for N in blocks[1:]:
        np.testing.assert_array_equal(N, blocks[0])


def test_stacked_nullspace_landmark_rows_zero():
    window = make_window(Param.SEPARATE, "preint", True)
    N = slam_nullspace(window.state, GRAVITY)
    n_imu = 15 * len(window.state.imu_ids)
    np.testing.assert_array_equal(N[n_imu:], 0.0)


def test_report_text_contains_verdict():
    window = make_window(Param.GROUPED, "preint", False)
    text = consistency.check_r1(window, trials=2, seed=0).to_text()
    assert "PASS" in text and "aggregate" in text


# ------------------------------------------------- information diagnostic


def test_information_gain_zero_without_prior():
    window = make_window(Param.GROUPED, "direct", True)
    gains = consistency.information_gain([window])
    assert len(gains) == 1 and gains[0].shape == (4,)
    # scale-free: compare against the total information magnitude
    sys = solver.assemble(window.state, window.terms)
    scale = np.abs(sys.H.T @ (sys.W @ sys.H)).max()
    assert np.abs(gains[0]).max() / scale < 1e-8


def run_sliding(tag, handling, approx, n_states=10, window_size=3,
                seed=21):
    """Noisy sliding-window run; returns the post-solve window per step."""
    local = np.random.default_rng(seed)
    states, seqs, _ = make_trajectory(tag, n_states)
    seqs = [
        [imu.ImuMeasurement(m.gyro + 0.01 * local.normal(size=3),
                            m.accel + 0.01 * local.normal(size=3),
                            m.stamp) for m in seq]
        for seq in seqs
    ]
    lm_batches = []
    for k in range(n_states - 1):
        pts = [states[k].rotation @ np.array(
            [4.0 + local.uniform(0, 3), local.uniform(-3, 3),
             local.uniform(-1, 1)]) + states[k].position
            for _ in range(8)]
        lm_batches.append(pts)

    def imu_term(k):
        if handling == "direct":
            return solver.ImuDirectTerm.create(
                k, k + 1, states[k], seqs[k], GRAVITY, NOISE,
                approximate_group_jacobian=approx, Ts=[T_STEP] * STEPS)
        rmi = imu.rmi_accumulate_sequence(
            imu.Rmi.fresh(tag, states[k].bias), seqs[k],
            [T_STEP] * STEPS, NOISE)
        return solver.ImuPreintTerm.create(
            k, k + 1, rmi, GRAVITY, approximate_group_jacobian=approx)

    # weak global anchor so the diagnostic is not swamped by the prior
    prior = solver.PriorTerm({0: states[0]}, 1e-2 * np.eye(15), [0], [])
    lms0, vis0 = stereo_terms(lm_batches[0], states, 0, [0, 1],
                              noise_rng=local)
    window = solver.Window(SlamState({0: states[0], 1: states[1]}, lms0),
                           [imu_term(0)] + vis0, prior,
                           window_size=window_size)
    collected = []
    for k in range(2, n_states):
        lms, vis = stereo_terms(lm_batches[k - 1], states, k - 1,
                                [k - 1, k], noise_rng=local)
        window = solver.slide(window, k, states[k],
                              [imu_term(k - 1)] + vis, lms)
        est, _, _ = solver.gauss_newton(window)
        window = solver.Window(est, window.terms, window.prior,
                               window.window_size, window.gn)
        collected.append(window)
    return collected


def test_information_gain_bounded_for_grouped_preint():
    windows = run_sliding(Param.GROUPED, "preint", False)
    traces = [g.sum() for g in consistency.information_gain(windows)]
    # stays pinned to the initial anchor prior's contribution
    assert all(t <= 2.0 * traces[0] + 1e-9 for t in traces)


def test_information_gain_grows_for_separate_direct():
    windows = run_sliding(Param.SEPARATE, "direct", False)
    traces = [g.sum() for g in consistency.information_gain(windows)]
    # every window after the first marginalization sits far above the
    # pre-marginalization level, and the run ends higher than it began
    assert all(t > 50.0 * traces[0] for t in traces[1:])
    assert traces[-1] > traces[0]
