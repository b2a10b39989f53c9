"""Lifting, DARE, condensed QP, box solver, tracking loop, meta-inference."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from quadratic_objectives import QuadraticObjective
from scipy.linalg import solve_discrete_are

from metanssm.mpc import (
    CompactModel,
    DareNonConvergenceError,
    MpcSpec,
    build_qp,
    condense,
    default_mpc_spec,
    lift,
    meta_inference,
    mpc_action,
    power_iteration_bound,
    receding_horizon_track,
    save_trace,
    solve_dare,
    solve_qp_box,
    terminal_weight,
)
from metanssm.nssm import Nssm, NssmConfig
from metanssm.paramvec import Layout, ParamVector
from metanssm.plants import PlantParams

from test_nssm import params_from


def dare_residual(p, a, b, q, r):
    pb = p @ b
    closed = a.T @ (p - pb @ np.linalg.solve(r + b.T @ pb, pb.T)) @ a + q
    return np.max(np.abs(p - closed))


def scalar_servo_model():
    """Exact NSSM copy of the linear plant x+ = 0.9 x + 0.5 u, y = x."""
    c = NssmConfig(n_u=1, n_y=1, n_z=1, H=1, T=1, hidden_width=2, hidden_layers=1)
    model = Nssm(c)
    params = params_from(
        model,
        {
            "enc_w0": [[0.0, 1.0], [0.0, -1.0]],  # [relu(y), relu(-y)]
            "enc_wz": [[1.0, -1.0]],              # z = y exactly
            "a_z": [[0.9]],
            "b_z": [[0.5]],
            "c_z": [[1.0]],
        },
    )
    return model, params


# -- lift --------------------------------------------------------------------

def test_lift_scalar_substitution():
    c = NssmConfig(n_u=1, n_y=1, n_z=1, H=1, T=1, hidden_width=1, hidden_layers=1)
    model = Nssm(c)
    params = params_from(model, {"a_z": [[0.7]], "b_z": [[0.4]], "c_z": [[2.0]]})
    cm = lift(params)
    np.testing.assert_allclose(cm.a, [[0.7, 0.0], [1.4, 0.0]])
    np.testing.assert_allclose(cm.b, [[0.4], [0.8]])


def test_lift_zero_matrices():
    c = NssmConfig(n_u=2, n_y=2, n_z=3, H=1, T=1, hidden_width=1, hidden_layers=1)
    cm = lift(params_from(Nssm(c), {}))
    np.testing.assert_array_equal(cm.a, 0.0)
    np.testing.assert_array_equal(cm.b, 0.0)
    assert cm.n_s == 5 and cm.n_u == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=100_000))
def test_lift_reproduces_rollout(seed):
    cfg = NssmConfig(n_u=2, n_y=2, n_z=4, H=1, T=10, hidden_width=3, hidden_layers=1)
    model = Nssm(cfg)
    rng = np.random.default_rng(seed)
    params = model.init_params(rng)
    z0 = rng.normal(size=cfg.n_z)
    u = rng.normal(size=(10, cfg.n_u))
    direct = model.rollout(params, z0, u)
    cm = lift(params)
    w = params.unflatten()
    s = np.concatenate([z0, w["c_z"] @ z0])
    lifted = np.empty_like(direct)
    for k in range(10):
        s = cm.a @ s + cm.b @ u[k]
        lifted[k] = s[cfg.n_z :]
    np.testing.assert_allclose(lifted, direct, atol=1e-12)


# -- DARE --------------------------------------------------------------------

def test_dare_zero_dynamics_returns_qs():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    q = m @ m.T
    p = solve_dare(np.zeros((3, 3)), rng.normal(size=(3, 1)), q, np.eye(1))
    np.testing.assert_array_equal(p, 0.5 * (q + q.T))


def test_dare_scalar_golden_ratio():
    p = solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    assert abs(p[0, 0] - (1.0 + np.sqrt(5.0)) / 2.0) <= 1e-9


def test_dare_lyapunov_series_special_case():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    a *= 0.8 / np.max(np.abs(np.linalg.eigvals(a)))
    m = rng.normal(size=(4, 4))
    q = m @ m.T
    p = solve_dare(a, np.zeros((4, 1)), q, np.eye(1), tol=1e-13)
    series = np.zeros_like(q)
    term = q.copy()
    for _ in range(3000):
        series += term
        if np.max(np.abs(term)) < 1e-14:
            break
        term = a.T @ term @ a
    np.testing.assert_allclose(p, series, atol=1e-8)


def test_dare_matches_scipy_on_stabilizable_systems():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a = rng.normal(size=(3, 3))
        a *= 0.95 / np.max(np.abs(np.linalg.eigvals(a)))
        b = rng.normal(size=(3, 1))
        m = rng.normal(size=(3, 3))
        q = m @ m.T + 0.1 * np.eye(3)
        r = np.eye(1)
        mine = solve_dare(a, b, q, r, tol=1e-12)
        ref = solve_discrete_are(a, b, q, r)
        np.testing.assert_allclose(mine, ref, atol=1e-7)


def test_dare_residual_and_psd_certificates():
    rng = np.random.default_rng(13)
    tol = 1e-10
    for _ in range(10):
        a = rng.normal(size=(4, 4))
        a *= rng.uniform(0.3, 0.95) / np.max(np.abs(np.linalg.eigvals(a)))
        b = rng.normal(size=(4, 2))
        m = rng.normal(size=(4, 4))
        q = m @ m.T
        r = np.eye(2)
        p = solve_dare(a, b, q, r, tol=tol)
        assert dare_residual(p, a, b, q, r) <= 10.0 * tol
        np.testing.assert_allclose(p, p.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(p)) >= -1e-10


@pytest.mark.parametrize("a_val", [1.5, 2.0])
def test_dare_unstabilizable_raises(a_val):
    with pytest.raises(DareNonConvergenceError):
        solve_dare(np.array([[a_val]]), np.zeros((1, 1)), np.eye(1), np.eye(1))


def test_terminal_weight_fallback_is_q():
    cm = CompactModel(a=np.array([[1.5, 0.0], [1.5, 0.0]]), b=np.zeros((2, 1)), n_z=1, n_y=1)
    spec = MpcSpec(N=5, Q=2.0 * np.eye(1), R=np.eye(1), u_min=[-1.0], u_max=[1.0])
    p_term, ok = terminal_weight(cm, spec)
    assert not ok
    np.testing.assert_array_equal(p_term, 2.0 * np.eye(1))


# -- MpcSpec ------------------------------------------------------------------

def test_mpc_spec_validation():
    with pytest.raises(ValueError, match="positive definite"):
        MpcSpec(N=5, Q=np.eye(1), R=np.zeros((1, 1)), u_min=[-1.0], u_max=[1.0])
    with pytest.raises(ValueError, match="semidefinite"):
        MpcSpec(N=5, Q=-np.eye(1), R=np.eye(1), u_min=[-1.0], u_max=[1.0])
    with pytest.raises(ValueError, match="u_min"):
        MpcSpec(N=5, Q=np.eye(1), R=np.eye(1), u_min=[1.0], u_max=[-1.0])
    with pytest.raises(ValueError, match="horizon"):
        MpcSpec(N=0, Q=np.eye(1), R=np.eye(1), u_min=[-1.0], u_max=[1.0])


def test_default_mpc_specs():
    vdp = default_mpc_spec("vdp")
    assert vdp.N == 20 and vdp.n_y == 2
    np.testing.assert_array_equal(vdp.u_min, [-5.0])
    pend = default_mpc_spec("pendulum")
    assert pend.n_y == 1
    np.testing.assert_array_equal(pend.u_max, [2.0])


# -- condensed QP ---------------------------------------------------------------

def qp_toy_model():
    c = NssmConfig(n_u=1, n_y=1, n_z=1, H=1, T=1, hidden_width=1, hidden_layers=1)
    model = Nssm(c)
    params = params_from(model, {"a_z": [[0.8]], "b_z": [[0.5]], "c_z": [[2.0]]})
    return lift(params)


def test_build_qp_single_step_hand_minimizer():
    cm = qp_toy_model()
    spec = MpcSpec(
        N=1, Q=np.zeros((1, 1)), R=0.4 * np.eye(1), u_min=[-10.0], u_max=[10.0], P=2.0 * np.eye(1)
    )
    s0 = np.array([0.3, 0.6])
    qp = build_qp(cm, s0, np.array([0.2]), spec, np.array([[1.0]]))
    # J(u) = 0.4 (u - 0.2)^2 + 2 (2*(0.8*0.3 + 0.5*u) - 1)^2, minimizer by calculus
    expect = (0.4 * 0.2 + 2.0 * 1.0 * (1.0 - 0.48)) / (0.4 + 2.0 * 1.0**2)
    np.testing.assert_allclose(qp.hq, [[4.8]])
    np.testing.assert_allclose(qp.f, [-4.8 * expect])
    u = solve_qp_box(qp.hq, qp.f, qp.lo, qp.hi, tol=1e-12)
    np.testing.assert_allclose(u, [expect], atol=1e-9)


def test_build_qp_free_response_reference_keeps_input_constant():
    cfg = NssmConfig(n_u=1, n_y=2, n_z=3, H=2, T=5, hidden_width=4, hidden_layers=1)
    model = Nssm(cfg)
    params = model.init_params(np.random.default_rng(3))
    cm = lift(params)
    spec = MpcSpec(N=8, Q=np.eye(2), R=0.1 * np.eye(1), u_min=[-5.0], u_max=[5.0])
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=3)
    w = params.unflatten()
    s0 = np.concatenate([z0, w["c_z"] @ z0])
    u_prev = np.array([0.7])
    s = s0.copy()
    ref = np.empty((8, 2))
    for k in range(8):
        s = cm.a @ s + cm.b @ u_prev
        ref[k] = s[3:]
    p_term, _ = terminal_weight(cm, spec)
    qp = build_qp(cm, s0, u_prev, spec, ref, p_term=p_term)
    u = solve_qp_box(qp.hq, qp.f, qp.lo, qp.hi, iters=2000, tol=1e-12)
    np.testing.assert_allclose(u, np.full(8, 0.7), atol=1e-6)


def test_build_qp_hessian_matches_fd_of_independent_cost():
    cfg = NssmConfig(n_u=2, n_y=1, n_z=2, H=1, T=1, hidden_width=1, hidden_layers=1)
    model = Nssm(cfg)
    rng = np.random.default_rng(11)
    params = model.init_params(rng)
    cm = lift(params)
    N = 3
    p_term = np.array([[1.7]])
    spec = MpcSpec(
        N=N,
        Q=2.0 * np.eye(1),
        R=np.array([[0.3, 0.05], [0.05, 0.2]]),
        u_min=[-4.0, -4.0],
        u_max=[4.0, 4.0],
        P=p_term,
    )
    s0 = rng.normal(size=cm.n_s)
    u_prev = rng.normal(size=2)
    ref = rng.normal(size=(N, 1))

    def cost(u_flat):
        s = s0.copy()
        prev = u_prev.copy()
        total = 0.0
        for k in range(N):
            uk = u_flat[2 * k : 2 * k + 2]
            s = cm.a @ s + cm.b @ uk
            yerr = s[2:] - ref[k]
            wk = spec.Q if k < N - 1 else p_term
            total += float(yerr @ wk @ yerr)
            du = uk - prev
            total += float(du @ spec.R @ du)
            prev = uk
        return total

    qp = build_qp(cm, s0, u_prev, spec, ref)
    n = 2 * N
    h = 1e-3
    fd_h = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            probe = np.zeros(n)
            probe[i] += h
            probe[j] += h
            pp = cost(probe)
            probe[j] -= 2 * h
            pm = cost(probe)
            probe[i] -= 2 * h
            mm = cost(probe)
            probe[j] += 2 * h
            mp = cost(probe)
            fd_h[i, j] = (pp - pm - mp + mm) / (4 * h * h)
    np.testing.assert_allclose(qp.hq, fd_h, atol=1e-8)
    fd_g0 = np.empty(n)
    for i in range(n):
        probe = np.zeros(n)
        probe[i] = h
        up = cost(probe)
        probe[i] = -h
        dn = cost(probe)
        fd_g0[i] = (up - dn) / (2 * h)
    np.testing.assert_allclose(qp.f, fd_g0, atol=1e-8)


def test_build_qp_dimension_checks():
    cm = qp_toy_model()
    spec = MpcSpec(N=2, Q=np.eye(1), R=np.eye(1), u_min=[-1.0], u_max=[1.0], P=np.eye(1))
    with pytest.raises(ValueError, match="s0"):
        build_qp(cm, np.zeros(3), np.zeros(1), spec, np.zeros((2, 1)))
    with pytest.raises(ValueError, match="u_prev"):
        build_qp(cm, np.zeros(2), np.zeros(2), spec, np.zeros((2, 1)))
    with pytest.raises(ValueError, match="reference"):
        build_qp(cm, np.zeros(2), np.zeros(1), spec, np.zeros((2, 3)))


def test_reference_shorter_than_horizon_holds_last_value():
    cm = qp_toy_model()
    spec = MpcSpec(N=4, Q=np.eye(1), R=np.eye(1), u_min=[-1.0], u_max=[1.0], P=np.eye(1))
    short = build_qp(cm, np.zeros(2), np.zeros(1), spec, np.array([[0.5], [0.25]]))
    full = build_qp(
        cm, np.zeros(2), np.zeros(1), spec, np.array([[0.5], [0.25], [0.25], [0.25]])
    )
    np.testing.assert_array_equal(short.f, full.f)


# -- box QP solver -----------------------------------------------------------------

def random_spd(rng, n, shift=1.0):
    m = rng.normal(size=(n, n))
    return m @ m.T + shift * np.eye(n)


def test_qp_unconstrained_matches_direct_solve():
    rng = np.random.default_rng(17)
    for _ in range(5):
        h = random_spd(rng, 8)
        f = rng.normal(size=8)
        u = solve_qp_box(h, f, np.full(8, -1e9), np.full(8, 1e9), iters=5000, tol=1e-10)
        np.testing.assert_allclose(u, -np.linalg.solve(h, f), atol=1e-6)


def test_qp_minimizer_outside_box_lands_on_bound():
    u = solve_qp_box(np.array([[2.0]]), np.array([-10.0]), np.array([-1.0]), np.array([1.0]))
    np.testing.assert_array_equal(u, [1.0])
    u = solve_qp_box(np.array([[2.0]]), np.array([10.0]), np.array([-1.0]), np.array([1.0]))
    np.testing.assert_array_equal(u, [-1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=100_000))
def test_qp_kkt_certificate_on_random_boxed_instances(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    h = random_spd(rng, n, shift=0.5)
    f = rng.normal(size=n) * 5.0
    lo = rng.uniform(-2.0, -0.1, size=n)
    hi = rng.uniform(0.1, 2.0, size=n)
    u = solve_qp_box(h, f, lo, hi, iters=4000, tol=1e-9)
    assert np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12)
    g = h @ u + f
    for i in range(n):
        interior_ok = abs(g[i]) <= 1e-6
        at_lo = abs(u[i] - lo[i]) <= 1e-9 and g[i] >= -1e-6
        at_hi = abs(u[i] - hi[i]) <= 1e-9 and g[i] <= 1e-6
        assert interior_ok or at_lo or at_hi


def test_power_iteration_upper_bounds_spectrum():
    rng = np.random.default_rng(23)
    h = random_spd(rng, 12)
    lam = power_iteration_bound(h)
    assert lam >= np.max(np.linalg.eigvalsh(h)) * 0.999


def test_qp_warm_start_returns_same_solution():
    rng = np.random.default_rng(29)
    h = random_spd(rng, 6)
    f = rng.normal(size=6)
    lo, hi = np.full(6, -0.5), np.full(6, 0.5)
    cold = solve_qp_box(h, f, lo, hi, iters=4000, tol=1e-11)
    warm = solve_qp_box(h, f, lo, hi, iters=4000, tol=1e-11, u0=cold + 0.3)
    np.testing.assert_allclose(warm, cold, atol=1e-8)


# -- mpc_action ----------------------------------------------------------------------

def test_mpc_action_free_response_reference_returns_u_prev():
    cfg = NssmConfig(n_u=1, n_y=2, n_z=3, H=4, T=5, hidden_width=6, hidden_layers=1)
    model = Nssm(cfg)
    params = model.init_params(np.random.default_rng(31))
    rng = np.random.default_rng(32)
    hu = rng.normal(size=(4, 1))
    hy = rng.normal(size=(4, 2))
    u_prev = np.array([0.4])
    spec = MpcSpec(N=6, Q=np.eye(2), R=0.1 * np.eye(1), u_min=[-5.0], u_max=[5.0])
    z = model.encode(params, hu, hy)
    cm = lift(params)
    s = np.concatenate([z, hy[-1]])
    ref = np.empty((6, 2))
    for k in range(6):
        s = cm.a @ s + cm.b @ u_prev
        ref[k] = s[3:]
    u = mpc_action(model, params, hu, hy, u_prev, spec, ref, qp_iters=3000, qp_tol=1e-11)
    np.testing.assert_allclose(u, u_prev, atol=1e-6)


def test_mpc_action_deterministic():
    cfg = NssmConfig(n_u=1, n_y=1, n_z=2, H=3, T=4, hidden_width=4, hidden_layers=1)
    model = Nssm(cfg)
    params = model.init_params(np.random.default_rng(37))
    rng = np.random.default_rng(38)
    hu, hy = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    spec = default_mpc_spec("pendulum", N=5)
    ref = rng.normal(size=(5, 1))
    a = mpc_action(model, params, hu, hy, np.zeros(1), spec, ref)
    b = mpc_action(model, params, hu, hy, np.zeros(1), spec, ref)
    np.testing.assert_array_equal(a, b)


def test_mpc_action_rejects_short_history():
    model, params = scalar_servo_model()
    spec = default_mpc_spec("pendulum", N=3)
    with pytest.raises(ValueError, match="history"):
        mpc_action(model, params, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(1), spec, np.zeros((3, 1)))


def test_mpc_linear_servo_tracks_constant_reference():
    model, params = scalar_servo_model()
    spec = MpcSpec(N=10, Q=np.eye(1), R=0.1 * np.eye(1), u_min=[-5.0], u_max=[5.0])
    ref = np.full((10, 1), 1.5)
    x = 0.0
    hu = np.zeros((1, 1))
    hy = np.zeros((1, 1))
    u_prev = np.zeros(1)
    reached = None
    for t in range(50):
        u = mpc_action(model, params, hu, hy, u_prev, spec, ref, qp_iters=2000, qp_tol=1e-10)
        x = 0.9 * x + 0.5 * float(u[0])
        hu = np.array([[float(u[0])]])
        hy = np.array([[x]])
        u_prev = u
        if abs(x - 1.5) < 1e-3 and reached is None:
            reached = t
    assert reached is not None and reached < 50
    assert abs(x - 1.5) < 1e-3


# -- receding horizon on real plants ------------------------------------------------

def tracking_fixture(seed=0):
    cfg = NssmConfig(n_u=1, n_y=1, n_z=2, H=3, T=4, hidden_width=8, hidden_layers=1)
    model = Nssm(cfg)
    params = model.init_params(np.random.default_rng(seed))
    plant = PlantParams(kind="pendulum", mass=1.0)
    spec = default_mpc_spec("pendulum", N=8)
    history_u = np.zeros((3, 1))
    history_y = np.full((3, 1), np.pi)
    return model, params, plant, spec, history_u, history_y


def test_receding_horizon_zero_length_episode():
    model, params, plant, spec, hu, hy = tracking_fixture()
    out = receding_horizon_track(
        model, params, plant, spec, np.zeros((0, 1)), hu, hy, x0=np.array([np.pi, 0.0])
    )
    assert len(out) == 0
    assert out.u.shape == (0, 1)
    assert out.mean_err == 0.0


def test_receding_horizon_traces_and_box():
    model, params, plant, spec, hu, hy = tracking_fixture()
    ref = np.zeros((25, 1))
    out = receding_horizon_track(
        model, params, plant, spec, ref, hu, hy, x0=np.array([np.pi, 0.0]),
        noise_std=0.01, rng_seed=7,
    )
    assert len(out) == 25
    assert out.y.shape == (25, 1) and out.u.shape == (25, 1) and out.err.shape == (25,)
    assert np.all(out.u >= -2.0 - 1e-12) and np.all(out.u <= 2.0 + 1e-12)
    np.testing.assert_allclose(out.err, np.abs(out.y[:, 0]))


def test_receding_horizon_reproducible_from_seed():
    model, params, plant, spec, hu, hy = tracking_fixture()
    ref = np.zeros((15, 1))
    kw = dict(noise_std=0.02, explore_std=0.1, rng_seed=11)
    a = receding_horizon_track(model, params, plant, spec, ref, hu, hy, np.array([np.pi, 0.0]), **kw)
    b = receding_horizon_track(model, params, plant, spec, ref, hu, hy, np.array([np.pi, 0.0]), **kw)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.y_measured, b.y_measured)


def test_receding_horizon_explore_noise_changes_inputs_within_box():
    model, params, plant, spec, hu, hy = tracking_fixture()
    ref = np.zeros((15, 1))
    quiet = receding_horizon_track(model, params, plant, spec, ref, hu, hy, np.array([np.pi, 0.0]), rng_seed=3)
    noisy = receding_horizon_track(
        model, params, plant, spec, ref, hu, hy, np.array([np.pi, 0.0]), explore_std=0.5, rng_seed=3
    )
    assert np.max(np.abs(noisy.u - quiet.u)) > 0.0
    assert np.all(np.abs(noisy.u) <= 2.0 + 1e-12)


def test_save_trace_writes_csv_and_summary(tmp_path):
    model, params, plant, spec, hu, hy = tracking_fixture()
    out = receding_horizon_track(
        model, params, plant, spec, np.zeros((5, 1)), hu, hy, np.array([np.pi, 0.0])
    )
    path = tmp_path / "trace.csv"
    save_trace(path, out)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,y_0,yref_0,u_0,err"
    assert len(lines) == 6
    import json

    summary = json.loads((tmp_path / "trace.csv.json").read_text())
    assert summary["mean_err"] == pytest.approx(out.err.mean())
    assert summary["final_err"] == pytest.approx(out.err[-1])
    assert summary["constraint_violations"] == 0


# -- meta_inference --------------------------------------------------------------------

def test_meta_inference_zero_steps_is_identity():
    lay = Layout.of([("w", (4,))])
    omega = ParamVector(np.array([1.0, -2.0, 0.5, 3.0]), lay)
    obj = QuadraticObjective(ParamVector(np.zeros(4), lay))
    out = meta_inference(obj, omega, gamma=1.0, steps=0, lr=0.1)
    np.testing.assert_array_equal(out.values, omega.values)


def test_meta_inference_huge_gamma_pins_parameters():
    lay = Layout.of([("w", (3,))])
    omega = ParamVector(np.array([0.5, -0.5, 1.0]), lay)
    obj = QuadraticObjective(ParamVector(np.full(3, 10.0), lay))
    out = meta_inference(obj, omega, gamma=1e8, steps=50, lr=1e-9)
    np.testing.assert_allclose(out.values, omega.values, atol=1e-4)


def test_meta_inference_quadratic_matches_proximal_point():
    rng = np.random.default_rng(41)
    lay = Layout.of([("w", (6,))])
    omega = ParamVector(rng.normal(size=6), lay)
    c = ParamVector(rng.normal(size=6), lay)
    gamma = 2.0
    out = meta_inference(QuadraticObjective(c), omega, gamma=gamma, steps=400, lr=0.3)
    closed = (c.values + gamma * omega.values) / (1.0 + gamma)
    np.testing.assert_allclose(out.values, closed, atol=1e-8)


def test_meta_inference_segmented_continuation_matches_one_shot():
    """Resuming via start= with the same anchor reproduces the monolithic run."""
    rng = np.random.default_rng(42)
    lay = Layout.of([("w", (5,))])
    omega = ParamVector(rng.normal(size=5), lay)
    obj = QuadraticObjective(ParamVector(rng.normal(size=5), lay))
    full = meta_inference(obj, omega, gamma=1.5, steps=12, lr=0.1)
    part = meta_inference(obj, omega, gamma=1.5, steps=4, lr=0.1)
    part = meta_inference(obj, omega, gamma=1.5, steps=8, lr=0.1, start=part)
    np.testing.assert_array_equal(part.values, full.values)
