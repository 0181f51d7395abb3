import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_logistic
from delayadapt.analysis import (
    LyapunovBundle,
    bundle_from_bcd,
    bundle_from_piag,
    check_integral_bound,
    iterations_to_gap,
    prox_grad_mapping,
    stationarity_sum_bound,
    linear_rate_envelope,
    mapping_sum_bound,
    verify_sequence,
)
from delayadapt.bcd_sim import bcd_run
from delayadapt.dataio import RunTrace
from delayadapt.delay import DelayModel
from delayadapt.errors import ConfigError, SequenceError
from delayadapt.numkit import QuadraticProblem, quadratic_problem, random_quadratic, reference_solution
from delayadapt.piag_sim import piag_run
from delayadapt.stepsize import PolicyConfig, make_policy, step_size_sequence


def brute_step_condition(b):
    """Literal step condition for l in [k - tau_k, k - 1] plus r_k >= 0, with plain products."""
    K = len(b.p)
    Q = [1.0]
    for q in b.q:
        Q.append(Q[-1] * q)
    fails = []
    for k in range(K):
        if b.p[k] == 0:
            continue
        ok = b.r[k] >= -1e-9
        for ell in range(k - b.tau[k], k):
            rhs = b.r[ell] / Q[ell + 1] - sum(b.p[t] / Q[t + 1] for t in range(ell + 1, k))
            ok = ok and b.p[k] / Q[k + 1] <= rhs + 1e-9 / Q[k + 1]
        if not ok:
            fails.append(k)
    return fails


# --------------------------------------------------------------------------
# prox-gradient mapping


def test_mapping_without_regularizer_is_negative_gradient():
    prob = random_quadratic(5, 2, seed=0)
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(prox_grad_mapping(prob, x), -prob.grad(x), rtol=1e-12, atol=1e-12)


def test_mapping_scalar_example():
    prob = quadratic_problem()
    prob.L_hat = 1.0
    assert prox_grad_mapping(prob, np.array([2.0])).tolist() == [-2.0]


def test_mapping_vanishes_at_minimizer():
    prob = small_logistic(n=1, lam1=1e-2)
    assert np.linalg.norm(prox_grad_mapping(prob, prob.x_star)) < 1e-6
    assert np.linalg.norm(prox_grad_mapping(prob, np.zeros(prob.dim))) > 1e-3


@given(st.integers(0, 1000))
def test_mapping_is_lipschitz(seed):
    prob = random_quadratic(4, 1, seed=3, lam1=0.3)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(4), rng.standard_normal(4)
    lhs = np.linalg.norm(prox_grad_mapping(prob, x) - prox_grad_mapping(prob, y))
    assert lhs <= 2 * prob.L_hat * np.linalg.norm(x - y) * (1 + 1e-12)


# --------------------------------------------------------------------------
# bundles


def piag_trace(prob, policy_kind="adaptive2", delay=None, k_max=200, h=0.9, **kw):
    policy = make_policy(policy_kind, prob, algo="piag", h=h, **kw)
    return piag_run(prob, delay or DelayModel("uniform", tau=4, seed=0), policy, k_max)


def test_zero_delay_bundle_is_plain_descent(logistic4):
    trace = piag_trace(logistic4, delay=DelayModel("zero"), k_max=60)
    b = bundle_from_piag(trace, "nonconvex")
    report = verify_sequence(b)
    expected = b.V[:-1] - b.r * b.W - b.X[1:] - b.V[1:]
    np.testing.assert_allclose(report.descent, expected, rtol=1e-14, atol=1e-16)
    assert report.passed


def test_pl_bundle_on_constant_delay_quadratic():
    prob = random_quadratic(3, 2, seed=1)
    policy = PolicyConfig("fixed", gamma_prime=0.9 / prob.L, h=0.9, tau_bound=3)
    trace = piag_run(prob, DelayModel("constant", tau=3), policy, 100)
    b = bundle_from_piag(trace, "pl")
    assert np.all(b.q == b.q[0]) and b.q[0] < 1
    np.testing.assert_allclose(b.Q, b.q[0] ** np.arange(101), rtol=1e-12)
    assert verify_sequence(b).passed


def test_convex_bundle_initial_weight(logistic4):
    trace = piag_trace(logistic4, k_max=30)
    b = bundle_from_piag(trace, "convex")
    h, L = 0.9, logistic4.L
    a0 = h * (h + 1) / (L * (1 - h))
    gap0 = trace.objective[0] - logistic4.p_star
    assert b.V[0] == pytest.approx(a0 * gap0 + 0.5 * trace.dist_sq[0], rel=1e-14)
    assert b.p[0] == pytest.approx(0.5 * trace.gamma[0] * (a0 * L + 1), rel=1e-14)
    assert verify_sequence(b).passed


def test_pl_requires_sigma(logistic4):
    trace = piag_trace(logistic4, k_max=5)
    del trace.config["sigma"]
    with pytest.raises(ConfigError):
        bundle_from_piag(trace, "pl")
    with pytest.raises(ConfigError):
        bundle_from_piag(trace, "strongly-convex")


@pytest.mark.parametrize("case", ["nonconvex", "convex", "pl"])
@pytest.mark.parametrize("kind", ["adaptive1", "adaptive2"])
@pytest.mark.parametrize("delay", ["uniform:6", "burst:8", "cyclic:5", "constant:3"])
def test_adaptive_runs_pass(logistic4, case, kind, delay):
    from delayadapt.delay import parse_delay_spec

    trace = piag_trace(logistic4, kind, delay=parse_delay_spec(delay, seed=2), k_max=150, h=0.99)
    b = bundle_from_piag(trace, case)
    report = verify_sequence(b, trace.tau)
    assert report.passed, report.text()
    assert brute_step_condition(b) == report.step_fails == []


def test_naive_counterexample_fails():
    prob = quadratic_problem()
    trace = piag_run(prob, DelayModel("cyclic", tau=7), make_policy("naive", prob, algo="piag", h=0.99), 700)
    b = bundle_from_piag(trace, "nonconvex")
    report = verify_sequence(b)
    assert not report.passed
    assert report.step_fails and report.contraction_fails
    assert brute_step_condition(b) == report.step_fails
    assert b.V[-1] > b.Q[-1] * b.V[0]


def test_trivial_bundle_passes():
    K = 10
    b = LyapunovBundle(V=np.full(K + 1, 2.0), X=np.zeros(K + 1), W=np.zeros(K), p=np.zeros(K), q=np.ones(K),
                       r=np.zeros(K), tau=np.minimum(np.arange(K), 3))
    report = verify_sequence(b)
    assert report.passed and report.worst_slack == 0.0
    assert all(not v for v in report.fails.values())


@given(st.integers(0, 10**6))
def test_step_slack_agrees_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    K = 25
    tau = np.minimum(rng.integers(0, 6, K), np.arange(K))
    p = rng.uniform(0, 0.2, K) * (rng.random(K) < 0.8)
    b = LyapunovBundle(V=np.ones(K + 1), X=np.zeros(K + 1), W=np.zeros(K), p=p, q=rng.uniform(0.7, 1, K),
                       r=rng.uniform(-0.05, 0.6, K), tau=tau)
    assert verify_sequence(b).step_fails == brute_step_condition(b)


def test_bundle_validation():
    K = 3
    good = dict(V=np.ones(K + 1), X=np.zeros(K + 1), W=np.zeros(K), p=np.zeros(K), q=np.ones(K), r=np.zeros(K),
                tau=np.zeros(K, dtype=int))
    LyapunovBundle(**good)
    for key, bad in [("V", -np.ones(K + 1)), ("W", np.array([0, -1.0, 0])), ("q", np.zeros(K)),
                     ("q", np.full(K, 1.5)), ("tau", np.array([1, 0, 0])), ("p", np.zeros(K + 2)),
                     ("X", np.array([0, np.nan, 0, 0]))]:
        with pytest.raises(SequenceError):
            LyapunovBundle(**{**good, key: bad})
    with pytest.raises(SequenceError):
        verify_sequence(LyapunovBundle(**good), tau=[0, 1, 1])


def test_report_text_and_csv(tmp_path, logistic4):
    report = verify_sequence(bundle_from_piag(piag_trace(logistic4, k_max=20), "nonconvex"))
    assert report.text().startswith("overall: PASS")
    path = tmp_path / "r.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "#passed=true" and len(lines) == 2 + 1 + 21


# --------------------------------------------------------------------------
# BCD ensembles


@pytest.fixture(scope="module")
def bcd_problem():
    return small_logistic(n=1, m=4, d=12, lam1=1e-2)


def bcd_traces(prob, seeds, k_max=300, delay="uniform"):
    policy = make_policy("adaptive2", prob, algo="bcd", h=0.9)
    model = DelayModel("uniform", tau=4, seed=7) if delay == "uniform" else DelayModel("burst", tau=6)
    return [bcd_run(prob, model, policy, k_max, seed=s) for s in seeds]


def test_single_seed_bundle_is_that_trace(bcd_problem):
    (trace,) = bcd_traces(bcd_problem, [0])
    b = bundle_from_bcd([trace])
    assert not b.statistical
    np.testing.assert_array_equal(b.V, trace.objectives_with_final() - bcd_problem.p_star)
    assert np.all(b.q == 1)
    assert np.all(b.p == 0.5 * bcd_problem.L_hat * trace.gamma)


def test_bcd_ensemble_passes(bcd_problem):
    traces = bcd_traces(bcd_problem, range(10))
    b = bundle_from_bcd(traces)
    assert b.statistical
    report = verify_sequence(b)
    assert report.passed, report.text()
    lhs, bound = mapping_sum_bound(traces)
    assert 0 < lhs <= bound


def test_bcd_schedule_mismatch(bcd_problem):
    a = bcd_traces(bcd_problem, [0])[0]
    b = bcd_traces(bcd_problem, [1], delay="burst")[0]
    with pytest.raises(SequenceError):
        bundle_from_bcd([a, b])
    with pytest.raises(SequenceError):
        bundle_from_bcd([])


def test_single_block_bundle_matches_piag_shape():
    prob = random_quadratic(4, 1, seed=2, m=1)
    prob.L_hat = prob.L
    policy = PolicyConfig("fixed", gamma_prime=0.9 / prob.L, h=0.9, tau_bound=2)
    delays = DelayModel("constant", tau=2)
    bt = bcd_run(prob, delays, policy, 50, consistent=True)
    pt = piag_run(prob, delays, policy, 50)
    bb, pb = bundle_from_bcd([bt]), bundle_from_piag(pt, "nonconvex")
    np.testing.assert_allclose(bb.V, pb.V, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(bb.W, pb.W, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(0.9 * bb.p, pb.p, rtol=1e-14)


# --------------------------------------------------------------------------
# step-size integral bounds


def test_integral_bound_examples():
    tau = 5
    burst = [5 if k == 5 else 0 for k in range(10_000)]
    a2 = step_size_sequence(PolicyConfig("adaptive2", gamma_prime=1.0), burst)
    rep = check_integral_bound(a2, tau, 1.0, 1.0, "adaptive2")
    assert rep.passed and np.all(np.diff(rep.margin[10:]) > 0)
    assert rep.integral[-1] / (10_000 / 6) == pytest.approx(6, rel=1e-3)
    const = step_size_sequence(PolicyConfig("adaptive2", gamma_prime=1.0), [min(k, tau) for k in range(500)])
    rep = check_integral_bound(const, tau, 1.0, 1.0, "adaptive2")
    assert rep.passed
    assert rep.integral[-1] / rep.bound[-1] == pytest.approx((tau + 1) / tau, rel=1e-2)
    first = check_integral_bound([0.9], tau, 0.9, 1.0, "adaptive1")
    assert first.integral[0] == 0.9 >= first.bound[0] == pytest.approx(0.15)
    with pytest.raises(ConfigError):
        check_integral_bound([0.1], 1, 0.9, 1.0, "naive")


def test_integral_bound_detects_short_steps():
    assert not check_integral_bound([0.01] * 10, 2, 0.9, 1.0, "adaptive1").passed


@given(st.integers(1, 10), st.integers(0, 2**32 - 1), st.sampled_from(["adaptive1", "adaptive2"]))
def test_integral_bound_random_delays(tau, seed, kind):
    rng = np.random.default_rng(seed)
    taus = np.minimum(rng.integers(0, tau + 1, 500), np.arange(500))
    gammas = step_size_sequence(PolicyConfig(kind, gamma_prime=0.7, alpha=0.9), taus)
    assert check_integral_bound(gammas, tau, 0.9, 0.7, kind).passed


# --------------------------------------------------------------------------
# rate bounds


def test_stationarity_sum_bound_bound_on_runs(logistic4):
    for kind in ("adaptive1", "adaptive2"):
        partial, bound = stationarity_sum_bound(piag_trace(logistic4, kind, k_max=300, h=0.99))
        assert np.all(partial <= bound)


def test_linear_rate_envelope_envelope():
    prob = QuadraticProblem(np.diag([1.0, 0.5, 0.2])[None], np.array([[1.0, -1.0, 0.5]]))
    reference_solution(prob)
    policy = make_policy("adaptive2", prob, algo="piag", h=0.9)
    trace = piag_run(prob, DelayModel("constant", tau=4), policy, 400, x0=np.zeros(3))
    gaps, envelope = linear_rate_envelope(trace)
    assert np.all(gaps <= envelope + 1e-12)
    assert envelope[-1] < envelope[0]


def test_iterations_to_gap():
    trace = RunTrace.from_rows(
        [{"k": k, "gamma": 0.1, "objective": 1.0 / (k + 1)} for k in range(5)],
        config={"p_star": 0.0},
        final={"objective": 0.1},
    )
    assert iterations_to_gap(trace, 0.25) == 3
    assert iterations_to_gap(trace, 0.1) == 5
    assert iterations_to_gap(trace, 0.01) is None
