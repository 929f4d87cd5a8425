import csv
from dataclasses import replace

import numpy as np
import pytest

from specfed.convergence import (AssumptionEstimates, QuadraticFederatedProblem, compute_Gt, compute_tau, estimate,
                                 loglog_slope, proof_schedule, run_expected, run_full_batch, run_stochastic,
                                 smoothness, theorem_envelope, verify_lemma2, verify_lemma3, verify_theorem1)


def _problem(K=3, d=4, seed=0, rho=None):
    return QuadraticFederatedProblem.random(K, d, np.random.default_rng(seed), cond=5.0, rho=rho)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------
def test_tau_zero_for_shared_centres():
    rng = np.random.default_rng(0)
    p = _problem()
    p = QuadraticFederatedProblem(p.A, np.tile(rng.standard_normal(4), (3, 1)))
    assert compute_tau(p, [0.2, 0.3, 0.5]) == pytest.approx(0.0, abs=1e-24)


def test_tau_hand_example():
    p = QuadraticFederatedProblem(np.ones((2, 1, 1)), np.array([[0.0], [1.0]]))
    assert p.optimum([0.5, 0.5]) == pytest.approx([0.5])
    assert compute_tau(p, [0.5, 0.5], L=2.0) == pytest.approx(0.25)


def test_tau_order_invariant():
    p = _problem()
    w = np.array([0.2, 0.3, 0.5])
    perm = [2, 0, 1]
    q = QuadraticFederatedProblem(p.A[perm], p.c[perm])
    assert compute_tau(q, w[perm]) == pytest.approx(compute_tau(p, w), rel=1e-12)


def test_Gt_examples():
    assert compute_Gt(10.0, 0.25, [1.0, 2.0], [0.5, 0.5], 2.0) == pytest.approx(5.75)
    assert compute_Gt(3.0, 0.0, [0.7] * 4, [0.25] * 4, 1.0) == pytest.approx(0.49 / 4)
    assert compute_Gt(3.0, 0.0, [0.0, 0.0], [0.5, 0.5], 1.0) == 0.0


def test_closed_forms_match_oracles():
    """Optimum, smoothness and strong convexity against eig / solve computations done independently."""
    p = _problem(K=4, d=5, seed=3)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    H = sum(a * A for a, A in zip(w, p.A))
    rhs = sum(a * A @ c for a, A, c in zip(w, p.A, p.c))
    vals, vecs = np.linalg.eig(H)
    w_star_oracle = (vecs @ np.diag(1 / vals) @ np.linalg.inv(vecs) @ rhs).real
    assert np.max(np.abs(p.optimum(w) - w_star_oracle)) < 1e-10
    assert np.linalg.norm(p.full_gradient(p.optimum(w), w)) < 1e-10
    L, beta = smoothness(p)
    ev = np.concatenate([np.linalg.eig(A)[0].real for A in p.A])
    assert abs(L - ev.max()) < 1e-10 and abs(beta - ev.min()) < 1e-10
    assert np.array_equal(p.local_minimizers(), p.c)
    for k in range(4):
        assert np.linalg.norm(p.local_grad(k, p.c[k])) == 0.0


def test_problem_validation():
    with pytest.raises(ValueError):
        QuadraticFederatedProblem(np.array([[[1.0, 0.0], [0.0, -1.0]]]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        QuadraticFederatedProblem(np.array([[[1.0, 0.5], [0.0, 1.0]]]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        QuadraticFederatedProblem(np.eye(2)[None], np.zeros((1, 2)), rho=[-1.0])
    with pytest.raises(ValueError):
        AssumptionEstimates(L=1.0, beta=2.0, rho=np.zeros(1), tau=0.0, kappa=1.0, d=1)


def test_kappa_covers_whole_schedule():
    p = _problem()
    L, beta = smoothness(p)
    est = estimate(p, [1 / 3] * 3, proof_schedule(beta, L), 100)
    assert est.kappa == pytest.approx((beta * 99 + 2 * L) / 2)


# ---------------------------------------------------------------------------
# Lemma 2
# ---------------------------------------------------------------------------
def test_lemma2_noiseless_is_zero():
    p = _problem()
    rep = verify_lemma2(p, [1 / 3] * 3, np.zeros((2, 4)), 100, np.random.default_rng(0))
    assert rep.bound == 0.0 and np.all(rep.empirical < 1e-25) and rep.all_passed


def test_lemma2_single_client_variance():
    p = _problem(K=1, rho=[0.8])
    rep = verify_lemma2(p, [1.0], np.ones((1, 4)), 20_000, np.random.default_rng(1))
    assert rep.bound == pytest.approx(0.64)
    assert abs(rep.empirical[0] - 0.64) < 4 * rep.stderr[0]


def test_lemma2_uniform_equal_rho():
    p = _problem(K=4, rho=[0.5] * 4)
    rep = verify_lemma2(p, [0.25] * 4, np.zeros((1, 4)), 2000, np.random.default_rng(2))
    assert rep.bound == pytest.approx(0.25 / 4) and rep.all_passed


# ---------------------------------------------------------------------------
# Lemma 3
# ---------------------------------------------------------------------------
def test_lemma3_constant_step_contraction():
    p = _problem(K=1, seed=4)
    L, _ = smoothness(p)
    # 60 steps keep the distance well above the rounding floor of the computed optimum
    trace, est = run_full_batch(p, [1.0], 60, np.full(4, 3.0), schedule=lambda t: 1.0 / L)
    assert verify_lemma3(trace, est).pass_rate == 1.0
    assert np.all(np.diff(trace.delta) <= 0)


def test_lemma3_full_batch_proof_schedule():
    p = _problem(seed=5)
    trace, est = run_full_batch(p, [0.5, 0.3, 0.2], 2000, np.full(4, 4.0))
    rep = verify_lemma3(trace, est)
    assert rep.pass_rate == 1.0 and np.all(rep.hypothesis_ok)


def test_lemma3_rhs_without_tau_or_noise():
    p = _problem(K=1, seed=6)
    trace, est = run_full_batch(p, [1.0], 50, np.ones(4))
    assert est.tau == pytest.approx(0.0, abs=1e-20)
    expected = (1 - est.beta * trace.gamma[:-1]) * trace.delta[:-1]
    assert np.allclose(trace.rhs_lemma3[:-1], expected, rtol=1e-12, atol=0)


def test_identical_clients_match_single_client():
    single = _problem(K=1, seed=7)
    triple = QuadraticFederatedProblem(np.repeat(single.A, 3, axis=0), np.repeat(single.c, 3, axis=0))
    a, _ = run_full_batch(single, [1.0], 300, np.full(4, 2.0))
    b, _ = run_full_batch(triple, [0.2, 0.3, 0.5], 300, np.full(4, 2.0))
    assert np.allclose(a.delta, b.delta, rtol=1e-10, atol=1e-14)


def test_lemma3_hypothesis_violation_reported():
    p = _problem(seed=8)
    trace, est = run_full_batch(p, [1 / 3] * 3, 100, np.ones(4))
    tight = replace(est, kappa=1.0 / trace.gamma[0])  # only the first step satisfies 1/kappa <= gamma
    rep = verify_lemma3(trace, tight)
    assert rep.hypothesis_ok[0] and not rep.hypothesis_ok[1:].any()
    assert rep.pass_rate == pytest.approx(1 / 100)


def test_lemma3_noisy_replicates():
    p = _problem(seed=9, rho=[0.5, 1.0, 2.0])
    w = [0.5, 0.3, 0.2]
    trace, est = run_stochastic(p, w, 300, np.full(4, 3.0), np.random.default_rng(3))
    rep = verify_lemma3(trace, est, p, 1000, np.random.default_rng(4))
    assert rep.pass_rate >= 0.99
    with pytest.raises(ValueError):
        verify_lemma3(replace(trace, omegas=None), est, p, 10)


def test_expected_run_matches_monte_carlo():
    """Moment propagation against an average of sampled trajectories."""
    p = _problem(seed=10, rho=[1.0, 1.0, 1.0])
    w = [1 / 3] * 3
    exp, _ = run_expected(p, w, 40, np.full(4, 2.0))
    rng = np.random.default_rng(5)
    runs = np.array([run_stochastic(p, w, 40, np.full(4, 2.0), rng)[0].delta for _ in range(1500)])
    mean, se = runs.mean(axis=0), runs.std(axis=0, ddof=1) / np.sqrt(len(runs))
    assert np.all(np.abs(mean[1:] - exp.delta[1:]) <= 4 * se[1:])


# ---------------------------------------------------------------------------
# Theorem 1
# ---------------------------------------------------------------------------
def test_fixed_point_gap_stays_zero():
    p = _problem(K=1, seed=11)
    trace, est = run_full_batch(p, [1.0], 100, p.optimum([1.0]))
    assert np.all(trace.gap < 1e-25)
    assert verify_theorem1(trace, est, fit_range=(1, 100)).envelope_ok


def test_envelope_full_batch():
    p = _problem(seed=12)
    trace, est = run_full_batch(p, [0.5, 0.3, 0.2], 10_000, np.full(4, 5.0))
    rep = verify_theorem1(trace, est)
    assert rep.envelope_ok and rep.max_ratio <= 1.0


def test_envelope_formula():
    est = AssumptionEstimates(L=2.0, beta=1.0, rho=np.zeros(1), tau=0.0, kappa=1.0, d=1)
    assert theorem_envelope(0, est, G=1.0, dist0_sq=3.0) == pytest.approx(0.5 * (2 + 6))
    assert theorem_envelope(4, est, G=1.0, dist0_sq=3.0) == pytest.approx(2 / 8 * 8)


def test_full_batch_decays_faster_than_one_over_T():
    # deterministic descent is geometric, so its fitted slope is far steeper than -1
    p = _problem(seed=13)
    trace, est = run_full_batch(p, [1 / 3] * 3, 5000, np.full(4, 5.0))
    assert verify_theorem1(trace, est, fit_range=(100, 5000)).slope < -1.2


def test_noisy_expected_slope_is_one_over_T():
    p = _problem(seed=14, rho=[0.5, 1.0, 2.0])
    trace, est = run_expected(p, [0.5, 0.3, 0.2], 20_000, np.full(4, 5.0))
    rep = verify_theorem1(trace, est, fit_range=(1000, 20_000))
    assert -1.2 <= rep.slope <= -0.8 and rep.envelope_ok


def test_loglog_slope_exact():
    T = np.geomspace(10, 1e4, 30)
    assert loglog_slope(T, 7.0 / T) == pytest.approx(-1.0)
    assert np.isnan(loglog_slope([1.0], [1.0]))


def test_trace_csv(tmp_path):
    trace, _ = run_full_batch(_problem(), [1 / 3] * 3, 5, np.ones(4))
    trace.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "gamma", "delta", "rhs_lemma3", "gap", "envelope", "Gt"]
    assert len(rows) == 7
