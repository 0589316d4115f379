import math

import numpy as np
import pytest

from fedsaddle.bounds import BoundConstants, measure_aggregate_constants
from fedsaddle.engine import FederationConfig
from fedsaddle.errors import ConfigError, StepSizeError
from fedsaddle.oracles import MiniBatch, Perturbed, Straggler
from fedsaddle.problem import (
    LogisticProblem,
    ProblemConfig,
    QuadraticProblem,
    SmoothnessEstimates,
    estimate_smoothness,
    probe_points,
    uniform_weights,
)
from fedsaddle.saddle import (
    EscapeRecord,
    StationarityParams,
    curve_shape_is_escape,
    escape_run,
    grad_threshold,
    initial_offset_point,
    participation_sweep,
    second_order_check,
    theoretical_escape_times,
    write_sweep_csv,
    write_sweep_summary_csv,
)

RNG = np.random.default_rng(2718)


def flat_lc(beta_bar4=0.0, sigma_bar4=1.0, floor=0.1):
    return BoundConstants(
        beta_bar4=beta_bar4,
        sigma_bar4=sigma_bar4,
        beta_bar_k4=np.array([beta_bar4]),
        sigma_bar_k4=np.array([sigma_bar4]),
        sigma_bar_ell2=floor,
        d_bound_coeff=1.0,
    )


def flat_sm(delta=1.0):
    return SmoothnessEstimates(
        delta=delta, rho_hess=1.0, G=0.0, U=1.0, delta_hat=1.0, J_floor=0.0
    )


# ---------------------------------------------------------------------------
# second-order check
# ---------------------------------------------------------------------------


def test_quadratic_minimum_passes():
    prob = QuadraticProblem(2, 2, K=2, curvature=1.0)
    tp = StationarityParams(tau=0.1, mu=0.05)
    v = second_order_check(
        prob, uniform_weights(2), np.zeros(prob.dim), tp, flat_sm(), flat_lc()
    )
    assert v.grad_ok and v.curvature_ok and v.passed
    assert v.lambda_min == pytest.approx(1.0, abs=1e-6)


def test_saddle_origin_fails_curvature():
    prob = LogisticProblem(ProblemConfig(K=5, rho=0.01, seed=61))
    p = uniform_weights(5)
    lam = prob.saddle_min_eigenvalue(p)
    tp = StationarityParams(tau=abs(lam) / 2, mu=0.05)
    v = second_order_check(prob, p, np.zeros(prob.dim), tp, flat_sm(), flat_lc())
    assert not v.curvature_ok
    assert v.grad_ok  # exact stationary point
    assert v.lambda_min == pytest.approx(lam, abs=1e-6)


def test_threshold_scales_linearly_in_mu():
    sm, lc = flat_sm(delta=0.5), flat_lc(beta_bar4=0.04, sigma_bar4=2.0)
    t1 = grad_threshold(StationarityParams(tau=0.1, mu=0.02), sm, lc)
    t2 = grad_threshold(StationarityParams(tau=0.1, mu=0.01), sm, lc)
    assert t1 / t2 == pytest.approx(2.0, rel=0.10)


def test_threshold_vanishes_as_mu_to_zero():
    sm, lc = flat_sm(), flat_lc()
    thr = [
        grad_threshold(StationarityParams(tau=0.1, mu=m), sm, lc)
        for m in (1e-2, 1e-4, 1e-6)
    ]
    assert thr[0] > thr[1] > thr[2]
    assert thr[2] < 1e-4


def test_step_size_error_raised():
    sm = flat_sm(delta=2.0)
    lc = flat_lc(beta_bar4=100.0)  # beta_bar^2 = 10
    with pytest.raises(StepSizeError):
        grad_threshold(StationarityParams(tau=0.1, mu=0.05), sm, lc)


def test_stationarity_params_validation():
    with pytest.raises(ConfigError):
        StationarityParams(tau=0.0)
    with pytest.raises(ConfigError):
        StationarityParams(tau=0.1, pi_prob=0.5)
    with pytest.raises(ConfigError):
        StationarityParams(tau=0.1, M=0.0)


# ---------------------------------------------------------------------------
# theoretical escape times
# ---------------------------------------------------------------------------


def test_escape_time_unit_when_numerator_matches():
    sm, lc = flat_sm(), flat_lc(sigma_bar4=4.0, floor=0.5)  # sigma_bar^2 = 2
    mu, tau = 0.01, 0.3
    M = mu * tau * lc.sigma_bar_ell2 / math.sqrt(lc.sigma_bar4)
    et = theoretical_escape_times(StationarityParams(tau=tau, mu=mu, M=M), sm, lc, J_init=1.0)
    assert et.i_s == pytest.approx(1.0, rel=1e-12)


def test_horizon_linear_in_initial_gap():
    sm, lc = flat_sm(), flat_lc(sigma_bar4=1.0, floor=0.2)
    tp = StationarityParams(tau=0.2, mu=0.01)
    a = theoretical_escape_times(tp, sm, lc, J_init=1.0)
    b = theoretical_escape_times(tp, sm, lc, J_init=2.0)
    assert b.i_o == pytest.approx(2.0 * a.i_o, rel=1e-12)
    assert b.i_s == a.i_s


def test_escape_time_monotone_grid():
    sm, lc = flat_sm(), flat_lc(sigma_bar4=1.0, floor=0.05)
    taus = np.linspace(0.05, 2.0, 40)
    mus = np.linspace(1e-4, 0.05, 25)
    last_by_mu = None
    for mu in mus:
        last = None
        for tau in taus:
            et = theoretical_escape_times(StationarityParams(tau=tau, mu=mu), sm, lc, 1.0)
            assert np.isfinite(et.i_s) and et.i_s > 0
            assert np.isfinite(et.i_o) and et.i_o > 0
            if last is not None:
                assert et.i_s < last  # decreasing in tau
            last = et.i_s
        if last_by_mu is not None:
            assert last < last_by_mu  # decreasing in mu at the largest tau
        last_by_mu = last


def test_escape_time_requires_positive_floor():
    with pytest.raises(ConfigError):
        theoretical_escape_times(
            StationarityParams(tau=0.1, mu=0.01), flat_sm(), flat_lc(floor=0.0), 1.0
        )


# ---------------------------------------------------------------------------
# escape runs
# ---------------------------------------------------------------------------


def experiment_problem(K=10):
    return LogisticProblem(
        ProblemConfig(d1=2, d2=2, rho=0.01, K=K, samples_per_agent=10,
                      heterogeneity_scale=0.5, seed=71)
    )


def test_zero_step_never_escapes():
    prob = experiment_problem()
    fc = FederationConfig.uniform(10, 3, 0.0, 2, Straggler(0.5, MiniBatch(1)), seed=1)
    rec = escape_run(prob, fc, max_rounds=50)
    assert not rec.escaped
    assert rec.escape_round is None


def test_noiseless_exact_origin_pinned():
    prob = experiment_problem()
    fc = FederationConfig.uniform(10, 10, 0.1, 1, MiniBatch(999), seed=2)
    rec = escape_run(prob, fc, max_rounds=300, init_offset=0.0)
    assert not rec.escaped
    assert np.all(rec.dist_origin == 0.0)
    assert np.all(rec.grad_norm == 0.0)


def test_stochastic_run_escapes_with_shape():
    prob = experiment_problem()
    fc = FederationConfig.uniform(10, 3, 0.1, 5, Straggler(0.5, MiniBatch(1)), seed=3)
    rec = escape_run(prob, fc, max_rounds=5000)
    assert rec.escaped
    assert rec.J[rec.escape_round] <= rec.J_saddle - rec.eps_escape
    assert curve_shape_is_escape(rec.grad_norm, rec.escape_round)
    assert not curve_shape_is_escape(np.full(100, 0.5), 50)
    assert not curve_shape_is_escape(rec.grad_norm, None)


def test_segmented_stop_matches_full_run_prefix():
    prob = experiment_problem()
    fc = FederationConfig.uniform(10, 3, 0.1, 2, Straggler(0.5, MiniBatch(1)), seed=4)
    full = escape_run(prob, fc, max_rounds=800)
    tau = abs(prob.saddle_min_eigenvalue(fc.p)) / 2
    stopped = escape_run(
        prob, fc, max_rounds=800, stop_grad_sq=5e-3, stop_tau=tau, segment_rounds=100
    )
    n = stopped.rounds_run
    assert n <= full.rounds_run
    assert np.allclose(stopped.J, full.J[: n + 1], rtol=1e-12)
    assert np.allclose(stopped.grad_norm, full.grad_norm[: n + 1], rtol=1e-11, atol=1e-13)
    v = second_order_check(
        prob,
        fc.p,
        stopped.final_w,
        StationarityParams(tau=tau, mu=fc.mu),
        flat_sm(delta=2.0),
        flat_lc(sigma_bar4=1.0),
    )
    assert v.curvature_ok


def test_escape_round_uses_loss_drop_not_distance():
    prob = experiment_problem()
    fc = FederationConfig.uniform(10, 3, 0.1, 5, Straggler(0.5, MiniBatch(1)), seed=5)
    rec = escape_run(prob, fc, max_rounds=5000)
    # before the escape round, every J stays above the threshold
    assert np.all(rec.J[: rec.escape_round] > rec.J_saddle - rec.eps_escape)


# ---------------------------------------------------------------------------
# participation sweep
# ---------------------------------------------------------------------------


def test_sweep_runs_and_writes_csv(tmp_path):
    prob = experiment_problem(K=8)
    fc = FederationConfig.uniform(8, 8, 0.1, 3, Straggler(0.5, MiniBatch(1)), seed=6)
    records, summaries = participation_sweep(
        prob, fc, L_values=[2, 8], replicates=2, max_rounds=4000
    )
    assert len(records) == 4
    assert all(r.escaped for r in records)
    assert [s.L for s in summaries] == [2, 8]
    assert all(s.escaped == 2 for s in summaries)
    assert all(s.median_escape is not None for s in summaries)
    # distinct replicate seeds
    assert len({r.seed for r in records}) == 4

    sweep_path = tmp_path / "sweep.csv"
    write_sweep_csv(records, sweep_path, stride=5)
    text = sweep_path.read_text().splitlines()
    assert text[0] == "L,seed,round,J,grad_norm,dist_origin,escaped_flag,escape_round"
    assert len(text) > 4
    summary_path = tmp_path / "summary.csv"
    write_sweep_summary_csv(summaries, summary_path)
    assert "median_escape_round" in summary_path.read_text()


def test_sweep_rejects_oversized_l():
    prob = experiment_problem(K=4)
    fc = FederationConfig.uniform(4, 4, 0.1, 1, MiniBatch(1), seed=7)
    with pytest.raises(ConfigError):
        participation_sweep(prob, fc, L_values=[8], replicates=1, max_rounds=10)


def test_initial_offset_point():
    w = initial_offset_point(6, 1e-3)
    assert np.linalg.norm(w) == pytest.approx(1e-3, rel=1e-12)
    assert np.array_equal(w, initial_offset_point(6, 1e-3))
    assert np.all(initial_offset_point(6, 0.0) == 0.0)


def test_second_order_with_measured_constants_small_scale():
    prob = experiment_problem(K=10)
    p = uniform_weights(10)
    tau = abs(prob.saddle_min_eigenvalue(p)) / 2
    mu = 0.1
    fc = FederationConfig.uniform(10, 3, mu, 5, Straggler(0.5, MiniBatch(1)), seed=8)
    probes = probe_points(prob.dim, 3, seed=9, radius=1.5)
    sm = estimate_smoothness(prob, probes)
    lc = measure_aggregate_constants(prob, fc, probes, trials=15_000, seed=10)
    tp = StationarityParams(tau=tau, mu=mu)
    thr = grad_threshold(tp, sm, lc)
    rec = escape_run(
        prob, fc, max_rounds=20_000, stop_grad_sq=0.25 * thr, stop_tau=tau,
        segment_rounds=200,
    )
    assert rec.escaped
    v = second_order_check(prob, p, rec.final_w, tp, sm, lc)
    assert v.passed, (v.grad_norm_sq, v.grad_threshold, v.lambda_min)
