"""Backend kernels against the object-level reference engine.

The kernels must reproduce the reference round-for-round: identical stream
addresses, arithmetic equal up to reassociation inside vectorized
reductions.  When the compiled extension is present it is additionally
checked against the fallback.
"""

import numpy as np
import pytest

from fedsaddle import _kernels_py, backend
from fedsaddle.engine import FederationConfig, run_round, run_trajectory
from fedsaddle.oracles import (
    ExactPlusPerturbation,
    MiniBatch,
    Perturbed,
    Straggler,
    draw_realization,
)
from fedsaddle.problem import LogisticProblem, ProblemConfig
from fedsaddle.rng import Streams

RNG = np.random.default_rng(5150)


def make_case(seed, K=5, mixed=True):
    prob = LogisticProblem(ProblemConfig(K=K, seed=seed, samples_per_agent=6))
    r = np.random.default_rng(seed)
    if mixed:
        pool = [
            MiniBatch(2),
            MiniBatch(60),  # full batch
            Perturbed(0.4),
            Perturbed(0.3, "laplacian"),
            ExactPlusPerturbation(0.5),
            Straggler(0.6, MiniBatch(1)),
            Straggler(0.5, Perturbed(0.2)),
        ]
        kinds = tuple(pool[int(r.integers(0, len(pool)))] for _ in range(K))
    else:
        kinds = tuple([Straggler(0.5, MiniBatch(1))] * K)
    p = r.dirichlet(np.ones(K))
    fc = FederationConfig(
        K=K,
        L=int(r.integers(1, K + 1)),
        mu=float(r.uniform(0.02, 0.2)),
        p=p,
        E=r.integers(1, 5, size=K),
        kinds=kinds,
        seed=seed,
    )
    return prob, fc


def reference_trial_sums(problem, fc, w, trials, seed, trial_offset=0):
    dim = problem.dim
    sums = {
        "sum_s": np.zeros(dim),
        "sum_s2": np.zeros(dim),
        "sum_ssT": np.zeros((dim, dim)),
        "sum_s2s2": np.zeros((dim, dim)),
        "sum_s4": 0.0,
        "sum_s8": 0.0,
        "sum_d4": 0.0,
        "sum_d8": 0.0,
    }
    for t in range(trials):
        rec = run_round(problem, w, fc, trial_offset + t, streams=Streams(seed))
        s, d = rec.s_flat, rec.d_flat
        sums["sum_s"] += s
        sums["sum_s2"] += s * s
        sums["sum_ssT"] += np.outer(s, s)
        sums["sum_s2s2"] += np.outer(s * s, s * s)
        q = float(s @ s)
        sums["sum_s4"] += q * q
        sums["sum_s8"] += q**4
        qd = float(d @ d)
        sums["sum_d4"] += qd * qd
        sums["sum_d8"] += qd**4
    return sums


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_trial_moments_match_reference(seed):
    prob, fc = make_case(seed)
    w = 0.4 * RNG.standard_normal(prob.dim)
    trials = 50
    got = backend.trial_moments(prob, fc, w, trials, seed=777 + seed, trial_offset=3)
    want = reference_trial_sums(prob, fc, w, trials, seed=777 + seed, trial_offset=3)
    scale = max(1.0, abs(want["sum_s4"]))
    assert np.allclose(got.sum_s, want["sum_s"], rtol=1e-9, atol=1e-11)
    assert np.allclose(got.sum_ssT, want["sum_ssT"], rtol=1e-9, atol=1e-11)
    assert np.allclose(got.sum_s2s2, want["sum_s2s2"], rtol=1e-9, atol=1e-11)
    assert abs(got.sum_s4 - want["sum_s4"]) <= 1e-9 * scale
    assert abs(got.sum_d4 - want["sum_d4"]) <= 1e-9 * max(1.0, want["sum_d4"])
    assert abs(got.sum_d8 - want["sum_d8"]) <= 1e-8 * max(1.0, want["sum_d8"])


@pytest.mark.parametrize("seed", [5, 6, 7])
def test_trajectory_matches_reference(seed):
    prob, fc = make_case(seed)
    w0 = 0.3 * RNG.standard_normal(prob.dim)
    rounds = 25
    ref = run_trajectory(prob, w0, rounds, fc, backend_mode="reference")
    fast = backend.trajectory(prob, w0, rounds, fc)
    assert fast.rounds_run == ref.rounds_run
    assert np.allclose(fast.w_hist, ref.w_hist, rtol=1e-9, atol=1e-12)
    assert np.allclose(fast.J, ref.J, rtol=1e-9)
    assert np.allclose(fast.grad_norm, ref.grad_norm, rtol=1e-8, atol=1e-12)
    assert np.allclose(fast.s_norm, ref.s_norm, rtol=1e-8, atol=1e-12)
    assert np.allclose(fast.d_norm, ref.d_norm, rtol=1e-8, atol=1e-12)
    assert np.all(fast.residual <= 1e-10 * (1.0 + np.linalg.norm(fast.w_hist[1:], axis=1)))


@pytest.mark.parametrize(
    "kind",
    [
        MiniBatch(2),
        Perturbed(0.4),
        Perturbed(0.3, "laplacian"),
        ExactPlusPerturbation(0.5),
        Straggler(0.5, MiniBatch(1)),
        Straggler(0.4, Perturbed(0.2)),
    ],
)
def test_agent_noise_matches_reference(kind):
    prob = LogisticProblem(ProblemConfig(K=3, seed=8, samples_per_agent=6))
    w = 0.5 * RNG.standard_normal(prob.dim)
    k, epochs, trials, seed = 1, 3, 40, 99
    stats = backend.agent_noise_stats(prob, kind, k, w, epochs, trials, seed, trial_offset=5)

    gk = prob.grad_k_flat(k, w)
    sum_s = np.zeros(prob.dim)
    sum_s4 = 0.0
    sum_avg4 = 0.0
    streams = Streams(seed)
    for t in range(trials):
        per_epoch = []
        for e in range(1, epochs + 1):
            r = draw_realization(kind, streams, 5 + t, k, e, prob)
            s = r.evaluate_flat(prob, w) - gk
            per_epoch.append(s)
            sum_s += s
            q = float(s @ s)
            sum_s4 += q * q
        avg = np.mean(per_epoch, axis=0)
        qa = float(avg @ avg)
        sum_avg4 += qa * qa
    assert stats.n_single == trials * epochs
    assert np.allclose(stats.sum_s, sum_s, rtol=1e-9, atol=1e-11)
    assert abs(stats.sum_s4 - sum_s4) <= 1e-9 * max(1.0, sum_s4)
    assert abs(stats.sum_avg4 - sum_avg4) <= 1e-9 * max(1.0, sum_avg4)


def test_chunking_is_order_independent():
    prob, fc = make_case(11, K=4)
    w = 0.4 * RNG.standard_normal(prob.dim)
    a = backend.trial_moments(prob, fc, w, 64, seed=3)
    b1 = backend.trial_moments(prob, fc, w, 40, seed=3, trial_offset=0)
    b2 = backend.trial_moments(prob, fc, w, 24, seed=3, trial_offset=40)
    merged = b1.merge(b2)
    assert merged.n == a.n
    assert np.allclose(merged.sum_s, a.sum_s, rtol=1e-9, atol=1e-12)
    assert np.allclose(merged.sum_ssT, a.sum_ssT, rtol=1e-9, atol=1e-12)
    assert abs(merged.sum_s4 - a.sum_s4) <= 1e-9 * max(1.0, abs(a.sum_s4))
    assert abs(merged.sum_d4 - a.sum_d4) <= 1e-9 * max(1.0, abs(a.sum_d4))


def test_early_stop_and_divergence_flags():
    prob, _ = make_case(12, K=4, mixed=False)
    fc = FederationConfig.uniform(4, 4, 0.1, 2, Straggler(0.5, MiniBatch(1)), seed=13)
    w0 = 0.2 * np.ones(prob.dim)
    full = backend.trajectory(prob, w0, 60, fc)
    stop_j = float(np.median(full.J))
    stopped = backend.trajectory(
        prob, w0, 60, fc, stop_j_below=stop_j, stop_grad_sq_below=1e6
    )
    assert stopped.rounds_run < 60
    assert stopped.J[stopped.rounds_run] < stop_j

    hot = FederationConfig.uniform(4, 4, 80.0, 1, MiniBatch(60), seed=14)
    div = backend.trajectory(prob, 0.5 * np.ones(prob.dim), 4000, hot)
    assert div.diverged


@pytest.mark.skipif(not backend.IS_COMPILED, reason="compiled extension not built")
def test_compiled_matches_python_fallback():
    from fedsaddle import _kernels

    for seed in (21, 22):
        prob, fc = make_case(seed)
        enc = backend._encode(prob, fc)
        w = 0.4 * np.random.default_rng(seed).standard_normal(prob.dim)
        args = (
            seed,
            w,
            enc["H"],
            enc["gam"],
            enc["rho"],
            enc["d1"],
            enc["p"],
            enc["E"],
            enc["L"],
            enc["mu"],
            enc["codes"],
            enc["batches"],
            enc["sigmas"],
            enc["dists"],
            enc["swraps"],
            enc["sdeltas"],
        )
        a = _kernels.trial_moments(*args, 40, 0, True)
        b = _kernels_py.trial_moments(*args, 40, 0, True)
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=1e-9, atol=1e-11)
        ta = _kernels.trajectory(
            args[0], args[1], 20, *args[2:], True, float("nan"), float("nan"), 1e6
        )
        tb = _kernels_py.trajectory(
            args[0], args[1], 20, *args[2:], True, float("nan"), float("nan"), 1e6
        )
        for x, y in zip(ta, tb):
            assert np.allclose(x, y, rtol=1e-8, atol=1e-11)
