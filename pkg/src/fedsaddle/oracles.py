"""Stochastic gradient constructions built on frozen randomness.

A realization captures every random choice of one oracle call (sample
indices, perturbation vector, straggle coin) so the call can be re-evaluated
at a different model point with identical randomness.  That is what makes the
aggregate-noise / local-drift split of the round recursion computable: the
same draw is evaluated both at the local iterate and at the round's starting
point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, InsufficientTrialsError
from .model import ModelPoint
from .rng import (
    P_COIN,
    P_PERTURB,
    P_SAMPLE,
    Streams,
    laplace_from_u64,
    u01,
)

GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class MiniBatch:
    """Average of per-sample gradients over a uniformly drawn batch."""

    batch_size: int

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


@dataclass(frozen=True)
class Perturbed:
    """Single-sample gradient plus isotropic zero-mean noise."""

    sigma_v: float
    distribution: str = GAUSSIAN

    def validate(self):
        if self.sigma_v <= 0:
            raise ConfigError("sigma_v must be positive")
        if self.distribution not in (GAUSSIAN, LAPLACIAN):
            raise ConfigError(f"unknown perturbation distribution {self.distribution!r}")


@dataclass(frozen=True)
class Straggler:
    """Inverse-probability-scaled inner oracle that may return nothing.

    On a straggle the whole stochastic gradient is zero, regularizer
    included.
    """

    delta: float
    inner: "OracleKind"

    def validate(self):
        if not (0.0 < self.delta <= 1.0):
            raise ConfigError("straggle probability must lie in (0, 1]")
        self.inner.validate()


@dataclass(frozen=True)
class ExactPlusPerturbation:
    """Exact gradient plus isotropic Gaussian noise; moments are closed-form."""

    sigma_v: float

    def validate(self):
        if self.sigma_v <= 0:
            raise ConfigError("sigma_v must be positive")


OracleKind = Union[MiniBatch, Perturbed, Straggler, ExactPlusPerturbation]


@dataclass
class OracleRealization:
    """One oracle call's frozen randomness, evaluable at any model point."""

    kind: OracleKind
    agent: int
    rnd: int
    epoch: int
    sample_indices: Optional[np.ndarray] = None
    perturbation: Optional[np.ndarray] = None
    coin: Optional[bool] = None
    inner: Optional["OracleRealization"] = None

    def evaluate_flat(self, problem, x: np.ndarray) -> np.ndarray:
        kind = self.kind
        if isinstance(kind, MiniBatch):
            if self.sample_indices is None:  # full batch: the exact gradient
                return problem.grad_k_flat(self.agent, x)
            g = np.zeros(problem.dim)
            for idx in self.sample_indices:
                g += problem.sample_grad_flat(self.agent, int(idx), x)
            return g / len(self.sample_indices)
        if isinstance(kind, Perturbed):
            return (
                problem.sample_grad_flat(self.agent, int(self.sample_indices[0]), x)
                + self.perturbation
            )
        if isinstance(kind, ExactPlusPerturbation):
            return problem.grad_k_flat(self.agent, x) + self.perturbation
        if isinstance(kind, Straggler):
            if self.coin:
                return self.inner.evaluate_flat(problem, x) / kind.delta
            return np.zeros(problem.dim)
        raise ConfigError(f"unknown oracle kind {kind!r}")

    def evaluate(self, problem, w: ModelPoint) -> ModelPoint:
        return ModelPoint.unflatten(
            self.evaluate_flat(problem, w.flatten()), problem.d1, problem.d2
        )


def draw_realization(
    kind: OracleKind,
    streams: Streams,
    rnd: int,
    agent: int,
    epoch: int,
    problem,
    depth: int = 0,
) -> OracleRealization:
    """Deterministic function of the stream coordinate (round, agent, epoch)."""
    if isinstance(kind, MiniBatch):
        n = problem.n_samples(agent)
        if kind.batch_size >= n:  # whole dataset: deterministic, no draws
            return OracleRealization(kind, agent, rnd, epoch, sample_indices=None)
        idx = streams.integers(P_SAMPLE, rnd, agent, epoch, kind.batch_size, mod=n)
        return OracleRealization(kind, agent, rnd, epoch, sample_indices=idx)
    if isinstance(kind, Perturbed):
        n = problem.n_samples(agent)
        idx = streams.integers(P_SAMPLE, rnd, agent, epoch, 1, mod=n)
        if kind.distribution == GAUSSIAN:
            pert = kind.sigma_v * streams.normals(P_PERTURB, rnd, agent, epoch, problem.dim)
        else:
            words = streams.u64(P_PERTURB, rnd, agent, epoch, problem.dim)
            pert = laplace_from_u64(words, scale=kind.sigma_v / np.sqrt(2.0))
        return OracleRealization(kind, agent, rnd, epoch, sample_indices=idx, perturbation=pert)
    if isinstance(kind, ExactPlusPerturbation):
        pert = kind.sigma_v * streams.normals(P_PERTURB, rnd, agent, epoch, problem.dim)
        return OracleRealization(kind, agent, rnd, epoch, perturbation=pert)
    if isinstance(kind, Straggler):
        word = streams.u64(P_COIN, rnd, agent, epoch, depth + 1)[depth]
        coin = bool(u01(word) < kind.delta)
        inner = draw_realization(kind.inner, streams, rnd, agent, epoch, problem, depth + 1)
        return OracleRealization(kind, agent, rnd, epoch, coin=coin, inner=inner)
    raise ConfigError(f"unknown oracle kind {kind!r}")


def evaluate_at(realization: OracleRealization, problem, w: ModelPoint) -> ModelPoint:
    return realization.evaluate(problem, w)


def gradient_noise(realization: OracleRealization, problem, w: ModelPoint) -> ModelPoint:
    """Oracle output minus the exact per-agent gradient at the same point."""
    return realization.evaluate(problem, w) - problem.exact_grad_jk(realization.agent, w)


@dataclass
class NoiseProfile:
    """Fourth-moment envelope and covariance floor of one agent's noise."""

    beta4: float
    sigma4: float
    sigma_ell2: float
    analytic: bool
    source: str = ""

    def __post_init__(self):
        for name in ("beta4", "sigma4", "sigma_ell2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def gaussian_fourth_moment(dim: int, sigma_v: float) -> float:
    """E |v|^4 for v ~ Normal(0, sigma_v^2 I_dim): (d^2 + 2 d) sigma_v^4."""
    return (dim**2 + 2.0 * dim) * sigma_v**4


def straggler_fullbatch_ratio(delta: float) -> float:
    """Fourth moment of the straggler-over-exact noise per |grad|^4.

    By enumeration of the two outcomes: with probability delta the noise is
    ((1-delta)/delta) grad, otherwise -grad, so
    E|s|^4 = ((1-delta)^4 / delta^3 + (1-delta)) |grad|^4.
    """
    return (1.0 - delta) ** 4 / delta**3 + (1.0 - delta)


def fit_moment_bound(g4: np.ndarray, u: np.ndarray) -> tuple[float, float]:
    """Smallest (beta4, sigma4) with beta4 * g4_j + sigma4 >= u_j for all j.

    Two-variable linear program solved by vertex enumeration; "smallest"
    minimizes beta4 * mean(g4) + sigma4.
    """
    g4 = np.asarray(g4, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    weight = float(g4.mean()) if g4.size else 1.0
    candidates = [(0.0, float(max(u.max(), 0.0)))]
    pos = g4 > 0
    if np.any(pos):
        candidates.append((float(np.max(u[pos] / g4[pos])), 0.0))
    for j in range(len(g4)):
        for l in range(j + 1, len(g4)):
            if g4[j] == g4[l]:
                continue
            b = (u[j] - u[l]) / (g4[j] - g4[l])
            s = u[j] - b * g4[j]
            if b >= 0 and s >= 0:
                candidates.append((float(b), float(s)))
    feasible = [
        (b, s)
        for b, s in candidates
        if np.all(b * g4 + s >= u - 1e-9 * (1.0 + np.abs(u)))
    ]
    return min(feasible, key=lambda bs: bs[0] * weight + bs[1])


def _is_full_batch(kind: OracleKind, problem, k: int) -> bool:
    return isinstance(kind, MiniBatch) and kind.batch_size >= problem.n_samples(k)


def noise_profile_estimate(
    problem,
    kind: OracleKind,
    k: int,
    probes: Sequence[np.ndarray],
    trials: int,
    seed: int,
    se_mult: float = 5.0,
) -> NoiseProfile:
    """Closed-form moments where available, Monte Carlo fit otherwise."""
    kind.validate()
    if len(probes) < 2:
        raise ConfigError("need at least two probe points")
    dim = problem.dim

    if isinstance(kind, ExactPlusPerturbation):
        return NoiseProfile(
            beta4=0.0,
            sigma4=gaussian_fourth_moment(dim, kind.sigma_v),
            sigma_ell2=kind.sigma_v**2,
            analytic=True,
            source="gaussian moment identity",
        )
    if _is_full_batch(kind, problem, k):
        return NoiseProfile(0.0, 0.0, 0.0, analytic=True, source="full batch, zero noise")
    if isinstance(kind, Straggler) and _is_full_batch(kind.inner, problem, k):
        return NoiseProfile(
            beta4=straggler_fullbatch_ratio(kind.delta),
            sigma4=0.0,
            sigma_ell2=0.0,
            analytic=True,
            source="two-outcome enumeration",
        )

    if trials < 10_000:
        raise InsufficientTrialsError(
            f"empirical noise profile needs >= 10^4 trials, got {trials}"
        )
    from . import backend

    g4 = []
    upper = []
    floors = []
    for j, x in enumerate(probes):
        x = np.asarray(x, dtype=np.float64)
        stats = backend.agent_noise_stats(
            problem, kind, k, x, epochs=1, trials=trials, seed=seed, trial_offset=j * trials
        )
        m4 = stats.sum_s4 / stats.n_single
        se4 = np.sqrt(max(stats.sum_s8 / stats.n_single - m4**2, 0.0) / stats.n_single)
        cov = stats.sum_ssT / stats.n_single
        floors.append(float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]))
        g4.append(float(np.linalg.norm(problem.grad_k_flat(k, x)) ** 4))
        upper.append(m4 + se_mult * se4)
    beta4, sigma4 = fit_moment_bound(np.array(g4), np.array(upper))

    floor = max(min(floors), 0.0)
    if isinstance(kind, Perturbed):
        # additive isotropic noise guarantees this floor exactly
        analytic_floor = kind.sigma_v**2
        floor = max(floor, analytic_floor)
    if isinstance(kind, Straggler) and isinstance(kind.inner, Perturbed):
        floor = max(floor, kind.inner.sigma_v**2 / kind.delta)
    return NoiseProfile(
        beta4=beta4,
        sigma4=sigma4,
        sigma_ell2=floor,
        analytic=False,
        source=f"monte carlo fit, {trials} trials/probe",
    )


def mean_fourth_scale(kind: OracleKind) -> float:
    """Factor multiplying the single-draw mean-fourth Lipschitz constant.

    A straggler wrapper scales the frozen-randomness difference by coin/delta,
    whose fourth moment is delta^{-3}; batch averaging and additive noise can
    only shrink the difference (Jensen; the frozen perturbation cancels).
    """
    if isinstance(kind, Straggler):
        return mean_fourth_scale(kind.inner) / kind.delta**3
    return 1.0


__all__ = [
    "MiniBatch",
    "Perturbed",
    "Straggler",
    "ExactPlusPerturbation",
    "OracleKind",
    "OracleRealization",
    "NoiseProfile",
    "draw_realization",
    "evaluate_at",
    "gradient_noise",
    "noise_profile_estimate",
    "gaussian_fourth_moment",
    "straggler_fullbatch_ratio",
    "fit_moment_bound",
    "mean_fourth_scale",
    "GAUSSIAN",
    "LAPLACIAN",
]
