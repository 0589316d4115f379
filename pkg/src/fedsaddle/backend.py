"""Kernel backend selection: compiled extension with a vectorized fallback.

The compiled module ``fedsaddle._kernels`` (Cython) and the fallback
``fedsaddle._kernels_py`` implement the same functions with the same stream
addressing; results agree up to floating-point reassociation.  Selection
happens at import, overridable with ``FEDSADDLE_BACKEND=python|compiled``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .oracles import (
    GAUSSIAN,
    ExactPlusPerturbation,
    MiniBatch,
    OracleKind,
    Perturbed,
    Straggler,
)

_mode = os.environ.get("FEDSADDLE_BACKEND", "auto")
if _mode == "python":
    from . import _kernels_py as _impl
elif _mode == "compiled":
    from . import _kernels as _impl  # type: ignore[attr-defined]
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

IS_COMPILED = bool(getattr(_impl, "IS_COMPILED", False))
BACKEND_NAME = "compiled" if IS_COMPILED else "python"


class KernelUnsupported(ConfigError):
    """Configuration outside the kernel surface; use the reference engine."""


def _encode_kind(kind: OracleKind, n_samples: int):
    """(code, batch, sigma, dist, swrap, sdelta) for one agent's oracle."""
    swrap, sdelta = 0, 1.0
    if isinstance(kind, Straggler):
        if isinstance(kind.inner, Straggler):
            raise KernelUnsupported("nested stragglers are reference-only")
        swrap, sdelta = 1, float(kind.delta)
        kind = kind.inner
    if isinstance(kind, MiniBatch):
        if kind.batch_size >= n_samples:
            return (2, 0, 0.0, 0, swrap, sdelta)
        return (0, int(kind.batch_size), 0.0, 0, swrap, sdelta)
    if isinstance(kind, Perturbed):
        dist = 0 if kind.distribution == GAUSSIAN else 1
        return (1, 1, float(kind.sigma_v), dist, swrap, sdelta)
    if isinstance(kind, ExactPlusPerturbation):
        return (2, 0, float(kind.sigma_v), 0, swrap, sdelta)
    raise KernelUnsupported(f"oracle kind {kind!r} is reference-only")


def _encode(problem, fc):
    if getattr(problem, "H_all", None) is None:
        raise KernelUnsupported("kernels need a stacked logistic dataset")
    rows = [_encode_kind(fc.kinds[k], problem.n_samples(k)) for k in range(fc.K)]
    arr = np.array(rows, dtype=np.float64)
    return {
        "H": np.ascontiguousarray(problem.H_all),
        "gam": np.ascontiguousarray(problem.gam_all),
        "rho": float(problem.rho),
        "d1": int(problem.d1),
        "p": np.ascontiguousarray(fc.p, dtype=np.float64),
        "E": np.ascontiguousarray(fc.E, dtype=np.int64),
        "L": int(fc.L),
        "mu": float(fc.mu),
        "codes": arr[:, 0].astype(np.int64),
        "batches": arr[:, 1].astype(np.int64),
        "sigmas": arr[:, 2].astype(np.float64),
        "dists": arr[:, 3].astype(np.int64),
        "swraps": arr[:, 4].astype(np.int64),
        "sdeltas": arr[:, 5].astype(np.float64),
    }


def supports(problem, fc) -> bool:
    try:
        _encode(problem, fc)
        return True
    except KernelUnsupported:
        return False


@dataclass
class MomentSums:
    """Order-independent Monte Carlo accumulators for one-round replication."""

    n: int
    sum_s: np.ndarray
    sum_s2: np.ndarray
    sum_ssT: np.ndarray
    sum_s2s2: np.ndarray
    sum_s4: float
    sum_s8: float
    sum_d4: float
    sum_d8: float

    def merge(self, other: "MomentSums") -> "MomentSums":
        return MomentSums(
            self.n + other.n,
            self.sum_s + other.sum_s,
            self.sum_s2 + other.sum_s2,
            self.sum_ssT + other.sum_ssT,
            self.sum_s2s2 + other.sum_s2s2,
            self.sum_s4 + other.sum_s4,
            self.sum_s8 + other.sum_s8,
            self.sum_d4 + other.sum_d4,
            self.sum_d8 + other.sum_d8,
        )

    # -- derived statistics -------------------------------------------------

    @property
    def mean(self) -> np.ndarray:
        return self.sum_s / self.n

    @property
    def mean_se(self) -> np.ndarray:
        var = np.maximum(self.sum_s2 / self.n - self.mean**2, 0.0)
        return np.sqrt(var / self.n)

    @property
    def m4(self) -> float:
        return self.sum_s4 / self.n

    @property
    def m4_se(self) -> float:
        var = max(self.sum_s8 / self.n - self.m4**2, 0.0)
        return float(np.sqrt(var / self.n))

    @property
    def cov(self) -> np.ndarray:
        """Raw second moment E[s s^T]; s has conditional zero mean."""
        c = self.sum_ssT / self.n
        return 0.5 * (c + c.T)

    @property
    def cov_se(self) -> np.ndarray:
        var = np.maximum(self.sum_s2s2 / self.n - (self.sum_ssT / self.n) ** 2, 0.0)
        se = np.sqrt(var / self.n)
        return 0.5 * (se + se.T)

    @property
    def d4(self) -> float:
        return self.sum_d4 / self.n

    @property
    def d4_se(self) -> float:
        var = max(self.sum_d8 / self.n - self.d4**2, 0.0)
        return float(np.sqrt(var / self.n))


@dataclass
class AgentNoiseStats:
    """Pooled per-draw noise stats plus the epoch-average fourth moment."""

    n_single: int
    sum_s: np.ndarray
    sum_s2: np.ndarray
    sum_ssT: np.ndarray
    sum_s2s2: np.ndarray
    sum_s4: float
    sum_s8: float
    n_avg: int
    sum_avg4: float
    sum_avg8: float

    @property
    def avg4(self) -> float:
        return self.sum_avg4 / self.n_avg

    @property
    def avg4_se(self) -> float:
        var = max(self.sum_avg8 / self.n_avg - self.avg4**2, 0.0)
        return float(np.sqrt(var / self.n_avg))


def trial_moments(
    problem, fc, w, trials: int, seed: int, trial_offset: int = 0, need_d: bool = True
) -> MomentSums:
    enc = _encode(problem, fc)
    out = _impl.trial_moments(
        int(seed) & 0xFFFFFFFFFFFFFFFF,
        np.ascontiguousarray(w, dtype=np.float64),
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
        int(trials),
        int(trial_offset),
        bool(need_d),
    )
    return MomentSums(*out)


def agent_noise_stats(
    problem,
    kind: OracleKind,
    k: int,
    w,
    epochs: int,
    trials: int,
    seed: int,
    trial_offset: int = 0,
) -> AgentNoiseStats:
    code, batch, sigma, dist, swrap, sdelta = _encode_kind(kind, problem.n_samples(k))
    if getattr(problem, "H_all", None) is None:
        raise KernelUnsupported("kernels need a stacked logistic dataset")
    out = _impl.agent_noise(
        int(seed) & 0xFFFFFFFFFFFFFFFF,
        np.ascontiguousarray(w, dtype=np.float64),
        int(k),
        np.ascontiguousarray(problem.H_all),
        np.ascontiguousarray(problem.gam_all),
        float(problem.rho),
        int(problem.d1),
        code,
        batch,
        sigma,
        dist,
        swrap,
        sdelta,
        int(epochs),
        int(trials),
        int(trial_offset),
    )
    return AgentNoiseStats(*out)


def trajectory(
    problem,
    w0,
    rounds: int,
    fc,
    compute_decomposition: bool = True,
    stop_j_below=None,
    stop_grad_sq_below=None,
    round_offset: int = 0,
):
    from .engine import DIVERGENCE_NORM, TrajectoryResult

    enc = _encode(problem, fc)
    out = _impl.trajectory(
        int(fc.seed) & 0xFFFFFFFFFFFFFFFF,
        np.ascontiguousarray(w0, dtype=np.float64),
        int(rounds),
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
        bool(compute_decomposition),
        float("nan") if stop_j_below is None else float(stop_j_below),
        float("nan") if stop_grad_sq_below is None else float(stop_grad_sq_below),
        DIVERGENCE_NORM,
        int(round_offset),
    )
    w_hist, J, gn, s_norm, d_norm, residual, rounds_run, diverged = out
    return TrajectoryResult(
        w_hist=w_hist,
        J=J,
        grad_norm=gn,
        s_norm=s_norm if compute_decomposition else None,
        d_norm=d_norm if compute_decomposition else None,
        residual=residual if compute_decomposition else None,
        rounds_run=int(rounds_run),
        diverged=bool(diverged),
    )
