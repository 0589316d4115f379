"""Saddle-escape experiments and second-order stationarity certification.

The benchmark cost has a strict saddle at the origin.  Runs start at a small
deterministic offset (or exactly at the origin for pinned controls), and
escape is declared when the aggregate cost drops below its saddle value by a
configurable margin; distance from the origin would be inflated by noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bounds import BoundConstants
from .engine import FederationConfig, run_trajectory
from .errors import ConfigError, StepSizeError
from .numdiff import min_eigenvalue
from .problem import SmoothnessEstimates

DEFAULT_ESCAPE_FRAC = 0.01
DEFAULT_INIT_OFFSET = 1e-3


@dataclass(frozen=True)
class StationarityParams:
    """Inputs of the stationarity guarantee; M is a config knob, not derived."""

    tau: float
    pi_prob: float = 0.05
    M: float = 1.0
    mu: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("curvature threshold tau must be positive")
        if not (0.0 < self.pi_prob < 0.5):
            raise ConfigError("failure probability must lie in (0, 1/2)")
        if self.M <= 0:
            raise ConfigError("M must be positive")
        if self.mu <= 0:
            raise ConfigError("step size must be positive")


@dataclass
class SecondOrderVerdict:
    grad_ok: bool
    curvature_ok: bool
    grad_norm_sq: float
    grad_threshold: float
    lambda_min: float
    tau: float

    @property
    def passed(self) -> bool:
        return self.grad_ok and self.curvature_ok


def grad_threshold(tp: StationarityParams, sm: SmoothnessEstimates, lc: BoundConstants) -> float:
    """O(mu) squared-gradient threshold; the O(mu^2) refinement is omitted."""
    beta_bar2 = math.sqrt(lc.beta_bar4)
    sigma_bar2 = math.sqrt(lc.sigma_bar4)
    denom = 1.0 - 2.0 * tp.mu * sm.delta * (1.0 + beta_bar2)
    if denom <= 0.0:
        raise StepSizeError(
            f"step size too large: 2 mu delta (1 + beta_bar^2) = {1.0 - denom:.3g} >= 1"
        )
    return tp.mu * sm.delta * sigma_bar2 / denom * (1.0 + 1.0 / tp.pi_prob)


def second_order_check(
    problem,
    p: np.ndarray,
    w: np.ndarray,
    tp: StationarityParams,
    sm: SmoothnessEstimates,
    lc: BoundConstants,
) -> SecondOrderVerdict:
    """Squared gradient below the O(mu) threshold and curvature above -tau."""
    w = np.asarray(w, dtype=np.float64)
    thr = grad_threshold(tp, sm, lc)
    gsq = float(np.linalg.norm(problem.aggregate_grad_flat(w, p)) ** 2)
    from .model import ModelPoint

    H = problem.hessian_j(ModelPoint.unflatten(w, problem.d1, problem.d2), p)
    lam = min_eigenvalue(H)
    return SecondOrderVerdict(
        grad_ok=bool(gsq <= thr),
        curvature_ok=bool(lam >= -tp.tau),
        grad_norm_sq=gsq,
        grad_threshold=thr,
        lambda_min=lam,
        tau=tp.tau,
    )


@dataclass
class EscapeTimes:
    i_s: float
    i_o: float


def theoretical_escape_times(
    tp: StationarityParams,
    sm: SmoothnessEstimates,
    lc: BoundConstants,
    J_init: float,
) -> EscapeTimes:
    """Escape-time and convergence-horizon formulas (O(mu) log term omitted)."""
    sigma_bar2 = math.sqrt(lc.sigma_bar4)
    if lc.sigma_bar_ell2 <= 0:
        raise ConfigError("escape time needs a positive covariance floor")
    i_s = math.log(2.0 * tp.M * sigma_bar2 / lc.sigma_bar_ell2 + 1.0) / math.log(
        1.0 + 2.0 * tp.mu * tp.tau
    )
    i_o = 2.0 * (J_init - sm.J_floor) / (tp.mu**2 * sm.delta * sigma_bar2) * i_s
    return EscapeTimes(i_s=i_s, i_o=i_o)


@dataclass
class EscapeRecord:
    L: int
    seed: int
    escape_round: Optional[int]
    rounds_run: int
    diverged: bool
    final_w: np.ndarray
    J: np.ndarray
    grad_norm: np.ndarray
    dist_origin: np.ndarray
    eps_escape: float
    J_saddle: float
    verdict: Optional[SecondOrderVerdict] = None

    @property
    def escaped(self) -> bool:
        return self.escape_round is not None

    def csv_rows(self, stride: int = 1):
        for i in range(0, self.rounds_run + 1, max(stride, 1)):
            yield {
                "L": self.L,
                "seed": self.seed,
                "round": i,
                "J": repr(float(self.J[i])),
                "grad_norm": repr(float(self.grad_norm[i])),
                "dist_origin": repr(float(self.dist_origin[i])),
                "escaped_flag": int(self.escape_round is not None and i >= self.escape_round),
                "escape_round": "" if self.escape_round is None else self.escape_round,
            }


def initial_offset_point(dim: int, init_offset: float) -> np.ndarray:
    """Deterministic starting point: all-ones direction scaled to the offset."""
    if init_offset == 0.0:
        return np.zeros(dim)
    u = np.ones(dim) / math.sqrt(dim)
    return init_offset * u


def pilot_minimum(
    problem, p: np.ndarray, mu: float, rounds: int = 500,
    init_offset: float = DEFAULT_INIT_OFFSET,
) -> np.ndarray:
    """Deterministic full-batch descent to a near-minimum point.

    Used to anchor measured moment envelopes with a small-gradient probe:
    without one, the envelope fit can push all mass onto the
    gradient-proportional term and report an unrealistically small noise
    floor at stationarity.
    """
    from .oracles import MiniBatch

    fc = FederationConfig(
        K=problem.K,
        L=problem.K,
        mu=mu,
        p=p,
        E=np.ones(problem.K, dtype=np.int64),
        kinds=tuple([MiniBatch(10**9)] * problem.K),
        seed=0,
    )
    traj = run_trajectory(
        problem,
        initial_offset_point(problem.dim, init_offset),
        rounds,
        fc,
        compute_decomposition=False,
    )
    return traj.w_hist[-1].copy()


def escape_run(
    problem,
    fc: FederationConfig,
    max_rounds: int,
    init_offset: float = DEFAULT_INIT_OFFSET,
    eps_escape: Optional[float] = None,
    stop_grad_sq: Optional[float] = None,
    stop_tau: Optional[float] = None,
    segment_rounds: int = 500,
    compute_decomposition: bool = False,
) -> EscapeRecord:
    """One trajectory from near the saddle with escape detection.

    With ``stop_grad_sq`` set, the run ends early once it has escaped and the
    squared gradient norm has dropped to that level; with ``stop_tau`` also
    set, the stop additionally requires the Hessian's smallest eigenvalue to
    clear ``-stop_tau`` (checked between fixed-size segments, so the run
    keeps descending through the mid-escape region where the gradient is
    small but the curvature is still negative).  Segmenting replays exactly
    the unsegmented randomness.  No escape within the horizon is recorded,
    not raised.
    """
    if max_rounds < 1:
        raise ConfigError("need at least one round")
    w0 = initial_offset_point(problem.dim, init_offset)
    J_saddle = problem.aggregate_loss_flat(np.zeros(problem.dim), fc.p)
    if eps_escape is None:
        eps_escape = DEFAULT_ESCAPE_FRAC * abs(J_saddle)
    stop_j = J_saddle - eps_escape if stop_grad_sq is not None else None

    from .model import ModelPoint

    def curvature_clears(w):
        if stop_tau is None:
            return True
        H = problem.hessian_j(ModelPoint.unflatten(w, problem.d1, problem.d2), fc.p)
        return min_eigenvalue(H) >= -stop_tau

    J_parts = []
    gn_parts = []
    w_parts = []
    w = w0
    done = 0
    diverged = False
    while done < max_rounds:
        seg = min(segment_rounds, max_rounds - done) if stop_grad_sq is not None else max_rounds
        traj = run_trajectory(
            problem,
            w,
            seg,
            fc,
            compute_decomposition=compute_decomposition,
            stop_j_below=stop_j,
            stop_grad_sq_below=stop_grad_sq,
            round_offset=done,
        )
        skip = 1 if done > 0 else 0
        J_parts.append(traj.J[skip:])
        gn_parts.append(traj.grad_norm[skip:])
        w_parts.append(traj.w_hist[skip:])
        w = traj.w_hist[-1]
        done += traj.rounds_run
        diverged = traj.diverged
        if diverged:
            break
        if traj.rounds_run < seg:  # in-run stop triggered
            if curvature_clears(w):
                break
            # not settled yet: resume from the stop point
            continue
        if (
            stop_grad_sq is not None
            and stop_j is not None
            and traj.J[-1] < stop_j
            and traj.grad_norm[-1] ** 2 <= stop_grad_sq
            and curvature_clears(w)
        ):
            break

    J = np.concatenate(J_parts)
    gn = np.concatenate(gn_parts)
    w_hist = np.concatenate(w_parts, axis=0)
    below = np.flatnonzero(J <= J_saddle - eps_escape)
    escape_round = int(below[0]) if below.size else None
    return EscapeRecord(
        L=fc.L,
        seed=fc.seed,
        escape_round=escape_round,
        rounds_run=done,
        diverged=diverged,
        final_w=w_hist[-1].copy(),
        J=J,
        grad_norm=gn,
        dist_origin=np.linalg.norm(w_hist, axis=1),
        eps_escape=eps_escape,
        J_saddle=J_saddle,
    )


def curve_shape_is_escape(grad_norm: np.ndarray, escape_round: Optional[int]) -> bool:
    """Plateau -> peak -> decay signature of a saddle-escape gradient curve."""
    if escape_round is None or escape_round < 4:
        return False
    gn = np.asarray(grad_norm, dtype=np.float64)
    plateau = float(np.median(gn[: max(escape_round // 2, 2)]))
    peak = float(np.max(gn))
    tail = float(np.median(gn[-max(len(gn) // 20, 3):]))
    return peak > 3.0 * max(plateau, 1e-12) and tail < 0.5 * peak


@dataclass
class SweepSummary:
    L: int
    replicates: int
    escaped: int
    escape_rounds: list
    verdicts_passed: int

    @property
    def median_escape(self) -> Optional[float]:
        rounds = [r for r in self.escape_rounds if r is not None]
        return float(np.median(rounds)) if rounds else None

    def quartiles(self):
        rounds = [r for r in self.escape_rounds if r is not None]
        if not rounds:
            return (None, None)
        return (float(np.percentile(rounds, 25)), float(np.percentile(rounds, 75)))


def participation_sweep(
    problem,
    fc_base: FederationConfig,
    L_values: Sequence[int],
    replicates: int,
    max_rounds: int,
    init_offset: float = DEFAULT_INIT_OFFSET,
    eps_escape: Optional[float] = None,
    stop_grad_sq_by_L: Optional[dict] = None,
    stop_tau: Optional[float] = None,
    checker: Optional[Callable[[int, np.ndarray], SecondOrderVerdict]] = None,
    seed_base: Optional[int] = None,
) -> tuple[list[EscapeRecord], list[SweepSummary]]:
    """Escape runs per participation level; replicate seeds are derived."""
    from .rng import derive_seed

    if any(L > fc_base.K for L in L_values):
        raise ConfigError("participation level cannot exceed K")
    seed_base = fc_base.seed if seed_base is None else seed_base
    records = []
    summaries = []
    for L in L_values:
        per_l = []
        for rep in range(replicates):
            fc = FederationConfig(
                K=fc_base.K,
                L=int(L),
                mu=fc_base.mu,
                p=fc_base.p,
                E=fc_base.E,
                kinds=fc_base.kinds,
                seed=derive_seed(seed_base, int(L), rep),
            )
            rec = escape_run(
                problem,
                fc,
                max_rounds,
                init_offset=init_offset,
                eps_escape=eps_escape,
                stop_grad_sq=None if stop_grad_sq_by_L is None else stop_grad_sq_by_L.get(int(L)),
                stop_tau=stop_tau,
            )
            if checker is not None:
                rec.verdict = checker(int(L), rec.final_w)
            per_l.append(rec)
        records.extend(per_l)
        summaries.append(
            SweepSummary(
                L=int(L),
                replicates=replicates,
                escaped=sum(r.escaped for r in per_l),
                escape_rounds=[r.escape_round for r in per_l],
                verdicts_passed=sum(
                    1 for r in per_l if r.verdict is not None and r.verdict.passed
                ),
            )
        )
    return records, summaries


SWEEP_FIELDS = ["L", "seed", "round", "J", "grad_norm", "dist_origin", "escaped_flag", "escape_round"]


def write_sweep_csv(records: Sequence[EscapeRecord], path, stride: int = 1):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for rec in records:
            for row in rec.csv_rows(stride):
                writer.writerow(row)


def write_sweep_summary_csv(summaries: Sequence[SweepSummary], path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=[
                "L",
                "replicates",
                "escaped",
                "median_escape_round",
                "q1_escape_round",
                "q3_escape_round",
                "verdicts_passed",
            ],
        )
        writer.writeheader()
        for s in summaries:
            q1, q3 = s.quartiles()
            writer.writerow(
                {
                    "L": s.L,
                    "replicates": s.replicates,
                    "escaped": s.escaped,
                    "median_escape_round": "" if s.median_escape is None else s.median_escape,
                    "q1_escape_round": "" if q1 is None else q1,
                    "q3_escape_round": "" if q3 is None else q3,
                    "verdicts_passed": s.verdicts_passed,
                }
            )
