"""Command-line front-end.

Subcommands::

    simulate            run one trajectory, write trajectory.csv
    verify-moments      certify the perturbation-bound claims at probe points
    escape-sweep        saddle-escape study across participation levels
    check-stationarity  second-order verdict for a stored model point
    estimate-constants  dump smoothness, noise profiles, and bound constants

Exit codes: 0 success, 2 configuration/schema error, 3 verification failed,
4 I/O error, 5 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import backend
from .bounds import (
    check_epoch_average_bound,
    check_noise_claims,
    bound_constants,
    measure_aggregate_constants,
)
from .config import (
    RunConfig,
    config_from_json,
    oracle_to_json,
    parse_config,
    write_manifest,
)
from .engine import run_trajectory
from .errors import ConfigError, SchemaError
from .model import ModelPoint
from .numdiff import min_eigenvalue
from .oracles import NoiseProfile, noise_profile_estimate
from .problem import (
    dump_datasets_csv,
    estimate_smoothness,
    probe_points,
)
from .rng import derive_seed
from .saddle import (
    StationarityParams,
    grad_threshold,
    initial_offset_point,
    participation_sweep,
    pilot_minimum,
    second_order_check,
    theoretical_escape_times,
    write_sweep_csv,
    write_sweep_summary_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4
EXIT_DIVERGED = 5

# analysis tags for derived sub-seeds
TAG_SIMULATE = 11
TAG_VERIFY = 12
TAG_SWEEP = 13
TAG_CONSTANTS = 14
TAG_PROBES = 15


def _probes(cfg: RunConfig, problem):
    return probe_points(
        problem.dim,
        cfg.verification.probes,
        seed=derive_seed(cfg.seed, TAG_PROBES),
        radius=cfg.verification.probe_radius,
    )


def _tau(cfg: RunConfig, problem) -> float:
    if cfg.stationarity.tau is not None:
        return cfg.stationarity.tau
    lam = problem.saddle_min_eigenvalue(cfg.weights())
    if lam >= 0:
        raise ConfigError(
            "stationarity.tau unset and the origin is not a strict saddle; set tau explicitly"
        )
    return abs(lam) / 2.0


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _trajectory_fields(dim):
    return ["round", "J", "grad_norm"] + [f"w{j}" for j in range(dim)] + [
        "s_norm", "d_norm", "residual"
    ]


def cmd_simulate(cfg: RunConfig, out: Path, workers: int) -> int:
    problem = cfg.build_problem()
    fc = cfg.build_federation(seed=derive_seed(cfg.seed, TAG_SIMULATE))
    w0 = initial_offset_point(problem.dim, cfg.experiment.init_offset)
    traj = run_trajectory(problem, w0, cfg.rounds, fc, compute_decomposition=True)
    rows = traj.csv_rows()
    for row in rows:
        for key in ("J", "grad_norm", "s_norm", "d_norm", "residual"):
            if row[key] != "":
                row[key] = repr(float(row[key]))
        for j in range(problem.dim):
            row[f"w{j}"] = repr(float(row[f"w{j}"]))
    traj_path = out / "trajectory.csv"
    _write_csv(traj_path, _trajectory_fields(problem.dim), rows)
    data_path = out / "datasets.csv"
    dump_datasets_csv(problem.datasets, data_path)
    write_manifest(cfg, out, [traj_path, data_path])
    print(f"wrote {traj_path} ({traj.rounds_run} rounds)")
    if traj.diverged:
        print("trajectory diverged; truncated", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_verify_moments(cfg: RunConfig, out: Path, workers: int, negative_control: bool) -> int:
    problem = cfg.build_problem()
    fc = cfg.build_federation(seed=derive_seed(cfg.seed, TAG_VERIFY))
    probes = _probes(cfg, problem)
    sm = estimate_smoothness(problem, probes)
    profiles = [
        noise_profile_estimate(
            problem, fc.kinds[k], k, probes, cfg.verification.profile_trials,
            seed=derive_seed(cfg.seed, TAG_VERIFY, 100 + k),
        )
        for k in range(fc.K)
    ]
    constants = bound_constants(fc, profiles, sm)
    if negative_control:
        # claim the oracles are noiseless; any actual noise must be detected
        import numpy as _np

        from .bounds import BoundConstants

        constants = BoundConstants(
            beta_bar4=0.0,
            sigma_bar4=0.0,
            beta_bar_k4=_np.zeros(fc.K),
            sigma_bar_k4=_np.zeros(fc.K),
            sigma_bar_ell2=0.0,
            d_bound_coeff=0.0,
            provenance="negative control (all constants zeroed)",
        )

    artifacts = []
    all_passed = True
    for j, w in enumerate(probes):
        report = check_noise_claims(
            problem, fc, w, cfg.verification.trials,
            seed=derive_seed(cfg.seed, TAG_VERIFY, 200 + j),
            profiles=profiles, sm=sm, constants_override=constants,
            workers=workers,
            mean_se_mult=cfg.verification.mean_se_mult,
            moment_se_mult=cfg.verification.moment_se_mult,
        )
        path = out / f"moment_report_probe{j}.csv"
        report.write_csv(path)
        artifacts.append(path)
        all_passed &= report.all_passed
        print(f"probe {j}:")
        print(report.summary())

    epoch_rows = []
    for E in cfg.verification.epoch_grid:
        v = check_epoch_average_bound(
            problem, fc.kinds[0], 0, probes[0], int(E), cfg.verification.trials,
            seed=derive_seed(cfg.seed, TAG_VERIFY, 300 + int(E)),
            profile=profiles[0],
        )
        epoch_rows.append(
            {
                "epochs": v.epochs,
                "lhs_mc": repr(v.lhs_mc),
                "lhs_se": repr(v.lhs_se),
                "lhs_analytic": "" if v.lhs_analytic is None else repr(v.lhs_analytic),
                "rhs": repr(v.rhs),
                "verdict": "pass" if v.passed else "FAIL",
            }
        )
        all_passed &= v.passed
        print(f"epoch-average E={v.epochs}: lhs={v.lhs_mc:.6g} rhs={v.rhs:.6g} "
              f"{'pass' if v.passed else 'FAIL'}")
    epoch_path = out / "epoch_average.csv"
    _write_csv(
        epoch_path,
        ["epochs", "lhs_mc", "lhs_se", "lhs_analytic", "rhs", "verdict"],
        epoch_rows,
    )
    artifacts.append(epoch_path)
    write_manifest(cfg, out, artifacts, extra={"negative_control": negative_control})
    return EXIT_OK if all_passed else EXIT_VERIFY


def _constants_for(cfg, problem, fc, sm, probes, L):
    if cfg.experiment.constants == "measured":
        # anchor the envelope fit with a small-gradient probe near a minimum
        pilot_rounds = max(500, int(round(25.0 / max(cfg.federation_mu, 1e-6))))
        anchor = pilot_minimum(
            problem, cfg.weights(), cfg.federation_mu,
            rounds=min(pilot_rounds, cfg.experiment.max_rounds),
            init_offset=max(cfg.experiment.init_offset, 1e-6),
        )
        return measure_aggregate_constants(
            problem, fc, list(probes) + [anchor], cfg.experiment.constants_trials,
            seed=derive_seed(cfg.seed, TAG_CONSTANTS, L),
        )
    profiles = [
        noise_profile_estimate(
            problem, fc.kinds[k], k, probes, cfg.verification.profile_trials,
            seed=derive_seed(cfg.seed, TAG_CONSTANTS, 500 + k),
        )
        for k in range(fc.K)
    ]
    return bound_constants(fc, profiles, sm)


def cmd_escape_sweep(cfg: RunConfig, out: Path, workers: int) -> int:
    problem = cfg.build_problem()
    probes = _probes(cfg, problem)
    sm = estimate_smoothness(problem, probes)
    tau = _tau(cfg, problem)
    tp_by_l = {}
    stop_by_l = {}
    lc_by_l = {}
    for L in cfg.experiment.L_values:
        fc = cfg.build_federation(L=L)
        lc = _constants_for(cfg, problem, fc, sm, probes, L)
        tp = StationarityParams(tau=tau, pi_prob=cfg.stationarity.pi, M=cfg.stationarity.M,
                           mu=cfg.federation_mu)
        lc_by_l[L] = lc
        tp_by_l[L] = tp
        if cfg.experiment.early_stop:
            stop_by_l[L] = 0.25 * grad_threshold(tp, sm, lc)

    def checker(L, w):
        return second_order_check(problem, cfg.weights(), w, tp_by_l[L], sm, lc_by_l[L])

    fc_base = cfg.build_federation()
    records, summaries = participation_sweep(
        problem,
        fc_base,
        cfg.experiment.L_values,
        cfg.experiment.replicates,
        cfg.experiment.max_rounds,
        init_offset=cfg.experiment.init_offset,
        eps_escape=cfg.experiment.eps_escape_frac
        * abs(problem.aggregate_loss_flat(np.zeros(problem.dim), cfg.weights())),
        stop_grad_sq_by_L=stop_by_l if cfg.experiment.early_stop else None,
        stop_tau=tau if cfg.experiment.early_stop else None,
        checker=checker,
        seed_base=derive_seed(cfg.seed, TAG_SWEEP),
    )

    # noiseless pinned control from the exact saddle
    from .oracles import MiniBatch

    control_fc = cfg.build_federation(seed=derive_seed(cfg.seed, TAG_SWEEP, 999))
    control_fc = type(control_fc)(
        K=control_fc.K, L=control_fc.K, mu=control_fc.mu, p=control_fc.p,
        E=control_fc.E,
        kinds=tuple([MiniBatch(10**9)] * control_fc.K),
        seed=control_fc.seed,
    )
    from .saddle import escape_run

    control = escape_run(
        problem, control_fc, cfg.experiment.control_rounds, init_offset=0.0
    )
    control_pinned = bool(np.all(control.dist_origin == 0.0))

    sweep_path = out / "sweep.csv"
    write_sweep_csv(records, sweep_path, stride=cfg.experiment.csv_stride)
    summary_path = out / "sweep_summary.csv"
    write_sweep_summary_csv(summaries, summary_path)
    write_manifest(
        cfg, out, [sweep_path, summary_path],
        extra={"control_pinned": control_pinned, "tau": tau},
    )
    ok = control_pinned
    for s in summaries:
        print(
            f"L={s.L}: escaped {s.escaped}/{s.replicates}, "
            f"median escape round {s.median_escape}, "
            f"second-order passed {s.verdicts_passed}/{s.replicates}"
        )
        ok &= s.escaped == s.replicates and s.verdicts_passed == s.replicates
    print(f"noiseless control pinned at saddle: {control_pinned}")
    if any(r.diverged for r in records):
        return EXIT_DIVERGED
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_check_stationarity(cfg: RunConfig, out: Path, workers: int, point_path: str) -> int:
    problem = cfg.build_problem()
    try:
        obj = json.loads(Path(point_path).read_text())
    except FileNotFoundError:
        print(f"model point file not found: {point_path}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"invalid model point file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    w = np.asarray(obj["w"], dtype=np.float64) if isinstance(obj, dict) else np.asarray(obj)
    if w.shape != (problem.dim,):
        print(
            f"model point has wrong dimension {w.shape}, expected {problem.dim}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    probes = _probes(cfg, problem)
    sm = estimate_smoothness(problem, probes)
    fc = cfg.build_federation()
    lc = _constants_for(cfg, problem, fc, sm, probes, fc.L)
    tau = _tau(cfg, problem)
    tp = StationarityParams(tau=tau, pi_prob=cfg.stationarity.pi, M=cfg.stationarity.M, mu=cfg.federation_mu)
    v = second_order_check(problem, cfg.weights(), w, tp, sm, lc)
    result = {
        "grad_ok": v.grad_ok,
        "curvature_ok": v.curvature_ok,
        "grad_norm_sq": v.grad_norm_sq,
        "grad_threshold": v.grad_threshold,
        "lambda_min": v.lambda_min,
        "tau": v.tau,
    }
    path = out / "stationarity.json"
    path.write_text(json.dumps(result, indent=2) + "\n")
    write_manifest(cfg, out, [path])
    print(json.dumps(result, indent=2))
    return EXIT_OK if v.passed else EXIT_VERIFY


def cmd_estimate_constants(cfg: RunConfig, out: Path, workers: int) -> int:
    problem = cfg.build_problem()
    fc = cfg.build_federation()
    probes = _probes(cfg, problem)
    sm = estimate_smoothness(problem, probes)
    profiles = [
        noise_profile_estimate(
            problem, fc.kinds[k], k, probes, cfg.verification.profile_trials,
            seed=derive_seed(cfg.seed, TAG_CONSTANTS, 100 + k),
        )
        for k in range(fc.K)
    ]
    lc = bound_constants(fc, profiles, sm)
    measured = measure_aggregate_constants(
        problem, fc, probes, cfg.experiment.constants_trials,
        seed=derive_seed(cfg.seed, TAG_CONSTANTS, 7),
    )
    tau = _tau(cfg, problem)
    tp = StationarityParams(tau=tau, pi_prob=cfg.stationarity.pi, M=cfg.stationarity.M, mu=cfg.federation_mu)
    w0 = initial_offset_point(problem.dim, cfg.experiment.init_offset)
    J0 = problem.aggregate_loss_flat(w0, cfg.weights())
    escape_times = None
    for source, constants in (("formula", lc), ("measured", measured)):
        if constants.sigma_bar_ell2 > 0:
            et = theoretical_escape_times(tp, sm, constants, J0)
            escape_times = {"source": source, "i_s": et.i_s, "i_o": et.i_o}
            break

    dump = {
        "smoothness": {
            "delta": sm.delta, "rho_hess": sm.rho_hess, "G": sm.G, "U": sm.U,
            "delta_hat": sm.delta_hat, "J_floor": sm.J_floor,
        },
        "noise_profiles": [
            {
                "agent": k,
                "oracle": oracle_to_json(fc.kinds[k]),
                "beta4": profiles[k].beta4,
                "sigma4": profiles[k].sigma4,
                "sigma_ell2": profiles[k].sigma_ell2,
                "analytic": profiles[k].analytic,
                "source": profiles[k].source,
            }
            for k in range(fc.K)
        ],
        "bound_constants_formula": {
            "beta_bar4": lc.beta_bar4,
            "sigma_bar4": lc.sigma_bar4,
            "sigma_bar_ell2": lc.sigma_bar_ell2,
            "d_bound_coeff": lc.d_bound_coeff,
            "provenance": lc.provenance,
        },
        "bound_constants_measured": {
            "beta_bar4": measured.beta_bar4,
            "sigma_bar4": measured.sigma_bar4,
            "sigma_bar_ell2": measured.sigma_bar_ell2,
            "d_bound_coeff": measured.d_bound_coeff,
            "provenance": measured.provenance,
        },
        "tau": tau,
        "theoretical_escape_times": escape_times,
    }
    path = out / "constants.json"
    path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, out, [path])
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsaddle",
        description="Deterministic FedAvg simulator with noise-moment certification",
    )
    parser.add_argument("--config", type=str, default=None, help="JSON config or manifest")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default=None, help="override the output directory")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for Monte Carlo")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="run one trajectory and write CSV outputs")
    vm = sub.add_parser("verify-moments", help="certify the perturbation-bound claims")
    vm.add_argument(
        "--negative-control",
        action="store_true",
        help="deliberately zero the beta constants; the report must fail",
    )
    sub.add_parser("escape-sweep", help="saddle-escape study across participation levels")
    cs = sub.add_parser("check-stationarity", help="second-order verdict for a model point")
    cs.add_argument("--model-point", type=str, required=True, help="JSON file with {\"w\": [...]}")
    sub.add_parser("estimate-constants", help="dump smoothness/noise/bound constants")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else config_from_json({})
        if args.seed is not None:
            cfg = config_from_json({**cfg.to_json(), "seed": args.seed})
        if args.out is not None:
            cfg = config_from_json({**cfg.to_json(), "output_dir": args.out})
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.workers)
        if args.command == "verify-moments":
            return cmd_verify_moments(cfg, out, args.workers, args.negative_control)
        if args.command == "escape-sweep":
            return cmd_escape_sweep(cfg, out, args.workers)
        if args.command == "check-stationarity":
            return cmd_check_stationarity(cfg, out, args.workers, args.model_point)
        if args.command == "estimate-constants":
            return cmd_estimate_constants(cfg, out, args.workers)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
