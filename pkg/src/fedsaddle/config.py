"""Run configuration: JSON schema, validation, defaults, manifest.

A run config is a JSON object with optional sections ``problem``,
``federation``, ``stationarity``, ``verification``, ``experiment`` plus top-level
``seed`` and ``output_dir``.  Unknown keys anywhere are rejected with the
offending field path.  Every run writes a manifest embedding the fully
resolved config; feeding the manifest back through ``--config`` reproduces
the run byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import FederationConfig
from .errors import SchemaError
from .oracles import (
    GAUSSIAN,
    LAPLACIAN,
    ExactPlusPerturbation,
    MiniBatch,
    OracleKind,
    Perturbed,
    Straggler,
)
from .problem import LogisticProblem, ProblemConfig

SCHEMA_VERSION = 1

_DEFAULT_ORACLE = {"type": "straggler", "delta": 0.5,
                   "inner": {"type": "minibatch", "batch_size": 1}}


def oracle_from_json(obj, path="oracle") -> OracleKind:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected an object")
    kind = obj.get("type")
    known = {
        "minibatch": {"type", "batch_size"},
        "perturbed": {"type", "sigma_v", "distribution"},
        "straggler": {"type", "delta", "inner"},
        "exact_plus_perturbation": {"type", "sigma_v"},
    }
    if kind not in known:
        raise SchemaError(f"{path}.type: unknown oracle type {kind!r}")
    extra = set(obj) - known[kind]
    if extra:
        raise SchemaError(f"{path}: unknown keys {sorted(extra)}")
    try:
        if kind == "minibatch":
            out = MiniBatch(int(obj["batch_size"]))
        elif kind == "perturbed":
            dist = obj.get("distribution", GAUSSIAN)
            if dist not in (GAUSSIAN, LAPLACIAN):
                raise SchemaError(f"{path}.distribution: {dist!r}")
            out = Perturbed(float(obj["sigma_v"]), dist)
        elif kind == "straggler":
            out = Straggler(
                float(obj["delta"]), oracle_from_json(obj["inner"], path + ".inner")
            )
        else:
            out = ExactPlusPerturbation(float(obj["sigma_v"]))
        out.validate()
        return out
    except KeyError as exc:
        raise SchemaError(f"{path}: missing key {exc.args[0]!r}") from None


def oracle_to_json(kind: OracleKind) -> dict:
    if isinstance(kind, MiniBatch):
        return {"type": "minibatch", "batch_size": kind.batch_size}
    if isinstance(kind, Perturbed):
        return {"type": "perturbed", "sigma_v": kind.sigma_v, "distribution": kind.distribution}
    if isinstance(kind, Straggler):
        return {"type": "straggler", "delta": kind.delta, "inner": oracle_to_json(kind.inner)}
    if isinstance(kind, ExactPlusPerturbation):
        return {"type": "exact_plus_perturbation", "sigma_v": kind.sigma_v}
    raise SchemaError(f"cannot serialize oracle {kind!r}")


@dataclass
class VerificationConfig:
    trials: int = 100_000
    profile_trials: int = 20_000
    probes: int = 3
    probe_radius: float = 1.5
    mean_se_mult: float = 4.0
    moment_se_mult: float = 5.0
    epoch_grid: tuple = (1, 2, 4, 16)


@dataclass
class StationarityConfig:
    tau: Optional[float] = None  # None: half the saddle eigenvalue magnitude
    pi: float = 0.05
    M: float = 1.0


@dataclass
class ExperimentConfig:
    max_rounds: int = 100_000
    init_offset: float = 1e-3
    eps_escape_frac: float = 0.01
    L_values: tuple = (1, 10, 100)
    replicates: int = 5
    early_stop: bool = True
    segment_rounds: int = 500
    csv_stride: int = 1
    constants: str = "measured"  # or "formula"
    constants_trials: int = 5_000
    control_rounds: int = 2_000


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    federation_L: int = 10
    federation_mu: float = 0.05
    federation_epochs: int = 10
    federation_weights: Optional[tuple] = None  # None: uniform
    oracles: tuple = ()  # per-agent kinds; filled at build time
    stationarity: StationarityConfig = field(default_factory=StationarityConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    rounds: int = 2_000  # plain simulate horizon

    def build_problem(self) -> LogisticProblem:
        return LogisticProblem(self.problem)

    def weights(self) -> np.ndarray:
        if self.federation_weights is None:
            return np.full(self.problem.K, 1.0 / self.problem.K)
        return np.asarray(self.federation_weights, dtype=np.float64)

    def build_federation(self, L: Optional[int] = None, seed: Optional[int] = None) -> FederationConfig:
        K = self.problem.K
        kinds = self.oracles if self.oracles else tuple(
            [oracle_from_json(_DEFAULT_ORACLE)] * K
        )
        if len(kinds) == 1 and K > 1:
            kinds = tuple([kinds[0]] * K)
        return FederationConfig(
            K=K,
            L=self.federation_L if L is None else int(L),
            mu=self.federation_mu,
            p=self.weights(),
            E=np.full(K, self.federation_epochs, dtype=np.int64),
            kinds=kinds,
            seed=self.seed if seed is None else int(seed),
        )

    def to_json(self) -> dict:
        if not self.oracles or len(set(self.oracles)) == 1:
            oracle_part = {
                "oracle": oracle_to_json(self.oracles[0]) if self.oracles
                else dict(_DEFAULT_ORACLE)
            }
        else:
            oracle_part = {"oracles": [oracle_to_json(k) for k in self.oracles]}
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "rounds": self.rounds,
            "problem": asdict(self.problem),
            "federation": {
                "L": self.federation_L,
                "mu": self.federation_mu,
                "epochs": self.federation_epochs,
                "weights": "uniform" if self.federation_weights is None
                else list(self.federation_weights),
                **oracle_part,
            },
            "stationarity": {"tau": self.stationarity.tau, "pi": self.stationarity.pi,
                             "M": self.stationarity.M},
            "verification": {
                "trials": self.verification.trials,
                "profile_trials": self.verification.profile_trials,
                "probes": self.verification.probes,
                "probe_radius": self.verification.probe_radius,
                "mean_se_mult": self.verification.mean_se_mult,
                "moment_se_mult": self.verification.moment_se_mult,
                "epoch_grid": list(self.verification.epoch_grid),
            },
            "experiment": {
                "max_rounds": self.experiment.max_rounds,
                "init_offset": self.experiment.init_offset,
                "eps_escape_frac": self.experiment.eps_escape_frac,
                "L_values": list(self.experiment.L_values),
                "replicates": self.experiment.replicates,
                "early_stop": self.experiment.early_stop,
                "segment_rounds": self.experiment.segment_rounds,
                "csv_stride": self.experiment.csv_stride,
                "constants": self.experiment.constants,
                "constants_trials": self.experiment.constants_trials,
                "control_rounds": self.experiment.control_rounds,
            },
        }


def _expect_keys(obj: dict, allowed: set, path: str):
    extra = set(obj) - allowed
    if extra:
        raise SchemaError(f"{path}: unknown keys {sorted(extra)}")


def _coerce(obj, key, conv, default, path):
    if key not in obj or obj[key] is None:
        return default
    try:
        return conv(obj[key])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}.{key}: {exc}") from None


def config_from_json(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise SchemaError("top level: expected a JSON object")
    if "config" in obj and "schema_version" in obj:  # a manifest
        obj = obj["config"]
    _expect_keys(
        obj,
        {"seed", "output_dir", "rounds", "problem", "federation", "stationarity",
         "verification", "experiment"},
        "top level",
    )
    pr = obj.get("problem", {})
    _expect_keys(
        pr,
        {"d1", "d2", "rho", "K", "samples_per_agent", "heterogeneity_scale",
         "class_mean_scale", "seed"},
        "problem",
    )
    seed = _coerce(obj, "seed", int, 0, "top level")
    problem = ProblemConfig(
        d1=_coerce(pr, "d1", int, 2, "problem"),
        d2=_coerce(pr, "d2", int, 2, "problem"),
        rho=_coerce(pr, "rho", float, 0.01, "problem"),
        K=_coerce(pr, "K", int, 100, "problem"),
        samples_per_agent=_coerce(pr, "samples_per_agent", int, 20, "problem"),
        heterogeneity_scale=_coerce(pr, "heterogeneity_scale", float, 0.5, "problem"),
        class_mean_scale=_coerce(pr, "class_mean_scale", float, 1.0, "problem"),
        seed=_coerce(pr, "seed", int, seed, "problem"),
    )
    fe = obj.get("federation", {})
    _expect_keys(fe, {"L", "mu", "epochs", "weights", "oracle", "oracles"}, "federation")
    L = _coerce(fe, "L", int, min(10, problem.K), "federation")
    if not (1 <= L <= problem.K):
        raise SchemaError(
            f"federation.L: need 1 <= L <= problem.K, got L={L}, K={problem.K}"
        )
    weights = fe.get("weights", "uniform")
    if weights == "uniform" or weights is None:
        weights_t = None
    else:
        weights_t = tuple(float(x) for x in weights)
        if len(weights_t) != problem.K:
            raise SchemaError("federation.weights: wrong length")
    if "oracles" in fe and "oracle" in fe:
        raise SchemaError("federation: give either oracle or oracles, not both")
    if "oracles" in fe:
        kinds = tuple(
            oracle_from_json(o, f"federation.oracles[{i}]")
            for i, o in enumerate(fe["oracles"])
        )
        if len(kinds) != problem.K:
            raise SchemaError("federation.oracles: wrong length")
    else:
        kinds = tuple([oracle_from_json(fe.get("oracle", _DEFAULT_ORACLE))] * problem.K)

    th = obj.get("stationarity", {})
    _expect_keys(th, {"tau", "pi", "M"}, "stationarity")
    stationarity = StationarityConfig(
        tau=None if th.get("tau") is None else float(th["tau"]),
        pi=_coerce(th, "pi", float, 0.05, "stationarity"),
        M=_coerce(th, "M", float, 1.0, "stationarity"),
    )
    if not (0.0 < stationarity.pi < 0.5):
        raise SchemaError("stationarity.pi: must lie in (0, 1/2)")

    ve = obj.get("verification", {})
    _expect_keys(
        ve,
        {"trials", "profile_trials", "probes", "probe_radius", "mean_se_mult",
         "moment_se_mult", "epoch_grid"},
        "verification",
    )
    verification = VerificationConfig(
        trials=_coerce(ve, "trials", int, 100_000, "verification"),
        profile_trials=_coerce(ve, "profile_trials", int, 20_000, "verification"),
        probes=_coerce(ve, "probes", int, 3, "verification"),
        probe_radius=_coerce(ve, "probe_radius", float, 1.5, "verification"),
        mean_se_mult=_coerce(ve, "mean_se_mult", float, 4.0, "verification"),
        moment_se_mult=_coerce(ve, "moment_se_mult", float, 5.0, "verification"),
        epoch_grid=tuple(ve.get("epoch_grid", (1, 2, 4, 16))),
    )
    ex = obj.get("experiment", {})
    _expect_keys(
        ex,
        {"max_rounds", "init_offset", "eps_escape_frac", "L_values", "replicates",
         "early_stop", "segment_rounds", "csv_stride", "constants",
         "constants_trials", "control_rounds"},
        "experiment",
    )
    experiment = ExperimentConfig(
        max_rounds=_coerce(ex, "max_rounds", int, 100_000, "experiment"),
        init_offset=_coerce(ex, "init_offset", float, 1e-3, "experiment"),
        eps_escape_frac=_coerce(ex, "eps_escape_frac", float, 0.01, "experiment"),
        L_values=tuple(int(x) for x in ex.get("L_values", (1, 10, 100))),
        replicates=_coerce(ex, "replicates", int, 5, "experiment"),
        early_stop=bool(ex.get("early_stop", True)),
        segment_rounds=_coerce(ex, "segment_rounds", int, 500, "experiment"),
        csv_stride=_coerce(ex, "csv_stride", int, 1, "experiment"),
        constants=str(ex.get("constants", "measured")),
        constants_trials=_coerce(ex, "constants_trials", int, 5_000, "experiment"),
        control_rounds=_coerce(ex, "control_rounds", int, 2_000, "experiment"),
    )
    if experiment.constants not in ("measured", "formula"):
        raise SchemaError("experiment.constants: must be 'measured' or 'formula'")
    if any(not (1 <= l <= problem.K) for l in experiment.L_values):
        raise SchemaError(
            f"experiment.L_values: every L must satisfy 1 <= L <= K={problem.K}"
        )
    return RunConfig(
        seed=seed,
        output_dir=str(obj.get("output_dir", "out")),
        problem=problem,
        federation_L=L,
        federation_mu=_coerce(fe, "mu", float, 0.05, "federation"),
        federation_epochs=_coerce(fe, "epochs", int, 10, "federation"),
        federation_weights=weights_t,
        oracles=kinds,
        stationarity=stationarity,
        verification=verification,
        experiment=experiment,
        rounds=_coerce(obj, "rounds", int, 2_000, "top level"),
    )


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return config_from_json(obj)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, out_dir: Path, artifacts: list, extra: dict | None = None):
    from . import backend

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "backend": backend.BACKEND_NAME,
        "config": cfg.to_json(),
        "artifacts": {Path(a).name: sha256_file(a) for a in artifacts},
    }
    if extra:
        manifest["extra"] = extra
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
