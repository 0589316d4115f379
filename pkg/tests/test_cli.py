import json
from pathlib import Path

import numpy as np
import pytest

from fedsaddle.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VERIFY,
    main,
)
from fedsaddle.config import config_from_json, oracle_from_json, oracle_to_json, parse_config
from fedsaddle.errors import SchemaError
from fedsaddle.oracles import ExactPlusPerturbation, MiniBatch, Perturbed, Straggler

SMALL = {
    "seed": 5,
    "problem": {"K": 6, "samples_per_agent": 8, "d1": 2, "d2": 2},
    "federation": {"L": 3, "mu": 0.1, "epochs": 2},
    "verification": {"trials": 10_000, "profile_trials": 10_000, "probes": 2,
                     "epoch_grid": [1, 2]},
    "experiment": {"max_rounds": 3_000, "L_values": [2, 6], "replicates": 2,
                   "constants_trials": 10_000, "csv_stride": 4,
                   "control_rounds": 50},
    "rounds": 40,
}


def write_cfg(tmp_path, obj=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj if obj is not None else SMALL))
    return str(path)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_minimal_config_gets_defaults():
    cfg = config_from_json({"seed": 3})
    assert cfg.seed == 3
    assert cfg.problem.K == 100
    assert cfg.federation_L == 10
    j = cfg.to_json()
    assert j["federation"]["oracle"]["type"] == "straggler"
    # every effective value is echoed
    assert j["verification"]["trials"] == 100_000


def test_round_trip_identity():
    cfg = config_from_json(SMALL)
    again = config_from_json(cfg.to_json())
    assert again == cfg


def test_unknown_keys_rejected():
    with pytest.raises(SchemaError, match="unknown keys.*bogus"):
        config_from_json({"bogus": 1})
    with pytest.raises(SchemaError, match="problem"):
        config_from_json({"problem": {"dims": 3}})


def test_invariant_violation_names_fields():
    with pytest.raises(SchemaError, match="federation.L.*K"):
        config_from_json({"problem": {"K": 4}, "federation": {"L": 9}})
    with pytest.raises(SchemaError, match="L_values"):
        config_from_json({"problem": {"K": 4}, "federation": {"L": 2},
                          "experiment": {"L_values": [10]}})


def test_oracle_json_round_trip():
    kinds = [
        MiniBatch(3),
        Perturbed(0.5, "laplacian"),
        Straggler(0.5, MiniBatch(1)),
        ExactPlusPerturbation(0.2),
    ]
    for kind in kinds:
        assert oracle_from_json(oracle_to_json(kind)) == kind
    with pytest.raises(SchemaError, match="unknown oracle type"):
        oracle_from_json({"type": "svrg"})
    with pytest.raises(SchemaError, match="missing key"):
        oracle_from_json({"type": "minibatch"})


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        parse_config(tmp_path / "nope.json")


def test_parse_config_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(SchemaError, match="invalid JSON"):
        parse_config(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def test_simulate_writes_deterministic_csv(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg_path, "--out", str(out1), "simulate"]) == EXIT_OK
    assert main(["--config", cfg_path, "--out", str(out2), "simulate"]) == EXIT_OK
    t1 = (out1 / "trajectory.csv").read_bytes()
    t2 = (out2 / "trajectory.csv").read_bytes()
    assert t1 == t2
    header = t1.decode().splitlines()[0]
    assert header.startswith("round,J,grad_norm,w0")
    assert header.endswith("s_norm,d_norm,residual")
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["artifacts"] == m2["artifacts"]


def test_simulate_seed_override_changes_output(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg_path, "--out", str(out1), "simulate"]) == EXIT_OK
    assert main(["--config", cfg_path, "--out", str(out2), "--seed", "77", "simulate"]) == EXIT_OK
    assert (out1 / "trajectory.csv").read_bytes() != (out2 / "trajectory.csv").read_bytes()


def test_manifest_rerun_reproduces(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg_path, "--out", str(out1), "simulate"]) == EXIT_OK
    manifest = out1 / "manifest.json"
    # the embedded effective config re-parses to the RunConfig that ran
    # (the --out override is part of the effective config)
    as_run = config_from_json({**parse_config(cfg_path).to_json(), "output_dir": str(out1)})
    assert config_from_json(json.loads(manifest.read_text())) == as_run
    # override --out so the rerun lands elsewhere, then compare artifacts
    assert main(["--config", str(manifest), "--out", str(out2), "simulate"]) == EXIT_OK
    assert (out1 / "trajectory.csv").read_bytes() == (out2 / "trajectory.csv").read_bytes()
    assert (out1 / "datasets.csv").read_bytes() == (out2 / "datasets.csv").read_bytes()


def test_verify_moments_passes_and_negative_control_fails(tmp_path):
    obj = dict(SMALL)
    obj["verification"] = dict(SMALL["verification"], trials=12_000)
    cfg_path = write_cfg(tmp_path, obj)
    out = tmp_path / "v"
    assert main(["--config", cfg_path, "--out", str(out), "verify-moments"]) == EXIT_OK
    report = (out / "moment_report_probe0.csv").read_text()
    assert "FAIL" not in report
    out_nc = tmp_path / "nc"
    code = main(
        ["--config", cfg_path, "--out", str(out_nc), "verify-moments", "--negative-control"]
    )
    assert code == EXIT_VERIFY
    assert "FAIL" in (out_nc / "moment_report_probe0.csv").read_text()


def test_escape_sweep_end_to_end(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "sweep"
    assert main(["--config", cfg_path, "--out", str(out), "escape-sweep"]) == EXIT_OK
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "L,seed,round,J,grad_norm,dist_origin,escaped_flag,escape_round"
    Ls = {line.split(",")[0] for line in sweep[1:]}
    assert Ls == {"2", "6"}
    summary = (out / "sweep_summary.csv").read_text()
    assert "verdicts_passed" in summary
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["extra"]["control_pinned"] is True


def test_check_stationarity_roundtrip(tmp_path):
    cfg_path = write_cfg(tmp_path)
    saddle_point = tmp_path / "origin.json"
    saddle_point.write_text(json.dumps({"w": [0.0] * 6}))
    out = tmp_path / "s"
    code = main([
        "--config", cfg_path, "--out", str(out), "check-stationarity",
        "--model-point", str(saddle_point),
    ])
    assert code == EXIT_VERIFY  # strict saddle fails the curvature check
    verdict = json.loads((out / "stationarity.json").read_text())
    assert verdict["grad_ok"] is True
    assert verdict["curvature_ok"] is False

    bad_point = tmp_path / "bad.json"
    bad_point.write_text(json.dumps({"w": [0.0] * 4}))
    assert main([
        "--config", cfg_path, "--out", str(out), "check-stationarity",
        "--model-point", str(bad_point),
    ]) == EXIT_CONFIG


def test_estimate_constants_dump(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "c"
    assert main(["--config", cfg_path, "--out", str(out), "estimate-constants"]) == EXIT_OK
    dump = json.loads((out / "constants.json").read_text())
    assert set(dump) >= {
        "smoothness", "noise_profiles", "bound_constants_formula",
        "bound_constants_measured", "tau",
    }
    assert len(dump["noise_profiles"]) == 6
    assert dump["bound_constants_formula"]["beta_bar4"] >= 0


def test_bad_config_exit_code(tmp_path):
    cfg_path = write_cfg(tmp_path, {"problem": {"K": 2}, "federation": {"L": 5}})
    assert main(["--config", cfg_path, "simulate"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.json"), "simulate"]) == EXIT_CONFIG
