import csv
import json
import shutil

import numpy as np
import pytest

import lvse.runner as runner
from lvse.allocation import EquipmentVariant
from lvse.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from lvse.grid import load_grid, resolve_grid_path
from lvse.powerflow import run_timeseries
from lvse.runner import ConfigError, ScenarioConfig, SolverOptions, load_config, run_scenario


def write_config(path, body):
    path.write_text(body, encoding="utf-8")
    return path


CHAIN3 = """
[scenario]
grid = chain3
t0 = 0
t1 = 4
seed = 7
out = out

[variant 1]
substation = none
"""

RURAL_TWO = """
[scenario]
grid = synth-rural
t0 = 100
t1 = 124
seed = 3
out = out

[variant 1]
substation = none

[variant 2]
substation = digions
ikvs_pct = 25
imsys_pct = 11
seed = 1
"""


def test_chain3_sample_counts(tmp_path):
    art = run_scenario(load_config(write_config(tmp_path / "c.ini", CHAIN3)))
    assert art.ok
    report = json.loads((tmp_path / "out" / "variant-1" / "report.json").read_text())
    assert report["counts"]["voltage"] == 12 and report["counts"]["loading"] == 8
    assert report["timesteps"] == 4 and report["seed"] == 7
    assert set(report["pass"]) == {"grid_planning", "connection_request", "monitoring_active_mgmt"}
    assert (tmp_path / "out" / "variant-1" / "allocation.csv").exists()
    assert (tmp_path / "out" / "run.log").read_text().count("variant 1") >= 1


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.ini", RURAL_TWO)
    first = run_scenario(load_config(cfg, out_dir=str(tmp_path / "a")))
    second = run_scenario(load_config(cfg, out_dir=str(tmp_path / "b")))
    assert first.fingerprint == second.fingerprint
    for name in ("1", "2"):
        for f in ("report.json", "report.csv", "allocation.csv"):
            assert (tmp_path / "a" / f"variant-{name}" / f).read_bytes() == (tmp_path / "b" / f"variant-{name}" / f).read_bytes()
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()


def test_worker_count_does_not_change_results(tmp_path):
    cfg = write_config(tmp_path / "c.ini", RURAL_TWO)
    run_scenario(load_config(cfg, out_dir=str(tmp_path / "a"), workers=1))
    run_scenario(load_config(cfg, out_dir=str(tmp_path / "b"), workers=3))
    for name in ("1", "2"):
        assert (tmp_path / "a" / f"variant-{name}" / "report.json").read_bytes() == \
            (tmp_path / "b" / f"variant-{name}" / "report.json").read_bytes()


def test_dumps(tmp_path):
    cfg = write_config(tmp_path / "c.ini", CHAIN3)
    run_scenario(load_config(cfg, dumps=("truth", "measurements", "estimates", "samples")))
    out = tmp_path / "out"
    vdir = out / "variant-1"
    for f in ("measurements.csv", "se_result.csv", "diagnostics.csv", "samples.csv"):
        assert (vdir / f).exists(), f
    assert (out / "pseudo_errors.csv").exists()
    rows = list(csv.DictReader(open(out / "pf_truth.csv")))
    sols = run_timeseries(load_grid("chain3"), range(4))
    vm = {(int(r["t"]), r["element"]): float(r["value"]) for r in rows if r["quantity"] == "vm_pu"}
    assert vm[(2, "B3")] == sols[2].vm[2]
    meas = list(csv.DictReader(open(vdir / "measurements.csv")))
    assert len(meas) == 4 * 3 and {r["origin"] for r in meas} == {"pseudo"}


def test_failed_pair_is_isolated(tmp_path, monkeypatch):
    real = runner.expand_to_specs

    def flaky(grid, variant, allocation=None):
        if variant.name == "2":
            raise RuntimeError("boom")
        return real(grid, variant, allocation)

    monkeypatch.setattr(runner, "expand_to_specs", flaky)
    art = run_scenario(load_config(write_config(tmp_path / "c.ini", RURAL_TWO)))
    assert set(art.quality) == {"1"} and "boom" in art.failed["2"]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["failed"] == {"2": "RuntimeError: boom"}


def test_timestep_errors_logged(tmp_path):
    cfg = write_config(tmp_path / "c.ini", CHAIN3.replace("out = out", "out = out\nse_max_iter = 1"))
    art = run_scenario(load_config(cfg))
    assert not art.ok
    log = (tmp_path / "out" / "variant-1" / "errors.log").read_text().splitlines()
    assert len(log) == 4 and log[0].startswith("t=0: RuntimeError: WLS did not converge")


def test_warm_start_runs(tmp_path):
    cfg = write_config(tmp_path / "c.ini", CHAIN3.replace("out = out", "out = out\nwarm_start = true"))
    config = load_config(cfg)
    assert config.solver.warm_start
    assert run_scenario(config).ok


def test_fingerprint_tracks_inputs(tmp_path):
    cfg = write_config(tmp_path / "c.ini", CHAIN3)
    a = load_config(cfg)
    b = load_config(cfg, workers=4, out_dir="elsewhere")
    c = load_config(cfg, seed=8)
    digest = runner.grid_fingerprint(a.grid_path)
    assert runner.config_fingerprint(a, digest) == runner.config_fingerprint(b, digest)
    assert runner.config_fingerprint(a, digest) != runner.config_fingerprint(c, digest)


def test_config_sections(tmp_path):
    body = CHAIN3 + "\n[pseudo]\ncos_phi = 0.9\nsigma_load_rel = 0.2\n\n[variant x]\nsubstation = ions\nimsys_pct = 50\n"
    cfg = load_config(write_config(tmp_path / "c.ini", body))
    assert [v.name for v in cfg.variants] == ["1", "x"]
    assert cfg.pseudo.cos_phi == 0.9 and cfg.pseudo.sigma_load_rel == 0.2
    assert cfg.variants[1].imsys_fraction == 50


@pytest.mark.parametrize("body,match", [
    (CHAIN3.replace("t1 = 4", "t1 = 0"), "timestep window"),
    (CHAIN3.replace("seed = 7", "seed = 7\ncolour = red"), "unknown keys"),
    (CHAIN3.replace("substation = none", "substation = fancy"), "substation"),
    (CHAIN3.replace("[variant 1]\nsubstation = none", ""), "no variants"),
    ("[pseudo]\ncos_phi = 2\n", "scenario"),
    (CHAIN3 + "\n[pseudo]\ncos_phi = 2\n", "cos_phi"),
])
def test_config_errors(tmp_path, body, match):
    with pytest.raises(ConfigError, match=match):
        cfg = load_config(write_config(tmp_path / "c.ini", body))
        run_scenario(cfg)


def test_profile_window_checked(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.ini", CHAIN3.replace("t1 = 4", "t1 = 700")))
    with pytest.raises(ConfigError, match="covers 672 < 700"):
        run_scenario(cfg)


def test_shared_truth_across_variants(tmp_path):
    config = ScenarioConfig("chain3", [EquipmentVariant("a"), EquipmentVariant("b", None, 0, 100, 0)],
                            t0=10, t1=14, seed=1, out_dir=str(tmp_path), dumps=("truth",),
                            solver=SolverOptions())
    art = run_scenario(config)
    assert art.ok and set(art.quality) == {"a", "b"}
    # metering the only prosumer replaces its pseudo value, so line currents become far more accurate
    assert art.quality["b"].q95_loading < 0.1 * art.quality["a"].q95_loading
    truth = list(csv.DictReader(open(tmp_path / "pf_truth.csv")))
    assert {int(r["t"]) for r in truth} == {10, 11, 12, 13}


# CLI -------------------------------------------------------------------------

def test_cli_run_and_compare(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", RURAL_TWO)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--workers", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "variant 1:" in out and "variant 2:" in out
    reports = [str(tmp_path / "r" / f"variant-{n}" / "report.json") for n in ("2", "1")]
    assert main(["compare", "--reports", *reports, "--out", str(tmp_path / "cmp")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "cmp" / "comparison.csv")))
    assert [r["variant"] for r in rows] == ["1", "2"]


def test_cli_compare_rejects_other_grid(tmp_path):
    a = write_config(tmp_path / "a.ini", CHAIN3.replace("out = out", "out = ra"))
    b = write_config(tmp_path / "b.ini", RURAL_TWO.replace("out = out", "out = rb").replace("t0 = 100\nt1 = 124", "t0 = 0\nt1 = 4"))
    assert main(["run", "--config", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(b)]) == EXIT_OK
    reports = [str(tmp_path / "ra" / "variant-1" / "report.json"), str(tmp_path / "rb" / "variant-1" / "report.json")]
    assert main(["compare", "--reports", *reports, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    bad_grid = write_config(tmp_path / "g.ini", CHAIN3.replace("grid = chain3", "grid = nowhere"))
    assert main(["run", "--config", str(bad_grid)]) == EXIT_CONFIG
    partial = write_config(tmp_path / "p.ini", CHAIN3.replace("out = out", "out = out\nse_max_iter = 1"))
    assert main(["run", "--config", str(partial)]) == EXIT_PARTIAL


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--grid", "synth-rural"]) == EXIT_OK
    assert "20 buses, 19 lines, 2 cabinets, 18 prosumers, 2 feeders" in capsys.readouterr().out
    broken = tmp_path / "broken"
    shutil.copytree(resolve_grid_path("chain3"), broken)
    with open(broken / "lines.csv", "a") as fh:
        fh.write("L9,B3,B99,0.1,0.1,100\n")
    assert main(["validate", "--grid", str(broken)]) == EXIT_CONFIG


def test_cli_dump_flag(tmp_path):
    cfg = write_config(tmp_path / "c.ini", CHAIN3)
    assert main(["run", "--config", str(cfg), "--dump", "truth", "--dump", "estimates"]) == EXIT_OK
    assert (tmp_path / "out" / "pf_truth.csv").exists()
    assert (tmp_path / "out" / "variant-1" / "se_result.csv").exists()


def test_bundled_six_variant_config_parses():
    from importlib.resources import files
    cfg = load_config(files("lvse") / "data" / "configs" / "six_variants.ini")
    assert [v.name for v in cfg.variants] == ["1", "2", "3", "4", "5", "6"]
    assert [(v.ikvs_fraction, v.imsys_fraction) for v in cfg.variants] == [
        (0, 0), (0, 0), (100, 0), (25, 0), (0, 11), (0, 5)]
    assert np.isclose(cfg.pseudo.cos_phi, 0.95)
