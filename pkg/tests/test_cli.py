import json
import os

import pytest

from soficlab import cli
from soficlab.measures import RejectionBudgetError

SMALL_BATTERY = {
    "scenarios": [
        {
            "scenario": "mixture_example",
            "alphabet": ["0", "1"], "p": [0.5, 0.5], "q": [0.9, 0.1],
            "n_list": [60, 120], "sofic": {"kind": "random_free", "rank": 2},
            "window_radius": 1, "tol": 0.05, "cov_eps": 0.05,
            "eps_list": [0.25, 0.1], "k_band": 6, "samples": 200, "seeds": [7],
        },
        {
            "scenario": "coinduction",
            "alphabet": ["0", "1"], "p": [0.7, 0.3],
            "v_list": [10, 30], "w_list": [2, 4],
            "fibre_v": 15, "fibre_w": 8, "seeds": [5],
        },
    ]
}


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_numeric_outputs(outdir):
    out = {}
    manifest = json.loads((outdir / "manifest.json").read_text())
    for rec in manifest["outputs"]:
        out[rec["path"]] = (outdir / rec["path"]).read_bytes()
    return out


def test_run_and_verify_small_battery(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "results.json").exists()
    assert (out / "manifest.json").exists()
    csvs = [p for p in os.listdir(out) if p.endswith(".csv")]
    assert csvs
    pngs = [p for p in os.listdir(out) if p.endswith(".png")]
    assert pngs  # figures rendered alongside the delimited output
    assert cli.main(["verify", "--out", str(out)]) == 0
    verify = json.loads((out / "verify.json").read_text())
    assert verify["all_pass"]


def test_run_without_plots(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY["scenarios"][1])
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
    assert not [p for p in os.listdir(out) if p.endswith(".png")]


def test_invalid_config_negative_n_exits_2(tmp_path, capsys):
    bad = dict(SMALL_BATTERY["scenarios"][0], n_list=[-5, 100])
    cfg = write_config(tmp_path, bad)
    code = cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "n_list" in err


def test_invalid_scenario_name_exits_2(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "nope"})
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_semantic_config_error_exits_2(tmp_path):
    bad = dict(SMALL_BATTERY["scenarios"][0], p=[0.9, 0.1], q=[0.5, 0.5])
    cfg = write_config(tmp_path, bad)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_budget_exceeded_exits_3(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY["scenarios"][0])
    code = cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--budget-cells", "5"])
    assert code == 3


def test_rejection_failure_exits_4(tmp_path, monkeypatch):
    def explode(cfg, budget_cells, budget_samples):
        raise RejectionBudgetError("event mass too small")

    monkeypatch.setitem(cli.SCENARIOS, "coinduction", explode)
    cfg = write_config(tmp_path, SMALL_BATTERY["scenarios"][1])
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 4


def test_tampered_csv_fails_verify(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY["scenarios"][0])
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
    victim = next(out / p for p in os.listdir(out) if p.endswith("mixture_aep.csv"))
    lines = victim.read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("band_mass_at_H_p")
    doctored = [lines[0]]
    for row in lines[1:]:
        cells = row.split(",")
        cells[col] = repr(float(cells[col]) * 2.0)
        doctored.append(",".join(cells))
    victim.write_text("\n".join(doctored) + "\n")
    assert cli.main(["verify", "--out", str(out)]) == 1
    verify = json.loads((out / "verify.json").read_text())
    failed = {c["check"] for c in verify["checks"] if not c["pass"]}
    assert any(c.startswith("hash:") for c in failed)
    assert any(c.startswith("range:") for c in failed)


def test_rerun_same_seed_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", cfg, "--out", str(out1), "--no-plots"]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(out2), "--no-plots"]) == 0
    assert read_numeric_outputs(out1) == read_numeric_outputs(out2)


def test_jobs_parallelism_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", cfg, "--out", str(out1),
                     "--jobs", "1", "--no-plots"]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(out2),
                     "--jobs", "2", "--no-plots"]) == 0
    assert read_numeric_outputs(out1) == read_numeric_outputs(out2)


def test_seed_override(tmp_path):
    base = dict(SMALL_BATTERY["scenarios"][0])
    cfg = write_config(tmp_path, base)
    out1, out2, out3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    cli.main(["run", "--config", cfg, "--out", str(out1), "--no-plots"])
    cli.main(["run", "--config", cfg, "--out", str(out2), "--no-plots",
              "--seed-override", "99"])
    cli.main(["run", "--config", cfg, "--out", str(out3), "--no-plots",
              "--seed-override", "99"])
    assert read_numeric_outputs(out2) == read_numeric_outputs(out3)
    assert read_numeric_outputs(out1) != read_numeric_outputs(out2)
    manifest = json.loads((out2 / "manifest.json").read_text())
    assert manifest["seeds"]["00"] == [99]


def test_bits_flag_adds_conversion(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY["scenarios"][0])
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out),
                     "--no-plots", "--bits"]) == 0
    results = json.loads((out / "results.json").read_text())
    bits = results["bits"]["00_mixture_example"]
    assert bits["H_p_bits"] == pytest.approx(1.0)  # fair coin is one bit
    assert bits["cov_slope_bits"] == pytest.approx(1.0, rel=0.02)


def test_vertex_tv_dump(tmp_path):
    cfg_dict = dict(SMALL_BATTERY["scenarios"][0], dump_vertex_tv=True)
    cfg = write_config(tmp_path, cfg_dict)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
    tv_csv = out / "00_mixture_vertex_tv.csv"
    assert tv_csv.exists()
    lines = tv_csv.read_text().splitlines()
    assert lines[0] == "n,seed,vertex,tv"
    assert len(lines) == 1 + cfg_dict["n_list"][-1]


def test_manifest_provenance_triples(tmp_path):
    cfg = write_config(tmp_path, SMALL_BATTERY)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for rec in manifest["outputs"]:
        assert {"path", "sha256", "scenario", "input_hash"} <= set(rec)


def test_list_scenarios(capsys):
    assert cli.main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in ("mixture_example", "conditioning_stability", "coinduction"):
        assert name in out


def test_bundled_configs_validate():
    for name in ("mixture_example", "conditioning_stability", "coinduction",
                 "battery"):
        path = cli.bundled_config_path(name)
        with open(path) as f:
            cfg = json.load(f)
        assert cli._validate_config(cfg)


def test_verify_missing_outputs(tmp_path):
    assert cli.main(["verify", "--out", str(tmp_path)]) == 1
