"""Batch experiment runner.

Subcommands: run (execute scenario configs, emit JSON + CSV and render
figures), verify (re-assert recorded invariants and output hashes),
list-scenarios.  Exit codes: 0 ok, 1 verification failures, 2 config
violation, 3 budget exceeded, 4 rejection sampling failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import jsonschema

from . import __version__
from .constructions import SCENARIOS, ScenarioResult
from .groups import BudgetExceededError
from .measures import RejectionBudgetError

log = logging.getLogger("soficlab")

ENTRY_SCHEMA = {
    "type": "object",
    "required": ["scenario"],
    "properties": {
        "scenario": {"enum": sorted(SCENARIOS)},
        "alphabet": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "p": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "q": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "n_list": {"type": "array", "minItems": 1,
                   "items": {"type": "integer", "minimum": 1}},
        "v_list": {"type": "array", "minItems": 1,
                   "items": {"type": "integer", "minimum": 1}},
        "w_list": {"type": "array", "minItems": 1,
                   "items": {"type": "integer", "minimum": 1}},
        "sofic": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["cyclic", "random_free"]},
                "rank": {"type": "integer", "minimum": 1},
            },
        },
        "window_radius": {"type": "integer", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "eps_list": {"type": "array", "minItems": 1,
                     "items": {"type": "number", "exclusiveMinimum": 0,
                               "exclusiveMaximum": 1}},
        "samples": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "minItems": 1,
                  "items": {"type": "integer", "minimum": 0}},
        "k_band": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "oneOf": [
        ENTRY_SCHEMA,
        {
            "type": "object",
            "required": ["scenarios"],
            "properties": {
                "scenarios": {"type": "array", "minItems": 1,
                              "items": ENTRY_SCHEMA},
            },
        },
    ]
}


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _validate_config(cfg: dict) -> list[dict]:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        best = jsonschema.exceptions.best_match([err])
        pointer = "/".join(str(p) for p in best.absolute_path) or "<root>"
        raise ConfigError(f"config field {pointer!r}: {best.message}") from err
    return cfg["scenarios"] if "scenarios" in cfg else [cfg]


class ConfigError(ValueError):
    pass


def _run_entry(args: tuple[int, dict, int, int]) -> tuple[int, ScenarioResult, float]:
    idx, entry, budget_cells, budget_samples = args
    t0 = time.perf_counter()
    fn = SCENARIOS[entry["scenario"]]
    result = fn(entry, budget_cells=budget_cells, budget_samples=budget_samples)
    return idx, result, time.perf_counter() - t0


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


_LN2 = 0.6931471805599453


def _bits_summary(scenario: str, data: dict) -> dict:
    """Bits conversion of the headline nat-valued rates (display only)."""
    out = {}
    if scenario == "mixture_example":
        out["H_p_bits"] = data["H_p"] / _LN2
        out["H_q_bits"] = data["H_q"] / _LN2
        if data["cov_rate"].get("slope") is not None:
            out["cov_slope_bits"] = data["cov_rate"]["slope"] / _LN2
    elif scenario == "coinduction":
        out["additivity_rows_bits"] = [
            {"V": r["V"], "W": r["W"], "H_V_bits": r["H_V"] / _LN2,
             "H_VxW_bits": r["H_VxW"] / _LN2}
            for r in data["additivity_rows"]]
    return out


def cmd_run(args) -> int:
    with open(args.config) as f:
        cfg = json.load(f)
    entries = _validate_config(cfg)
    if args.seed_override is not None:
        for e in entries:
            e["seeds"] = [args.seed_override]
    os.makedirs(args.out, exist_ok=True)

    work = [(i, e, args.budget_cells, args.budget_samples)
            for i, e in enumerate(entries)]
    results: dict[int, tuple[ScenarioResult, float]] = {}
    if args.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for idx, res, dt in pool.map(_run_entry, work):
                results[idx] = (res, dt)
    else:
        for item in work:
            idx, res, dt = _run_entry(item)
            results[idx] = (res, dt)

    outputs: list[tuple[str, str, str]] = []  # (path, scenario key, entry hash)
    scenario_data = {}
    invariants = {}
    wall_times = {}
    bits = {}
    for idx in sorted(results):
        res, dt = results[idx]
        key = f"{idx:02d}_{res.scenario}"
        entry_hash = _canonical_hash(entries[idx])
        scenario_data[key] = res.data
        invariants[key] = res.invariants
        wall_times[key] = dt
        if args.bits:
            bits[key] = _bits_summary(res.scenario, res.data)
        for name, (header, rows) in sorted(res.tables.items()):
            path = os.path.join(args.out, f"{idx:02d}_{name}.csv")
            _write_csv(path, header, rows)
            outputs.append((path, key, entry_hash))

    payload = {"version": __version__, "scenarios": scenario_data,
               "invariants": invariants}
    if args.bits:
        payload["bits"] = bits
    results_path = os.path.join(args.out, "results.json")
    with open(results_path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    outputs.append((results_path, "all", _canonical_hash(cfg)))

    figures: list[str] = []
    if args.plots:
        from . import plots
        for idx in sorted(results):
            res, _ = results[idx]
            figures.extend(plots.render_scenario(
                res.scenario, res.data, args.out, f"{idx:02d}_{res.scenario}"))

    manifest = {
        "version": __version__,
        "config_hash": _canonical_hash(cfg),
        "seeds": {f"{i:02d}": e.get("seeds") for i, e in enumerate(entries)},
        "wall_times_s": wall_times,
        "outputs": [{"path": os.path.basename(p), "sha256": _sha256(p),
                     "scenario": key, "input_hash": ehash}
                    for p, key, ehash in sorted(outputs)],
        "figures": [os.path.basename(p) for p in sorted(figures)],
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    log.info("wrote %d outputs and %d figures to %s",
             len(outputs), len(figures), args.out)
    return 0


MASS_COLUMNS = {"event_mass", "band_mass_at_H_p", "le_mixture", "le_ci_high",
                "lw_mixture_fraction", "lw_p_target_fraction",
                "lw_unconditioned", "lw_conditioned", "le_unconditioned",
                "le_conditioned"}


def _verify_dir(outdir: str) -> list[tuple[str, bool, str]]:
    checks: list[tuple[str, bool, str]] = []
    manifest_path = os.path.join(outdir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)

    for rec in manifest["outputs"]:
        path = os.path.join(outdir, rec["path"])
        if not os.path.exists(path):
            checks.append((f"exists:{rec['path']}", False, "missing"))
            continue
        ok = _sha256(path) == rec["sha256"]
        checks.append((f"hash:{rec['path']}", ok,
                       "matches manifest" if ok else "content drifted"))

    results_path = os.path.join(outdir, "results.json")
    if os.path.exists(results_path):
        with open(results_path) as f:
            results = json.load(f)
        for key, inv in sorted(results.get("invariants", {}).items()):
            if "sandwich_violations" in inv:
                ok = inv["sandwich_violations"] == 0
                checks.append((f"{key}:sandwich", ok, f"{inv['sandwich_violations']} violations"))
            if "entropy_cov_min_slack" in inv:
                ok = inv["entropy_cov_min_slack"] >= -1e-9
                checks.append((f"{key}:entropy_vs_covering", ok,
                               f"min slack {inv['entropy_cov_min_slack']:.3g}"))
            if "part1_all_ok" in inv:
                checks.append((f"{key}:conditioning_bound", bool(inv["part1_all_ok"]),
                               "averaging bound held"))
            if "additivity_worst_rel" in inv:
                ok = inv["additivity_worst_rel"] <= 1e-9
                checks.append((f"{key}:additivity", ok,
                               f"worst rel dev {inv['additivity_worst_rel']:.3g}"))
            if "fibre_markov_ok" in inv:
                checks.append((f"{key}:fibre_markov", bool(inv["fibre_markov_ok"]),
                               "selection bound held"))
            if "cov_monotone_small" in inv:
                checks.append((f"{key}:cov_monotone", bool(inv["cov_monotone_small"]),
                               "fibre power covers no less"))
            if "product_defect_max" in inv:
                ok = inv["product_defect_max"] == 0
                checks.append((f"{key}:product_exact", ok,
                               f"max defect {inv['product_defect_max']}"))

    for rec in manifest["outputs"]:
        if not rec["path"].endswith(".csv"):
            continue
        path = os.path.join(outdir, rec["path"])
        if not os.path.exists(path):
            continue
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        for col, name in enumerate(header):
            if name in MASS_COLUMNS:
                vals = [float(r[col]) for r in rows]
                ok = all(-1e-9 <= v <= 1 + 1e-9 for v in vals)
                checks.append((f"range:{rec['path']}:{name}", ok,
                               "masses in [0,1]" if ok else "mass out of range"))
    return checks


def cmd_verify(args) -> int:
    try:
        checks = _verify_dir(args.out)
    except FileNotFoundError as err:
        print(f"ERROR {err}")
        return 1
    all_ok = True
    table = []
    for name, ok, detail in checks:
        all_ok &= ok
        table.append({"check": name, "pass": ok, "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    with open(os.path.join(args.out, "verify.json"), "w") as f:
        json.dump({"all_pass": all_ok, "checks": table}, f, sort_keys=True, indent=2)
        f.write("\n")
    return 0 if all_ok else 1


def cmd_list_scenarios(args) -> int:
    del args
    blurbs = {
        "mixture_example": "two-component iid mixture: covering growth at "
                           "H(p), lw* holds, empirical mass fails, band "
                           "conditioning at H(q)",
        "conditioning_stability": "iid measure conditioned on a majority "
                                  "event keeps good-model mass up to the "
                                  "averaging bound",
        "coinduction": "fibre powers: exact entropy additivity, fibre "
                       "marginals, corrupted-fibre selection",
    }
    for name in sorted(SCENARIOS):
        print(f"{name}: {blurbs.get(name, '')}")
        try:
            ref = resources.files("soficlab").joinpath(f"configs/{name}.json")
            if ref.is_file():
                print(f"  bundled config: {ref}")
        except (FileNotFoundError, ModuleNotFoundError):
            pass
    return 0


def bundled_config_path(name: str) -> str:
    return str(resources.files("soficlab").joinpath(f"configs/{name}.json"))


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SOFICLAB_LOG", "WARNING").upper())
    parser = argparse.ArgumentParser(prog="soficlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seed-override", type=int, default=None)
    p_run.add_argument("--budget-cells", type=int, default=10**7)
    p_run.add_argument("--budget-samples", type=int, default=10**6)
    p_run.add_argument("--plots", action=argparse.BooleanOptionalAction,
                       default=True)
    p_run.add_argument("--bits", action="store_true",
                       help="add a bits conversion of headline rates to results.json")
    p_run.set_defaults(fn=cmd_run)

    p_ver = sub.add_parser("verify", help="re-assert invariants of a run dir")
    p_ver.add_argument("--out", required=True)
    p_ver.set_defaults(fn=cmd_verify)

    p_ls = sub.add_parser("list-scenarios", help="show available scenarios")
    p_ls.set_defaults(fn=cmd_list_scenarios)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except BudgetExceededError as err:
        print(f"budget exceeded: {err}", file=sys.stderr)
        return 3
    except RejectionBudgetError as err:
        print(f"rejection sampling failed: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
