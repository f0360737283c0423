"""Experiment runner.

Usage::

    kvpipe run experiment.json [--output-dir DIR] [--seed N] [--trace]
    kvpipe replay-paper-example [--output-dir DIR]
    kvpipe sweep --param workload.hit_ratio_source --values 0.25,0.5,0.75,1.0 experiment.json

An experiment file is a single JSON object::

    {
      "cluster":   {<ClusterConfig fields>},
      "workload":  {"profile": "loogle", "qps": 1.2, "count": 120,
                    "hit_ratio_source": 1.0, "slo_factors": [2, 4, 8]},
      "cost_model": {"load": {"slope": ..., "intercept": ...}, "comp": {...}},
      "policies":  ["fifo", "sjf-cost"],
      "modes":     ["coupled", "decoupled"],
      "repetitions": 1,
      "seeds": 0,
      "output_dir": "results"
    }

``workload`` may give ``load_factor`` instead of ``qps`` (rate relative to
the simulated decoupled capacity of the generated mix) or ``requests_file``
(a JSON-lines request list) instead of a profile. ``cost_model`` is optional;
when absent both lines are fitted by profiling the cluster. ``load_csv`` /
``comp_csv`` keys point to two-column profiling samples instead.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import metrics
from .core import ClusterConfig, ControlMode, RequestSpec
from .costmodel import CostModels, LinearCostModel, fit_linear, load_samples_csv
from .engine import profile_cost_models, simulate
from .exceptions import ConfigError, KVPipeError
from .sched import PolicyKind
from .workload import (SLO_FACTORS, WorkloadSpec, assign_slos, generate_at_load,
                       generate_workload, load_jsonl, two_request_example, profile_from_dict,
                       save_jsonl)

log = logging.getLogger("kvpipe")

COMPARISON_COLUMNS = ["policy", "mode", "repetition", "seed", "qps", "n_requests", "mean_ttft",
                      "p95_ttft", "slo_attainment", "peak_net_bps", "peak_pcie_bps",
                      "peak_compute_bps", "makespan", "error"]

_TOP_KEYS = {"cluster", "workload", "cost_model", "policies", "modes", "repetitions", "seeds",
             "output_dir", "throughput_window"}
_WORKLOAD_KEYS = {"profile", "qps", "load_factor", "count", "hit_ratio_source", "slo_factors",
                  "seed", "requests_file"}


@dataclass
class ExperimentConfig:
    cluster: ClusterConfig
    workload: WorkloadSpec | None
    policies: list[PolicyKind]
    modes: list[ControlMode]
    repetitions: int = 1
    seeds: int = 0
    output_dir: Path = Path("results")
    load_factor: float | None = None
    requests: list[RequestSpec] | None = None
    cost_models: CostModels | None = None
    throughput_window: float = metrics.DEFAULT_WINDOW
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "ExperimentConfig":
        base_dir = base_dir or Path.cwd()
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        errors = [(k, "unknown key") for k in sorted(set(d) - _TOP_KEYS)]

        try:
            cluster = ClusterConfig.from_dict(d.get("cluster", {}))
        except ConfigError as exc:
            errors += exc.errors
            cluster = None

        policies = d.get("policies", ["fifo"])
        if not isinstance(policies, list) or not policies:
            errors.append(("policies", "must be a non-empty list"))
            policies = []
        parsed_policies = []
        for i, p in enumerate(policies):
            try:
                parsed_policies.append(PolicyKind.parse(p))
            except ValueError as exc:
                errors.append((f"policies[{i}]", str(exc)))

        modes = d.get("modes", ["decoupled"])
        parsed_modes = []
        if not isinstance(modes, list) or not modes:
            errors.append(("modes", "must be a non-empty list"))
            modes = []
        for i, m in enumerate(modes):
            try:
                parsed_modes.append(ControlMode(m))
            except ValueError:
                errors.append((f"modes[{i}]", f"unknown mode {m!r} (coupled | decoupled)"))

        reps = d.get("repetitions", 1)
        if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
            errors.append(("repetitions", "must be an integer >= 1"))
        window = d.get("throughput_window", metrics.DEFAULT_WINDOW)
        if not isinstance(window, (int, float)) or not window > 0:
            errors.append(("throughput_window", "must be > 0"))

        wl = d.get("workload")
        workload = requests = load_factor = None
        seeds = d.get("seeds")
        if not isinstance(wl, dict):
            errors.append(("workload", "required object"))
        else:
            errors += [(f"workload.{k}", "unknown key") for k in sorted(set(wl) - _WORKLOAD_KEYS)]
            if "seed" in wl:
                if seeds is not None and seeds != wl["seed"]:
                    errors.append(("workload.seed", "conflicts with top-level 'seeds'"))
                seeds = wl["seed"]
            if "requests_file" in wl:
                extra = sorted(set(wl) & {"profile", "qps", "load_factor", "count",
                                          "hit_ratio_source"})
                if extra:
                    errors.append(("workload", f"requests_file excludes {extra}"))
                path = Path(wl["requests_file"])
                if not path.is_absolute():
                    path = base_dir / path
                try:
                    requests = load_jsonl(path)
                except (OSError, ValueError) as exc:
                    errors.append(("workload.requests_file", str(exc)))
            else:
                try:
                    workload, load_factor = _workload_from_dict(wl)
                except ConfigError as exc:
                    errors += exc.errors
        if seeds is None:
            seeds = 0
        if not isinstance(seeds, int) or isinstance(seeds, bool):
            errors.append(("seeds", "must be an integer"))

        cost_models = None
        if "cost_model" in d:
            try:
                cost_models = _cost_models_from_dict(d["cost_model"], base_dir)
            except ConfigError as exc:
                errors += exc.errors

        if errors:
            raise ConfigError(errors)
        out = d.get("output_dir", "results")
        return cls(cluster, workload, parsed_policies, parsed_modes, reps, seeds,
                   Path(out), load_factor, requests, cost_models, float(window), copy.deepcopy(d))


def _workload_from_dict(wl):
    errors = []
    profile = None
    try:
        profile = profile_from_dict(wl.get("profile", "loogle"))
    except ConfigError as exc:
        errors += exc.errors
    has_qps, has_lf = "qps" in wl, "load_factor" in wl
    if has_qps == has_lf:
        errors.append(("workload", "give exactly one of 'qps' or 'load_factor'"))
    load_factor = wl.get("load_factor")
    if has_lf and not (isinstance(load_factor, (int, float)) and load_factor > 0):
        errors.append(("workload.load_factor", "must be > 0"))
    if errors:
        raise ConfigError(errors)
    factors = wl.get("slo_factors", list(SLO_FACTORS))
    try:
        spec = WorkloadSpec(profile, float(wl.get("qps", 1.0)), wl.get("count"),
                            wl.get("hit_ratio_source", 1.0), tuple(factors or ()))
    except (TypeError, ValueError) as exc:
        raise ConfigError([("workload", str(exc))]) from None
    return spec, (float(load_factor) if has_lf else None)


def _cost_models_from_dict(d, base_dir):
    if not isinstance(d, dict):
        raise ConfigError([("cost_model", "must be an object")])
    out = {}
    errors = []
    for part in ("load", "comp"):
        if part in d and f"{part}_csv" in d:
            errors.append((f"cost_model.{part}", f"give '{part}' or '{part}_csv', not both"))
        elif part in d:
            try:
                out[part] = LinearCostModel(**d[part])
            except (TypeError, ValueError) as exc:
                errors.append((f"cost_model.{part}", str(exc)))
        elif f"{part}_csv" in d:
            path = Path(d[f"{part}_csv"])
            try:
                out[part] = fit_linear(load_samples_csv(path if path.is_absolute() else base_dir / path))
            except (OSError, ValueError, KVPipeError) as exc:
                errors.append((f"cost_model.{part}_csv", str(exc)))
        else:
            errors.append((f"cost_model.{part}", "missing"))
    unknown = sorted(set(d) - {"load", "comp", "load_csv", "comp_csv"})
    errors += [(f"cost_model.{k}", "unknown key") for k in unknown]
    if errors:
        raise ConfigError(errors)
    return CostModels(out["load"], out["comp"])


def load_experiment(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([(str(path), str(exc))]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([(str(path), f"invalid JSON: {exc}")]) from None
    overrides = dict(overrides or {})
    if "seeds" in overrides and isinstance(raw.get("workload"), dict):
        raw["workload"].pop("seed", None)
    for key, value in overrides.items():
        set_path(raw, key, value)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([(dotted, f"'{k}' is not an object")])
    node[keys[-1]] = value


def _cell_workload(cfg: ExperimentConfig, seed: int, models: CostModels):
    """Request list for one repetition, shared by every (policy, mode) cell."""
    if cfg.requests is not None:
        return list(cfg.requests), math.nan
    spec = cfg.workload.replace(seed=seed)
    if cfg.load_factor is not None:
        requests, qps = generate_at_load(spec, cfg.cluster, cfg.load_factor, ControlMode.DECOUPLED)
    else:
        requests, qps = generate_workload(spec), spec.qps
    if spec.slo_factors:
        requests = assign_slos(requests, cfg.cluster, models, spec.slo_factors, seed)
    return requests, qps


def _peak(report, stage, window):
    try:
        return report.peak_throughput(stage, window)
    except KVPipeError:
        return None


def run_experiment(cfg: ExperimentConfig, output_dir: Path | None = None,
                   trace: bool = False) -> list[dict]:
    """Run every (repetition, policy, mode) cell and write reports.

    Returns the comparison rows, one per cell.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    models_by_mode = {}
    for mode in cfg.modes:
        cluster = cfg.cluster.replace(control_mode=mode)
        models_by_mode[mode] = cfg.cost_models or profile_cost_models(cluster)
    for rep in range(cfg.repetitions):
        seed = cfg.seeds + rep
        requests, qps = _cell_workload(cfg, seed, models_by_mode[cfg.modes[0]])
        save_jsonl(requests, out / f"workload_rep{rep}.jsonl")
        for policy in cfg.policies:
            for mode in cfg.modes:
                row = {"policy": policy.value, "mode": mode.value, "repetition": rep,
                       "seed": seed, "qps": qps, "n_requests": len(requests)}
                cell = out / "cells" / f"{policy.value}_{mode.value}_rep{rep}"
                cell.mkdir(parents=True, exist_ok=True)
                try:
                    cluster = cfg.cluster.replace(control_mode=mode)
                    result = simulate(requests, cluster, policy, models_by_mode[mode], seed,
                                      record_trace=trace)
                    result.metadata.update(repetition=rep, qps=qps)
                    report = metrics.summarize_run(result, requests)
                except KVPipeError as exc:
                    log.error("cell %s failed: %s", cell.name, exc)
                    row["error"] = f"{type(exc).__name__}: {exc}"
                    rows.append(row)
                    (cell / "error.txt").write_text(row["error"] + "\n")
                    continue
                metrics.write_summary_json(report, cell / "summary.json", cfg.throughput_window)
                metrics.write_requests_csv(report, cell / "requests.csv")
                metrics.write_throughput_csv(report, cell / "throughput.csv")
                if trace:
                    metrics.write_trace_csv(result.trace, cell / "trace.csv")
                w = cfg.throughput_window
                row.update(mean_ttft=report.mean_ttft, p95_ttft=report.p95_ttft,
                           slo_attainment=report.slo_attainment,
                           peak_net_bps=_peak(report, "net", w),
                           peak_pcie_bps=_peak(report, "pcie", w),
                           peak_compute_bps=_peak(report, "compute", w),
                           makespan=result.makespan)
                rows.append(row)
    write_comparison(rows, out / "comparison.csv")
    (out / "summary.txt").write_text(format_table(rows))
    return rows


def write_comparison(rows, path, extra: Sequence[str] = ()) -> None:
    columns = list(extra) + COMPARISON_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt_cell(row.get(k)) for k in columns})


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def format_table(rows, extra: Sequence[str] = ()) -> str:
    cols = list(extra) + ["policy", "mode", "repetition", "mean_ttft", "p95_ttft",
                          "slo_attainment", "error"]
    cols = [c for c in cols if c != "error" or any(r.get("error") for r in rows)]

    def show(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [cols] + [[show(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(line, widths)).rstrip()
             for line in table]
    return "\n".join(lines) + "\n"


def parse_values(text: str) -> list:
    """``"0.25,0.5"`` -> ``[0.25, 0.5]``; JSON items such as lists are allowed."""
    try:
        values = json.loads(f"[{text}]")
    except json.JSONDecodeError:
        values = []
        for item in text.split(","):
            item = item.strip()
            try:
                values.append(json.loads(item))
            except json.JSONDecodeError:
                values.append(item)
    return values


def run_sweep(config_path, param: str, values: list, output_dir: Path | None = None,
              seed: int | None = None, trace: bool = False) -> list[dict]:
    base = load_experiment(config_path)
    root = Path(output_dir or base.output_dir)
    all_rows = []
    for i, value in enumerate(values):
        overrides = {param: value}
        if seed is not None:
            overrides["seeds"] = seed
        cfg = load_experiment(config_path, overrides)
        tag = json.dumps(value).replace(" ", "").replace("/", "_")
        rows = run_experiment(cfg, root / f"{i:02d}_{tag}", trace)
        for row in rows:
            row["param"] = param
            row["value"] = json.dumps(value)
        all_rows.extend(rows)
    write_comparison(all_rows, root / "sweep.csv", extra=("param", "value"))
    (root / "summary.txt").write_text(format_table(all_rows, extra=("value",)))
    return all_rows


def replay_example(output_dir: Path | None = None) -> list[dict]:
    """Serve the two measured-cost requests under FIFO and cost-aware SJF."""
    requests = two_request_example()
    cfg = ExperimentConfig(cluster=ClusterConfig(), workload=None,
                           policies=[PolicyKind.FIFO, PolicyKind.SJF_COST],
                           modes=[ControlMode.COUPLED, ControlMode.DECOUPLED],
                           requests=requests,
                           cost_models=CostModels(LinearCostModel(), LinearCostModel()),
                           output_dir=Path(output_dir or "replay_example"))
    if output_dir is not None:
        return run_experiment(cfg, output_dir)
    rows = []
    for policy in cfg.policies:
        for mode in cfg.modes:
            result = simulate(requests, cfg.cluster.replace(control_mode=mode), policy,
                              cfg.cost_models)
            report = metrics.summarize_run(result, requests)
            rows.append({"policy": policy.value, "mode": mode.value, "repetition": 0,
                         "mean_ttft": report.mean_ttft, "p95_ttft": report.p95_ttft,
                         "ttfts": [r.ttft for r in report.records]})
    return rows


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", type=Path, help="override the config's output_dir")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--trace", action="store_true", help="write per-cell event-trace CSVs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kvpipe", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("config", type=Path)
    sub.add_parser("replay-paper-example", parents=[common],
                   help="two-request FIFO vs loading-aware SJF example")
    p = sub.add_parser("sweep", parents=[common], help="repeat an experiment over one parameter")
    p.add_argument("--param", required=True, help="dotted config path, e.g. workload.qps")
    p.add_argument("--values", required=True, help="comma-separated values (JSON items)")
    p.add_argument("config", type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            overrides = {"seeds": args.seed} if args.seed is not None else None
            cfg = load_experiment(args.config, overrides)
            rows = run_experiment(cfg, args.output_dir, args.trace)
            print(format_table(rows), end="")
        elif args.command == "sweep":
            rows = run_sweep(args.config, args.param, parse_values(args.values),
                             args.output_dir, args.seed, args.trace)
            print(format_table(rows, extra=("value",)), end="")
        else:
            rows = replay_example(args.output_dir)
            print(format_table(rows), end="")
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}" if path else f"config error: {msg}",
                  file=sys.stderr)
        return 2
    return 1 if any(r.get("error") for r in rows) else 0


if __name__ == "__main__":
    sys.exit(main())
