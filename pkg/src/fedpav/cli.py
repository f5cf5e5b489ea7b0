"""Command-line front end.

Three verbs: ``run`` executes a YAML run spec and writes an artifact tree,
``validate`` checks a spec and reports every violation, ``compare`` lines up
the eval series of finished runs.  All artifacts are deterministic: no
timestamps, stable key order, and a rerun of the same spec produces a
byte-identical tree.

Exit codes: 0 success, 1 run failure or validation violations, 2 unusable
spec or arguments.
"""

from __future__ import annotations

import argparse
from dataclasses import asdict, replace
import json
import os
import sys

from . import kernels
from .config import ConfigError, RunConfig, parse_run_config
from .data import build_federation
from .engine import run_federation, run_local_baseline, save_checkpoint
from .metrics import (best3_average, read_eval_csv, volatility,
                      write_eval_csv)

OUT_ROOT_ENV = "FEDPAV_OUT_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _read_spec(path: str):
    """Spec text or an error string (None on success in that slot)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read(), None
    except OSError as exc:
        return None, f"{path}: {exc}"


def _parse_seeds_arg(raw: str):
    seeds = []
    for part in raw.replace(",", " ").split():
        value = int(part)
        if value < 0:
            raise ValueError(f"seed must be >= 0, got {value}")
        if value not in seeds:
            seeds.append(value)
    if not seeds:
        raise ValueError("empty seed list")
    return tuple(seeds)


def _float_repr(value) -> str:
    return repr(float(value))


def _write_history(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def _write_weights(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,client,n_samples,distance,weight\n")
        for rec in records:
            for i, client in enumerate(rec.selected):
                distance = ("" if rec.distances is None
                            else _float_repr(rec.distances[i]))
                fh.write(f"{rec.round},{client},{rec.sizes[i]},{distance},"
                         f"{_float_repr(rec.weights[i])}\n")


def _write_baseline(path, results):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("client,rank1,rank5,rank10,map\n")
        for r in results:
            fh.write(f"{r.client},{r.rank1:.2f},{r.rank5:.2f},"
                     f"{r.rank10:.2f},{r.mean_ap:.2f}\n")


def _read_baseline(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                parts = line.strip().split(",")
                out[int(parts[0])] = float(parts[1])
    return out


def _summarize_seed(seed_dir, history):
    """Per-client summary recomputed from the written eval CSV."""
    rows = read_eval_csv(os.path.join(seed_dir, "eval.csv"))
    by_client = {}
    for row in rows:
        by_client.setdefault(row["client"], []).append(row)
    baseline_path = os.path.join(seed_dir, "baseline.csv")
    baseline = (_read_baseline(baseline_path)
                if os.path.exists(baseline_path) else {})
    out = []
    for client in sorted(by_client):
        series = sorted(by_client[client], key=lambda r: r["round"])
        rank1 = [r["rank1"] for r in series]
        maps = [r["map"] for r in series]
        entry = {
            "client": client,
            "best3_rank1": best3_average(rank1),
            "best3_map": best3_average(maps),
            "volatility_rank1": volatility(rank1),
            "comm_total_bytes": history.comm.total,
            "comm_per_client_total_bytes": history.comm.per_client_total,
            "baseline_rank1": baseline.get(client),
        }
        out.append(entry)
    return out


def _write_summary(path, rows):
    header = ("seed,client,best3_rank1,best3_map,volatility_rank1,"
              "comm_total_bytes,comm_per_client_total_bytes,"
              "baseline_rank1,delta_rank1")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            baseline = row["baseline_rank1"]
            if baseline is None:
                base_s = delta_s = ""
            else:
                base_s = _float_repr(baseline)
                delta_s = _float_repr(row["best3_rank1"] - baseline)
            fh.write(
                f"{row['seed']},{row['client']},"
                f"{_float_repr(row['best3_rank1'])},"
                f"{_float_repr(row['best3_map'])},"
                f"{_float_repr(row['volatility_rank1'])},"
                f"{row['comm_total_bytes']},"
                f"{row['comm_per_client_total_bytes']},"
                f"{base_s},{delta_s}\n"
            )


def _write_manifest(out_root, rc: RunConfig, seeds, source):
    manifest = {
        "schema_version": 1,
        "source": source,
        "backend": kernels.BACKEND,
        "comparison": rc.comparison,
        "seeds": list(seeds),
        "scenario": asdict(rc.scenario),
        "federation": asdict(rc.federation),
        "variants": [
            {
                "name": name,
                "rounds": fed.rounds,
                "local_epochs": fed.local_epochs,
                "batch_size": fed.batch_size,
            }
            for name, fed in rc.variants()
        ],
    }
    path = os.path.join(out_root, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _run_one(seed_dir, scenario, fed_cfg, comparison):
    federation = build_federation(scenario)
    history = run_federation(federation, fed_cfg)
    os.makedirs(os.path.join(seed_dir, "checkpoints"), exist_ok=True)
    _write_history(os.path.join(seed_dir, "history.jsonl"), history.records)
    _write_weights(os.path.join(seed_dir, "weights.csv"), history.records)
    write_eval_csv(os.path.join(seed_dir, "eval.csv"), history.evals)
    for round_index in sorted(history.checkpoints):
        save_checkpoint(
            os.path.join(seed_dir, "checkpoints",
                         f"round_{round_index}.ckpt"),
            history.checkpoints[round_index], round_index,
            scenario.input_dim, fed_cfg.feature_dim,
        )
    if comparison == "local_baseline":
        baselines = [
            run_local_baseline(client, fed_cfg, scenario.input_dim).eval
            for client in federation.clients
        ]
        _write_baseline(os.path.join(seed_dir, "baseline.csv"), baselines)
    return history


def _cmd_run(args) -> int:
    text, err = _read_spec(args.spec)
    if err:
        print(err, file=sys.stderr)
        return 2
    try:
        rc = parse_run_config(text, source=args.spec)
    except ConfigError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return 2
    try:
        seeds = (_parse_seeds_arg(args.seed_override)
                 if args.seed_override else rc.seeds)
    except ValueError as exc:
        print(f"--seed-override: {exc}", file=sys.stderr)
        return 2
    out_root = _resolve_out(args.out or rc.output_dir)
    os.makedirs(out_root, exist_ok=True)
    _write_manifest(out_root, rc, seeds, args.spec)

    failures = 0
    for name, fed in rc.variants():
        variant_dir = os.path.join(out_root, name)
        summary_rows = []
        for seed in seeds:
            seed_dir = os.path.join(variant_dir, f"seed_{seed}")
            os.makedirs(seed_dir, exist_ok=True)
            scenario = replace(rc.scenario, seed=seed)
            fed_cfg = replace(fed, seed=seed)
            try:
                history = _run_one(seed_dir, scenario, fed_cfg,
                                   rc.comparison)
            except Exception as exc:
                failures += 1
                failure = {
                    "variant": name,
                    "seed": seed,
                    "error": str(exc),
                    "round": getattr(exc, "round", None),
                    "client": getattr(exc, "client", None),
                }
                with open(os.path.join(seed_dir, "failure.json"), "w",
                          encoding="utf-8") as fh:
                    fh.write(json.dumps(failure, sort_keys=True, indent=2)
                             + "\n")
                print(f"{name} seed {seed}: FAILED: {exc}", file=sys.stderr)
                continue
            for entry in _summarize_seed(seed_dir, history):
                summary_rows.append({"seed": seed, **entry})
            print(f"{name} seed {seed}: {fed_cfg.rounds} rounds, "
                  f"{len(history.client_names)} clients, "
                  f"{len(history.evals)} eval rows")
        _write_summary(os.path.join(variant_dir, "summary.csv"),
                       summary_rows)
    print(f"artifacts in {out_root} (kernels: {kernels.BACKEND})")
    return 1 if failures else 0


def _cmd_validate(args) -> int:
    text, err = _read_spec(args.spec)
    if err:
        print(err, file=sys.stderr)
        return 2
    try:
        rc = parse_run_config(text, source=args.spec)
    except ConfigError as exc:
        for violation in exc.violations:
            print(violation)
        print(f"{args.spec}: {len(exc.violations)} violation(s)")
        return 1
    variants = ", ".join(name for name, _ in rc.variants())
    print(f"{args.spec}: OK ({rc.scenario.n_clients} clients, "
          f"{rc.federation.rounds} rounds, seeds {list(rc.seeds)}, "
          f"variants: {variants})")
    return 0


def _eval_paths(run_dir: str):
    direct = os.path.join(run_dir, "eval.csv")
    if os.path.isfile(direct):
        return [direct]
    paths = []
    candidates = [run_dir, os.path.join(run_dir, "main")]
    for base in candidates:
        if not os.path.isdir(base):
            continue
        for entry in sorted(os.listdir(base)):
            path = os.path.join(base, entry, "eval.csv")
            if entry.startswith("seed_") and os.path.isfile(path):
                paths.append(path)
        if paths:
            return paths
    return paths


def _series_from_run(run_dir: str, metric: str):
    """Round -> mean metric over every eval row found under run_dir."""
    paths = _eval_paths(run_dir)
    if not paths:
        raise ValueError(f"{run_dir}: no eval.csv found")
    buckets = {}
    for path in paths:
        for row in read_eval_csv(path):
            buckets.setdefault(row["round"], []).append(row[metric])
    return {r: sum(vals) / len(vals) for r, vals in buckets.items()}


def _cmd_compare(args) -> int:
    labels = []
    for run_dir in args.runs:
        label = os.path.basename(os.path.normpath(run_dir))
        while label in labels:
            label += "+"
        labels.append(label)
    try:
        series = [_series_from_run(d, args.metric) for d in args.runs]
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return 2

    rounds = set(series[0])
    mismatched = False
    for d, s in zip(args.runs[1:], series[1:]):
        if set(s) != rounds:
            missing = sorted(rounds - set(s))
            extra = sorted(set(s) - rounds)
            print(f"{d}: eval rounds differ from {args.runs[0]}: "
                  f"missing {missing}, extra {extra}", file=sys.stderr)
            mismatched = True
    if mismatched:
        return 2

    header = ["round"] + labels + [f"delta_{l}" for l in labels[1:]]
    lines = [",".join(header)]
    for r in sorted(rounds):
        row = [str(r)] + [_float_repr(s[r]) for s in series]
        row += [_float_repr(s[r] - series[0][r]) for s in series[1:]]
        lines.append(",".join(row))
    ordered = [[s[r] for r in sorted(rounds)] for s in series]
    for stat_name, fn in (("best3", best3_average),
                          ("volatility", volatility)):
        stats = [fn(vals) for vals in ordered]
        row = [stat_name] + [_float_repr(v) for v in stats]
        row += [_float_repr(v - stats[0]) for v in stats[1:]]
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpav",
        description="Deterministic federated training simulator for "
                    "retrieval models on synthetic identity data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run spec")
    p_run.add_argument("--spec", required=True, help="YAML run spec")
    p_run.add_argument("--out", help="output directory (overrides the spec)")
    p_run.add_argument("--seed-override",
                       help="comma-separated seeds replacing the spec's list")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="check a run spec")
    p_val.add_argument("--spec", required=True, help="YAML run spec")
    p_val.set_defaults(func=_cmd_validate)

    p_cmp = sub.add_parser("compare",
                           help="align eval series of finished runs")
    p_cmp.add_argument("runs", nargs="+",
                       help="two or more run or variant directories")
    p_cmp.add_argument("--metric", default="rank1",
                       choices=["rank1", "rank5", "rank10", "map"])
    p_cmp.add_argument("--out", help="write the comparison CSV here")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "compare" and len(args.runs) < 2:
        parser.error("compare needs at least two run directories")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
