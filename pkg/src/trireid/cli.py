"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime error.
Relative output paths resolve under $TRIREID_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .core import (
    ConfigError,
    RunConfig,
    parse_modality_set,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

OUTPUT_ROOT_ENV = "TRIREID_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def resolve_out(path: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in RunConfig.known_keys():
            raise UsageError(f"unknown config key {key!r}")
        overrides[key] = value.strip()
    return config.with_overrides(overrides)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (flat key = value)")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="config override; highest precedence, repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trireid",
        description="Partial multi-modality re-identification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train once and evaluate the standard scenarios")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint under one scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for the report files")
    p.add_argument("--missing", default="", help="comma list of modalities to drop (e.g. NIR,TIR)")
    p.add_argument("--eta", type=float, default=None, help="simulated missing rate")
    p.add_argument("--eta-seed", type=int, default=0)
    p.add_argument("--label", default=None, help="scenario label for the report")

    p = sub.add_parser("sweep-eta", help="evaluate a checkpoint across missing rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--etas", default="0,0.25,0.5,0.75", help="comma list of rates")
    p.add_argument("--eta-seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train the 8-row component on/off grid")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="parent directory for the 8 run dirs")

    p = sub.add_parser("export-embeddings", help="write query+gallery embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--missing", default="", help="comma list of modalities to drop")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--eta-seed", type=int, default=0)

    p = sub.add_parser("report", help="tabulate and plot finished runs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="directory for table and figures")
    return parser


# ---------------------------------------------------------------------------
# command bodies (imports deferred so --help stays fast)
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    from .data import SyntheticSpec, generate_synthetic

    config = _load_config(args)
    out = resolve_out(args.out)
    index = generate_synthetic(SyntheticSpec.from_config(config), out)
    print(f"wrote {len(index.records)} samples under {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from .trainer import run_experiment

    config = _load_config(args)
    out = resolve_out(args.out)
    reports = run_experiment(config, resolve_out(args.data), out)
    for r in reports:
        print(f"{r.scenario}: mAP={r.map:.4f} rank1={r.rank(1):.4f}")
    print(f"run directory: {out}")
    return EXIT_OK


def _scenario_from_args(args: argparse.Namespace, index):
    from .data import fixed_missing, simulate_missing

    drop = parse_modality_set(args.missing)
    label = args.label if getattr(args, "label", None) else None
    eta = 0.0
    if drop and args.eta is not None:
        raise UsageError("--missing and --eta are mutually exclusive")
    if drop:
        index = fixed_missing(index, drop)
        label = label or ("missing_" + "_".join(m.short for m in sorted(drop)))
    elif args.eta is not None:
        index = simulate_missing(index, args.eta, args.eta_seed)
        eta = args.eta
        label = label or f"eta_{args.eta:g}"
    else:
        label = label or "no_missing"
    return index, label, eta


def cmd_eval(args: argparse.Namespace) -> int:
    from .data import load_index
    from .trainer import checkpoint_sha256, evaluate_index, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    index = load_index(resolve_out(args.data))
    index, label, eta = _scenario_from_args(args, index)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_index(
        model, index, label, eta=eta,
        checkpoint_hash=checkpoint_sha256(args.checkpoint),
    )
    report.write(out / f"{label}.txt")
    report.write_cmc_points(out / f"{label}_cmc.csv")
    print(f"{label}: mAP={report.map:.4f} rank1={report.rank(1):.4f}")
    return EXIT_OK


def cmd_sweep_eta(args: argparse.Namespace) -> int:
    from .data import load_index, simulate_missing
    from .plots import save_eta_curve
    from .trainer import checkpoint_sha256, evaluate_index, load_checkpoint, write_eta_points

    try:
        etas = [float(tok) for tok in args.etas.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"bad --etas list: {args.etas!r}") from None
    if not etas:
        raise UsageError("--etas must name at least one rate")
    model, _, _ = load_checkpoint(args.checkpoint)
    ckpt_hash = checkpoint_sha256(args.checkpoint)
    index = load_index(resolve_out(args.data))
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, eta in enumerate(etas):
        sim = simulate_missing(index, eta, seed=args.eta_seed * 100003 + i)
        report = evaluate_index(model, sim, f"eta_{eta:g}", eta=eta, checkpoint_hash=ckpt_hash)
        report.write(out / f"eta_{eta:g}.txt")
        rows.append((eta, report.map, report.rank(1), report.rank(5), report.rank(10)))
        print(f"eta={eta:g}: mAP={report.map:.4f} rank1={report.rank(1):.4f}")
    write_eta_points(rows, out / "eta_sweep.csv")
    save_eta_curve(rows, out / "eta_sweep.png")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from .trainer import run_experiment

    base = _load_config(args)
    out = resolve_out(args.out)
    data = resolve_out(args.data)
    for use_rec in (False, True):
        for use_sim in (False, True):
            for use_dem in (False, True):
                name = (
                    f"rec{'1' if use_rec else '0'}"
                    f"_sim{'1' if use_sim else '0'}"
                    f"_dem{'1' if use_dem else '0'}"
                )
                config = base.with_overrides(
                    {
                        "use_l_rec": str(use_rec).lower(),
                        "use_l_sim": str(use_sim).lower(),
                        "use_dem": str(use_dem).lower(),
                    }
                )
                run_experiment(config, data, out / name)
                print(f"finished {name}")
    return EXIT_OK


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    from .data import load_index
    from .trainer import export_embeddings, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    index = load_index(resolve_out(args.data))
    index, label, _ = _scenario_from_args(args, index)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, index, out)
    print(f"wrote embeddings for scenario {label} to {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .evalkit import MetricsReport
    from .plots import save_cmc_curves, save_scenario_bars

    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table: dict[str, dict[str, MetricsReport]] = {}
    curves: dict[str, list[float]] = {}
    for run in args.runs:
        run_dir = resolve_out(run)
        metrics_dir = run_dir / "metrics"
        files = sorted(metrics_dir.glob("*.txt")) if metrics_dir.is_dir() else []
        if not files:
            print(f"skipping {run_dir}: no metrics reports found", file=sys.stderr)
            continue
        name = run_dir.name
        table[name] = {}
        for path in files:
            report = MetricsReport.read(path)
            table[name][report.scenario] = report
            curves[f"{name}/{report.scenario}"] = list(report.cmc)
    if not table:
        raise RuntimeError("no run directory contained metrics reports")

    scenarios = sorted({s for per_run in table.values() for s in per_run})
    header = ["run", "scenario", "map", "rank1", "rank5", "rank10"]
    csv_lines = [",".join(header)]
    widths = [24, 18, 8, 8, 8, 8]
    text_lines = ["".join(h.ljust(w) for h, w in zip(header, widths))]
    for name in sorted(table):
        for scenario in scenarios:
            report = table[name].get(scenario)
            if report is None:
                continue
            row = [
                name, scenario, f"{report.map:.4f}", f"{report.rank(1):.4f}",
                f"{report.rank(5):.4f}", f"{report.rank(10):.4f}",
            ]
            csv_lines.append(",".join(row))
            text_lines.append("".join(v.ljust(w) for v, w in zip(row, widths)))

    (out / "report_table.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "report_table.txt").write_text("\n".join(text_lines) + "\n")
    save_scenario_bars(
        {name: {s: r.map for s, r in per_run.items()} for name, per_run in table.items()},
        out / "map_by_scenario.png",
    )
    save_cmc_curves(curves, out / "cmc_curves.png")
    print("\n".join(text_lines))
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-eta": cmd_sweep_eta,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
