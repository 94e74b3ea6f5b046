"""Command-line entry point.

Subcommands::

    collect   fly the nominal controller and write dataset.csv
    train     fit the per-axis residual GPs and write model_{x,y,z}.json
    fly       one closed-loop run in one mode -> flight_<mode>.csv, metrics_<mode>.json
    compare   all three modes on the same seed -> report.json, report.csv
    sweep     compare across speed scales -> sweep.csv
    report    print the summaries found in an output directory

Exit status is 0 on success, 1 on a usage error and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from gpmpc import experiments as ex
from gpmpc.config import Config
from gpmpc.errors import GpMpcError
from gpmpc.gp import ResidualModel
from gpmpc.nmpc import MODES
from gpmpc.pipeline import Dataset, precompute_schedule

log = logging.getLogger("gpmpc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODEL_FILES = ("model_x.json", "model_y.json", "model_z.json")
REPORT_FIELDS = ("mode", "rmse_mm", "rmse_xy_mm", "pct_reduction", "mean_solve_ms", "replay_solve_ms", "max_speed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems with exit status 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from exc
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _scales(text: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid scale list {text!r}") from exc
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("scales must be positive numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config document")
    common.add_argument("--seed", type=_seed, default=None, help="override sim.seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="gpmpc", description="GP-augmented quadrotor MPC experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    sub.add_parser("collect", parents=[common], help="fly nominal MPC and record residual data")

    p = sub.add_parser("train", parents=[common], help="fit residual GPs from a dataset")
    p.add_argument("--dataset", type=Path, default=None, help="dataset CSV (default: <out>/dataset.csv)")

    p = sub.add_parser("fly", parents=[common], help="one closed-loop run")
    p.add_argument("--mode", choices=MODES, default=None, help="controller variant (default: config mpc.mode)")
    p.add_argument("--model-dir", type=Path, default=None, help="directory with model_*.json (default: <out>)")

    p = sub.add_parser("compare", parents=[common], help="nominal vs precomputed vs direct")
    p.add_argument("--model-dir", type=Path, default=None, help="directory with model_*.json (default: <out>)")
    p.add_argument("--no-replay", action="store_true", help="skip the replayed solve-time benchmark")

    p = sub.add_parser("sweep", parents=[common], help="compare across speed scales")
    p.add_argument("--model-dir", type=Path, default=None)
    p.add_argument("--scales", type=_scales, default=[0.4, 0.6, 0.8, 1.0], help="comma-separated speed scales")
    p.add_argument("--modes", default=",".join(MODES), help="comma-separated modes to fly")

    sub.add_parser("report", parents=[common], help="print report.json / sweep.csv from --out")
    return parser


def _load_config(args: argparse.Namespace) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.sim = replace(cfg.sim, seed=args.seed)
    return cfg


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n")


def _write_rows(path: Path, rows: list[dict[str, Any]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _model_or_train(cfg: Config, model_dir: Path, out: Path) -> ResidualModel:
    if all((model_dir / f).exists() for f in MODEL_FILES):
        return ResidualModel.load(model_dir)
    log.info("no model in %s; collecting and training first", model_dir)
    dataset = ex.collect_dataset(cfg)
    dataset.write_csv(out / "dataset.csv")
    model = ex.train(dataset, cfg)
    model.save(out)
    return model


def cmd_collect(cfg: Config, args: argparse.Namespace) -> None:
    dataset = ex.collect_dataset(cfg)
    dataset.write_csv(args.out / "dataset.csv")
    print(f"wrote {len(dataset)} samples to {args.out / 'dataset.csv'}")


def cmd_train(cfg: Config, args: argparse.Namespace) -> None:
    path = args.dataset or args.out / "dataset.csv"
    if not path.exists():
        raise RuntimeError(f"dataset {path} not found; run 'collect' first or pass --dataset")
    model = ex.train(Dataset.read_csv(path), cfg)
    for p in model.save(args.out):
        print(f"wrote {p}")


def cmd_fly(cfg: Config, args: argparse.Namespace) -> None:
    mode = args.mode or cfg.mpc.mode
    model = None
    if mode != "nominal":
        model_dir = args.model_dir or args.out
        missing = [f for f in MODEL_FILES if not (model_dir / f).exists()]
        if missing:
            raise RuntimeError(f"mode {mode!r} needs {', '.join(missing)} in {model_dir}; run 'train' first")
        model = ResidualModel.load(model_dir)
    flight, metrics = ex.fly(cfg, mode, model)
    flight.write_csv(args.out / f"flight_{mode}.csv")
    if mode == "precomputed":
        precompute_schedule(model, flight.t, flight.ref).write_csv(args.out / "schedule.csv")
    _write_json(args.out / f"metrics_{mode}.json", metrics.to_dict())
    print(json.dumps(metrics.to_dict(), indent=2))


def cmd_compare(cfg: Config, args: argparse.Namespace) -> None:
    model = _model_or_train(cfg, args.model_dir or args.out, args.out)
    comp = ex.compare(cfg, model)
    rows = comp.table()
    if not args.no_replay:
        replay = ex.replay_solve_times(cfg, model, comp.logs["precomputed"])
        for row in rows:
            row["replay_solve_ms"] = replay[row["mode"]]
    for mode, flight in comp.logs.items():
        flight.write_csv(args.out / f"flight_{mode}.csv")
    _write_json(args.out / "report.json", {"config": cfg.to_dict(), "rows": rows})
    _write_rows(args.out / "report.csv", rows, REPORT_FIELDS)
    print(render_table(rows))


def cmd_sweep(cfg: Config, args: argparse.Namespace) -> None:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or "nominal" not in modes:
        raise UsageError(f"--modes must include 'nominal' and only use {MODES}")
    model = _model_or_train(cfg, args.model_dir or args.out, args.out)
    rows = ex.sweep(cfg, model, args.scales, modes)
    columns = ["speed_scale", "max_speed"] + [f"rmse_{m}_mm" for m in modes] + [f"mean_solve_{m}_ms" for m in modes]
    _write_rows(args.out / "sweep.csv", rows, columns)
    print(render_sweep(rows, modes))


def cmd_report(cfg: Config, args: argparse.Namespace) -> None:
    found = False
    report = args.out / "report.json"
    if report.exists():
        print(render_table(json.loads(report.read_text())["rows"]))
        found = True
    sweep = args.out / "sweep.csv"
    if sweep.exists():
        with open(sweep, newline="") as fh:
            rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        modes = [k[5:-3] for k in rows[0] if k.startswith("rmse_")] if rows else []
        print(render_sweep(rows, modes))
        found = True
    for path in sorted(args.out.glob("metrics_*.json")):
        m = json.loads(path.read_text())
        print(f"{m['mode']:<12} rmse {m['rmse_pos_mm']:8.2f} mm  xy {m['rmse_xy_mm']:8.2f} mm  "
              f"solve {m['mean_solve_ms']:6.3f} ms  max speed {m['max_speed_achieved']:5.2f} m/s")
        found = True
    if not found:
        raise RuntimeError(f"nothing to report in {args.out}")


def render_table(rows: list[dict[str, Any]]) -> str:
    has_replay = all("replay_solve_ms" in r for r in rows)
    head = f"{'mode':<12} {'RMSE [mm]':>10} {'xy [mm]':>10} {'reduction':>10} {'opt time [ms]':>14}"
    head += f" {'replay [ms]':>12}" if has_replay else ""
    lines = [head, "-" * len(head)]
    for r in rows:
        line = (f"{r['mode']:<12} {r['rmse_mm']:10.2f} {r['rmse_xy_mm']:10.2f} "
                f"{r['pct_reduction']:9.1f}% {r['mean_solve_ms']:14.3f}")
        if has_replay:
            line += f" {r['replay_solve_ms']:12.3f}"
        lines.append(line)
    return "\n".join(lines)


def render_sweep(rows: list[dict[str, Any]], modes: Sequence[str]) -> str:
    head = f"{'scale':>6} {'max speed':>10} " + " ".join(f"{m + ' [mm]':>17}" for m in modes)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['speed_scale']:6.2f} {r['max_speed']:10.2f} "
            + " ".join(f"{r[f'rmse_{m}_mm']:17.2f}" for m in modes)
        )
    return "\n".join(lines)


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "fly": cmd_fly,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gpmpc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GpMpcError, RuntimeError, OSError, ValueError, KeyError) as exc:
        print(f"gpmpc: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
