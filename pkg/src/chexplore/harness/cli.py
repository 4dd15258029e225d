"""Command-line entry point: ``chexplore {run,ablate,oracle-check,flops,export}``.

Exit codes: 0 success, 1 configuration or usage error, 2 oracle failure.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from ..errors import ChexError, ConfigError, FormatError
from ..explore import INIT_SCHEMES, SAMPLING_MODES, SCHEDULER_KINDS
from ..oracle import run_suite
from ..simnet.loop import MODES
from ..simnet.network import count_flops
from .checkpoint import atomic_write_text, load_checkpoint
from .config import ExperimentConfig, make_config, resolve_config
from .metrics import metrics_csv_text, metrics_json_text, read_metrics_csv, read_metrics_json
from .runner import build_dataset, build_trainer, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2

# axis name -> (config key, default values)
AXES = {
    "scheduler": ("scheduler", ("constant", "linear", "cosine")),
    "init": ("init_scheme", INIT_SCHEMES),
    "delta0": ("delta0", (0.1, 0.2, 0.3, 0.4)),
    "dt": ("dt_epochs", (1.0, 2.0, 4.0)),
    "sampling": ("sampling", SAMPLING_MODES),
    "mode": ("mode", MODES),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_flags(p):
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--sparsity", type=float, help="target channel sparsity S")
    p.add_argument("--delta0", type=float)
    p.add_argument("--dt", type=int, help="exploration interval in iterations")
    p.add_argument("--scheduler", choices=SCHEDULER_KINDS)
    p.add_argument("--init", choices=INIT_SCHEMES)
    p.add_argument("--sampling", choices=SAMPLING_MODES)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chexplore", description="Channel exploration pruning experiments on toy networks.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="train one configuration")
    _add_run_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.add_argument("--stop-at", type=int, metavar="ITER", help="halt after this iteration")

    p = sub.add_parser("ablate", help="sweep one axis over several seeds")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", help="comma-separated values (default: the axis' standard set)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("oracle-check", help="cross-check components against their oracles")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("flops", help="FLOPs report for a checkpoint")
    p.add_argument("checkpoint")

    p = sub.add_parser("export", help="convert metrics (checkpoint, metrics JSON or CSV) to CSV or JSON")
    p.add_argument("source")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="output file (default: stdout)")
    return parser


def _overrides(args) -> dict:
    return {"seed": args.seed, "mode": args.mode, "S": args.sparsity, "delta0": args.delta0, "dt_iters": args.dt,
            "scheduler": args.scheduler, "init_scheme": args.init, "sampling": args.sampling, "out": args.out}


def _config(args) -> ExperimentConfig:
    cfg = resolve_config(args.config, _overrides(args))
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, checkpoint_every=args.checkpoint_every, resume=args.resume, stop_at=args.stop_at)
    last = res.trainer.history[-1] if res.trainer.history else None
    if last is not None:
        print(f"iteration {last.iteration}: acc {last.acc:.4f} loss {last.loss:.4f} flops {last.flops} "
              f"retained {list(last.retained)}")
    print(f"metrics: {res.metrics_csv}")
    return EXIT_OK


def _parse_values(axis, text):
    key, defaults = AXES[axis]
    if not text:
        return list(defaults)
    kind = type(defaults[0])
    try:
        return [kind(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values for axis {axis} must be {kind.__name__}s", key=key) from None


def _ablation_cell(cfg: ExperimentConfig) -> float:
    tr = build_trainer(cfg, build_dataset(cfg)).run()
    return tr.history[-1].acc


def cmd_ablate(args) -> int:
    base = _config(args)
    key, _ = AXES[args.axis]
    values = _parse_values(args.axis, args.values)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1", key="seeds")
    cells = []
    for v in values:
        for s in range(args.seeds):
            cells.append(make_config({**base.echo(), key: v, "seed": base.seed + s}, explicit=()))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            accs = list(pool.map(_ablation_cell, cells))
    else:
        accs = [_ablation_cell(c) for c in cells]

    out_dir = Path(base.out) / f"ablate_{args.axis}"
    rows = []
    print(f"{args.axis:>12}  {'accuracy (mean ± sd)':>22}  n")
    for i, v in enumerate(values):
        a = accs[i * args.seeds:(i + 1) * args.seeds]
        mean = statistics.fmean(a)
        sd = statistics.stdev(a) if len(a) > 1 else 0.0
        rows.append((v, mean, sd, len(a)))
        print(f"{v!s:>12}  {100 * mean:>12.2f} ± {100 * sd:<7.2f}  {len(a)}")
        cell = {"axis": args.axis, "key": key, "value": v, "seeds": [base.seed + s for s in range(args.seeds)],
                "accuracies": a, "mean": mean, "sd": sd, "config": replace(base, **{key: v}).echo()}
        atomic_write_text(out_dir / f"{v}.json", json.dumps(cell, indent=1, sort_keys=True) + "\n")
    table = "value,mean_acc,sd_acc,n\n" + "".join(f"{v},{m!r},{s!r},{n}\n" for v, m, s, n in rows)
    atomic_write_text(out_dir / "summary.csv", table)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    checks = run_suite(seed=args.seed)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_ORACLE


def cmd_flops(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    rep = count_flops(ck.network())
    for l, f in enumerate(rep.per_layer):
        print(f"layer {l}: {f} ({len(ck.masks[l])}/{ck.widths[l + 1]} channels)")
    print(f"head: {rep.head}")
    print(f"total: {rep.total} multiply-adds per example (dense {rep.dense_total}, "
          f"reduction {100 * rep.reduction_vs_dense:.1f}%)")
    return EXIT_OK


def cmd_export(args) -> int:
    src = Path(args.source)
    if src.suffix == ".csv":
        rows = read_metrics_csv(src)
    else:
        try:
            doc = json.loads(src.read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read {src}: {exc}") from exc
        rows = load_checkpoint(src).history if "sha256" in doc else read_metrics_json(src)
    text = metrics_csv_text(rows) if args.format == "csv" else metrics_json_text(rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "oracle-check": cmd_oracle_check, "flops": cmd_flops,
            "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ChexError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
