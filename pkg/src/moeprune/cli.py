"""``moeprune`` command line: pretrain, finetune, two-pass, sweep, bench, report.

Every run directory gets the exact config that produced it (``config.txt``),
its checkpoint, metrics CSV, pruning event log and a JSON summary. Outputs go
under ``--out``, else the config's ``out_dir``, else ``$MOEP_OUT_DIR``, else
``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import kvtext
from .bench import bench_inference, pruned_variants
from .checkpoint import CheckpointError
from .config import RunConfig
from .errors import ConfigError, NumericError
from .model import MoEEncoder
from .report import ReportError, report
from .training import FINETUNE_MODES, finetune, pretrain, two_pass

log = logging.getLogger("moeprune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse prints the full usage and exits 2; we want one line and our own exit path
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moeprune", description="Task-specific expert pruning on a synthetic MoE encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, ckpt=True):
        sp.add_argument("--config", help="run config file (dotted.key = json lines)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.finetune_steps=200")
        sp.add_argument("--out", help="output directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="pre-trained checkpoint")
            sp.add_argument("--subtask", type=int)
            sp.add_argument("--beta", type=float)
            sp.add_argument("--gamma", type=float)
            sp.add_argument("--criterion", choices=("alpha", "hit_rate"))
            sp.add_argument("--seeds", type=_int_list, help="comma-separated fine-tuning seeds")

    sp = sub.add_parser("pretrain", help="pre-train on the subtask mixture")
    common(sp, ckpt=False)
    sp.add_argument("--dense", action="store_true", help="pre-train the dense (single-FFN) counterpart")
    sp.add_argument("--both", action="store_true", help="pre-train MoE and dense into out/moe and out/dense")
    sp.add_argument("--seed", type=int, help="initialisation and data seed (default: train.init_seed)")

    sp = sub.add_parser("finetune", help="fine-tune on one subtask, one run per seed")
    common(sp)
    sp.add_argument("--mode", required=True, choices=FINETUNE_MODES)

    sp = sub.add_parser("two-pass", help="select experts with one run, re-fine-tune the original weights")
    common(sp)
    sp.add_argument("--variant", required=True, choices=("staged-drop", "eager-drop"))

    sp = sub.add_parser("sweep", help="fine-tune over a list of values of beta or gamma")
    common(sp)
    sp.add_argument("--param", required=True, choices=("beta", "gamma"))
    sp.add_argument("--values", required=True, type=_float_list)
    sp.add_argument("--mode", default="eager", choices=("staged", "eager"))

    sp = sub.add_parser("bench", help="inference tokens/sec: MoE vs pruned vs dense")
    sp.add_argument("--moe", required=True, help="checkpoint with all experts active (e.g. MoE-ft)")
    sp.add_argument("--pruned", required=True, help="checkpoint with one expert per MoE layer")
    sp.add_argument("--dense", help="dense pre-trained/fine-tuned checkpoint")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--seq", type=int, default=8)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--out", help="write bench.json here")

    sp = sub.add_parser("report", help="accuracy table, share series, K_half and histogram from run dirs")
    sp.add_argument("runs", nargs="+", help="run directories (searched recursively for metrics.csv)")
    sp.add_argument("--out", help="directory for CSV and SVG output (default: first run path/report)")
    return p


# -- config -----------------------------------------------------------------------------


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for part in parts[:-1]:
        d = d.setdefault(part, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{key}: {part} is not a section")
    d[parts[-1]] = value


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = kvtext.loads(path.read_text())
    else:
        data = RunConfig().to_dict()
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        _set_dotted(data, key, kvtext.loads(f"x = {value}")["x"] if value else "")
    prune = dict(data.get("prune", {}))
    for flag in ("beta", "gamma", "criterion"):
        if getattr(args, flag, None) is not None:
            prune[flag] = getattr(args, flag)
    if prune:
        data["prune"] = prune
    train = dict(data.get("train", {}))
    if getattr(args, "subtask", None) is not None:
        train["subtask"] = args.subtask
    if getattr(args, "seeds", None):
        train["seeds"] = args.seeds
    if train:
        data["train"] = train
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    return RunConfig.from_dict(data)


def _load_ckpt(path):
    return ckpt_io.load(path)


# -- commands ---------------------------------------------------------------------------


def _seed_runs(fn, cfg: RunConfig, root: Path, name: str) -> list[float]:
    accs = []
    for seed in cfg.train.seeds:
        out = root / f"{name}-seed{seed}"
        _, metrics = fn(seed, out)
        accs.append(metrics.final_accuracy)
        print(f"{name} seed {seed}: accuracy {metrics.final_accuracy * 100:.2f}%  -> {out}")
    return accs


def _summarise(name: str, accs: list[float]) -> str:
    a = np.array(accs) * 100
    return f"{name}: {a.mean():.2f} ± {a.std():.2f} % over {len(a)} seed(s)"


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    root = cfg.output_root()
    variants = [("moe", False), ("dense", True)] if args.both else [("dense" if args.dense else "moe", args.dense)]
    for name, dense in variants:
        out = root / name if args.both else root
        ckpt, metrics = pretrain(cfg, seed=args.seed, dense=dense, out_dir=out)
        print(f"pretrain {name}: mixture accuracy {metrics.final_accuracy * 100:.2f}% -> {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args)
    pre = _load_ckpt(args.ckpt)
    root = cfg.output_root()
    accs = _seed_runs(lambda s, out: finetune(pre, cfg, args.mode, s, out_dir=out), cfg, root, args.mode)
    print(_summarise(args.mode, accs))
    report([root / f"{args.mode}-seed{s}" for s in cfg.train.seeds], root / "report")
    return 0


def cmd_two_pass(args) -> int:
    cfg = load_config(args)
    pre = _load_ckpt(args.ckpt)
    root = cfg.output_root()
    name = f"two-pass-{args.variant}"
    accs = _seed_runs(lambda s, out: two_pass(pre, cfg, args.variant, s, out_dir=out), cfg, root, name)
    print(_summarise(name, accs))
    report([root / f"{name}-seed{s}" for s in cfg.train.seeds], root / "report")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    pre = _load_ckpt(args.ckpt)
    root = cfg.output_root()
    rows = []
    for value in args.values:
        run_cfg = cfg.with_overrides(prune={args.param: value})
        sub = root / f"{args.param}={value:g}"
        accs = _seed_runs(lambda s, out: finetune(pre, run_cfg, args.mode, s, out_dir=out), run_cfg, sub, args.mode)
        a = np.array(accs) * 100
        rows.append({args.param: value, "mode": args.mode, "runs": len(a),
                     "mean_accuracy": float(a.mean()), "std_accuracy": float(a.std())})
        print(_summarise(f"{args.param}={value:g}", accs))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w") as fh:
        cols = list(rows[0])
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    report([root], root / "report")
    print(f"sweep table -> {root / 'sweep.csv'}")
    return 0


def cmd_bench(args) -> int:
    moe_ck, pruned_ck = _load_ckpt(args.moe), _load_ckpt(args.pruned)
    if moe_ck.model_config.dense() != pruned_ck.model_config.dense():
        raise ConfigError("--moe and --pruned checkpoints have different architectures")
    moe = MoEEncoder(moe_ck.model_config, moe_ck.params())
    masks = {int(b): np.array(m, dtype=bool) for b, m in pruned_ck.header.get("masks", {}).items()}
    pruned = MoEEncoder(pruned_ck.model_config, pruned_ck.params(), masks)
    dense = None
    if args.dense:
        d = _load_ckpt(args.dense)
        dense = MoEEncoder(d.model_config, d.params())
    rep = bench_inference(pruned_variants(moe, pruned, dense), args.batch, args.seq, args.reps, args.warmup)
    for name, t in rep.variants.items():
        print(f"{name:<22} {t.tokens_per_sec:>12.0f} tokens/s  ({t.mean_seconds * 1e3:.3f} ± "
              f"{t.std_seconds * 1e3:.3f} ms/batch)")
    for name, r in rep.ratios().items():
        print(f"{name:<22} {r:>12.3f}x")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(args.runs[0]) / "report"
    rep = report(args.runs, out)
    print(rep.format_accuracy())
    for path, why in rep.skipped:
        print(f"skipped {path}: {why}", file=sys.stderr)
    print(f"tables and plots -> {out}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "two-pass": cmd_two_pass,
            "sweep": cmd_sweep, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"moeprune: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, ReportError, FileNotFoundError, NumericError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"moeprune: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
