"""Command-line entry point: ``modno <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

from . import bench
from .autodiff import gradcheck_suite
from .exceptions import ModnoError
from .models import DonModel, load_model, save_model
from .preprocessing import ShardScaler
from .trainer import CostLedger

GRADCHECK_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _q_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if any(not 0.0 < q <= 1.0 for q in values):
        raise argparse.ArgumentTypeError("q values must lie in (0, 1]")
    return values


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    p = _Parser(prog="modno", description="Multi-operator DeepONet training and benchmarks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text, config=True, out=False, q=False, threads=False, seed=True):
        s = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            s.add_argument("--config", required=True, metavar="PATH",
                           help="experiment config JSON, or a named experiment (exp1..exp5)")
        if out:
            s.add_argument("--out", metavar="DIR", required=out == "required", help="output directory")
        if seed:
            s.add_argument("--seed", type=_seed, help="override the config seed")
        if q:
            s.add_argument("--q", type=_q_list, metavar="LIST", help="comma-separated shared-data fractions")
        if threads:
            s.add_argument("--threads", type=int, default=1, metavar="N",
                           help="worker processes for the single-DON baselines")
        return s

    add("datagen", "generate train/test shards", out="required")
    add("train", "train one MODNO model (first q of --q or of the config)", out="required", q=True)
    ev = add("eval", "score a checkpoint on the config's test shards", out=True)
    ev.add_argument("checkpoint", help="model checkpoint file")
    add("sweep", "run the full experiment and write its tables", out="required", q=True, threads=True)
    add("cost", "print the pass-count ledger for a config", q=True, seed=False)
    add("gradcheck", "finite-difference gradient suite on random MLPs", config=False, out=True)
    return p


def _config(args):
    cfg = bench.load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        changes["train"] = {**asdict(cfg.train), "seed": args.seed}
    if getattr(args, "q", None):
        changes["q_values"] = args.q
    return cfg.replace(**changes) if changes else cfg


def _cmd_datagen(args):
    cfg = _config(args)
    train, test = bench.build_experiment_data(cfg, cache_dir=args.out)
    for s in train + test:
        print(f"{s.split:5s} op{s.operator_id} {s.pde.label}: {s.n_functions} functions x {s.points.shape[0]} points")
    print(f"shards in {Path(args.out) / ('data-' + cfg.data_hash()[:16])}")


def _cmd_train(args):
    cfg = _config(args)
    q = cfg.q_values[0]
    train, test = bench.build_experiment_data(cfg, cache_dir=args.out)
    scaler = ShardScaler.fit(train, cfg.query_range, cfg.normalize_targets)
    model, hist = bench.train_experiment_modno(cfg, scaler, train, test, q)
    out = bench.output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    save_model(out / f"modno_q{q:g}.ckpt", model)
    hist.write_csv(out / f"history_modno_q{q:g}.csv")
    for name, err in zip(cfg.labels, bench.evaluate_model(model, test)):
        print(f"{name}: {100 * err:.2f}%")
    print(f"checkpoint {out / f'modno_q{q:g}.ckpt'}")


def _cmd_eval(args):
    cfg = _config(args)
    model = load_model(args.checkpoint)
    _, test = bench.build_experiment_data(cfg, cache_dir=args.out)
    if isinstance(model, DonModel):
        # a single DON is scored on the operator its checkpoint name points to, else operator 0
        stem = Path(args.checkpoint).stem
        i = int(stem.rsplit("op", 1)[1]) if "_op" in stem else 0
        test, names = [test[i]], [cfg.labels[i]]
    else:
        names = cfg.labels
    for name, err in zip(names, bench.evaluate_model(model, test)):
        print(f"{name}: {100 * err:.2f}%")


def _cmd_sweep(args):
    cfg = _config(args)
    results = bench.run_experiment(cfg, args.out, threads=max(1, args.threads), cache_dir=args.out,
                                   log=lambda msg: print(msg, flush=True))
    print(bench.emit_table(results, "markdown"), end="")
    print(f"results in {bench.output_dir(cfg, args.out)}")


def _cmd_cost(args):
    cfg = _config(args)
    branch = [cfg.n_sensors, *cfg.branch_hidden, cfg.basis_count]
    trunk = [cfg.query_dim, *cfg.trunk_hidden, cfg.basis_count]
    n_a = sum(a * b for a, b in zip(branch[:-1], branch[1:]))
    n_b = sum(a * b for a, b in zip(trunk[:-1], trunk[1:]))
    n_ops = len(cfg.operators)
    n_points = cfg.n_query * max(cfg.n_times, 1)
    print("q,c_mol,c_sol,ratio")
    for q in cfg.q_values:
        ledger = CostLedger([cfg.n_train] * n_ops, [n_points] * n_ops, [n_b] * n_ops, n_a, q, cfg.train.epochs)
        print(f"{q:g},{ledger.c_mol:.17g},{ledger.c_sol:.17g},{ledger.ratio!r}")


def _cmd_gradcheck(args):
    worst = gradcheck_suite(0 if args.seed is None else args.seed)
    lines = [f"network {k}: max relative error {w:.3e}" for k, w in enumerate(worst)]
    ok = max(worst) < GRADCHECK_TOL
    lines.append(f"{'PASS' if ok else 'FAIL'}: worst {max(worst):.3e} (tolerance {GRADCHECK_TOL:g})")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text)
    return 0 if ok else 2


COMMANDS = {"datagen": _cmd_datagen, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
            "cost": _cmd_cost, "gradcheck": _cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        code = COMMANDS[args.command](args)
    except (ModnoError, OSError, ValueError) as exc:
        print(f"modno {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
