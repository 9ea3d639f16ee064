"""Command-line entry point: prepare, mask, train, impute, evaluate, sweep.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields

import numpy as np

from . import dataset as ds
from .backbone import ModelConfig, init_model
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (baseline_da, baseline_knn, baseline_mean, evaluate, sweep,
                         write_report_csv, write_sweep_csv)
from .training import TrainConfig, TrainingError, fit, impute, read_config_file, write_history_csv

log = logging.getLogger("gatgpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sigma(text):
    if text.lower() == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"sigma must be a number or 'auto', got {text!r}") from None


# ---------------------------------------------------------------------------
# flag groups (flags mirror module parameters one-to-one)
# ---------------------------------------------------------------------------

def _add_data(p):
    p.add_argument("--data", help="data CSV: timestamp,<node_0>,...  (required)")
    p.add_argument("--step-seconds", type=int, default=None,
                   help="sampling interval; inferred from the first two rows when omitted")


def _add_graph(p):
    g = p.add_argument_group("graph")
    g.add_argument("--distances", help="distances CSV: from,to,distance")
    g.add_argument("--adjacency", help="adjacency CSV written by 'prepare' (instead of --distances)")
    g.add_argument("--sigma", type=_sigma, default="auto", help="kernel width or 'auto'")
    g.add_argument("--threshold", type=float, default=0.1, help="weights at or below this are dropped")
    g.add_argument("--no-self-loops", action="store_true", default=False, help="omit self-loops")


def _add_split(p):
    g = p.add_argument_group("split")
    g.add_argument("--train-frac", type=float, default=0.7, help="leading fraction used for training")
    g.add_argument("--val-frac", type=float, default=0.1, help="following fraction used for validation")
    g.add_argument("--test-frac", type=float, default=0.2, help="trailing fraction used for testing")


def _add_model(p, sweep_mode=False):
    g = p.add_argument_group("model")
    if not sweep_mode:
        g.add_argument("--d-model", type=int, default=64, help="model width")
        g.add_argument("--n-layers", type=int, default=2, help="transformer blocks")
    g.add_argument("--n-heads", type=int, default=4, help="backbone attention heads")
    g.add_argument("--gat-heads", type=int, default=2, help="graph attention heads (K)")
    g.add_argument("--kernel-size", type=int, default=3, help="token-embedding conv width")
    g.add_argument("--leaky-slope", type=float, default=0.2, help="LeakyReLU slope in graph attention")


def _add_train(p):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--learning-rate", type=float, default=d.learning_rate, help="Adam step size")
    g.add_argument("--max-epochs", type=int, default=d.max_epochs, help="epoch limit")
    g.add_argument("--lr-schedule", choices=("cosine", "constant"), default=d.lr_schedule,
                   help="step-size schedule over max_epochs")
    g.add_argument("--window", type=int, default=d.window, help="steps per training window")
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="windows per step")
    g.add_argument("--dropedge-p", type=float, default=d.dropedge_p, help="edge drop probability per step")
    g.add_argument("--train-mask-ratio", type=float, default=d.train_mask_ratio,
                   help="fraction of visible entries re-hidden as loss targets each epoch")
    g.add_argument("--patience", type=int, default=d.patience,
                   help="epochs without validation improvement before stopping")
    g.add_argument("--loss", choices=("mae", "mse"), default=d.loss, help="training objective")
    g.add_argument("--seed", type=int, default=d.seed, help="initialization and masking seed")


REQUIRED = {
    "prepare": ("data", "out_dir"),
    "mask": ("data", "out"),
    "train": ("data", "out"),
    "impute": ("data", "checkpoint", "out"),
    "evaluate": ("data", "mask"),
    "sweep": ("data", "mask", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="gatgpt", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prepare", help="build the adjacency matrix and chronological splits",
                       formatter_class=fmt)
    _add_data(p)
    _add_graph(p)
    _add_split(p)
    p.add_argument("--out-dir", help="output directory (required)")

    p = sub.add_parser("mask", help="generate an evaluation mask", formatter_class=fmt)
    _add_data(p)
    p.add_argument("--pattern", choices=("point", "block"), default="point", help="missing-data pattern")
    p.add_argument("--ratio", type=float, default=0.25, help="point pattern: hidden fraction")
    p.add_argument("--point-ratio", type=float, default=0.05, help="block pattern: sparse point fraction")
    p.add_argument("--block-prob", type=float, default=0.0015,
                   help="block pattern: per-step, per-sensor block start probability")
    p.add_argument("--min-hours", type=float, default=1.0, help="block pattern: shortest outage")
    p.add_argument("--max-hours", type=float, default=4.0, help="block pattern: longest outage")
    p.add_argument("--seed", type=int, default=0, help="mask seed")
    p.add_argument("--out", help="mask CSV to write (required)")

    p = sub.add_parser("train", help="fit a model and write a checkpoint", formatter_class=fmt)
    _add_data(p)
    _add_graph(p)
    _add_split(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--mask", help="evaluation mask CSV; its entries are never seen in training")
    p.add_argument("--init", help="checkpoint to start from (e.g. converted pretrained weights)")
    p.add_argument("--history", help="per-epoch history CSV to write")
    p.add_argument("--out", help="checkpoint to write (required)")

    p = sub.add_parser("impute", help="fill missing entries of a data file", formatter_class=fmt)
    _add_data(p)
    _add_graph(p)
    p.add_argument("--checkpoint", help="trained checkpoint (required)")
    p.add_argument("--mask", help="evaluation mask CSV; masked entries are hidden before imputing")
    p.add_argument("--window", type=int, default=TrainConfig().window, help="steps per inference window")
    p.add_argument("--out", help="imputed data CSV to write (required)")

    p = sub.add_parser("evaluate", help="score imputations and baselines on a mask", formatter_class=fmt)
    _add_data(p)
    _add_graph(p)
    _add_split(p)
    p.add_argument("--mask", help="evaluation mask CSV (required)")
    p.add_argument("--imputed", help="imputed data CSV to score")
    p.add_argument("--baselines", default="", help="comma-separated subset of mean,da,knn")
    p.add_argument("--k", type=int, default=5, help="kNN neighbours")
    p.add_argument("--segment", choices=("test", "all"), default="test",
                   help="score only the chronological test segment, or every masked entry")
    p.add_argument("--dataset", default="", help="dataset tag for the report")
    p.add_argument("--pattern", default="point", help="pattern tag for the report")
    p.add_argument("--out", help="report CSV (default: standard output)")

    p = sub.add_parser("sweep", help="layers x model-dimension grid", formatter_class=fmt)
    _add_data(p)
    _add_graph(p)
    _add_split(p)
    _add_model(p, sweep_mode=True)
    _add_train(p)
    p.add_argument("--mask", help="evaluation mask CSV (required)")
    p.add_argument("--layers", type=_csv_ints, default=[3, 4, 5, 6], help="comma-separated layer counts")
    p.add_argument("--d-models", type=_csv_ints, default=[768, 1024, 1280, 1600],
                   help="comma-separated model widths")
    p.add_argument("--out", help="sweep CSV to write (required)")

    for sp in sub.choices.values():
        sp.add_argument("--config", help="key = value file; explicit flags take precedence")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    return parser


def _apply_config(sp: argparse.ArgumentParser, path, argv_tail):
    """Turn config-file entries into parser defaults (explicit flags still win)."""
    entries = read_config_file(path)
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config", "verbose")}
    defaults = {}
    for key, raw in entries.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ValueError(f"{path}: unknown config key {key!r}")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{path}: {key} must be a boolean, got {raw!r}")
            val = raw.lower() in ("true", "1", "yes")
        else:
            try:
                val = act.type(raw) if act.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad value for {key}: {exc}") from None
            if act.choices and val not in act.choices:
                raise ValueError(f"{path}: {key} must be one of {list(act.choices)}")
        defaults[dest] = val
    sp.set_defaults(**defaults)
    return sp.parse_args(argv_tail)


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip() + "\ngatgpt: error: a subcommand is required")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        i = argv.index(args.command)
        verbose = args.verbose
        args = _apply_config(sub, args.config, argv[i + 1:])
        args.command = sub.prog.split()[-1]
        args.verbose = getattr(args, "verbose", False) or verbose
    missing = [d for d in REQUIRED[args.command] if getattr(args, d, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"{sub.format_usage().strip()}\n{sub.prog}: error: the following arguments are required: {flags}")
    return args


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_data(args):
    return ds.load_csv(args.data, args.step_seconds)


def _graph(args, t):
    if args.adjacency:
        A, nodes = ds.load_adjacency_csv(args.adjacency)
        if nodes != list(t.node_ids):
            raise ds.DataError(f"{args.adjacency}: node order does not match {args.data}")
        return A
    if not args.distances:
        raise UsageError("one of --distances or --adjacency is required")
    dist = ds.load_distances(args.distances, t.node_ids)
    return ds.build_adjacency(dist, t.n_nodes, args.sigma, args.threshold, not args.no_self_loops)


def _split(args):
    return ds.SplitSpec(args.train_frac, args.val_frac, args.test_frac)


def _model_config(args, t, d_model=None, n_layers=None):
    return ModelConfig(c_in=t.n_channels, d_model=d_model or args.d_model,
                       n_layers=n_layers or args.n_layers, n_heads=args.n_heads,
                       gat_heads=args.gat_heads, kernel_size=args.kernel_size,
                       leaky_slope=args.leaky_slope)


def _train_config(args):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{n: getattr(args, n) for n in names})


def _mask(args, t, pattern="point"):
    if not args.mask:
        return ds.EvalMask(np.zeros(t.observed.shape, dtype=bool), pattern=pattern)
    return ds.load_mask_csv(args.mask, t, pattern=pattern)


def cmd_prepare(args):
    import os
    t = _load_data(args)
    A = _graph(args, t)
    bounds = ds.split_bounds(t.n_steps, _split(args))
    os.makedirs(args.out_dir, exist_ok=True)
    ds.save_adjacency_csv(A, t.node_ids, os.path.join(args.out_dir, "adjacency.csv"))
    stamps = t.timestamps()
    with open(os.path.join(args.out_dir, "splits.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "start", "stop", "first_timestamp", "last_timestamp"])
        for name, (a, b) in zip(("train", "val", "test"), bounds):
            w.writerow([name, a, b, stamps[a].isoformat(), stamps[b - 1].isoformat()])


def cmd_mask(args):
    t = _load_data(args)
    if args.pattern == "point":
        m = ds.gen_point_mask(t, args.ratio, args.seed)
    else:
        m = ds.gen_block_mask(t, args.point_ratio, args.block_prob,
                              ds.hours_to_steps(args.min_hours, t.step_seconds),
                              ds.hours_to_steps(args.max_hours, t.step_seconds), args.seed)
    ds.save_mask_csv(m, t, args.out)
    log.info("hid %d of %d observed entries", m.count, int(t.observed.sum()))


def cmd_train(args):
    t = _load_data(args)
    A = _graph(args, t)
    cfg = _train_config(args)
    visible = t.hide(_mask(args, t).hidden)
    (a0, a1), (b0, b1), _ = ds.split_bounds(t.n_steps, _split(args))
    mcfg = _model_config(args, t)
    params = load_checkpoint(args.init, mcfg) if args.init else init_model(mcfg, cfg.seed)
    params, history = fit(params, visible.window(a0, a1), visible.window(b0, b1), A, cfg)
    save_checkpoint(params, args.out)
    if args.history:
        write_history_csv(history, args.history)
    best = min(history, key=lambda r: r.val_mae)
    log.info("trained %d epochs; best validation MAE %.6g at epoch %d", len(history), best.val_mae, best.epoch)


def cmd_impute(args):
    t = _load_data(args)
    A = _graph(args, t)
    params = load_checkpoint(args.checkpoint)
    if params.config.c_in != t.n_channels:
        raise ds.DataError(f"checkpoint expects {params.config.c_in} channels, data has {t.n_channels}")
    out = impute(params, t.hide(_mask(args, t).hidden), A, window=args.window)
    ds.save_csv(out, args.out)


def cmd_evaluate(args):
    t = _load_data(args)
    m = _mask(args, t, pattern=args.pattern)
    if args.segment == "test":
        _, _, (c0, c1) = ds.split_bounds(t.n_steps, _split(args))
    else:
        c0, c1 = 0, t.n_steps
    reports = []
    if args.imputed:
        imp = ds.load_csv(args.imputed, t.step_seconds)
        if imp.shape != t.shape or list(imp.node_ids) != list(t.node_ids):
            raise ds.DataError(f"{args.imputed}: shape/columns do not match {args.data}")
        hm = m.hidden[:, c0:c1]
        if not imp.observed[:, c0:c1][hm].all():
            raise ds.DataError(f"{args.imputed}: masked entries are empty in the imputed file")
        reports.append(evaluate(imp.window(c0, c1).values, t.window(c0, c1), hm, args.dataset, "imputed"))
    wanted = [b.strip() for b in args.baselines.split(",") if b.strip()]
    for b in wanted:
        if b not in ("mean", "da", "knn"):
            raise UsageError(f"unknown baseline {b!r}; choose from mean, da, knn")
        if b == "mean":
            filled = baseline_mean(t, m)
        elif b == "da":
            filled = baseline_da(t, m)
        else:
            filled = baseline_knn(t, _graph(args, t), m, args.k)
        reports.append(evaluate(filled.window(c0, c1), t.window(c0, c1), m.hidden[:, c0:c1],
                                args.dataset, b))
    if not reports:
        raise UsageError("nothing to evaluate: pass --imputed and/or --baselines")
    for r in reports:
        r.pattern = args.pattern
    write_report_csv(reports, args.out if args.out else sys.stdout)


def cmd_sweep(args):
    t = _load_data(args)
    A = _graph(args, t)
    m = _mask(args, t)
    kw = dict(n_heads=args.n_heads, gat_heads=args.gat_heads, kernel_size=args.kernel_size,
              leaky_slope=args.leaky_slope)
    rows = sweep(args.layers, args.d_models, t, A, m, _train_config(args), _split(args), **kw)
    write_sweep_csv(rows, args.out)


COMMANDS = {"prepare": cmd_prepare, "mask": cmd_mask, "train": cmd_train, "impute": cmd_impute,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"gatgpt: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gatgpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"gatgpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, Exception) as exc:  # anything else is a runtime failure
        print(f"gatgpt {args.command}: runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
