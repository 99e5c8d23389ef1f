"""Command-line entry point: ``vmfhash <subcommand> ...``.

Subcommands: synth, split, train, encode, eval, sweep. Every file written
starts with a magic line and carries the effective configuration as
``# key <json>`` comment lines, so a run can be reconstructed from its
outputs. Exit codes: 0 success, 1 I/O or parse error, 2 numerical abort,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import hash_index as hx
from . import vmf_loss as vl
from .data import SynthSpec, load_dataset, save_dataset, split_train_test, synth_generate, zscore_normalize, ChannelStats
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import DomainError, FormatError, NumericalAbort
from .pipeline import DEFAULT_TEST_FRACTION, ExperimentConfig, max_useful_r, run_experiment, with_cell
from .train import TrainConfig, encode_codes, train

log = logging.getLogger("vmfhash")

EXIT_OK = 0
EXIT_IO = 1
EXIT_NUMERIC = 2
EXIT_USAGE = 64

HISTORY_MAGIC = "VMFHIST v1"
REPORT_MAGIC = "VMFEVAL v1"
SWEEP_MAGIC = "VMFSWEEP v1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def _comment_lines(items: dict) -> list[str]:
    return [f"# {k} {json.dumps(v, sort_keys=True, separators=(',', ':'))}" for k, v in items.items()]


def _header_comments(text: str) -> dict:
    out = {}
    for line in text.splitlines()[1:]:
        if not line.startswith("# "):
            continue
        key, _, payload = line[2:].partition(" ")
        try:
            out[key] = json.loads(payload)
        except ValueError:
            out[key] = payload
    return out


def _train_config(args, alpha=None) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha if alpha is None else alpha,
        ema_decay=args.ema_decay,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        classes=args.classes,
        channels=args.channels,
        length=args.length,
        samples_per_class=args.per_class,
        frequencies=tuple(args.frequencies) if args.frequencies else None,
        noise_std=args.noise,
        seed=args.seed,
    )
    ds = synth_generate(spec)
    save_dataset(ds, args.out, {"synth": spec.to_dict()})
    print(f"N={ds.n} D={ds.channels} T={ds.length} C={ds.num_classes}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_dataset(args.data)
    train_ds, test_ds = split_train_test(ds, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"split": {"data": args.data, "test_fraction": args.test_fraction, "seed": args.seed}}
    for name, part in (("train", train_ds), ("test", test_ds)):
        save_dataset(part, out / f"{name}.vmfts", {**echo, "part": name})
        print(f"{name}: N={part.n} C={len(np.unique(part.labels))}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = _train_config(args)
    enc = EncoderConfig(in_channels=ds.channels, embed_dim=args.bits, seed=args.seed, precision=args.precision)
    ds = zscore_normalize(ds)
    history_path = args.history or f"{args.out}.hist"
    records = []

    def on_epoch(rec):
        records.append(rec)
        log.info("epoch %d loss %.6f probe mAP %.4f", rec.epoch, rec.mean_loss, rec.probe_map)

    result = train(ds, enc, cfg, probe=not args.no_probe, on_epoch=on_epoch)
    extra = {
        "data": {"path": args.data, "n": ds.n, "classes": ds.num_classes, "label_map": {str(k): v for k, v in ds.label_map.items()}},
        "stats": ds.stats.to_dict(),
        "train": cfg.to_dict(),
        "class_params": {"mu": result.class_params.mu.tolist(), "kappa": result.class_params.kappa.tolist()},
    }
    save_checkpoint(args.out, result.weights, extra)
    lines = [HISTORY_MAGIC] + _comment_lines({"train": cfg.to_dict(), "encoder": enc.to_dict(), "data": args.data})
    for rec in records:
        lines.append(json.dumps(
            {"epoch": rec.epoch, "mean_loss": rec.mean_loss, "probe_map": rec.probe_map,
             "skipped": rec.skipped, "rejected": rec.rejected},
            sort_keys=True, separators=(",", ":"),
        ))
    Path(history_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    last = records[-1] if records else None
    print(f"epochs={len(records)} final_loss={last.mean_loss if last else float('nan')!r} checkpoint={args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    weights, extra = load_checkpoint(args.checkpoint)
    M = weights.config.embed_dim
    if args.bits is not None and args.bits != M:
        raise UsageError(f"--bits {args.bits} does not match the checkpoint (M={M})")
    ds = load_dataset(args.data)
    if ds.channels != weights.config.in_channels:
        raise UsageError(f"dataset has {ds.channels} channels, checkpoint expects {weights.config.in_channels}")
    if "stats" in extra:
        ds = zscore_normalize(ds, ChannelStats.from_dict(extra["stats"]))
    codes = encode_codes(weights, ds)
    # carry the file's original labels, not the dense ids
    original = np.array([ds.label_map[int(c)] for c in codes.labels], dtype=np.int64)
    codes = hx.CodeDatabase(codes.codes, original, codes.M)
    hx.save_codes(args.out, codes, {
        "encode": {"checkpoint": args.checkpoint, "data": args.data},
        "train": extra.get("train", {}),
        "encoder": weights.config.to_dict(),
    })
    print(f"N={len(codes)} M={M} out={args.out}")
    return EXIT_OK


def format_report(report: hx.RetrievalReport, n: int, query_fraction: float, source: dict) -> str:
    lines = [
        REPORT_MAGIC,
        f"bits={report.bits}",
        f"n={n}",
        f"R={report.R}",
        f"query_fraction={query_fraction!r}",
        f"runs={report.runs}",
        f"seed={report.seed}",
        f"map={report.map!r}",
    ]
    lines += [f"source.{k}={json.dumps(v, sort_keys=True, separators=(',', ':'))}" for k, v in source.items()]
    lines.append("# run\tseed\tmap")
    for i, (s, m) in enumerate(zip(hx.run_seeds(report.seed, report.runs), report.per_run), start=1):
        lines.append(f"{i}\t{s}\t{m!r}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    text = Path(args.data).read_text(encoding="utf-8")
    codes = hx.parse_codes(text)
    limit = max_useful_r(np.unique(codes.labels, return_inverse=True)[1] + 1, args.query_fraction)
    if args.r > limit:
        log.warning("R=%d exceeds the smallest per-class database size (~%d); mAP is capped below 1", args.r, limit)
    report = hx.evaluate_runs(codes, args.query_fraction, args.r, args.runs, args.seed)
    source = {"codes": args.data, **_header_comments(text)}
    out = format_report(report, len(codes), args.query_fraction, source)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    sys.stdout.write(out)
    return EXIT_OK


def _sweep_cell(ds, cfg: ExperimentConfig):
    try:
        result = run_experiment(ds, cfg)
        return ("ok", result.report.map, result.report.per_run)
    except NumericalAbort as exc:
        return ("failed", float("nan"), (str(exc),))


def format_sweep(bits: list[int], alphas: list[float], cells: dict, base: ExperimentConfig, data: str) -> str:
    lines = [SWEEP_MAGIC] + _comment_lines({"data": data, "base": base.to_dict(), "bits": bits, "alpha": alphas})
    head = ["bits"] + [f"alpha={a:g}" for a in alphas]
    rows = [head]
    for m in bits:
        row = [str(m)]
        for a in alphas:
            status, value, _ = cells[(m, a)]
            row.append(f"{value:.4f}" if status == "ok" else "FAILED")
        rows.append(row)
    col_means = []
    for a in alphas:
        vals = [cells[(m, a)][1] for m in bits if cells[(m, a)][0] == "ok"]
        col_means.append(float(np.mean(vals)) if vals else float("nan"))
    rows.append(["mean"] + [f"{v:.4f}" for v in col_means])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append("# cell\tbits\talpha\tseed\tstatus\tmap")
    for m in bits:
        for a in alphas:
            status, value, _ = cells[(m, a)]
            lines.append(f"cell\t{m}\t{a!r}\t{base.train.seed}\t{status}\t{value!r}")
    for a, v in zip(alphas, col_means):
        lines.append(f"mean\t*\t{a!r}\t{base.train.seed}\tok\t{v!r}")
    return "\n".join(lines) + "\n"


def _threads() -> int:
    raw = os.environ.get("VMFHASH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VMFHASH_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"VMFHASH_THREADS must be a positive integer, got {raw!r}")
    return n


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    base = ExperimentConfig(
        bits=args.bits[0],
        train=_train_config(args, alpha=args.alpha[0]),
        test_fraction=args.test_fraction,
        R=args.r,
        query_fraction=args.query_fraction,
        runs=args.runs,
        precision=args.precision,
    )
    grid = [(m, a) for m in args.bits for a in args.alpha]
    configs = [with_cell(base, m, a) for m, a in grid]
    workers = min(_threads(), len(grid))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, [ds] * len(configs), configs))
    else:
        results = []
        for (m, a), cfg in zip(grid, configs):
            log.info("cell bits=%d alpha=%g", m, a)
            results.append(_sweep_cell(ds, cfg))
    cells = dict(zip(grid, results))
    out = format_sweep(args.bits, args.alpha, cells, base, args.data)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    sys.stdout.write(out)
    return EXIT_NUMERIC if any(r[0] != "ok" for r in results) else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, bits_list: bool = False):
    if bits_list:
        p.add_argument("--bits", type=_csv(int), default=[16, 32, 64, 128], help="comma-separated code lengths")
        p.add_argument("--alpha", type=_csv(float), default=[1.0, 2.0], help="comma-separated margin factors")
    else:
        p.add_argument("--bits", type=int, default=16, help="code length M")
        p.add_argument("--alpha", type=float, default=vl.DEFAULT_ALPHA, help="training-time kappa divisor")
    d = TrainConfig()
    p.add_argument("--ema-decay", type=float, default=d.ema_decay)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")


def _add_eval_flags(p, r_default: int):
    p.add_argument("--r", type=int, default=r_default, help="top-R cutoff")
    p.add_argument("--query-fraction", type=float, default=hx.DEFAULT_QUERY_FRACTION)
    p.add_argument("--runs", type=int, default=hx.DEFAULT_RUNS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmfhash", description="vMF deep hashing for multivariate time series")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = SynthSpec()
    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=s.classes)
    p.add_argument("--channels", type=int, default=s.channels)
    p.add_argument("--length", type=int, default=s.length)
    p.add_argument("--per-class", type=int, default=s.samples_per_class)
    p.add_argument("--frequencies", type=_csv(float), default=None, help="cycles per window, one per class")
    p.add_argument("--noise", type=float, default=s.noise_std)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified train/test split into <out>/train.vmfts and <out>/test.vmfts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train an encoder, write a VMFH checkpoint and a history file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None, help="history path (default: <out>.hist)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-probe", action="store_true", help="skip the per-epoch training-set mAP probe")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="hash a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=None, help="expected M; checked against the checkpoint")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="top-R mAP over seeded query/database splits of a code file")
    p.add_argument("--data", required=True, help="VMFCODES file")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_eval_flags(p, hx.DEFAULT_R)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="bits x alpha grid of independent train/encode/eval runs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    _add_train_flags(p, bits_list=True)
    _add_eval_flags(p, 50)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, DomainError) as exc:
        print(f"vmfhash {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"vmfhash {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"vmfhash {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
