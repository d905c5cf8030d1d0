"""Command-line entry point: ``optb {encode,decode,train,bench}``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, data
from .checkpoint import PlanError
from .codec import CodecError, CodecMode
from .experiment import RunConfig, bench, train, write_bench_csv
from .nn import NumericError
from .pipeline import PipelineError
from .sampler import SamplerError, parse_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W,C, got {text!r}") from None
    if min(h, w, c) < 1:
        raise argparse.ArgumentTypeError("shape entries must be positive")
    return h, w, c


def _mode(text: str) -> CodecMode:
    try:
        return CodecMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _weights(text: str) -> tuple[float, ...]:
    try:
        return tuple(parse_weights(text))
    except SamplerError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_run_args(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    g = p.add_argument_group("task")
    g.add_argument("--data", type=Path, help="label-byte + CHW pixel record file (default: synthetic blobs)")
    g.add_argument("--shape", type=_shape, default=d.image_shape, help="image H,W,C (default 8,8,1)")
    g.add_argument("--classes", type=int, default=d.n_classes)
    g.add_argument("--n-train", type=int, default=d.n_train)
    g.add_argument("--n-test", type=int, default=d.n_test)
    g.add_argument("--data-seed", type=int, default=d.data_seed)
    g = p.add_argument_group("model and training")
    g.add_argument("--hidden-layers", type=int, default=d.hidden_layers)
    g.add_argument("--width", type=int, default=d.width)
    g.add_argument("--activation", choices=("relu", "sigmoid"), default=d.activation)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--seed", type=int, default=d.seed, help="overridden by $OPTB_SEED")
    g.add_argument("--class-weights", type=_weights, help="comma-separated per-class batch weights")
    g = p.add_argument_group("pipeline")
    g.add_argument("--encode-mode", type=_mode, help="codec mode for --ed: " + ", ".join(m.name for m in codec.MODES))
    g.add_argument("--sc", metavar="PLAN", help="checkpoint plan: auto:k, default, or indices like 0,4,8,16")
    g.add_argument("--loss-scale", type=float, default=d.loss_scale)
    g.add_argument("--prepare-delay", type=float, default=d.prepare_delay, help="seconds added to each epoch's preparation")
    g.add_argument("--dump-dir", type=Path, help="write encoded batches here")
    g.add_argument("--warm-start", action="store_true", help="train epoch 0 from batches dumped earlier")
    g.add_argument("--serial-prepare", action="store_true", help="with --ed, prepare each epoch before training it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="optb", description="Encoded batches, checkpointing and mixed precision on a small MLP.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="pack raw images into one OPTB file")
    p.add_argument("images", nargs="+", type=Path, help="raw H*W*C byte files")
    p.add_argument("--shape", type=_shape, required=True)
    p.add_argument("--mode", type=_mode, required=True)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("decode", help="unpack OPTB files into raw images")
    p.add_argument("files", nargs="+", type=Path)
    p.add_argument("-o", "--out-dir", type=Path, required=True)

    p = sub.add_parser("train", help="train on the reference task or a record file")
    _add_run_args(p)
    flags = p.add_argument_group("optimisations")
    flags.add_argument("--baseline", action="store_true", help="no optimisations (the default)")
    flags.add_argument("--ed", action="store_true", help="encoded batches, decode layer, parallel prepare")
    flags.add_argument("--mp", action="store_true", help="Half weight storage with Single master copies")
    p.add_argument("--metrics", type=Path, default=Path("metrics.csv"))
    p.add_argument("--timing", type=Path, help="per-epoch prepare/train/overlap CSV")

    p = sub.add_parser("bench", help="compare pipelines on one task")
    _add_run_args(p)
    p.add_argument("--pipelines", default="B,E-D,M-P,S-C,S-C+M-P,E-D+S-C",
                   help="comma-separated names built from E-D, M-P, S-C joined by '+'; B is the baseline")
    p.add_argument("-o", "--output", type=Path, default=Path("bench.csv"))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    seed = args.seed
    if os.environ.get("OPTB_SEED"):
        try:
            seed = int(os.environ["OPTB_SEED"])
        except ValueError:
            raise UsageError(f"OPTB_SEED must be an integer, got {os.environ['OPTB_SEED']!r}") from None
    cfg = RunConfig(
        hidden_layers=args.hidden_layers,
        width=args.width,
        n_classes=args.classes,
        image_shape=args.shape,
        activation=args.activation,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        seed=seed,
        data_seed=args.data_seed,
        n_train=args.n_train,
        n_test=args.n_test,
        data_path=args.data,
        ed=getattr(args, "ed", False),
        encode_mode=args.encode_mode,
        sc=args.sc,
        mp=getattr(args, "mp", False),
        loss_scale=args.loss_scale,
        class_weights=args.class_weights,
        prepare_delay=args.prepare_delay,
        dump_dir=args.dump_dir,
        warm_start=args.warm_start,
        serial=args.serial_prepare,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_encode(args) -> int:
    images = [data.read_raw_image(p, args.shape) for p in args.images]
    enc = codec.encode(images, args.mode)
    codec.write(enc, args.output)
    print(f"{args.output}: {enc.n_images} images, {args.mode.name}, {enc.nbytes} bytes (raw {enc.raw_nbytes})")
    return EXIT_OK


def cmd_decode(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.files:
        images = codec.decode(codec.read(path))
        for i, img in enumerate(images):
            (args.out_dir / f"{path.stem}_{i}.raw").write_bytes(np.ascontiguousarray(img).tobytes())
        print(f"{path}: {len(images)} images -> {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    result = train(cfg)
    result.write_metrics_csv(args.metrics)
    if args.timing:
        result.report.write_csv(args.timing)
    last = result.rows[-1]
    print(f"{cfg.pipeline}: loss {last.loss:.6f}, accuracy {last.accuracy:.4f}, "
          f"peak {result.ledger.peak_total} bytes, {result.wall_s:.2f} s -> {args.metrics}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = config_from_args(args)
    names = [n.strip() for n in args.pipelines.split(",") if n.strip()]
    if not names:
        raise UsageError("no pipelines given")
    for n in names:
        try:
            cfg.with_pipeline(n)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    rows = bench(cfg, names)
    write_bench_csv(cfg, rows, args.output)
    for r in rows:
        print(f"{r.pipeline:>10}: accuracy {r.accuracy:.4f}, {r.total_time_s:.2f} s, peak {r.peak_total} bytes")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        if args.baseline and (args.ed or args.mp or args.sc):
            parser.error("--baseline cannot be combined with --ed, --sc or --mp")
        if args.ed and args.encode_mode is None:
            parser.error("--ed needs --encode-mode")
    if args.command == "bench":
        args.ed = args.mp = False
    handlers = {"encode": cmd_encode, "decode": cmd_decode, "train": cmd_train, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except (UsageError, PlanError) as exc:
        print(f"optb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"optb: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CodecError, data.DataError, PipelineError, SamplerError, OSError) as exc:
        print(f"optb: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
