"""Training and benchmark runs that combine the optimisations.

Pipelines are named by the optimisations they switch on: ``B`` (baseline),
``E-D`` (encoded batches, decode layer, parallel preparation), ``M-P`` (mixed
precision), ``S-C`` (sequential checkpoints), and ``+``-joined combinations
such as ``E-D+S-C``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, data, metering
from .checkpoint import ActivationSizeProfile, SegmentPlan, parse_plan, train_step
from .codec import CodecMode
from .metering import CATEGORIES, MemoryLedger
from .nn import Decode, LossKind, Network, NumericError, Precision, TrainState, infer, pixels_to_input
from .pipeline import PipelineConfig, PipelineReport, run as run_pipeline
from .sampler import plan as sampler_plan

PIXEL_SCALE = 1.0 / 255.0
PIPELINE_PARTS = ("E-D", "M-P", "S-C")


@dataclass
class RunConfig:
    """Everything that determines a run. Defaults describe the reference task."""

    hidden_layers: int = 16
    width: int = 64
    n_classes: int = 10
    image_shape: tuple[int, int, int] = (8, 8, 1)
    activation: str = "relu"
    batch_size: int = 128
    epochs: int = 10
    lr: float = 0.02
    seed: int = 0
    data_seed: int = 0
    n_train: int = 2560
    n_test: int = 640
    data_path: Path | None = None
    ed: bool = False
    encode_mode: CodecMode | None = None
    sc: str | None = None
    mp: bool = False
    loss_scale: float = 1.0
    class_weights: tuple[float, ...] | None = None
    prepare_delay: float = 0.0
    dump_dir: Path | None = None
    warm_start: bool = False
    serial: bool = False  # E-D without overlap, for ablations

    def validate(self) -> None:
        if self.ed and self.encode_mode is None:
            raise ValueError("E-D needs an encode mode")
        if self.warm_start and not (self.ed and self.dump_dir):
            raise ValueError("warm start needs E-D and a dump directory")
        for name in ("hidden_layers", "width", "n_classes", "batch_size", "epochs", "n_train", "n_test"):
            if getattr(self, name) < (0 if name == "hidden_layers" else 1):
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size > self.n_train:
            raise ValueError("batch size exceeds the training set")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ValueError(f"{len(self.class_weights)} class weights for {self.n_classes} classes")

    @property
    def pipeline(self) -> str:
        parts = [p for p, on in zip(PIPELINE_PARTS, (self.ed, self.mp, self.sc is not None)) if on]
        return "+".join(parts) or "B"

    def with_pipeline(self, name: str, sc: str = "auto:4", mode: CodecMode | None = None) -> "RunConfig":
        """Copy of this config with exactly the optimisations named in ``name``."""
        parts = set() if name.strip().upper() == "B" else {p.strip().upper() for p in name.split("+")}
        unknown = parts - set(PIPELINE_PARTS)
        if unknown:
            raise ValueError(f"unknown pipeline part(s) {sorted(unknown)} in {name!r}")
        ed = "E-D" in parts
        return dataclasses.replace(
            self,
            ed=ed,
            encode_mode=(mode or self.encode_mode or CodecMode.exact_int(128)) if ed else self.encode_mode,
            mp="M-P" in parts,
            sc=(self.sc or sc) if "S-C" in parts else None,
        )

    def header_lines(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out.append(f"# {f.name}={v}")
        out.append(f"# pipeline={self.pipeline}")
        return out


@dataclass
class EpochRow:
    epoch: int
    loss: float
    accuracy: float
    peaks: dict[str, int]
    peak_total: int


@dataclass
class TrainResult:
    config: RunConfig
    rows: list[EpochRow]
    losses: list[float]
    report: PipelineReport
    ledger: MemoryLedger
    plan: SegmentPlan | None
    wall_s: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.rows[-1].accuracy

    def write_metrics_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            for line in self.config.header_lines():
                fh.write(line + "\n")
            if self.plan is not None:
                fh.write(f"# checkpoints={self.plan}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "accuracy"] + [f"peak_{c}" for c in CATEGORIES] + ["peak_total"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.loss), repr(r.accuracy)]
                           + [r.peaks[c] for c in CATEGORIES] + [r.peak_total])


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data_path is not None:
        images, labels = data.read_records(cfg.data_path, cfg.image_shape)
        if labels.max() >= cfg.n_classes:
            raise data.DataError(f"label {labels.max()} outside {cfg.n_classes} classes")
        n_test = max(1, len(labels) // 5)
        return Dataset(images[:-n_test], labels[:-n_test], images[-n_test:], labels[-n_test:])
    tr = data.gaussian_blobs(cfg.n_train // cfg.n_classes, cfg.n_classes, cfg.image_shape, cfg.data_seed, split_seed=0)
    te = data.gaussian_blobs(cfg.n_test // cfg.n_classes, cfg.n_classes, cfg.image_shape, cfg.data_seed, split_seed=1)
    return Dataset(*tr, *te)


def encode_chunks(images: np.ndarray, mode: CodecMode) -> list[codec.EncodedBatch]:
    cap = mode.capacity
    return [codec.encode(images[k : k + cap], mode) for k in range(0, len(images), cap)]


def build_network(cfg: RunConfig, ledger: MemoryLedger | None) -> Network:
    decode = None
    if cfg.ed:
        decode = Decode(cfg.encode_mode, cfg.batch_size, tuple(cfg.image_shape), PIXEL_SCALE)
    return Network.mlp(
        math.prod(cfg.image_shape),
        [cfg.width] * cfg.hidden_layers,
        cfg.n_classes,
        activation=cfg.activation,
        decode=decode,
        precision=Precision.MIXED if cfg.mp else Precision.SINGLE,
        seed=cfg.seed,
        ledger=ledger,
        loss_scale=cfg.loss_scale,
    )


def batch_input(cfg: RunConfig, images: np.ndarray):
    if cfg.ed:
        return encode_chunks(images, cfg.encode_mode)
    return pixels_to_input(images, PIXEL_SCALE)


def build_plan(cfg: RunConfig, net: Network) -> SegmentPlan | None:
    if cfg.sc is None:
        return None
    input_bytes = None
    if cfg.ed:
        probe = np.zeros((cfg.batch_size,) + tuple(cfg.image_shape), dtype=np.uint8)
        input_bytes = sum(e.nbytes for e in encode_chunks(probe, cfg.encode_mode))
    profile = ActivationSizeProfile.from_network(net, cfg.batch_size, input_bytes)
    return parse_plan(cfg.sc, profile)


def accuracy(net: Network, cfg: RunConfig, images: np.ndarray, labels: np.ndarray) -> float:
    logits = infer(net, batch_input(cfg, images)).data
    return float(np.mean(logits.argmax(axis=1) == labels))


def train(cfg: RunConfig) -> TrainResult:
    cfg.validate()
    ds = load_dataset(cfg)
    ledger = MemoryLedger(keep_events=False)
    net = build_network(cfg, ledger)
    plan = build_plan(cfg, net)
    state = TrainState(net, cfg.lr, LossKind.CROSS_ENTROPY, cfg.seed)
    weights = cfg.class_weights or tuple([1.0 / cfg.n_classes] * cfg.n_classes)
    pcfg = PipelineConfig(
        epochs=cfg.epochs,
        batches_per_epoch=len(ds.train_y) // cfg.batch_size,
        mode=cfg.encode_mode if cfg.ed else None,
        sampler=sampler_plan(weights, cfg.batch_size, cfg.seed),
        warm_start=cfg.warm_start,
        parallel=cfg.ed and not cfg.serial,
        dump_dir=cfg.dump_dir if cfg.ed else None,
        prepare_delay=cfg.prepare_delay,
    )
    losses: list[float] = []
    rows: list[EpochRow] = []
    epoch_losses: list[float] = []

    def step(epoch, batch):
        x = batch.inputs if cfg.ed else pixels_to_input(batch.inputs, PIXEL_SCALE)
        value = train_step(state, x, batch.labels, plan)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {epoch}")
        losses.append(value)
        epoch_losses.append(value)

    def epoch_end(epoch):
        mean = math.fsum(epoch_losses) / len(epoch_losses)
        epoch_losses.clear()
        acc = accuracy(net, cfg, ds.test_x, ds.test_y)
        rows.append(EpochRow(epoch, mean, acc, dict(ledger.peak), ledger.peak_total))

    t0 = time.perf_counter()
    report = run_pipeline(pcfg, ds.train_x, ds.train_y, step, ledger=ledger, epoch_end=epoch_end)
    wall = time.perf_counter() - t0
    return TrainResult(cfg, rows, losses, report, ledger, plan, wall)


def iteration_memory(cfg: RunConfig, keep_events: bool = False) -> MemoryLedger:
    """Ledger after one training step on one batch of the run's data."""
    cfg.validate()
    ds = load_dataset(cfg)
    ledger = MemoryLedger(keep_events=keep_events)
    net = build_network(cfg, ledger)
    plan = build_plan(cfg, net)
    state = TrainState(net, cfg.lr, LossKind.CROSS_ENTROPY, cfg.seed)
    x = batch_input(cfg, ds.train_x[: cfg.batch_size])
    train_step(state, x, ds.train_y[: cfg.batch_size], plan)
    return ledger


def step_times(cfg: RunConfig, steps: int = 100, warmup: int = 5) -> list[float]:
    """Wall-clock seconds of ``steps`` consecutive training steps."""
    cfg.validate()
    ds = load_dataset(cfg)
    net = build_network(cfg, None)
    plan = build_plan(cfg, net)
    state = TrainState(net, cfg.lr, LossKind.CROSS_ENTROPY, cfg.seed)
    n_batches = len(ds.train_y) // cfg.batch_size
    batches = [
        (batch_input(cfg, ds.train_x[k * cfg.batch_size : (k + 1) * cfg.batch_size]),
         ds.train_y[k * cfg.batch_size : (k + 1) * cfg.batch_size])
        for k in range(n_batches)
    ]
    times = []
    for i in range(warmup + steps):
        x, y = batches[i % n_batches]
        t0 = time.perf_counter()
        train_step(state, x, y, plan)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return times


@dataclass
class BenchRow:
    pipeline: str
    accuracy: float
    total_time_s: float
    peaks: dict[str, int] = field(default_factory=dict)
    peak_total: int = 0


def bench(cfg: RunConfig, pipelines: list[str]) -> list[BenchRow]:
    rows = []
    for name in pipelines:
        result = train(cfg.with_pipeline(name))
        rows.append(BenchRow(name, result.accuracy, result.wall_s, dict(result.ledger.peak),
                             result.ledger.peak_total))
    return rows


def write_bench_csv(cfg: RunConfig, rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        for line in cfg.header_lines():
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(["pipeline", "accuracy", "total_time_s"] + [f"peak_{c}" for c in CATEGORIES] + ["peak_total"])
        for r in rows:
            w.writerow([r.pipeline, repr(r.accuracy), f"{r.total_time_s:.4f}"]
                       + [r.peaks[c] for c in CATEGORIES] + [r.peak_total])
