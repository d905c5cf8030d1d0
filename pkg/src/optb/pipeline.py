"""Encode-while-train pipeline.

A producer thread samples, encodes and (optionally) dumps the batches of the
next epoch while the consumer trains on the current one. At most two epoch
buffers are alive at any moment: the one being trained on and the one being
prepared or waiting.
"""

from __future__ import annotations

import csv
import enum
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import codec, metering
from .codec import CodecMode, EncodedBatch
from .metering import ENCODED_BATCHES, MemoryLedger
from .sampler import BatchSampler, ClassIndex, Hook, SamplerPlan

_FILE_RE = re.compile(r"^batch_(\d+)_(\d+)\.optb$")


class PipelineError(RuntimeError):
    pass


class BufferStatus(enum.IntEnum):
    PREPARING = 0
    READY = 1
    CONSUMED = 2


@dataclass
class PreparedBatch:
    """One training batch: encoded chunks (or raw pixels) plus labels."""

    inputs: list[EncodedBatch] | np.ndarray
    labels: np.ndarray

    @property
    def encoded(self) -> bool:
        return not isinstance(self.inputs, np.ndarray)

    @property
    def nbytes(self) -> int:
        if self.encoded:
            return sum(e.nbytes for e in self.inputs)
        return int(self.inputs.nbytes)

    def images(self) -> np.ndarray:
        if self.encoded:
            return np.concatenate([codec.decode(e) for e in self.inputs])
        return self.inputs


@dataclass
class EpochBuffer:
    epoch_id: int
    batches: list[PreparedBatch] = field(default_factory=list)
    status: BufferStatus = BufferStatus.PREPARING

    def advance(self, status: BufferStatus) -> None:
        if status != self.status + 1:
            raise PipelineError(
                f"epoch {self.epoch_id}: illegal transition {self.status.name} -> {status.name}"
            )
        self.status = status

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.batches)


@dataclass
class PipelineConfig:
    epochs: int
    batches_per_epoch: int
    mode: CodecMode | None
    sampler: SamplerPlan
    warm_start: bool = False
    parallel: bool = True
    dump_dir: Path | None = None
    prepare_delay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be positive")
        if self.prepare_delay < 0:
            raise ValueError("prepare_delay must be non-negative")
        if self.warm_start and (self.dump_dir is None or self.mode is None):
            raise ValueError("warm_start needs a dump directory and an encode mode")
        if self.dump_dir is not None:
            self.dump_dir = Path(self.dump_dir)

    @property
    def chunks_per_batch(self) -> int:
        if self.mode is None:
            return 1
        return -(-self.sampler.batch_size // self.mode.capacity)


@dataclass
class EpochTiming:
    epoch: int
    prepare_start: int = 0
    prepare_end: int = 0
    train_start: int = 0
    train_end: int = 0
    overlap_ns: int = 0

    @property
    def prepare_ms(self) -> float:
        return (self.prepare_end - self.prepare_start) / 1e6

    @property
    def train_ms(self) -> float:
        return (self.train_end - self.train_start) / 1e6

    @property
    def overlap_ms(self) -> float:
        return self.overlap_ns / 1e6


@dataclass
class PipelineReport:
    epochs: list[EpochTiming]
    total_ns: int

    @property
    def total_s(self) -> float:
        return self.total_ns / 1e9

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "prepare_ms", "train_ms", "overlap_ms"])
            for t in self.epochs:
                w.writerow([t.epoch, f"{t.prepare_ms:.3f}", f"{t.train_ms:.3f}", f"{t.overlap_ms:.3f}"])


def batch_path(directory: Path, epoch: int, index: int) -> Path:
    return Path(directory) / f"batch_{epoch}_{index}.optb"


def dump(batches: Sequence[PreparedBatch], directory: str | Path, epoch: int = 0) -> list[Path]:
    """Write every encoded chunk as ``batch_{epoch}_{index}.optb`` (indices
    contiguous across the epoch) with a ``.labels`` sidecar of one byte per
    image."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create {directory}: {exc}") from exc
    paths = []
    index = 0
    for batch in batches:
        if not batch.encoded:
            raise PipelineError("only encoded batches can be dumped")
        offset = 0
        for enc in batch.inputs:
            path = batch_path(directory, epoch, index)
            codec.write(enc, path)
            labels = batch.labels[offset : offset + enc.n_images]
            try:
                path.with_suffix(".labels").write_bytes(np.asarray(labels, dtype=np.uint8).tobytes())
            except OSError as exc:
                raise PipelineError(f"cannot write {path.with_suffix('.labels')}: {exc}") from exc
            paths.append(path)
            offset += enc.n_images
            index += 1
    return paths


def load(directory: str | Path, epoch: int | None = None, chunks_per_batch: int = 1) -> EpochBuffer:
    """Read one epoch's dumped chunks back, regrouped ``chunks_per_batch`` at
    a time. Defaults to the lowest epoch present."""
    directory = Path(directory)
    if not directory.is_dir():
        raise PipelineError(f"{directory} is not a directory")
    found: dict[int, dict[int, Path]] = {}
    for p in directory.iterdir():
        m = _FILE_RE.match(p.name)
        if m:
            found.setdefault(int(m.group(1)), {})[int(m.group(2))] = p
    if not found:
        raise PipelineError(f"no encoded batches in {directory}")
    if epoch is None:
        epoch = min(found)
    files = found.get(epoch)
    if not files:
        raise PipelineError(f"no encoded batches for epoch {epoch} in {directory}")
    if sorted(files) != list(range(len(files))):
        raise PipelineError(f"epoch {epoch} in {directory} has non-contiguous batch indices")
    if len(files) % chunks_per_batch:
        raise PipelineError(f"{len(files)} chunks do not split into batches of {chunks_per_batch}")

    chunks, labels = [], []
    for i in range(len(files)):
        enc = codec.read(files[i])
        side = files[i].with_suffix(".labels")
        try:
            lab = np.frombuffer(side.read_bytes(), dtype=np.uint8).astype(np.int64)
        except OSError as exc:
            raise PipelineError(f"cannot read {side}: {exc}") from exc
        if len(lab) != enc.n_images:
            raise PipelineError(f"{side} holds {len(lab)} labels for {enc.n_images} images")
        chunks.append(enc)
        labels.append(lab)
    buffer = EpochBuffer(epoch)
    for k in range(0, len(chunks), chunks_per_batch):
        buffer.batches.append(
            PreparedBatch(chunks[k : k + chunks_per_batch], np.concatenate(labels[k : k + chunks_per_batch]))
        )
    buffer.advance(BufferStatus.READY)
    return buffer


def prepare_epoch(
    epoch: int,
    config: PipelineConfig,
    sampler: BatchSampler,
    images: np.ndarray,
    stop: threading.Event | None = None,
) -> EpochBuffer:
    """Sample, encode and optionally dump one epoch's batches."""
    buffer = EpochBuffer(epoch)
    for _ in range(config.batches_per_epoch):
        if stop is not None and stop.is_set():
            return buffer
        picked, labels = sampler.next_examples(images)
        if config.mode is None:
            inputs = picked
        else:
            cap = config.mode.capacity
            inputs = [codec.encode(picked[k : k + cap], config.mode) for k in range(0, len(picked), cap)]
        buffer.batches.append(PreparedBatch(inputs, labels))
    if config.prepare_delay:
        # stands in for augmentation/pre-processing cost
        if stop is not None:
            stop.wait(config.prepare_delay)
        else:
            time.sleep(config.prepare_delay)
    if config.dump_dir is not None and config.mode is not None:
        dump(buffer.batches, config.dump_dir, epoch)
    return buffer


TrainStep = Callable[[int, PreparedBatch], None]


def run(
    config: PipelineConfig,
    images: np.ndarray,
    labels: np.ndarray,
    train_step: TrainStep,
    ledger: MemoryLedger | None = None,
    hook: Hook | None = None,
    epoch_end: Callable[[int], None] | None = None,
) -> PipelineReport:
    """Train ``config.epochs`` epochs, calling ``train_step(epoch, batch)`` for
    every batch in order and ``epoch_end(epoch)`` after each epoch."""
    sampler = BatchSampler(config.sampler, ClassIndex.from_labels(labels, config.sampler.n_classes), hook)
    timings = [EpochTiming(e) for e in range(config.epochs)]
    slots = threading.Semaphore(2)
    handoff: queue.Queue = queue.Queue()
    stop = threading.Event()
    t_start = time.perf_counter_ns()

    def make(epoch: int) -> EpochBuffer:
        timings[epoch].prepare_start = time.perf_counter_ns()
        buf = prepare_epoch(epoch, config, sampler, images, stop)
        timings[epoch].prepare_end = time.perf_counter_ns()
        buf.advance(BufferStatus.READY)
        metering.alloc(ledger, ENCODED_BATCHES, buf.nbytes if config.mode else 0, f"epoch {epoch}")
        return buf

    first = 0
    warm: EpochBuffer | None = None
    if config.warm_start:
        warm = load(config.dump_dir, 0, config.chunks_per_batch)
        if len(warm.batches) != config.batches_per_epoch:
            raise PipelineError(
                f"dumped epoch 0 has {len(warm.batches)} batches, expected {config.batches_per_epoch}"
            )
        slots.acquire()
        metering.alloc(ledger, ENCODED_BATCHES, warm.nbytes, "epoch 0 (dumped)")
        first = 1

    def producer() -> None:
        try:
            for epoch in range(first, config.epochs):
                slots.acquire()
                if stop.is_set():
                    return
                handoff.put((epoch, make(epoch), None))
        except BaseException as exc:  # surfaced to the consumer
            handoff.put((None, None, exc))

    thread = None
    if config.parallel:
        thread = threading.Thread(target=producer, name="pipeline-producer", daemon=True)
        thread.start()

    try:
        for epoch in range(config.epochs):
            if warm is not None and epoch == 0:
                buf = warm
            elif config.parallel:
                got, buf, exc = handoff.get()
                if exc is not None:
                    raise PipelineError(f"preparing epoch {epoch} failed: {exc}") from exc
                if got != epoch:
                    raise PipelineError(f"expected epoch {epoch}, producer delivered {got}")
            else:
                slots.acquire()
                buf = make(epoch)
            if buf.status is not BufferStatus.READY:
                raise PipelineError(f"epoch {epoch} buffer is {buf.status.name}")
            timings[epoch].train_start = time.perf_counter_ns()
            for batch in buf.batches:
                train_step(epoch, batch)
            timings[epoch].train_end = time.perf_counter_ns()
            buf.advance(BufferStatus.CONSUMED)
            metering.free(ledger, ENCODED_BATCHES, buf.nbytes if config.mode else 0, f"epoch {epoch}")
            slots.release()
            if epoch_end is not None:
                epoch_end(epoch)
    finally:
        stop.set()
        if thread is not None:
            slots.release()  # wake a producer blocked on a slot
            thread.join(timeout=5)
    total = time.perf_counter_ns() - t_start

    trains = [(t.train_start, t.train_end) for t in timings]
    for t in timings:
        t.overlap_ns = sum(
            max(0, min(t.prepare_end, b) - max(t.prepare_start, a)) for a, b in trains
        )
    return PipelineReport(timings, total)
