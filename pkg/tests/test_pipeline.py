import threading
import time

import numpy as np
import pytest

from optb import codec
from optb.codec import CodecMode, FormatError
from optb.metering import ENCODED_BATCHES, MemoryLedger
from optb.pipeline import (
    BufferStatus,
    EpochBuffer,
    PipelineConfig,
    PipelineError,
    PreparedBatch,
    dump,
    load,
    run,
)
from optb.sampler import uniform_plan

MODE = CodecMode.exact_int(64)


@pytest.fixture
def dataset(rng):
    images = rng.integers(0, 256, (80, 4, 4, 1), dtype=np.uint8)
    labels = np.repeat(np.arange(4), 20)
    return images, labels


def config(**kw):
    base = dict(epochs=3, batches_per_epoch=4, mode=MODE, sampler=uniform_plan(4, 8, seed=1))
    base.update(kw)
    return PipelineConfig(**base)


def test_buffer_transitions_forward_only():
    buf = EpochBuffer(0)
    with pytest.raises(PipelineError):
        buf.advance(BufferStatus.CONSUMED)
    buf.advance(BufferStatus.READY)
    buf.advance(BufferStatus.CONSUMED)
    with pytest.raises(PipelineError):
        buf.advance(BufferStatus.READY)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        config(epochs=0)
    with pytest.raises(ValueError):
        config(warm_start=True)
    with pytest.raises(ValueError):
        config(prepare_delay=-1)
    assert config(sampler=uniform_plan(4, 20)).chunks_per_batch == 3


def test_dump_load_round_trip(tmp_path, rng):
    batches = [
        PreparedBatch([codec.encode(rng.integers(0, 256, (8, 3, 3, 2), dtype=np.uint8), MODE)], np.arange(8) % 3)
        for _ in range(10)
    ]
    paths = dump(batches, tmp_path, epoch=2)
    assert sorted(p.name for p in tmp_path.glob("*.optb")) == sorted(f"batch_2_{i}.optb" for i in range(10))
    assert len(paths) == 10
    buf = load(tmp_path)
    assert buf.epoch_id == 2 and buf.status is BufferStatus.READY
    for a, b in zip(batches, buf.batches):
        assert a.inputs == b.inputs
        np.testing.assert_array_equal(a.labels, b.labels)


def test_load_failures(tmp_path, rng):
    with pytest.raises(PipelineError):
        load(tmp_path)
    batch = PreparedBatch([codec.encode(np.zeros((2, 1, 1, 1), np.uint8), MODE)], np.zeros(2, int))
    dump([batch, batch, batch], tmp_path)
    (tmp_path / "batch_0_1.optb").unlink()
    with pytest.raises(PipelineError, match="non-contiguous"):
        load(tmp_path)
    (tmp_path / "batch_0_1.optb").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(FormatError):
        load(tmp_path)


def test_epochs_in_order_once_each(dataset):
    images, labels = dataset
    seen = []
    run(config(epochs=5), images, labels, lambda e, b: seen.append(e))
    assert seen == [e for e in range(5) for _ in range(4)]


def test_consumer_sees_decodable_ready_batches(dataset):
    images, labels = dataset

    def step(epoch, batch):
        assert batch.encoded and len(batch.inputs) == 1
        got = batch.images()
        # every decoded image is a real example of its label
        for img, lab in zip(got, batch.labels):
            matches = np.flatnonzero((images == img).all(axis=(1, 2, 3)))
            assert lab in labels[matches]

    run(config(), images, labels, step)


def test_matches_serial_stream(dataset):
    images, labels = dataset
    streams = []
    for parallel in (True, False):
        out = []
        run(config(parallel=parallel), images, labels, lambda e, b: out.append(b.images().tobytes()))
        streams.append(out)
    assert streams[0] == streams[1]


def test_double_buffer_bound(dataset):
    images, labels = dataset
    led = MemoryLedger()
    per_epoch = 4 * codec.encode(images[:8], MODE).nbytes

    def slow(e, b):
        time.sleep(0.002)

    run(config(epochs=6), images, labels, slow, ledger=led)
    assert led.peak[ENCODED_BATCHES] <= 2 * per_epoch
    assert led.current[ENCODED_BATCHES] == 0


def test_single_epoch_cannot_overlap(dataset):
    images, labels = dataset
    report = run(config(epochs=1, prepare_delay=0.05), images, labels, lambda e, b: time.sleep(0.01))
    t = report.epochs[0]
    assert t.overlap_ns == 0
    assert t.train_start >= t.prepare_end
    assert report.total_s >= 0.05 + 0.04


def test_overlap_hides_preparation(dataset):
    images, labels = dataset
    # at E = 4 the bound equals the ideal P + E*T exactly, so test with slack
    T, E = 0.1, 10
    P = 0.25 * T
    report = run(config(epochs=E, prepare_delay=P), images, labels, lambda e, b: time.sleep(T / 4))
    assert report.total_s <= 0.85 * E * (P + T)
    # queueing model: one exposed preparation, then training back to back
    assert report.total_s == pytest.approx(P + E * T, rel=0.2)
    assert all(t.overlap_ms > 0 for t in report.epochs[1:])


def test_warm_start_skips_first_preparation(dataset, tmp_path):
    images, labels = dataset
    dumped = []
    run(config(epochs=1, dump_dir=tmp_path), images, labels, lambda e, b: dumped.append(b.labels.tolist()))
    seen = []
    cfg = config(epochs=2, dump_dir=tmp_path, warm_start=True, prepare_delay=0.1)
    report = run(cfg, images, labels, lambda e, b: seen.append((e, b.labels.tolist())))
    assert report.epochs[0].prepare_ms == 0
    # epoch 0 trains while epoch 1's 0.1 s preparation is still running
    assert report.epochs[0].train_end < report.epochs[1].prepare_end
    assert [lab for e, lab in seen if e == 0] == dumped
    assert [e for e, _ in seen] == [0] * 4 + [1] * 4


def test_producer_failure_surfaces_before_epoch(dataset):
    images, labels = dataset
    calls = {"n": 0}

    def hook(c, img):
        calls["n"] += 1
        if calls["n"] > 2 * 32:  # fail while preparing epoch 2
            raise RuntimeError("augmentation failed")
        return img

    seen = []
    with pytest.raises(PipelineError, match="epoch 2"):
        run(config(epochs=4), images, labels, lambda e, b: seen.append(e), hook=hook)
    assert set(seen) == {0, 1}


def test_consumer_failure_stops_producer(dataset):
    images, labels = dataset

    def boom(e, b):
        raise KeyError("bad step")

    t0 = time.perf_counter()
    with pytest.raises(KeyError):
        run(config(epochs=50, prepare_delay=0.2), images, labels, boom)
    assert time.perf_counter() - t0 < 1.0
    time.sleep(0.1)
    assert not any(t.name == "pipeline-producer" for t in threading.enumerate())


def test_raw_mode_and_report_csv(dataset, tmp_path):
    images, labels = dataset
    report = run(config(mode=None, parallel=False), images, labels, lambda e, b: None)
    report.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,prepare_ms,train_ms,overlap_ms" and len(lines) == 4
