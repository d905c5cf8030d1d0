"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import itertools
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import fd_gradients, jitter_biases, max_relative_error  # noqa: E402
from optb import codec  # noqa: E402
from optb.checkpoint import (  # noqa: E402
    ActivationSizeProfile,
    SegmentPlan,
    _exhaustive,
    _threshold_dp,
    checkpointed_backward,
    full_backward,
    predict_peak,
    recommend_plan,
)
from optb.codec import CodecMode  # noqa: E402
from optb.experiment import RunConfig, iteration_memory, step_times, train  # noqa: E402
from optb.metering import ACTIVATIONS, WEIGHTS  # noqa: E402
from optb.nn import Dense, Gradients, LossKind, Network, Precision, TrainState, sgd_step  # noqa: E402
from optb.pipeline import PipelineConfig, run as run_pipeline  # noqa: E402
from optb.sampler import BatchSampler, ClassIndex, plan as sampler_plan  # noqa: E402
from optb.tensor import Tensor  # noqa: E402

RESULTS: dict[int, tuple[bool, str, str]] = {}
REFERENCE = RunConfig()


def report(number, title, ok, detail):
    RESULTS[number] = (bool(ok), title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


# 1 -------------------------------------------------------------------------

def test_01_codec_losslessness():
    rng = np.random.default_rng(1)
    modes = [CodecMode.exact_int(64), CodecMode.exact_int(128), CodecMode.float64_faithful(),
             CodecMode.lossless_offset(64), CodecMode.lossless_offset(128)]
    t0 = time.perf_counter()
    failures = 0
    for mode in modes:
        for _ in range(1000):
            n = int(rng.integers(1, mode.capacity + 1))
            shape = tuple(int(v) for v in rng.integers(1, 9, 3))
            imgs = rng.integers(0, 256, (n,) + shape, dtype=np.uint8)
            failures += not np.array_equal(codec.decode(codec.encode(imgs, mode)), imgs)
    elapsed = time.perf_counter() - t0
    packed16 = codec.encode(rng.integers(0, 256, (16, 4, 4, 3), dtype=np.uint8), CodecMode.exact_int(128))
    ok = failures == 0 and elapsed < 10 and packed16.n_images == 16
    report(1, "codec losslessness", ok,
           f"{len(modes)} modes x 1000 round trips, {failures} mismatches, {elapsed:.2f} s (limit 10 s), "
           f"16 images in one exact128 plane")


# 2 -------------------------------------------------------------------------

def random_case(rng, k):
    n_dense = int(rng.integers(1, 5))
    widths = [int(v) for v in rng.integers(2, 6, n_dense - 1)]
    act = str(rng.choice(["sigmoid", "relu"]))
    net = Network.mlp(4, widths, 3, activation=act, seed=k)
    jitter_biases(net, rng)
    L = net.depth
    interior = sorted(int(v) for v in rng.choice(np.arange(1, L), rng.integers(0, L), replace=False)) if L > 1 else []
    plan = SegmentPlan((0, *interior, L), L)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    if rng.random() < 0.5:
        return net, plan, x, rng.integers(0, 3, 5), LossKind.CROSS_ENTROPY, "ce"
    return net, plan, x, rng.normal(size=(5, 3)), LossKind.MSE, "mse"


def test_02_gradient_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatched, worst = 0, 0.0
    for k in range(50):
        net, plan, x, target, kind, key = random_case(rng, k)
        _, g0 = full_backward(net, Tensor.single(x), target, loss_kind=kind)
        _, g1 = checkpointed_backward(net, Tensor.single(x), target, plan, loss_kind=kind)
        for i, _ in net.dense_layers():
            same = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(g0.per_layer[i], g1.per_layer[i]))
            mismatched += not same
        for i, (fw, fb) in fd_gradients(net, x, target, key).items():
            gw, gb = g0.single(i)
            worst = max(worst, max_relative_error(gw, fw), max_relative_error(gb, fb))
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and worst <= 1e-4 and elapsed < 60
    report(2, "gradient equivalence", ok,
           f"50 nets, {mismatched} non-identical layer gradients, worst finite-difference rel. error "
           f"{worst:.2e} (limit 1e-4), {elapsed:.1f} s")


# 3, 4 ----------------------------------------------------------------------

def peaks(name):
    led = train(dataclasses.replace(REFERENCE.with_pipeline(name), epochs=1)).ledger
    return led.peak, led.peak_total


def test_03_memory_reduction():
    t0 = time.perf_counter()
    (b_act, b_tot), (s_act, _), (_, sm_tot) = peaks("B"), peaks("S-C"), peaks("S-C+M-P")
    act_ratio = s_act[ACTIVATIONS] / b_act[ACTIVATIONS]
    tot_ratio = sm_tot / b_tot
    elapsed = time.perf_counter() - t0
    ok = act_ratio <= 0.5 and tot_ratio <= 0.55 and elapsed < 120
    report(3, "memory reduction", ok,
           f"S-C auto:4 activation peak {act_ratio:.3f} of baseline (limit 0.5), "
           f"S-C+M-P total peak {tot_ratio:.3f} (limit 0.55)")


def test_04_memory_ordering():
    totals = {name: peaks(name)[1] for name in ("B", "M-P", "S-C", "S-C+M-P")}
    vals = list(totals.values())
    ok = all(a > b for a, b in zip(vals, vals[1:]))
    report(4, "memory ordering", ok, " > ".join(f"{k} {v}" for k, v in totals.items()))


# 5 -------------------------------------------------------------------------

def test_05_time_tradeoff():
    base, sc = [], []
    sc_cfg = REFERENCE.with_pipeline("S-C")
    for _ in range(5):  # interleave blocks so drift hits both equally
        base += step_times(REFERENCE, steps=20, warmup=2)
        sc += step_times(sc_cfg, steps=20, warmup=2)
    ratio = statistics.median(sc) / statistics.median(base)
    report(5, "time trade-off", 1.0 <= ratio <= 2.2,
           f"median S-C step / baseline step over 100 steps = {ratio:.3f} (window 1.0-2.2)")


# 6 -------------------------------------------------------------------------

def test_06_pipeline_overlap():
    cfg = RunConfig(ed=True, encode_mode=CodecMode.exact_int(128))
    # T: consumer work per epoch (training plus evaluation), from serial runs without injected cost
    probes = []
    for _ in range(3):
        r = train(dataclasses.replace(cfg, serial=True)).report
        probes.append((r.total_ns - sum(t.prepare_end - t.prepare_start for t in r.epochs)) / 1e9 / cfg.epochs)
    T = statistics.median(probes)
    P = 0.25 * T
    overlapped, serial = [], []
    for _ in range(5):
        overlapped.append(train(dataclasses.replace(cfg, prepare_delay=P)).report.total_s)
        serial.append(train(dataclasses.replace(cfg, prepare_delay=P, serial=True)).report.total_s)
    ratio = statistics.median(overlapped) / statistics.median(serial)
    report(6, "pipeline overlap", ratio <= 0.85,
           f"T={T * 1e3:.1f} ms, P={P * 1e3:.1f} ms, 10 epochs, median total {statistics.median(overlapped):.3f} s "
           f"vs serialized {statistics.median(serial):.3f} s, ratio {ratio:.3f} (limit 0.85)")


# 7 -------------------------------------------------------------------------

def test_07_accuracy_parity():
    gaps = []
    for seed in (0, 1, 2):
        cfg = dataclasses.replace(REFERENCE, seed=seed)
        base = train(cfg)
        fast = train(cfg.with_pipeline("E-D+S-C"))
        gaps.append(abs(base.accuracy - fast.accuracy) * 100)
        if seed == 0:
            coded = train(cfg.with_pipeline("E-D"))
            identical = coded.losses == base.losses
    ok = max(gaps) <= 1.0 and identical
    report(7, "accuracy parity", ok,
           f"|B - E-D+S-C| accuracy gaps {[round(g, 3) for g in gaps]} points (limit 1), "
           f"E-D exact128 loss trajectory bit-identical: {identical}")


# 8 -------------------------------------------------------------------------

def test_08_sampler_exactness():
    labels = np.repeat([0, 1, 2], [40, 24, 30])
    images = np.arange(len(labels), dtype=np.uint8).reshape(-1, 1, 1, 1)
    sp = sampler_plan([0.5, 0.25, 0.25], 16, seed=5)
    per_epoch = len(labels) // 16
    counts = []
    for _ in range(2):
        seen = []
        run_pipeline(PipelineConfig(2, per_epoch, CodecMode.exact_int(128), sp), images, labels,
                     lambda e, b: seen.append((np.bincount(b.labels, minlength=3).tolist(), b.images().tobytes())))
        counts.append(seen)
    exact = all(c == [8, 4, 4] for c, _ in counts[0])
    s = lambda: BatchSampler(sp, ClassIndex.from_labels(labels))
    a, b = s(), s()
    deterministic = counts[0] == counts[1] and all(a.next_batch() == b.next_batch() for _ in range(50))
    report(8, "sampler exactness", exact and deterministic,
           f"{len(counts[0])} batches over 2 epochs all [8, 4, 4]: {exact}; repeatable under seed: {deterministic}")


# 9 -------------------------------------------------------------------------

def test_09_placement_recommendation():
    picked = recommend_plan(ActivationSizeProfile((100, 10, 100)), 1).interior
    hits = picked == (2,)  # the position holding profile entry 1

    def key(sizes, cps):
        prof = ActivationSizeProfile(tuple(sizes[1:]), sizes[0])
        return predict_peak(prof, SegmentPlan(cps, len(sizes) - 1)), sum(sizes[c] for c in cps[1:-1])

    checked = disagreements = 0
    for length in range(1, 13):
        for prof in itertools.product((1, 4), repeat=length):
            sizes = [1, *prof]
            for budget in range(0, min(2, length - 1) + 1):
                checked += 1
                if key(sizes, _exhaustive(sizes, length, budget)) != key(sizes, _threshold_dp(sizes, length, budget)):
                    disagreements += 1
    rng = np.random.default_rng(9)
    for _ in range(300):
        length = int(rng.integers(2, 15))
        sizes = [int(v) for v in rng.integers(1, 1000, length + 1)]
        budget = int(rng.integers(0, length))
        checked += 1
        if key(sizes, _exhaustive(sizes, length, budget)) != key(sizes, _threshold_dp(sizes, length, budget)):
            disagreements += 1
    report(9, "placement recommendation", hits and disagreements == 0,
           f"[100,10,100] budget 1 -> profile index {picked[0] - 1}; exhaustive vs fast search on "
           f"{checked} (profile, budget) cases: {disagreements} disagreements")


# 10 ------------------------------------------------------------------------

def test_10_mixed_precision_mechanics():
    base = iteration_memory(REFERENCE).peak[WEIGHTS]
    mixed = iteration_memory(REFERENCE.with_pipeline("M-P")).peak[WEIGHTS]
    net = Network([Dense(1, 1, Tensor.single([[1.0]]), Tensor.single([0.0]))], precision=Precision.MIXED)
    state = TrainState(net, 1e-4)
    expected = np.float32(1.0)
    first_half = None
    for step in range(10):
        sgd_step(state, Gradients([(Tensor.half([[-1.0]]), Tensor.half([0.0]))]))
        expected = np.float32(expected + np.float32(1e-4))
        if step == 0:
            first_half = float(net.layers[0].W.data[0, 0])
    master = net.layers[0].master_W.data[0, 0]
    ok = 2 * mixed == base and master == expected and first_half == 1.0
    report(10, "mixed-precision mechanics", ok,
           f"stored weight bytes {mixed}/{base} = {mixed / base:.2f}; master after 10 x 1e-4 = {master!r} "
           f"(Single sum {expected!r}); Half copy after one step {first_half}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
