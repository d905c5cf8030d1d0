"""Sequential activation checkpointing.

A :class:`SegmentPlan` names the activation positions kept during the forward
pass. Backward walks the segments from last to first, re-running each one
from its stored start to rebuild the interior activations it needs.

Checkpoints stay alive until the whole backward pass finishes, so the peak of
the activations category is exactly::

    sum(size of every checkpoint) + max(interior size of any segment)

which is what :func:`predict_peak` computes and :func:`recommend_plan`
minimises.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metering
from .metering import ACTIVATIONS, MemoryLedger
from .nn import (
    Gradients,
    LossKind,
    Network,
    Precision,
    TrainState,
    _seed_delta,
    backward,
    backward_range,
    batch_nbytes,
    forward,
    loss,
    run_layers,
    sgd_step,
)

EXHAUSTIVE_MAX_DEPTH = 20


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentPlan:
    checkpoints: tuple[int, ...]
    depth: int

    def __post_init__(self):
        cps = tuple(int(c) for c in self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if self.depth < 0:
            raise PlanError("depth must be non-negative")
        if any(c < 0 or c > self.depth for c in cps):
            raise PlanError(f"checkpoint indices {cps} outside [0, {self.depth}]")
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise PlanError(f"checkpoint indices {cps} must be strictly increasing")
        if not cps or cps[0] != 0 or cps[-1] != self.depth:
            raise PlanError(f"plan must start at 0 and end at {self.depth}, got {cps}")

    @classmethod
    def full(cls, depth: int) -> "SegmentPlan":
        return cls(tuple(range(depth + 1)), depth)

    @classmethod
    def minimal(cls, depth: int) -> "SegmentPlan":
        return cls((0, depth) if depth else (0,), depth)

    @classmethod
    def uniform(cls, depth: int, segments: int) -> "SegmentPlan":
        segments = max(1, min(segments, depth)) if depth else 1
        cps = sorted({round(j * depth / segments) for j in range(segments + 1)})
        return cls(tuple(cps), depth)

    @classmethod
    def default(cls, depth: int) -> "SegmentPlan":
        """Uniform spacing with ceil(sqrt(L)) segments."""
        return cls.uniform(depth, math.ceil(math.sqrt(depth)) if depth else 1)

    @property
    def interior(self) -> tuple[int, ...]:
        return self.checkpoints[1:-1]

    @property
    def segments(self) -> list[tuple[int, int]]:
        return list(zip(self.checkpoints, self.checkpoints[1:]))

    def without(self, index: int) -> "SegmentPlan":
        if index not in self.interior:
            raise PlanError(f"{index} is not an interior checkpoint")
        return SegmentPlan(tuple(c for c in self.checkpoints if c != index), self.depth)

    def __str__(self) -> str:
        return ",".join(map(str, self.checkpoints))


@dataclass(frozen=True)
class ActivationSizeProfile:
    """Byte sizes of the ``L`` layer outputs, plus the network input."""

    output_bytes: tuple[int, ...]
    input_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "output_bytes", tuple(int(v) for v in self.output_bytes))
        if any(v <= 0 for v in self.output_bytes):
            raise ValueError("activation sizes must be positive")

    @classmethod
    def from_network(cls, net: Network, batch: int, input_bytes: int | None = None):
        sizes = net.activation_bytes(batch, input_bytes)
        return cls(tuple(sizes[1:]), sizes[0])

    @property
    def depth(self) -> int:
        return len(self.output_bytes)

    @property
    def sizes(self) -> list[int]:
        """Sizes indexed by activation position ``0..L``."""
        return [self.input_bytes, *self.output_bytes]


def _peak(sizes: Sequence[int], checkpoints: Sequence[int]) -> int:
    stored = sum(sizes[c] for c in checkpoints)
    window = 0
    for a, b in zip(checkpoints, checkpoints[1:]):
        window = max(window, sum(sizes[a + 1 : b]))
    return stored + window


def predict_peak(profile: ActivationSizeProfile, plan: SegmentPlan) -> int:
    """Peak live activation bytes of a checkpointed step under ``plan``."""
    if plan.depth != profile.depth:
        raise PlanError(f"plan depth {plan.depth} vs profile depth {profile.depth}")
    return _peak(profile.sizes, plan.checkpoints)


def _plan_key(sizes, checkpoints):
    interior = checkpoints[1:-1]
    return (_peak(sizes, checkpoints), sum(sizes[c] for c in interior), tuple(interior))


def _exhaustive(sizes: list[int], depth: int, budget: int) -> tuple[int, ...]:
    best = None
    for interior in itertools.combinations(range(1, depth), budget):
        cps = (0, *interior, depth)
        key = _plan_key(sizes, cps)
        if best is None or key < best[0]:
            best = (key, cps)
    return best[1]


def _threshold_dp(sizes: list[int], depth: int, budget: int) -> tuple[int, ...]:
    """Exact minimiser for deep stacks.

    For a cap ``T`` on segment interiors, the cheapest set of ``budget``
    checkpoints is a shortest-path style DP; the optimum is the best
    ``cheapest(T) + T`` over every interior sum that can occur.
    """
    n = depth + 1
    s = np.asarray(sizes, dtype=np.float64)
    prefix = np.concatenate([[0.0], np.cumsum(s)])
    i_idx = np.arange(n)[:, None]
    j_idx = np.arange(n)[None, :]
    # sum of sizes strictly between i and j
    interior = prefix[j_idx] - prefix[np.minimum(i_idx + 1, j_idx)]
    valid_pair = j_idx > i_idx
    caps = np.unique(interior[valid_pair])

    best = None
    for cap in caps:
        ok = valid_pair & (interior <= cap)
        # f[c][j]: cheapest interior-checkpoint sum with c checkpoints, last at j
        f = np.full((budget + 1, n), np.inf)
        arg = np.full((budget + 1, n), -1, dtype=np.int64)
        f[0, 0] = 0.0
        for c in range(1, budget + 1):
            cand = np.where(ok, f[c - 1][:, None], np.inf)
            cand[:, depth] = np.inf
            cand[:, 0] = np.inf
            arg[c] = cand.argmin(axis=0)
            f[c] = cand.min(axis=0) + s
        closing = np.where(ok[:, depth], f[budget], np.inf)
        last = int(closing.argmin())
        cost = closing[last]
        if not np.isfinite(cost):
            continue
        key = (cost + cap, cost)
        if best is None or key < best[0]:
            chain = []
            j, c = last, budget
            while c > 0:
                chain.append(j)
                j = int(arg[c, j])
                c -= 1
            best = (key, (0, *reversed(chain), depth))
    if best is None:
        raise PlanError("no feasible plan")
    return best[1]


def recommend_plan(profile: ActivationSizeProfile, budget: int) -> SegmentPlan:
    """Choose ``budget`` interior checkpoints minimising the predicted peak.

    Ties go to the plan whose checkpoints are smallest, so narrow layers are
    preferred as checkpoint sites.
    """
    depth = profile.depth
    if budget < 0 or budget > max(depth - 1, 0):
        raise PlanError(f"budget {budget} outside [0, {max(depth - 1, 0)}]")
    if budget == 0:
        return SegmentPlan.minimal(depth)
    sizes = profile.sizes
    if depth <= EXHAUSTIVE_MAX_DEPTH:
        cps = _exhaustive(sizes, depth, budget)
    else:
        cps = _threshold_dp(sizes, depth, budget)
    return SegmentPlan(cps, depth)


def parse_plan(text: str, profile: ActivationSizeProfile) -> SegmentPlan:
    """``"auto:<k>"``, ``"default"``, or comma-separated checkpoint indices."""
    text = text.strip()
    if text.startswith("auto:"):
        try:
            budget = int(text[5:])
        except ValueError:
            raise PlanError(f"bad budget in {text!r}") from None
        return recommend_plan(profile, budget)
    if text == "default":
        return SegmentPlan.default(profile.depth)
    try:
        cps = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise PlanError(f"cannot parse plan {text!r}") from None
    return SegmentPlan(cps, profile.depth)


def checkpointed_backward(
    net: Network,
    x,
    target,
    plan: SegmentPlan,
    ledger: MemoryLedger | None = None,
    loss_kind: LossKind = LossKind.CROSS_ENTROPY,
) -> tuple[float, Gradients]:
    """Forward keeping only ``plan``'s positions, then backward segment by
    segment with recomputation. Returns ``(loss, gradients)``."""
    ledger = ledger if ledger is not None else net.ledger
    L = net.depth
    if plan.depth != L:
        raise PlanError(f"plan depth {plan.depth} does not match network depth {L}")
    keep = frozenset(plan.checkpoints)
    stored = run_layers(net, net._store_input(x), 0, L, keep, ledger)

    value, g = loss(stored[L], target, loss_kind)
    delta = _seed_delta(net, g, ledger)
    grads: list = [None] * L
    for start, stop in reversed(plan.segments):
        acts = run_layers(
            net, stored[start], start, stop - 1, frozenset(range(start, stop)), ledger,
            input_tracked=True, label="recompute",
        )
        acts[stop] = stored[stop]
        delta = backward_range(
            net, acts, start, stop, delta, grads, ledger, release=frozenset(range(start + 1, stop))
        )
    for c in plan.checkpoints:
        metering.free(ledger, ACTIVATIONS, batch_nbytes(stored[c]), f"checkpoint[{c}]")
    scale = net.loss_scale if net.precision is Precision.MIXED else 1.0
    return value, Gradients(grads, scale)


def full_backward(net: Network, x, target, ledger: MemoryLedger | None = None,
                  loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> tuple[float, Gradients]:
    """Reference path: record the whole tape, then back-propagate."""
    out, tape = forward(net, x, record=True, ledger=ledger)
    value, g = loss(out, target, loss_kind)
    return value, backward(net, tape, g, ledger)


def train_step(state: TrainState, x, target, plan: SegmentPlan | None = None) -> float:
    """One forward/backward/update; checkpointed when ``plan`` is given."""
    if plan is None:
        value, grads = full_backward(state.network, x, target, loss_kind=state.loss)
    else:
        value, grads = checkpointed_backward(state.network, x, target, plan, loss_kind=state.loss)
    sgd_step(state, grads)
    return value
