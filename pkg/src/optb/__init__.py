"""Memory- and time-saving training tricks on a small sequential network:
packed image batches, an encode-while-train pipeline, class-exact batch
sampling, activation checkpointing and Half weight storage."""

from .codec import CodecMode, EncodedBatch, decode, encode
from .metering import MemoryLedger
from .nn import Network, TrainState
from .checkpoint import SegmentPlan, recommend_plan, train_step

__all__ = [
    "CodecMode",
    "EncodedBatch",
    "MemoryLedger",
    "Network",
    "SegmentPlan",
    "TrainState",
    "decode",
    "encode",
    "recommend_plan",
    "train_step",
]
__version__ = "0.1.0"
