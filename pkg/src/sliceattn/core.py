"""Shared containers, configuration, deterministic RNG, and bf16 emulation.

Working precision is float32 everywhere. The ``bf16`` precision mode does not
change storage: kernels round their inputs on ingestion (see :func:`ingest`)
and analyzers round scores before thresholding, while softmax accumulation
stays in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PRECISIONS = ("full", "bf16")

# Trace event kinds: a contiguous key/value tile streamed in sequence order,
# or a packed tile assembled from scattered rows.
STREAM = "stream"
GATHER = "gather"


class ShapeError(ValueError):
    """Dimension mismatch between tensors, masks, or configuration."""


class NumericError(ArithmeticError):
    """Non-finite value produced where the contract requires finite math."""


@dataclass(frozen=True)
class AttnConfig:
    """Problem shape for one attention workload.

    ``group_size`` is the number of contiguous query rows processed per output
    tile; the last group is short when ``seq_len`` is not a multiple of it.
    ``scale`` defaults to ``1/sqrt(head_dim)``.
    """

    batch: int
    heads: int
    seq_len: int
    head_dim: int
    group_size: int = 128
    scale: float | None = None
    precision: str = "full"

    def __post_init__(self):
        for name in ("batch", "heads", "seq_len", "head_dim", "group_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.group_size > self.seq_len:
            raise ValueError(
                f"group_size {self.group_size} exceeds seq_len {self.seq_len}"
            )
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.head_dim))
        elif self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.batch, self.heads, self.seq_len, self.head_dim)

    @property
    def num_groups(self) -> int:
        return -(-self.seq_len // self.group_size)

    def group_bounds(self, g: int) -> tuple[int, int]:
        """Half-open query-row range [start, stop) of group ``g``."""
        start = g * self.group_size
        return start, min(start + self.group_size, self.seq_len)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out is arr:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class AttnTensor:
    """Immutable rank-4 float32 array [batch, heads, seq_len, head_dim]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"expected rank-4 data, got rank {self.data.ndim}")
        arr = _freeze(self.data)
        if not np.isfinite(arr).all():
            raise NumericError("tensor entries must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class AttnMap:
    """Post-softmax attention scores [batch, heads, seq_len, seq_len].

    Full maps have rows summing to 1 within 1e-5; maps restricted to a mask
    (excluded entries zeroed) sum to at most 1.
    """

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[2] != self.data.shape[3]:
            raise ShapeError(f"expected [B, H, N, N] map, got {self.data.shape}")
        arr = _freeze(self.data)
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValueError("attention scores must lie in [0, 1]")
        row_sums = arr.sum(axis=3, dtype=np.float64)
        if row_sums.max(initial=0.0) > 1.0 + 1e-5:
            raise ValueError("attention map rows must sum to at most 1")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class TileEvent:
    """One processed tile: a load/gather of ``keys`` key rows followed by a
    score+output computation against ``rows`` query rows."""

    batch: int
    head: int
    group: int
    rows: int
    keys: int
    kind: str = STREAM


def make_rng(seed: int) -> np.random.Generator:
    # Philox: counter-based, bit-reproducible across platforms and releases.
    return np.random.Generator(np.random.Philox(seed))


def new_tensor(
    cfg: AttnConfig,
    init: str = "zeros",
    *,
    seed: int = 0,
    data=None,
) -> AttnTensor:
    """Create a tensor with the config's dims.

    ``init`` is one of ``zeros``, ``gaussian`` (reproducible per ``seed``),
    or ``from_data`` (accepts a flat or rank-4 payload of matching size).
    """
    shape = cfg.dims
    if init == "zeros":
        return AttnTensor(np.zeros(shape, dtype=np.float32))
    if init == "gaussian":
        arr = make_rng(seed).standard_normal(shape, dtype=np.float32)
        return AttnTensor(arr)
    if init == "from_data":
        arr = np.asarray(data, dtype=np.float32)
        if arr.size != math.prod(shape):
            raise ShapeError(
                f"payload has {arr.size} elements, dims {shape} need {math.prod(shape)}"
            )
        return AttnTensor(arr.reshape(shape))
    raise ValueError(f"unknown init {init!r}")


def round_bf16(x) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (round-to-nearest-even),
    widened back to float32. Idempotent; infinities survive, NaN stays NaN."""
    arr = np.asarray(x, dtype=np.float32)
    bits = arr.view(np.uint32).astype(np.uint64)
    bits = bits + 0x7FFF + ((bits >> 16) & 1)
    out = (bits & 0xFFFF0000).astype(np.uint32).view(np.float32)
    return np.where(np.isnan(arr), arr, out)


def ingest(t: AttnTensor, cfg: AttnConfig) -> np.ndarray:
    """Kernel-side view of a tensor: raw in full precision, bf16-rounded
    otherwise. Accumulation downstream stays float32 either way."""
    if cfg.precision == "bf16":
        return round_bf16(t.data)
    return t.data


def analysis_scores(values: np.ndarray, cfg: AttnConfig) -> np.ndarray:
    """Score values as seen by thresholding/analysis under cfg's precision."""
    if cfg.precision == "bf16":
        return round_bf16(values)
    return values
