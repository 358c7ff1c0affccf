"""Slice-granular sparse attention.

A :class:`SparseIndexMask` lists, per (batch, head, query-group), the key
indices whose scores are worth computing. The kernel gathers those key/value
rows into packed tiles (same indices for both) and feeds them to the online
softmax, so skipping happens at the granularity of one key against a group of
queries rather than whole key blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GATHER, AttnConfig, AttnTensor, ShapeError, TileEvent, ingest
from .tiled import finalize, init_state, online_softmax_update


class SparseIndexMask:
    """Per-group sorted, deduplicated key-index lists.

    Dims are (batch, heads, groups) with groups = ceil(seq_len / group_size);
    every list is non-empty with indices in [0, seq_len). Input lists are
    sorted and deduplicated on construction, so equality is canonical.
    """

    def __init__(self, batch: int, heads: int, seq_len: int, group_size: int, lists):
        if group_size < 1 or group_size > seq_len:
            raise ShapeError(f"group_size {group_size} invalid for seq_len {seq_len}")
        self.batch = batch
        self.heads = heads
        self.seq_len = seq_len
        self.group_size = group_size
        groups = -(-seq_len // group_size)
        if len(lists) != batch or any(len(per_b) != heads for per_b in lists):
            raise ShapeError("mask nesting must be [batch][heads][groups]")
        flat: list[np.ndarray] = []
        for per_b in lists:
            for per_h in per_b:
                if len(per_h) != groups:
                    raise ShapeError(
                        f"expected {groups} groups per head, got {len(per_h)}"
                    )
                for keys in per_h:
                    idx = np.unique(np.asarray(keys, dtype=np.int64))
                    if idx.size == 0:
                        raise ValueError("every group needs at least one key")
                    if idx[0] < 0 or idx[-1] >= seq_len:
                        raise ValueError(
                            f"key index out of range [0, {seq_len})"
                        )
                    idx.flags.writeable = False
                    flat.append(idx)
        self._lists = tuple(flat)

    @property
    def num_groups(self) -> int:
        return -(-self.seq_len // self.group_size)

    @property
    def total_indices(self) -> int:
        return sum(a.size for a in self._lists)

    def keys_for(self, b: int, h: int, g: int) -> np.ndarray:
        return self._lists[(b * self.heads + h) * self.num_groups + g]

    def check_compatible(self, cfg: AttnConfig) -> None:
        ours = (self.batch, self.heads, self.seq_len, self.group_size)
        theirs = (cfg.batch, cfg.heads, cfg.seq_len, cfg.group_size)
        if ours != theirs:
            raise ShapeError(f"mask built for {ours}, config is {theirs}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseIndexMask):
            return NotImplemented
        return (
            (self.batch, self.heads, self.seq_len, self.group_size)
            == (other.batch, other.heads, other.seq_len, other.group_size)
            and all(np.array_equal(a, b) for a, b in zip(self._lists, other._lists))
        )

    def __hash__(self):
        return hash((self.batch, self.heads, self.seq_len, self.group_size))


@dataclass(frozen=True, eq=False)
class PackedTile:
    """Rows copied out of a source matrix, in ``source_indices`` order."""

    rows: np.ndarray
    source_indices: np.ndarray


def gather_rows(matrix: np.ndarray, indices) -> PackedTile:
    """Copy the given rows (duplicates allowed) into a packed tile.

    Row payloads are bitwise-identical to the source; indices outside
    [0, rows) raise IndexError.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        raise IndexError(
            f"gather index out of range for {matrix.shape[0]} rows"
        )
    return PackedTile(rows=matrix[idx], source_indices=idx)


def sparse_attention(
    q: AttnTensor,
    k: AttnTensor,
    v: AttnTensor,
    mask: SparseIndexMask,
    cfg: AttnConfig,
    trace: list[TileEvent] | None = None,
    chunk_size: int | None = None,
) -> AttnTensor:
    """Sparse attention over the masked key lists.

    Each group's list is processed in chunks of at most ``cfg.group_size``
    keys, gathered from K and V with identical indices and folded through the
    online softmax; the result matches the masked-dense oracle. A short final
    chunk is processed as-is rather than padded (padding would perturb the
    softmax denominator). ``trace`` collects one gather event per chunk.
    """
    for t in (q, k, v):
        if t.dims != cfg.dims:
            raise ShapeError(f"tensor dims {t.dims} do not match config {cfg.dims}")
    mask.check_compatible(cfg)
    chunk = cfg.group_size if chunk_size is None else chunk_size
    if chunk < 1 or chunk > cfg.group_size:
        raise ValueError(f"chunk_size must be in [1, {cfg.group_size}]")
    qd, kd, vd = ingest(q, cfg), ingest(k, cfg), ingest(v, cfg)
    scale = np.float32(cfg.scale)
    out = np.empty(cfg.dims, dtype=np.float32)
    for b in range(cfg.batch):
        for h in range(cfg.heads):
            for g in range(cfg.num_groups):
                lo, hi = cfg.group_bounds(g)
                qg = qd[b, h, lo:hi]
                keys = mask.keys_for(b, h, g)
                state = init_state(hi - lo, cfg.head_dim)
                for start in range(0, keys.size, chunk):
                    part = keys[start : start + chunk]
                    kt = gather_rows(kd[b, h], part)
                    vt = gather_rows(vd[b, h], part)
                    scores = (qg @ kt.rows.T) * scale
                    state = online_softmax_update(state, scores, vt.rows)
                    if trace is not None:
                        trace.append(
                            TileEvent(b, h, g, hi - lo, part.size, GATHER)
                        )
                out[b, h, lo:hi] = finalize(state)
    return AttnTensor(out)


def mask_density(mask: SparseIndexMask) -> float:
    """Retained fraction of (group, key) pairs, in (0, 1]."""
    total = mask.batch * mask.heads * mask.num_groups * mask.seq_len
    return mask.total_indices / total


def export_padded(mask: SparseIndexMask) -> np.ndarray:
    """Padded [B, H, G, N] int32 layout; unused trailing slots hold -1."""
    out = np.full(
        (mask.batch, mask.heads, mask.num_groups, mask.seq_len), -1, dtype=np.int32
    )
    for b in range(mask.batch):
        for h in range(mask.heads):
            for g in range(mask.num_groups):
                keys = mask.keys_for(b, h, g)
                out[b, h, g, : keys.size] = keys
    return out


def import_padded(padded: np.ndarray, group_size: int) -> SparseIndexMask:
    """Inverse of :func:`export_padded`."""
    arr = np.asarray(padded)
    if arr.ndim != 4:
        raise ShapeError(f"expected [B, H, G, N] array, got shape {arr.shape}")
    batch, heads, groups, n = arr.shape
    if groups != -(-n // group_size):
        raise ShapeError(
            f"padded array has {groups} groups, group_size {group_size} implies "
            f"{-(-n // group_size)}"
        )
    lists = []
    for b in range(batch):
        per_b = []
        for h in range(heads):
            per_h = []
            for g in range(groups):
                row = arr[b, h, g]
                used = row >= 0
                count = int(used.sum())
                if used[:count].sum() != count:
                    raise ValueError("sentinel slots must trail the key indices")
                per_h.append(row[:count])
            per_b.append(per_h)
        lists.append(per_b)
    return SparseIndexMask(batch, heads, n, group_size, lists)


def full_mask(cfg: AttnConfig) -> SparseIndexMask:
    """Mask listing every key for every group (density 1)."""
    all_keys = np.arange(cfg.seq_len, dtype=np.int64)
    lists = [
        [[all_keys for _ in range(cfg.num_groups)] for _ in range(cfg.heads)]
        for _ in range(cfg.batch)
    ]
    return SparseIndexMask(cfg.batch, cfg.heads, cfg.seq_len, cfg.group_size, lists)


def random_mask(cfg: AttnConfig, density: float, seed: int = 0) -> SparseIndexMask:
    """Uniformly random mask keeping ~density of the keys per group (>= 1)."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.Generator(np.random.Philox(seed))
    count = max(1, round(density * cfg.seq_len))
    lists = [
        [
            [
                rng.choice(cfg.seq_len, size=count, replace=False)
                for _ in range(cfg.num_groups)
            ]
            for _ in range(cfg.heads)
        ]
        for _ in range(cfg.batch)
    ]
    return SparseIndexMask(cfg.batch, cfg.heads, cfg.seq_len, cfg.group_size, lists)


def mask_jaccard(a: SparseIndexMask, b: SparseIndexMask) -> float:
    """Jaccard overlap of the retained (group, key) pairs of two masks."""
    if (a.batch, a.heads, a.seq_len, a.group_size) != (
        b.batch,
        b.heads,
        b.seq_len,
        b.group_size,
    ):
        raise ShapeError("masks have different dims")
    inter = 0
    union = 0
    for lists_a, lists_b in zip(a._lists, b._lists):
        common = np.intersect1d(lists_a, lists_b, assume_unique=True).size
        inter += common
        union += lists_a.size + lists_b.size - common
    return inter / union
