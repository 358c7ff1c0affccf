"""Training-free mask construction and attention-map sparsity analysis.

Thresholds compare post-softmax scores, so a tau of ``0.5/N`` means half the
weight a uniform map would give each key. Under bf16 precision the analyzed
scores are rounded before comparison (:func:`sliceattn.core.analysis_scores`);
:func:`block_sparsity` takes no config and always sees raw scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttnConfig, AttnMap, AttnTensor, ShapeError, analysis_scores, ingest
from .sparse import SparseIndexMask

STRATEGIES = ("cached_threshold", "avg_query_threshold", "avg_query_topk")


@dataclass(frozen=True)
class MaskBuilderConfig:
    """Mask strategy plus its parameters.

    ``tau`` thresholds post-softmax scores (cached) or pooled-query scores
    (avg_query_threshold); ``top_k`` applies to avg_query_topk;
    ``refresh_interval`` is the cadence of full-map recomputation.
    """

    strategy: str
    tau: float = 0.0
    top_k: int = 1
    refresh_interval: int = 15

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy.endswith("threshold") and self.tau <= 0:
            raise ValueError("threshold strategies need tau > 0")
        if self.strategy == "avg_query_topk" and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")


@dataclass(frozen=True)
class CachedMaskState:
    """A mask plus the iteration it was calibrated at."""

    mask: SparseIndexMask
    built_at_iteration: int
    refresh_interval: int


def refresh_policy(state: CachedMaskState, iteration: int) -> bool:
    """True when the cached mask is due for a full-map recomputation."""
    return (iteration - state.built_at_iteration) >= state.refresh_interval


def _check_map(map_: AttnMap, cfg: AttnConfig) -> None:
    expected = (cfg.batch, cfg.heads, cfg.seq_len, cfg.seq_len)
    if map_.dims != expected:
        raise ShapeError(f"map dims {map_.dims} do not match config {expected}")


def _group_max(scores: np.ndarray, cfg: AttnConfig) -> np.ndarray:
    """Max over each group's query rows: [B, H, N, N] -> [B, H, G, N]."""
    per_group = []
    for g in range(cfg.num_groups):
        lo, hi = cfg.group_bounds(g)
        per_group.append(scores[:, :, lo:hi, :].max(axis=2))
    return np.stack(per_group, axis=2)


def _lists_from_keep(keep: np.ndarray, scores: np.ndarray) -> list:
    """Key lists from a [B, H, G, N] keep matrix; an empty group falls back
    to its single highest-scoring slice."""
    b_n, h_n, g_n, _ = keep.shape
    lists = []
    for b in range(b_n):
        per_b = []
        for h in range(h_n):
            per_h = []
            for g in range(g_n):
                idx = np.nonzero(keep[b, h, g])[0]
                if idx.size == 0:
                    idx = np.array([int(np.argmax(scores[b, h, g]))])
                per_h.append(idx)
            per_b.append(per_h)
        lists.append(per_b)
    return lists


def build_mask_cached(map_: AttnMap, cfg: AttnConfig, tau: float) -> SparseIndexMask:
    """Keep key j for a group when any of the group's scores a_ij reaches tau.

    Built from a full map at a calibration iteration; intended to be reused
    across iterations via :class:`CachedMaskState`.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    _check_map(map_, cfg)
    gmax = _group_max(analysis_scores(map_.data, cfg), cfg)
    lists = _lists_from_keep(gmax >= tau, gmax)
    return SparseIndexMask(cfg.batch, cfg.heads, cfg.seq_len, cfg.group_size, lists)


def pooled_query_scores(q: AttnTensor, k: AttnTensor, cfg: AttnConfig) -> np.ndarray:
    """Per-group selection scores exp((k_j . q_avg) * scale) / head_dim,
    where q_avg is the mean of the group's query rows. Shape [B, H, G, N]."""
    qd, kd = ingest(q, cfg), ingest(k, cfg)
    per_group = []
    for g in range(cfg.num_groups):
        lo, hi = cfg.group_bounds(g)
        q_avg = qd[:, :, lo:hi, :].mean(axis=2)
        dots = np.einsum("bhnd,bhd->bhn", kd, q_avg) * np.float32(cfg.scale)
        per_group.append(np.exp(dots) / np.float32(cfg.head_dim))
    return analysis_scores(np.stack(per_group, axis=2), cfg)


def build_mask_avg_query(
    q: AttnTensor, k: AttnTensor, cfg: AttnConfig, builder: MaskBuilderConfig
) -> SparseIndexMask:
    """Select keys by their pooled-query score: threshold mode keeps scores
    >= tau (argmax fallback when none qualify); topk mode keeps the top_k
    largest, ties broken toward the smaller index."""
    for t in (q, k):
        if t.dims != cfg.dims:
            raise ShapeError(f"tensor dims {t.dims} do not match config {cfg.dims}")
    scores = pooled_query_scores(q, k, cfg)
    if builder.strategy == "avg_query_threshold":
        lists = _lists_from_keep(scores >= builder.tau, scores)
    elif builder.strategy == "avg_query_topk":
        if builder.top_k > cfg.seq_len:
            raise ValueError(f"top_k {builder.top_k} exceeds seq_len {cfg.seq_len}")
        n = cfg.seq_len
        tie_break = np.arange(n)
        lists = []
        for b in range(cfg.batch):
            per_b = []
            for h in range(cfg.heads):
                per_h = []
                for g in range(cfg.num_groups):
                    order = np.lexsort((tie_break, -scores[b, h, g]))
                    per_h.append(order[: builder.top_k])
                per_b.append(per_h)
            lists.append(per_b)
    else:
        raise ValueError(f"strategy {builder.strategy!r} does not pool queries")
    return SparseIndexMask(cfg.batch, cfg.heads, cfg.seq_len, cfg.group_size, lists)


def block_sparsity(map_: AttnMap, block: int, tau: float) -> float:
    """Fraction of block x block score tiles with every entry below tau.

    Partial edge tiles are judged on their actual elements; the fraction is
    averaged over (batch, head).
    """
    n = map_.dims[2]
    if not 1 <= block <= n:
        raise ValueError(f"block must be in [1, {n}]")
    below = map_.data < tau
    edges = range(0, n, block)
    fractions = []
    for b in range(map_.dims[0]):
        for h in range(map_.dims[1]):
            sparse_tiles = sum(
                bool(below[b, h, r : r + block, c : c + block].all())
                for r in edges
                for c in edges
            )
            fractions.append(sparse_tiles / (len(edges) ** 2))
    return float(np.mean(fractions))


def slice_sparsity(map_: AttnMap, cfg: AttnConfig, tau: float) -> float:
    """Fraction of (group, key) slices whose scores all fall below tau.

    Complement of cached-threshold mask density whenever no argmax fallback
    fires.
    """
    _check_map(map_, cfg)
    gmax = _group_max(analysis_scores(map_.data, cfg), cfg)
    return float((gmax < tau).mean())
