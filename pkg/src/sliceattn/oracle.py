"""Ground-truth dense and masked-dense attention.

These reference paths materialize full score matrices, so they are the
correctness anchor for the tiled and sparse kernels but bound the practical
sequence length to a few thousand.
"""

from __future__ import annotations

import numpy as np

from .core import AttnConfig, AttnMap, AttnTensor, NumericError, ShapeError, ingest
from .sparse import SparseIndexMask


def _check_shapes(cfg: AttnConfig, *tensors: AttnTensor) -> None:
    for t in tensors:
        if t.dims != cfg.dims:
            raise ShapeError(f"tensor dims {t.dims} do not match config {cfg.dims}")


def _scores(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    s = (q @ k.swapaxes(2, 3)) * np.float32(scale)
    if not np.isfinite(s).all():
        raise NumericError("non-finite attention scores")
    return s


def dense_attention(
    q: AttnTensor, k: AttnTensor, v: AttnTensor, cfg: AttnConfig
) -> AttnTensor:
    """softmax(Q K^T * scale) V per (batch, head), row-wise stable softmax."""
    _check_shapes(cfg, q, k, v)
    s = _scores(ingest(q, cfg), ingest(k, cfg), cfg.scale)
    s -= s.max(axis=3, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=3, keepdims=True, dtype=np.float64)
    probs = (e / denom).astype(np.float32)
    out = probs @ ingest(v, cfg)
    if not np.isfinite(out).all():
        raise NumericError("non-finite attention output")
    return AttnTensor(out)


def attention_map(q: AttnTensor, k: AttnTensor, cfg: AttnConfig) -> AttnMap:
    """Full normalized attention map; each row sums to 1 within 1e-5."""
    _check_shapes(cfg, q, k)
    s = _scores(ingest(q, cfg), ingest(k, cfg), cfg.scale)
    s -= s.max(axis=3, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=3, keepdims=True, dtype=np.float64)
    return AttnMap((e / denom).astype(np.float32))


def masked_dense_attention(
    q: AttnTensor,
    k: AttnTensor,
    v: AttnTensor,
    mask: SparseIndexMask,
    cfg: AttnConfig,
) -> AttnTensor:
    """Dense reference for sparse attention: per query group, softmax over
    exactly the listed keys, renormalized over that subset."""
    _check_shapes(cfg, q, k, v)
    mask.check_compatible(cfg)
    qd, kd, vd = ingest(q, cfg), ingest(k, cfg), ingest(v, cfg)
    out = np.empty(cfg.dims, dtype=np.float32)
    for b in range(cfg.batch):
        for h in range(cfg.heads):
            for g in range(cfg.num_groups):
                lo, hi = cfg.group_bounds(g)
                idx = mask.keys_for(b, h, g)
                s = (qd[b, h, lo:hi] @ kd[b, h, idx].T) * np.float32(cfg.scale)
                s -= s.max(axis=1, keepdims=True)
                e = np.exp(s)
                probs = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(
                    np.float32
                )
                out[b, h, lo:hi] = probs @ vd[b, h, idx]
    if not np.isfinite(out).all():
        raise NumericError("non-finite attention output")
    return AttnTensor(out)
