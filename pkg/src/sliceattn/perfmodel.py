"""FLOP/byte accounting and a two-stage pipeline latency model.

FLOP accounting charges, per computed (query row, key) pair, 2*head_dim for
the score dot product, 2*head_dim for the value accumulation, and
``SOFTMAX_FLOPS_PER_SCORE`` for the softmax bookkeeping. The pipeline model
schedules each tile's address generation + load against the previous tile's
compute, so load latency disappears whenever compute dominates; absolute cycle
parameters are illustrative profile data, only ratios and hiding behavior are
meaningful.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .core import GATHER, STREAM, AttnConfig, TileEvent
from .sparse import SparseIndexMask, mask_density

# Per computed score: running-max compare, max subtraction, exponentiation,
# denominator accumulate. The output divide is amortized into flops_output.
SOFTMAX_FLOPS_PER_SCORE = 4

INDEX_BYTES = 4  # mask entries are 32-bit integers
ELEMENT_BYTES = 4  # float32 working precision


@dataclass(frozen=True)
class PipelineParams:
    """Per-tile cycle costs of the producer/consumer pipeline."""

    load_cycles_per_tile: int
    compute_cycles_per_tile: int
    addrgen_cycles_per_tile: int = 0
    pipeline_depth: int = 2

    def __post_init__(self):
        for name in ("load_cycles_per_tile", "compute_cycles_per_tile",
                     "addrgen_cycles_per_tile"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pipeline_depth < 1:
            raise ValueError("pipeline_depth must be >= 1")


@dataclass(frozen=True)
class CostReport:
    """Work and data-movement totals for one attention workload."""

    flops_scores: int
    flops_output: int
    flops_softmax: int
    bytes_qkv: int
    bytes_mask: int
    density: float
    modeled_cycles: int = 0
    projected_speedup: float = 1.0

    @property
    def flops_total(self) -> int:
        return self.flops_scores + self.flops_output + self.flops_softmax

    def as_dict(self) -> dict:
        d = asdict(self)
        d["flops_total"] = self.flops_total
        return d


def _pair_count(cfg: AttnConfig, mask: SparseIndexMask | None) -> int:
    """Computed (query row, key) pairs: group_rows * list_len summed over
    groups; the dense case is exactly B*H*N^2."""
    if mask is None:
        return cfg.batch * cfg.heads * cfg.seq_len * cfg.seq_len
    total = 0
    for b in range(cfg.batch):
        for h in range(cfg.heads):
            for g in range(cfg.num_groups):
                lo, hi = cfg.group_bounds(g)
                total += (hi - lo) * mask.keys_for(b, h, g).size
    return total


def _rows_streamed(cfg: AttnConfig, mask: SparseIndexMask | None) -> int:
    """Key (and value) rows pulled from memory: every listed key once per
    group; dense streams all N keys for each of the G groups."""
    if mask is None:
        return cfg.batch * cfg.heads * cfg.num_groups * cfg.seq_len
    return mask.total_indices


def count_flops(cfg: AttnConfig, mask: SparseIndexMask | None = None) -> CostReport:
    """Counts-only report; cycles and speedup stay at their defaults.

    With ``mask=None`` the dense formulas apply; a full mask reproduces them
    exactly, including ``bytes_mask = 4*B*H*G*N``.
    """
    if mask is not None:
        mask.check_compatible(cfg)
    pairs = _pair_count(cfg, mask)
    rows = _rows_streamed(cfg, mask)
    io_rows = cfg.batch * cfg.heads * cfg.seq_len  # Q read once, O written once
    return CostReport(
        flops_scores=2 * pairs * cfg.head_dim,
        flops_output=2 * pairs * cfg.head_dim,
        flops_softmax=SOFTMAX_FLOPS_PER_SCORE * pairs,
        bytes_qkv=ELEMENT_BYTES * cfg.head_dim * (2 * io_rows + 2 * rows),
        bytes_mask=0 if mask is None else INDEX_BYTES * mask.total_indices,
        density=1.0 if mask is None else mask_density(mask),
    )


def synthetic_trace(
    cfg: AttnConfig, mask: SparseIndexMask | None = None
) -> list[TileEvent]:
    """The tile stream the kernels would emit, derived from structure alone."""
    trace: list[TileEvent] = []
    m = cfg.group_size
    for b in range(cfg.batch):
        for h in range(cfg.heads):
            for g in range(cfg.num_groups):
                lo, hi = cfg.group_bounds(g)
                if mask is None:
                    for start in range(0, cfg.seq_len, m):
                        stop = min(start + m, cfg.seq_len)
                        trace.append(TileEvent(b, h, g, hi - lo, stop - start, STREAM))
                else:
                    keys = mask.keys_for(b, h, g)
                    for start in range(0, keys.size, m):
                        stop = min(start + m, keys.size)
                        trace.append(TileEvent(b, h, g, hi - lo, stop - start, GATHER))
    return trace


def trace_flops(trace: list[TileEvent], head_dim: int) -> tuple[int, int, int]:
    """(scores, output, softmax) FLOPs implied by a trace; matches
    :func:`count_flops` exactly for traces emitted by the kernels."""
    pairs = sum(e.rows * e.keys for e in trace)
    return (
        2 * pairs * head_dim,
        2 * pairs * head_dim,
        SOFTMAX_FLOPS_PER_SCORE * pairs,
    )


def simulate_pipeline(trace: list[TileEvent], params: PipelineParams) -> int:
    """Total modeled cycles for the tile stream.

    Two stages: a producer that generates addresses and loads tile t
    (addrgen + load cycles, serialized), and a consumer that computes tile t
    after its load completes and tile t-1's compute is done. At most
    ``pipeline_depth`` tiles may be in flight between the stages. Compute-bound
    streams (compute >= addrgen + load) therefore cost one load startup plus
    one compute per tile, independent of the addrgen share.
    """
    load = params.addrgen_cycles_per_tile + params.load_cycles_per_tile
    compute = params.compute_cycles_per_tile
    depth = params.pipeline_depth
    compute_end: list[int] = []
    prev_load_end = 0
    for i in range(len(trace)):
        gate = compute_end[i - depth] if i >= depth else 0
        load_end = max(prev_load_end, gate) + load
        prev_compute = compute_end[i - 1] if i else 0
        compute_end.append(max(load_end, prev_compute) + compute)
        prev_load_end = load_end
    return compute_end[-1] if compute_end else 0


def projected_speedup(
    cfg: AttnConfig, mask: SparseIndexMask | None, params: PipelineParams
) -> float:
    """Dense modeled cycles over masked modeled cycles, identical params."""
    dense = simulate_pipeline(synthetic_trace(cfg, None), params)
    sparse = simulate_pipeline(synthetic_trace(cfg, mask), params)
    return dense / sparse


def bench_report(
    cfg: AttnConfig, mask: SparseIndexMask | None, params: PipelineParams
) -> CostReport:
    """Full report: counts plus modeled cycles and projected speedup."""
    counts = count_flops(cfg, mask)
    cycles = simulate_pipeline(synthetic_trace(cfg, mask), params)
    return CostReport(
        flops_scores=counts.flops_scores,
        flops_output=counts.flops_output,
        flops_softmax=counts.flops_softmax,
        bytes_qkv=counts.bytes_qkv,
        bytes_mask=counts.bytes_mask,
        density=counts.density,
        modeled_cycles=cycles,
        projected_speedup=projected_speedup(cfg, mask, params),
    )


def flop_speedup(dense: CostReport, sparse: CostReport, include_softmax: bool) -> float:
    """Matmul-only or with-softmax FLOP ratio between two reports."""
    if include_softmax:
        return dense.flops_total / sparse.flops_total
    return (dense.flops_scores + dense.flops_output) / (
        sparse.flops_scores + sparse.flops_output
    )


def load_pipeline_params(path) -> PipelineParams:
    """Read a ``key = value`` profile file ('#' starts a comment)."""
    fields = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad profile line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = int(value)
    return PipelineParams(**fields)


def default_params() -> PipelineParams:
    """The packaged H100-class profile (illustrative, freely editable)."""
    ref = resources.files("sliceattn").joinpath("profiles/h100.txt")
    with resources.as_file(ref) as path:
        return load_pipeline_params(path)
