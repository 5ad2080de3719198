"""System timing model: multi-PE scheduling, DMA overlap, overhead reports.

Cycle accounting is clock-independent.  Each output tile is one job (all its
inner-dimension passes stay on one PE); jobs go round-robin across PEs.  DMA
is a single bytes-per-cycle bandwidth abstraction with double buffering: the
first tile's transfer is exposed, after that each step costs
max(compute, next transfer), and writebacks ride the ping-pong output buffer.
Rewiring metadata is loaded once per layer and is reported separately from
the streamed activation/weight traffic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .compiler import (DEFAULT_BUDGET_FRACTION, ENTRY_STRUCT, MAP_HEADER,
                       FarMap, ShadowStore, load_blobs, row_budget)
from .dpe import DpeConfig, tile_pass_cycles
from .formats import BlobError


@dataclass
class SystemConfig:
    pe_count: int = 1
    dma_bytes_per_cycle: float = 16.0
    tile_buffer_depth: int = 2  # double-buffered activation/weight tiles

    def __post_init__(self):
        if self.pe_count < 1:
            raise ValueError("need at least one PE")
        if self.dma_bytes_per_cycle <= 0:
            raise ValueError("bandwidth must be positive")
        if self.tile_buffer_depth < 2:
            raise ValueError("transfer/compute overlap needs ping-pong buffers")


@dataclass
class LayerShape:
    name: str
    m: int  # streamed rows (tokens)
    k: int  # fan-in
    n: int  # fan-out

    def weight_bytes(self) -> int:
        return 2 * self.k * self.n


@dataclass
class ModelShape:
    name: str
    layers: list[LayerShape]


def vit_linear_shapes(name: str, image: int, patch: int, embed: int,
                      hidden: int, depth: int) -> ModelShape:
    """Offloaded GEMM shapes of a small vision transformer.

    Covers the per-block projections (query/key/value, attention output) and
    the two feed-forward layers; patch embedding and the classifier head stay
    on the host in this prototype scoping.  Token count is patches + class
    token.
    """
    tokens = (image // patch) ** 2 + 1
    shapes = []
    for b in range(depth):
        for proj in ("q", "k", "v", "attn_out"):
            shapes.append(LayerShape(f"block{b}.{proj}", tokens, embed, embed))
        shapes.append(LayerShape(f"block{b}.ffn1", tokens, embed, hidden))
        shapes.append(LayerShape(f"block{b}.ffn2", tokens, hidden, embed))
    return ModelShape(name, shapes)


TABLE_MODELS = {
    "mnist": vit_linear_shapes("mnist", 28, 7, 512, 256, 1),
    "cifar10": vit_linear_shapes("cifar10", 32, 8, 512, 256, 3),
    "cifar100": vit_linear_shapes("cifar100", 32, 8, 512, 256, 6),
}


def metadata_bytes(fan_in: int, budget_fraction: float = DEFAULT_BUDGET_FRACTION,
                   div: int = 2) -> tuple[int, int]:
    """Serialized (map, shadow) byte sizes at the given rewiring budget.

    Density model: the budget buys floor(budget * fan_in) rewired lanes per
    layer, packed into complete groups of ``div`` lanes sharing one shadow
    word; that matches the roughly-one-kilobyte per-layer configuration state
    the design targets.
    """
    groups = row_budget(budget_fraction, fan_in) // div
    entries = groups * div
    fmap = 4 + 1 + MAP_HEADER.size + ENTRY_STRUCT.size * entries + 4
    fshd = 4 + 1 + 4 + 2 * groups + 4
    return fmap, fshd


@dataclass
class LayerSchedule:
    shape: LayerShape
    tile_jobs: int
    compute_cycles: int      # sum of per-job compute over all PEs
    dma_cycles: float        # sum of streamed-tile transfer cycles
    makespan: float
    far_enabled: bool
    far_meta_bytes: int
    pe_jobs: list[int]       # jobs assigned per PE


def schedule_layer(shape: LayerShape, far_enabled: bool, cfg: SystemConfig,
                   dpe_cfg: DpeConfig | None = None,
                   budget_fraction: float = DEFAULT_BUDGET_FRACTION,
                   div: int = 2) -> LayerSchedule:
    dpe_cfg = dpe_cfg or DpeConfig()
    lanes = dpe_cfg.lanes
    n_m, n_k, n_n = (-(-shape.m // lanes), -(-shape.k // lanes), -(-shape.n // lanes))
    pass_cycles = tile_pass_cycles(dpe_cfg, far_enabled)
    job_compute = n_k * pass_cycles
    tile_bytes = lanes * lanes * 2
    job_dma = n_k * 2 * tile_bytes  # one activation + one weight tile per pass

    jobs = n_m * n_n
    per_pe = [0] * cfg.pe_count
    for j in range(jobs):
        per_pe[j % cfg.pe_count] += 1
    makespan = 0.0
    dma_cycles = jobs * job_dma / cfg.dma_bytes_per_cycle
    step_dma = job_dma / cfg.dma_bytes_per_cycle
    for count in per_pe:
        if count == 0:
            continue
        # prefill the first buffer, then overlap: max(compute, next transfer)
        span = step_dma + (count - 1) * max(job_compute, step_dma) + job_compute
        makespan = max(makespan, span)
    meta = sum(metadata_bytes(shape.k, budget_fraction, div)) if far_enabled else 0
    return LayerSchedule(shape, jobs, jobs * job_compute, dma_cycles, makespan,
                         far_enabled, meta, per_pe)


def model_latency_report(model: ModelShape, budget_fraction: float, div: int,
                         overlap: bool, cfg: SystemConfig,
                         fill_cycles: int = 12) -> dict:
    """Baseline-vs-hardened timing ratios for every layer of a model shape.

    The returned dict is JSON-stable: identical inputs give identical bytes
    through ``report_json``.
    """
    dpe_cfg = DpeConfig(pipeline_fill_cycles=fill_cycles, overlap_select=overlap)
    far = budget_fraction > 0
    per_layer = []
    total_base_ms = total_far_ms = 0.0
    total_base_c = total_far_c = 0
    total_meta = total_weights = 0
    for shape in model.layers:
        base = schedule_layer(shape, False, cfg, dpe_cfg, budget_fraction, div)
        hard = schedule_layer(shape, far, cfg, dpe_cfg, budget_fraction, div) if far else base
        total_base_ms += base.makespan
        total_far_ms += hard.makespan
        total_base_c += base.compute_cycles
        total_far_c += hard.compute_cycles
        total_meta += hard.far_meta_bytes
        total_weights += shape.weight_bytes()
        per_layer.append({
            "shape": {"name": shape.name, "m": shape.m, "k": shape.k, "n": shape.n},
            "tiles": base.tile_jobs,
            "compute_cycles": hard.compute_cycles,
            "dma_cycles": hard.dma_cycles,
            "makespan": hard.makespan,
            "far_overhead_ratio": hard.compute_cycles / base.compute_cycles,
            "far_meta_bytes": hard.far_meta_bytes,
            "meta_to_weight_ratio": hard.far_meta_bytes / shape.weight_bytes(),
        })
    return {
        "config": {
            "model": model.name,
            "budget_fraction": budget_fraction,
            "div": div,
            "overlap_select": overlap,
            "pe_count": cfg.pe_count,
            "dma_bytes_per_cycle": cfg.dma_bytes_per_cycle,
        },
        "per_layer": per_layer,
        "totals": {
            "matmul_overhead_ratio": total_far_c / total_base_c,
            "end_to_end_ratio": total_far_ms / total_base_ms,
            "far_meta_bytes": total_meta,
            "weight_bytes": total_weights,
            "meta_to_weight_ratio": total_meta / total_weights if total_weights else 0.0,
        },
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


@dataclass
class EnableDecision:
    enabled: bool
    reason: str = ""
    farmap: FarMap | None = None
    shadow: ShadowStore | None = None


def validate_and_enable(fmap_blob: bytes, fshd_blob: bytes,
                        budget_fraction: float = DEFAULT_BUDGET_FRACTION
                        ) -> EnableDecision:
    """Gate a layer's rewiring on full blob validation; never partially enable."""
    try:
        farmap, shadow = load_blobs(fmap_blob, fshd_blob, budget_fraction)
    except BlobError as err:
        return EnableDecision(False, err.reason)
    return EnableDecision(True, "", farmap, shadow)
