"""Cycle-level simulator of one rewiring-aware dot-product engine.

The engine processes 32x32 binary16 tiles with an output-stationary dataflow:
a weight row is latched for a 32-cycle burst while activation columns stream
through 32 multiplier lanes and a five-level pipelined adder tree, retiring
one dot per cycle after pipeline fill.  Rewiring shows up only in front of
the multipliers: a per-row select vector, synthesized by the controller from
the row's map slice, decides per lane whether the operand comes from the
baseline weight buffer, a shadow address, or a constant zero, and which
lane's activation it consumes.  The select path moves no data through the
arithmetic units; shadow words arrive pre-scaled.

Cycle accounting per tile: pipeline fill once, one issue cycle per dot, one
visible select-synthesis cycle per row when overlap is off (with overlap on,
only the first row's synthesis is exposed because there is no previous
reduction tail to hide it behind), plus one structural-hazard stall for every
row that needs both baseline and shadow reads through a single port.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fp16
from .compiler import REWIRE, SKIP, FarMapEntry, HardenedLayer, ShadowStore
from .models import LinearLayer

WS_BASE = 0
WS_SHADOW = 1
WS_ZERO = 2


class FarValidationError(Exception):
    """Map/shadow inconsistency found while simulating; caller should fall
    back to the baseline path."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.fallback_to_baseline = True
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass
class DpeConfig:
    lanes: int = 32
    pipeline_fill_cycles: int = 12
    adder_tree_levels: int = 5
    overlap_select: bool = True
    dual_port_weights: bool = True

    def __post_init__(self):
        if self.adder_tree_levels != math.ceil(math.log2(self.lanes)):
            raise ValueError("adder tree depth must be ceil(log2(lanes))")
        if self.pipeline_fill_cycles < self.adder_tree_levels + 2:
            raise ValueError("fill must cover multiplier, tree and output stages")


@dataclass
class CycleReport:
    total_cycles: int = 0
    dots_retired: int = 0
    select_synthesis_cycles: int = 0
    overlapped_select_cycles: int = 0
    stall_cycles: int = 0

    @property
    def steady_state_issue_rate(self) -> float:
        if self.dots_retired == 0:
            return 1.0
        return self.dots_retired / (self.dots_retired + self.stall_cycles)

    def __iadd__(self, other: "CycleReport") -> "CycleReport":
        self.total_cycles += other.total_cycles
        self.dots_retired += other.dots_retired
        self.select_synthesis_cycles += other.select_synthesis_cycles
        self.overlapped_select_cycles += other.overlapped_select_cycles
        self.stall_cycles += other.stall_cycles
        return self


@dataclass
class SelectVector:
    """Dense per-row operand decision, latched for the duration of the row."""

    weight_source: np.ndarray  # (lanes,) int8 of WS_*
    shadow_addr: np.ndarray    # (lanes,) int32
    act_source: np.ndarray     # (lanes,) int32


def synth_select_vector(row_index: int, row_entries: list[FarMapEntry],
                        lanes: int = 32, active_lanes: int | None = None) -> SelectVector:
    """Expand a row's sparse map slice into the dense select vector.

    Defaults every lane to (baseline, own activation); rewired lanes switch
    to (shadow address, donor activation); skipped lanes to (zero, self);
    padding lanes beyond ``active_lanes`` to zero so they cannot perturb the
    sums.
    """
    ws = np.zeros(lanes, np.int8)
    addr = np.zeros(lanes, np.int32)
    act = np.arange(lanes, dtype=np.int32)
    seen = set()
    for e in row_entries:
        if e.lane in seen:
            raise FarValidationError("duplicate", f"lane {e.lane} in row {row_index}")
        seen.add(e.lane)
        if e.action == REWIRE:
            ws[e.lane] = WS_SHADOW
            addr[e.lane] = e.shadow_addr
            act[e.lane] = e.donor
        else:
            ws[e.lane] = WS_ZERO
    active = lanes if active_lanes is None else active_lanes
    if active < lanes:
        ws[active:] = WS_ZERO
        act[active:] = np.arange(active, lanes)
    return SelectVector(ws, addr, act)


def apply_select(select: SelectVector, wt_row_bits: np.ndarray,
                 act_tile_bits: np.ndarray, shadow_words: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """The operand redirect network: route words, never compute on them.

    Returns the effective weight word per lane and the activation stream per
    lane.  This function is pure selection (masking and gathers); the
    structural throughput property of the design depends on that, and a test
    asserts this code path contains no arithmetic.
    """
    eff_w = np.where(select.weight_source == WS_BASE, wt_row_bits, np.uint16(0))
    if shadow_words.size:
        eff_w = np.where(select.weight_source == WS_SHADOW,
                         shadow_words[select.shadow_addr], eff_w)
    eff_w = eff_w.astype(np.uint16)
    eff_act = act_tile_bits[select.act_source]
    return eff_w, eff_act


def _check_slice(entries: list[FarMapEntry], lanes: int, shadow_len: int) -> None:
    for e in entries:
        if not (0 <= e.row < lanes and 0 <= e.lane < lanes):
            raise FarValidationError("index", f"entry ({e.row},{e.lane}) outside tile")
        if e.action == REWIRE:
            if not 0 <= e.donor < lanes:
                raise FarValidationError("index", f"donor {e.donor} outside tile")
            if not 0 <= e.shadow_addr < shadow_len:
                raise FarValidationError("index", f"shadow address {e.shadow_addr}")
        elif e.action != SKIP:
            raise FarValidationError("action", f"unknown action {e.action}")


def run_tile(act_bits: np.ndarray, wt_bits: np.ndarray,
             map_slice: list[FarMapEntry] | None, shadow: ShadowStore | None,
             cfg: DpeConfig | None = None, active_lanes: int | None = None
             ) -> tuple[np.ndarray, CycleReport]:
    """Simulate one tile: ``out[row, col] = dot(weights[row], acts[:, col])``.

    ``act_bits`` is (lane, col) and ``wt_bits`` is (row, lane), both
    lanes x lanes uint16.  ``map_slice`` carries tile-local coordinates; pass
    None for the baseline (rewiring disabled) path, in which case no select
    vectors are synthesized and no select cycles are charged.
    """
    cfg = cfg or DpeConfig()
    lanes = cfg.lanes
    act = np.ascontiguousarray(act_bits, np.uint16)
    wt = np.ascontiguousarray(wt_bits, np.uint16)
    if act.shape != (lanes, lanes) or wt.shape != (lanes, lanes):
        raise ValueError(f"tiles must be {lanes}x{lanes}")
    far_enabled = map_slice is not None
    shadow_words = shadow.values if shadow is not None else np.zeros(0, np.uint16)
    by_row: dict[int, list[FarMapEntry]] = {}
    if far_enabled:
        _check_slice(map_slice, lanes, len(shadow_words))
        for e in map_slice:
            by_row.setdefault(e.row, []).append(e)

    out = np.zeros((lanes, lanes), np.uint16)
    stalls = 0
    for r in range(lanes):
        select = synth_select_vector(r, by_row.get(r, []), lanes,
                                     active_lanes if far_enabled else None)
        eff_w, eff_act = apply_select(select, wt[r], act, shadow_words)
        # 32-cycle burst: the multiplier array then the pipelined adder tree
        level = fp16.mul_array(eff_w[:, None], eff_act)
        for _ in range(cfg.adder_tree_levels):
            level = fp16.add_array(level[0::2], level[1::2])
        out[r] = level[0]
        if far_enabled and not cfg.dual_port_weights:
            src = select.weight_source
            if (src == WS_BASE).any() and (src == WS_SHADOW).any():
                stalls += 1  # single port serializes the row's second source

    synth = lanes if far_enabled else 0
    visible = (1 if cfg.overlap_select else lanes) if far_enabled else 0
    report = CycleReport(
        total_cycles=cfg.pipeline_fill_cycles + lanes * lanes + visible + stalls,
        dots_retired=lanes * lanes,
        select_synthesis_cycles=synth,
        overlapped_select_cycles=synth - visible,
        stall_cycles=stalls,
    )
    return out, report


def tile_pass_cycles(cfg: DpeConfig, far_enabled: bool) -> int:
    """Closed-form cycles for one full tile pass (no structural stalls)."""
    extra = (1 if cfg.overlap_select else cfg.lanes) if far_enabled else 0
    return cfg.pipeline_fill_cycles + cfg.lanes * cfg.lanes + extra


def _pad_tile(block: np.ndarray, lanes: int) -> np.ndarray:
    padded = np.zeros((lanes, lanes), np.uint16)
    padded[:block.shape[0], :block.shape[1]] = block
    return padded


def run_layer(act_bits: np.ndarray, layer: HardenedLayer | LinearLayer,
              cfg: DpeConfig | None = None) -> tuple[np.ndarray, CycleReport]:
    """Tile a full layer GEMM through the engine and aggregate its cycles.

    Output-stationary schedule: for every output tile the inner-dimension
    tiles stream in ascending order and partial tiles accumulate through
    binary16 adds; the bias is added once after the last partial.  Matches
    the functional reference applied with the same tiling bit for bit.
    """
    cfg = cfg or DpeConfig()
    lanes = cfg.lanes
    x = np.ascontiguousarray(act_bits, np.uint16)
    if isinstance(layer, HardenedLayer) and layer.enabled:
        base, wt, shadow = layer.layer, layer.dram_weights, layer.shadow
        slices: dict[tuple[int, int], list[FarMapEntry]] = {}
        for e in layer.farmap.entries:
            nt, kt = e.row // lanes, e.lane // lanes
            rebased = FarMapEntry(e.row - nt * lanes, e.lane - kt * lanes, e.action,
                                  e.donor - kt * lanes if e.action == REWIRE else 0,
                                  e.div, e.shadow_addr)
            slices.setdefault((nt, kt), []).append(rebased)
        far_enabled = True
    elif isinstance(layer, HardenedLayer):
        # disabled hardening falls back to the vanilla path over the DRAM image
        base = layer.layer
        wt, shadow, slices, far_enabled = layer.dram_weights, None, {}, False
    else:
        base = layer
        wt, shadow, slices, far_enabled = layer.weights, None, {}, False

    m, k = x.shape
    n = base.fan_out
    if k != base.fan_in:
        raise ValueError("activation width does not match fan_in")
    report = CycleReport()
    if m == 0 or k == 0 or n == 0:
        return np.zeros((m, n), np.uint16), report

    n_m, n_k, n_n = -(-m // lanes), -(-k // lanes), -(-n // lanes)
    out = np.zeros((m, n), np.uint16)
    for nt in range(n_n):
        for mt in range(n_m):
            acc = None
            for kt in range(n_k):
                a_blk = x[mt * lanes:(mt + 1) * lanes, kt * lanes:(kt + 1) * lanes]
                w_blk = wt[nt * lanes:(nt + 1) * lanes, kt * lanes:(kt + 1) * lanes]
                tile_out, rep = run_tile(
                    _pad_tile(np.ascontiguousarray(a_blk.T), lanes),
                    _pad_tile(w_blk, lanes),
                    slices.get((nt, kt), []) if far_enabled else None,
                    shadow, cfg, active_lanes=w_blk.shape[1])
                report += rep
                acc = tile_out if acc is None else fp16.add_array(acc, tile_out)
            rows = min(lanes, n - nt * lanes)
            cols = min(lanes, m - mt * lanes)
            out[mt * lanes:mt * lanes + cols, nt * lanes:nt * lanes + rows] = acc[:rows, :cols].T
    out = fp16.add_array(out, base.bias)
    return out, report
