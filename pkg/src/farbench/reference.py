"""Functional (untimed) reference for the rewired linear operator.

Two evaluation orders are provided.  ``far_linear_exact`` works in exact
rational arithmetic: rewired lanes contribute activation(donor) times
weight(donor)/div with the division done exactly, which is the mathematical
content of the rewiring (the group's contributions sum back to the original
critical term).  ``far_linear_fp16`` is the hardware semantics: pre-scaled
binary16 shadow words, binary16 products, and the fixed adjacent-pair adder
tree.  The cycle simulator must match the fp16 path bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import fp16
from .compiler import REWIRE, FarMap, FarMapEntry, HardenedLayer, ShadowStore

WS_BASE = 0
WS_SHADOW = 1
WS_ZERO = 2


@dataclass
class EffectiveOperands:
    """Dense per-(row, lane) operand decision derived from a validated map."""

    weight_source: np.ndarray  # (fan_out, fan_in) int8 of WS_*
    shadow_addr: np.ndarray    # (fan_out, fan_in) int32, -1 where unused
    act_source: np.ndarray     # (fan_out, fan_in) int32 lane index


def effective_operands(farmap: FarMap) -> EffectiveOperands:
    n, k = farmap.fan_out, farmap.fan_in
    ws = np.zeros((n, k), np.int8)
    addr = np.full((n, k), -1, np.int32)
    act = np.tile(np.arange(k, dtype=np.int32), (n, 1))
    for e in farmap.entries:
        if e.action == REWIRE:
            ws[e.row, e.lane] = WS_SHADOW
            addr[e.row, e.lane] = e.shadow_addr
            act[e.row, e.lane] = e.donor
        else:
            ws[e.row, e.lane] = WS_ZERO
    return EffectiveOperands(ws, addr, act)


def far_linear_exact(x, hardened: HardenedLayer) -> list[Fraction]:
    """Exact-rational row sums under the effective operands, no bias.

    Base lanes read the DRAM word; rewired lanes contribute
    x[donor] * decode(original donor weight) / div exactly.  Exact rationals
    are used because division by 3 is not representable in any binary float,
    and the preservation contract is equality, not closeness.
    """
    ops = effective_operands(hardened.farmap)
    xs = [Fraction(v) for v in x]
    if len(xs) != hardened.farmap.fan_in:
        raise ValueError("activation length does not match fan_in")
    divs = {(e.row, e.lane): e.div for e in hardened.farmap.entries if e.action == REWIRE}
    out = []
    for r in range(hardened.farmap.fan_out):
        total = Fraction(0)
        for l in range(hardened.farmap.fan_in):
            src = ops.weight_source[r, l]
            if src == WS_ZERO:
                continue
            if src == WS_BASE:
                total += Fraction(fp16.decode(int(hardened.dram_weights[r, l]))) * xs[l]
            else:
                donor = int(ops.act_source[r, l])
                w = Fraction(fp16.decode(int(hardened.layer.weights[r, donor])))
                total += w / divs[(r, l)] * xs[donor]
        out.append(total)
    return out


def _gather_fp16(ops: EffectiveOperands, weights: np.ndarray, shadow: ShadowStore) -> np.ndarray:
    """Effective weight words per (row, lane)."""
    w = np.asarray(weights, np.uint16)
    eff = np.where(ops.weight_source == WS_BASE, w, np.uint16(0))
    if len(shadow):
        idx = np.clip(ops.shadow_addr, 0, len(shadow) - 1)
        eff = np.where(ops.weight_source == WS_SHADOW, shadow.values[idx], eff)
    elif (ops.weight_source == WS_SHADOW).any():
        raise ValueError("map references an empty shadow store")
    return eff.astype(np.uint16)


def far_linear_fp16(x_bits: np.ndarray, hardened: HardenedLayer, lanes: int = 32,
                    include_bias: bool = True,
                    reduction_order: str = "pairwise-tree") -> np.ndarray:
    """Hardware-semantics binary16 evaluation, batched over leading axes.

    Fan-in is zero-padded to a multiple of ``lanes``; each block reduces
    through the adjacent-pair tree and blocks accumulate in ascending order
    with binary16 adds; the bias is added once afterwards.
    """
    if reduction_order != "pairwise-tree":
        raise ValueError(f"unsupported reduction order {reduction_order!r}")
    m = hardened.farmap
    x = np.asarray(x_bits, np.uint16)
    if x.shape[-1] != m.fan_in:
        raise ValueError("activation length does not match fan_in")
    ops = effective_operands(m)
    eff_w = _gather_fp16(ops, hardened.dram_weights, hardened.shadow)

    padded = -(-m.fan_in // lanes) * lanes
    if padded != m.fan_in:
        pad = padded - m.fan_in
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), np.uint16)], axis=-1)
        eff_w = np.concatenate([eff_w, np.zeros((m.fan_out, pad), np.uint16)], axis=-1)
        act_src = np.concatenate(
            [ops.act_source, np.tile(np.arange(m.fan_in, padded, dtype=np.int32),
                                     (m.fan_out, 1))], axis=-1)
    else:
        act_src = ops.act_source

    acc = None
    for k0 in range(0, padded, lanes):
        acts = x[..., act_src[:, k0:k0 + lanes]]          # (..., fan_out, lanes)
        prod = fp16.mul_array(eff_w[:, k0:k0 + lanes], acts)
        part = fp16.tree_sum(prod, axis=-1)
        acc = part if acc is None else fp16.add_array(acc, part)
    if include_bias:
        acc = fp16.add_array(acc, hardened.layer.bias)
    return acc


def tile_rows_fp16(act_bits: np.ndarray, wt_bits: np.ndarray,
                   entries: list[FarMapEntry], shadow: ShadowStore,
                   lanes: int = 32, active_lanes: int | None = None) -> np.ndarray:
    """One-tile functional oracle: out[row, col] over a (lanes x lanes) tile.

    ``act_bits`` is (lane, col), ``wt_bits`` is (row, lane); entries carry
    tile-local coordinates.  This is the bitwise target the cycle simulator
    is tested against.
    """
    act = np.asarray(act_bits, np.uint16)
    wt = np.asarray(wt_bits, np.uint16)
    active = lanes if active_lanes is None else active_lanes
    tile_map = FarMap(0, lanes, lanes, sorted(entries, key=lambda e: (e.row, e.lane)))
    ops = effective_operands(tile_map)
    if active < lanes:
        ops.weight_source[:, active:] = WS_ZERO
    eff_w = _gather_fp16(ops, wt, shadow)
    acts = act[ops.act_source]                 # (row, lane, col)
    prod = fp16.mul_array(eff_w[..., None], acts)
    return fp16.tree_sum(prod, axis=1)


def fold_weights_f64(hardened: HardenedLayer) -> np.ndarray:
    """Deployed semantics folded into a dense float64 matrix over activations.

    Entry (r, l) is the total effective weight multiplying activation l:
    base lanes contribute their DRAM word, rewired lanes contribute the
    shadow word onto the donor's column, skipped lanes nothing.  This is the
    fast evaluation path for attack-time accuracy/loss measurements.
    """
    ops = effective_operands(hardened.farmap)
    dram = fp16.decode_array(hardened.dram_weights)
    fold = np.zeros_like(dram)
    rows, lanes = np.nonzero(ops.weight_source == WS_BASE)
    np.add.at(fold, (rows, lanes), dram[rows, lanes])
    rows, lanes = np.nonzero(ops.weight_source == WS_SHADOW)
    if len(rows):
        shadow = fp16.decode_array(hardened.shadow.values)
        np.add.at(fold, (rows, ops.act_source[rows, lanes]),
                  shadow[ops.shadow_addr[rows, lanes]])
    return fold
