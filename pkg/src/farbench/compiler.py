"""Offline hardening compiler for linear layers.

Per output row it pairs the most salient input lanes with near-dead donor
slots: the critical lane and its victims all switch to a shadow copy of the
critical weight pre-divided by 2 or 3, and every lane in the group consumes
the critical lane's activation.  The DRAM image gets the critical value
copied over the victim slots so the stored layout stays plausible to an
attacker, while the shadow store (on-chip, not attackable) carries the values
the datapath actually multiplies.

Artifacts per layer: a sparse rewiring map (MAP blob), the pre-scaled shadow
words (SHD blob), and the obfuscated DRAM weight matrix.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import fp16
from .formats import MAGIC_MAP, MAGIC_SHADOW, FORMAT_VERSION, BlobError, seal, unseal
from .models import LinearLayer

SKIP = 0
REWIRE = 1

DEFAULT_BUDGET_FRACTION = 0.15
ENTRY_STRUCT = struct.Struct("<HHBHBH")  # row, lane, action, donor, div, shadow_addr
MAP_HEADER = struct.Struct("<HHHI")      # layer_id, fan_in, fan_out, entry_count


@dataclass(frozen=True)
class FarMapEntry:
    row: int
    lane: int
    action: int
    donor: int = 0       # REWIRE only: lane whose activation this slot consumes
    div: int = 0         # REWIRE only: 2 or 3
    shadow_addr: int = 0 # REWIRE only: index into the shadow store


@dataclass
class FarMap:
    layer_id: int
    fan_in: int
    fan_out: int
    entries: list[FarMapEntry] = field(default_factory=list)

    def rows(self) -> dict[int, list[FarMapEntry]]:
        out: dict[int, list[FarMapEntry]] = {}
        for e in self.entries:
            out.setdefault(e.row, []).append(e)
        return out


@dataclass
class ShadowStore:
    values: np.ndarray  # uint16 binary16 words

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.uint16)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class HardenedLayer:
    layer: LinearLayer          # original, pre-hardening weights
    dram_weights: np.ndarray    # obfuscated W' as stored off-chip (attackable)
    farmap: FarMap
    shadow: ShadowStore
    enabled: bool = True

    def __post_init__(self):
        self.dram_weights = np.ascontiguousarray(self.dram_weights, dtype=np.uint16)


@dataclass
class CompilerConfig:
    budget_fraction: float = DEFAULT_BUDGET_FRACTION
    div: int = 2
    deadness_rel_threshold: float = 0.01  # fraction of the layer-wide mean |activation|
    emit_skips: bool = False
    lane_block: int = 32  # donor and victims must share a lane block of this width

    def __post_init__(self):
        if self.div not in (2, 3):
            raise ValueError("division factor must be 2 or 3")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget fraction outside [0, 1]")


@dataclass
class Ranking:
    """Per-row lane order (most salient first) plus per-lane deadness scores."""

    order: np.ndarray      # (fan_out, fan_in) lane indices, descending saliency
    scores: np.ndarray     # (fan_out, fan_in) saliency per (row, lane)
    deadness: np.ndarray   # (fan_in,) mean |activation| of the feeding neuron


def rank_sensitivity(stats) -> Ranking:
    """Rank lanes per output row by gradient saliency, ties by lane index.

    Saliency is |d(mean loss)/dw|, the quantity a small perturbation of the
    weight actually moves the loss by (and the one gradient-guided attackers
    rank with); deadness is the mean absolute activation of the feeding
    neuron.  ``stats`` is a per-layer record from loss_and_gradients.
    """
    scores = np.abs(np.asarray(stats.grad, dtype=np.float64))
    lanes = np.arange(scores.shape[1])
    # lexsort: primary descending score, secondary ascending lane
    order = np.stack([lanes[np.lexsort((lanes, -scores[r]))] for r in range(scores.shape[0])])
    return Ranking(order, scores, np.asarray(stats.input_abs_mean, dtype=np.float64))


@dataclass
class RowOutcome:
    row: int
    groups: int
    skips: int
    reason: str = ""  # non-empty when the row could not be hardened


def row_budget(budget_fraction: float, fan_in: int) -> int:
    return math.floor(budget_fraction * fan_in)


def compile_far(layer: LinearLayer, ranking: Ranking,
                cfg: CompilerConfig | None = None, layer_id: int = 0
                ) -> tuple[HardenedLayer, list[RowOutcome]]:
    """Greedy per-row rewiring under the entry budget.

    For every row, critical lanes are taken in rank order; each gets div-1
    unused dead victims (lowest deadness first, then lane index) from the same
    lane block, one shadow word equal to the critical weight divided by the
    division factor, and the victims' DRAM slots are overwritten with the
    critical weight.  Rows without usable dead lanes are reported and left
    alone.
    """
    cfg = cfg or CompilerConfig()
    fan_out, fan_in = layer.fan_out, layer.fan_in
    budget = row_budget(cfg.budget_fraction, fan_in)
    dead_mask = ranking.deadness <= cfg.deadness_rel_threshold * float(np.mean(ranking.deadness))
    dead_order = sorted(np.flatnonzero(dead_mask), key=lambda l: (ranking.deadness[l], l))

    dram = layer.weights.copy()
    entries: list[FarMapEntry] = []
    shadow_vals: list[int] = []
    outcomes: list[RowOutcome] = []

    for r in range(fan_out):
        if budget < cfg.div:
            outcomes.append(RowOutcome(r, 0, 0, "budget below division factor"))
            continue
        if not dead_order:
            outcomes.append(RowOutcome(r, 0, 0, "no dead lanes"))
            continue
        used: set[int] = set()
        remaining = budget
        groups = 0
        row_entries: list[FarMapEntry] = []
        for c in ranking.order[r]:
            c = int(c)
            if remaining < cfg.div:
                break
            if c in used or dead_mask[c]:
                continue
            block = c // cfg.lane_block
            victims = [v for v in dead_order
                       if v not in used and v != c and v // cfg.lane_block == block]
            if len(victims) < cfg.div - 1:
                continue
            victims = victims[:cfg.div - 1]
            addr = len(shadow_vals)
            shadow_vals.append(fp16.from_real(fp16.decode(int(layer.weights[r, c])) / cfg.div))
            row_entries.append(FarMapEntry(r, c, REWIRE, c, cfg.div, addr))
            used.add(c)
            for v in victims:
                row_entries.append(FarMapEntry(r, int(v), REWIRE, c, cfg.div, addr))
                used.add(int(v))
                dram[r, v] = layer.weights[r, c]
            remaining -= cfg.div
            groups += 1
        skips = 0
        if cfg.emit_skips:
            for v in dead_order:
                if remaining <= 0:
                    break
                if v not in used:
                    row_entries.append(FarMapEntry(r, int(v), SKIP))
                    used.add(int(v))
                    remaining -= 1
                    skips += 1
        entries.extend(row_entries)
        if not groups:
            outcomes.append(RowOutcome(r, 0, skips, "no eligible critical/victim pairing"))
        else:
            outcomes.append(RowOutcome(r, groups, skips))

    entries.sort(key=lambda e: (e.row, e.lane))
    farmap = FarMap(layer_id, fan_in, fan_out, entries)
    shadow = ShadowStore(np.array(shadow_vals, dtype=np.uint16))
    return HardenedLayer(layer, dram, farmap, shadow), outcomes


def harden_network(net, batch, cfg: CompilerConfig | None = None
                   ) -> tuple[list[HardenedLayer], list[list[RowOutcome]]]:
    """Analyze one batch and compile every layer of a toy network."""
    from .models import loss_and_gradients

    report = loss_and_gradients(net, batch)
    hardened, outcomes = [], []
    for i, (layer, st) in enumerate(zip(net.layers, report.layers)):
        ranking = rank_sensitivity(st)
        h, oc = compile_far(layer, ranking, cfg, layer_id=i)
        hardened.append(h)
        outcomes.append(oc)
    return hardened, outcomes


# --- validation -------------------------------------------------------------

def validate_map(farmap: FarMap, shadow: ShadowStore,
                 budget_fraction: float = DEFAULT_BUDGET_FRACTION) -> None:
    """Structural validation; raises BlobError on the first violation.

    Deliberately does not compare shadow words against DRAM: after an attack
    the DRAM copy of a donor may differ, and that is exactly the point.
    """
    if farmap.fan_in < 1 or farmap.fan_out < 1:
        raise BlobError("index", "degenerate layer dims")
    budget = row_budget(budget_fraction, farmap.fan_in)
    per_row: dict[int, int] = {}
    groups: dict[tuple[int, int], list[FarMapEntry]] = {}
    prev = (-1, -1)
    for e in farmap.entries:
        key = (e.row, e.lane)
        if key <= prev:
            raise BlobError("order", f"entries not strictly sorted at {key}")
        prev = key
        if not 0 <= e.row < farmap.fan_out:
            raise BlobError("index", f"row {e.row} outside fan_out {farmap.fan_out}")
        if not 0 <= e.lane < farmap.fan_in:
            raise BlobError("index", f"lane {e.lane} outside fan_in {farmap.fan_in}")
        per_row[e.row] = per_row.get(e.row, 0) + 1
        if e.action == SKIP:
            if e.donor or e.div or e.shadow_addr:
                raise BlobError("skip_fields", "skip entry carries rewire fields")
        elif e.action == REWIRE:
            if not 0 <= e.donor < farmap.fan_in:
                raise BlobError("index", f"donor {e.donor} outside fan_in")
            if e.div not in (2, 3):
                raise BlobError("div", f"division factor {e.div}")
            if not 0 <= e.shadow_addr < len(shadow):
                raise BlobError("index", f"shadow address {e.shadow_addr} outside store")
            groups.setdefault((e.row, e.donor), []).append(e)
        else:
            raise BlobError("action", f"unknown action {e.action}")
    for count in per_row.values():
        if count > budget:
            raise BlobError("budget", f"{count} entries exceed row budget {budget}")
    referenced: set[int] = set()
    for (row, donor), members in groups.items():
        div = members[0].div
        addr = members[0].shadow_addr
        if any(m.div != div or m.shadow_addr != addr for m in members):
            raise BlobError("group", f"group ({row},{donor}) mixes div/shadow")
        if len(members) != div:
            raise BlobError("group", f"group ({row},{donor}) has {len(members)} of {div} lanes")
        if sum(1 for m in members if m.lane == donor) != 1:
            raise BlobError("group", f"group ({row},{donor}) missing its donor lane")
        referenced.add(addr)
    if len(shadow) and referenced != set(range(len(shadow))):
        raise BlobError("dead_shadow", "unreferenced shadow entries")


# --- blob serialization -----------------------------------------------------

def emit_blobs(h: HardenedLayer) -> tuple[bytes, bytes]:
    """Serialize to (map blob, shadow blob); both CRC-sealed little-endian."""
    m = h.farmap
    body = bytearray(MAGIC_MAP)
    body += struct.pack("<B", FORMAT_VERSION)
    body += MAP_HEADER.pack(m.layer_id, m.fan_in, m.fan_out, len(m.entries))
    for e in m.entries:
        body += ENTRY_STRUCT.pack(e.row, e.lane, e.action, e.donor, e.div, e.shadow_addr)
    fmap = seal(bytes(body))

    body = bytearray(MAGIC_SHADOW)
    body += struct.pack("<BI", FORMAT_VERSION, len(h.shadow))
    body += h.shadow.values.astype("<u2").tobytes()
    return fmap, seal(bytes(body))


def load_blobs(fmap_blob: bytes, fshd_blob: bytes,
               budget_fraction: float = DEFAULT_BUDGET_FRACTION
               ) -> tuple[FarMap, ShadowStore]:
    """Parse and fully validate the blob pair; BlobError on any violation."""
    sbody = unseal(fshd_blob, MAGIC_SHADOW)
    if len(sbody) < 4:
        raise BlobError("truncated", "shadow header")
    (count,) = struct.unpack_from("<I", sbody, 0)
    if len(sbody) != 4 + 2 * count:
        raise BlobError("count", "shadow payload length mismatch")
    shadow = ShadowStore(np.frombuffer(sbody, "<u2", count=count, offset=4).copy())

    mbody = unseal(fmap_blob, MAGIC_MAP)
    if len(mbody) < MAP_HEADER.size:
        raise BlobError("truncated", "map header")
    layer_id, fan_in, fan_out, n = MAP_HEADER.unpack_from(mbody, 0)
    if len(mbody) != MAP_HEADER.size + n * ENTRY_STRUCT.size:
        raise BlobError("count", "entry payload length mismatch")
    entries = [FarMapEntry(*f) for f in ENTRY_STRUCT.iter_unpack(mbody[MAP_HEADER.size:])]
    farmap = FarMap(layer_id, fan_in, fan_out, entries)
    validate_map(farmap, shadow, budget_fraction)
    return farmap, shadow
