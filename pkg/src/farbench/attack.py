"""Progressive bit search over DRAM-resident binary16 weights.

Each iteration ranks candidate bits per layer by gradient x bit-value-delta
(keeping only loss-increasing candidates), virtually flips the top n per
layer, measures the true loss of each on the attack batch, and commits the
single worst flip.  Only the DRAM weight image is attackable; rewiring maps
and the shadow store live on-chip and never change.

Two attacker views exist.  VANILLA_OVER_DRAM ranks candidates with plain
linear-layer gradients over the stored words, which is what an attacker sees
without knowledge of the rewiring; FAR_AWARE differentiates the deployed
datapath, where stored words under rewired lanes move nothing.  Loss and
accuracy are always measured on the deployed semantics, so the gap between
what the vanilla attacker targets and what actually changes the output is
exactly the hardening effect.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fp16
from .compiler import HardenedLayer
from .models import Batch, LinearLayer, ToyNetwork, activation_apply, activation_grad, softmax
from .reference import WS_BASE, effective_operands, fold_weights_f64

VANILLA_OVER_DRAM = "vanilla_over_dram"
FAR_AWARE = "far_aware"


@dataclass
class Objective:
    accuracy_below: float | None = None
    loss_above: float | None = None
    # stealthy targeted mode: push class p to q while others stay intact
    source_class: int | None = None
    source_accuracy_below: float | None = None
    other_accuracy_drop_max: float | None = None

    def met(self, loss: float, acc: float, class_acc: np.ndarray | None = None,
            baseline_class_acc: np.ndarray | None = None) -> bool:
        if self.accuracy_below is not None and acc < self.accuracy_below:
            return True
        if self.loss_above is not None and loss > self.loss_above:
            return True
        if self.source_class is not None and class_acc is not None:
            ok = class_acc[self.source_class] < (self.source_accuracy_below or 0.5)
            if ok and self.other_accuracy_drop_max is not None:
                others = [c for c in range(len(class_acc)) if c != self.source_class]
                drop = np.max(baseline_class_acc[others] - class_acc[others])
                ok = drop <= self.other_accuracy_drop_max
            if ok:
                return True
        return False


@dataclass
class AttackConfig:
    top_n: int = 8
    flip_budget: int = 40
    objective: Objective = field(default_factory=lambda: Objective(accuracy_below=0.5))
    attacker_view: str = VANILLA_OVER_DRAM
    seed: int = 0
    batch_size: int | None = None  # subsample of the attack split, per seed

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be at least 1")
        if self.flip_budget < 0:
            raise ValueError("flip budget cannot be negative")
        if self.attacker_view not in (VANILLA_OVER_DRAM, FAR_AWARE):
            raise ValueError(f"unknown attacker view {self.attacker_view!r}")


@dataclass
class FlipRecord:
    layer: int
    row: int
    lane: int
    bit: int
    before: int
    after: int
    loss: float
    accuracy: float


@dataclass
class AttackTrace:
    view: str
    seed: int
    flips: list[FlipRecord] = field(default_factory=list)
    iterations: int = 0
    success: bool = False
    saturated: bool = False
    initial_loss: float = 0.0
    initial_accuracy: float = 0.0
    final_loss: float = 0.0
    final_accuracy: float = 0.0


class AttackTarget:
    """A network whose DRAM weight words can be flipped in place.

    Layers may be plain or hardened; deployed evaluation folds rewired lanes
    onto their shadow words, so flips under those lanes are functionally
    inert, exactly as in the hardware.
    """

    def __init__(self, layers: list[LinearLayer | HardenedLayer], class_count: int):
        self.entries = list(layers)
        self.class_count = class_count
        self._fold_cache: list[np.ndarray | None] = [None] * len(layers)

    @classmethod
    def from_network(cls, net: ToyNetwork) -> "AttackTarget":
        return cls([l.copy() for l in net.layers], net.class_count)

    @classmethod
    def from_hardened(cls, hardened: list[HardenedLayer], class_count: int) -> "AttackTarget":
        copies = [HardenedLayer(h.layer, h.dram_weights.copy(), h.farmap, h.shadow,
                                h.enabled) for h in hardened]
        return cls(copies, class_count)

    # -- dram access ---------------------------------------------------------

    def dram(self, i: int) -> np.ndarray:
        e = self.entries[i]
        return e.dram_weights if isinstance(e, HardenedLayer) else e.weights

    def _layer_meta(self, i: int) -> tuple[np.ndarray, int]:
        e = self.entries[i]
        base = e.layer if isinstance(e, HardenedLayer) else e
        return base.bias, base.activation

    def flip(self, layer: int, row: int, lane: int, bit: int) -> tuple[int, int]:
        w = self.dram(layer)
        before = int(w[row, lane])
        after = fp16.flip_bit(before, bit)
        w[row, lane] = after
        self._fold_cache[layer] = None
        return before, after

    def snapshot(self) -> list[bytes]:
        return [self.dram(i).tobytes() for i in range(len(self.entries))]

    # -- evaluation ----------------------------------------------------------

    def _weights_f64(self, i: int, deployed: bool) -> np.ndarray:
        e = self.entries[i]
        if deployed and isinstance(e, HardenedLayer) and e.enabled:
            if self._fold_cache[i] is None:
                self._fold_cache[i] = fold_weights_f64(e)
            return self._fold_cache[i]
        return fp16.decode_array(self.dram(i))

    def _forward(self, x: np.ndarray, deployed: bool):
        inputs, pre = [], []
        with np.errstate(invalid="ignore", over="ignore"):
            for i in range(len(self.entries)):
                bias, act = self._layer_meta(i)
                inputs.append(x)
                y = x @ self._weights_f64(i, deployed).T + fp16.decode_array(bias)
                pre.append(y)
                x = activation_apply(act, y)
        return inputs, pre, x

    def metrics(self, batch: Batch) -> tuple[float, float]:
        """Deployed-semantics (loss, accuracy) on a batch; NaN loss -> inf."""
        _, _, logits = self._forward(batch.inputs, deployed=True)
        bad = ~np.isfinite(logits).all(axis=1)
        p = softmax(np.where(np.isfinite(logits), logits, 0.0))
        eps = np.finfo(np.float64).tiny
        ll = -np.log(p[np.arange(len(batch)), batch.labels] + eps)
        ll[bad] = np.inf  # a NaN/inf logit row is maximally wrong for ranking
        loss = float(np.mean(ll))
        pred = np.where(bad, -1, logits.argmax(axis=1))
        return loss, float(np.mean(pred == batch.labels))

    def class_accuracy(self, batch: Batch) -> np.ndarray:
        _, _, logits = self._forward(batch.inputs, deployed=True)
        pred = logits.argmax(axis=1)
        return np.array([np.mean(pred[batch.labels == c] == c)
                         for c in range(self.class_count)])

    def attacker_grads(self, batch: Batch, view: str) -> list[np.ndarray]:
        """d(mean loss)/d(DRAM word value) per layer under the attacker view."""
        deployed = view == FAR_AWARE
        inputs, pre, logits = self._forward(batch.inputs, deployed)
        if not np.isfinite(logits).all():
            return [np.zeros_like(fp16.decode_array(self.dram(i)))
                    for i in range(len(self.entries))]
        n = len(batch)
        delta = softmax(logits)
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        grads: list[np.ndarray] = [None] * len(self.entries)
        for i in reversed(range(len(self.entries))):
            g = delta.T @ inputs[i]
            e = self.entries[i]
            if deployed and isinstance(e, HardenedLayer) and e.enabled:
                ops = effective_operands(e.farmap)
                g = np.where(ops.weight_source == WS_BASE, g, 0.0)
            grads[i] = g
            if i:
                _, act = self._layer_meta(i - 1)
                delta = (delta @ self._weights_f64(i, deployed)) * \
                    activation_grad(act, pre[i - 1])
        return grads


@dataclass
class IterationResult:
    best: tuple[int, int, int, int] | None  # (layer, row, lane, bit)
    best_loss: float
    losses: list[float]
    candidates: list[tuple[int, int, int, int]]
    saturated: bool


def _rank_candidates(target: AttackTarget, grads: list[np.ndarray], top_n: int
                     ) -> list[tuple[int, int, int, int]]:
    cands = []
    for li in range(len(target.entries)):
        deltas = fp16.value_delta_matrix(target.dram(li))
        with np.errstate(invalid="ignore"):
            impact = grads[li][..., None] * deltas
        impact[~np.isfinite(deltas)] = -np.inf  # NaN-producing flips excluded
        rows, lanes, bits = np.nonzero(impact > 0)
        if not len(rows):
            continue
        vals = impact[rows, lanes, bits]
        order = np.lexsort((bits, lanes, rows, -vals))[:top_n]
        cands.extend((li, int(rows[j]), int(lanes[j]), int(bits[j])) for j in order)
    return sorted(cands)  # deterministic scan order: layer, row, lane, bit


def pbs_iteration(target: AttackTarget, batch: Batch, cfg: AttackConfig) -> IterationResult:
    """One search round: rank, virtually flip, measure, pick the argmax.

    The target is bitwise unchanged on return; saturation is reported when no
    candidate has a loss-increasing gradient sign.
    """
    grads = target.attacker_grads(batch, cfg.attacker_view)
    cands = _rank_candidates(target, grads, cfg.top_n)
    if not cands:
        return IterationResult(None, math.nan, [], [], saturated=True)
    best, best_loss, losses = None, -math.inf, []
    for li, r, l, bit in cands:
        target.flip(li, r, l, bit)
        loss, _ = target.metrics(batch)
        target.flip(li, r, l, bit)  # involution restores the word
        if math.isnan(loss):
            loss = -math.inf
        losses.append(loss)
        if loss > best_loss:  # strict: ties keep the first in scan order
            best, best_loss = (li, r, l, bit), loss
    return IterationResult(best, best_loss, losses, cands, saturated=False)


def _draw_attack_batch(batch: Batch, cfg: AttackConfig) -> Batch:
    if cfg.batch_size is None or cfg.batch_size >= len(batch):
        return batch
    idx = np.random.default_rng(cfg.seed).choice(len(batch), cfg.batch_size, replace=False)
    return Batch(batch.inputs[idx], batch.labels[idx])


def run_attack(target: AttackTarget, attack_split: Batch, cfg: AttackConfig) -> AttackTrace:
    """Greedy committed-flip loop until objective, budget, or saturation."""
    batch = _draw_attack_batch(attack_split, cfg)
    base_class_acc = target.class_accuracy(batch) if cfg.objective.source_class is not None \
        else None
    loss, acc = target.metrics(batch)
    trace = AttackTrace(cfg.attacker_view, cfg.seed,
                        initial_loss=loss, initial_accuracy=acc,
                        final_loss=loss, final_accuracy=acc)
    while len(trace.flips) < cfg.flip_budget:
        if cfg.objective.met(trace.final_loss, trace.final_accuracy,
                             target.class_accuracy(batch) if base_class_acc is not None else None,
                             base_class_acc):
            break
        result = pbs_iteration(target, batch, cfg)
        trace.iterations += 1
        if result.saturated or result.best is None:
            trace.saturated = True
            break
        li, r, l, bit = result.best
        before, after = target.flip(li, r, l, bit)
        loss, acc = target.metrics(batch)
        trace.flips.append(FlipRecord(li, r, l, bit, before, after, loss, acc))
        trace.final_loss, trace.final_accuracy = loss, acc
    trace.success = cfg.objective.met(
        trace.final_loss, trace.final_accuracy,
        target.class_accuracy(batch) if base_class_acc is not None else None, base_class_acc)
    return trace


def random_attack(target: AttackTarget, attack_split: Batch, cfg: AttackConfig) -> AttackTrace:
    """Uniform-random committed flips under the same stopping rules."""
    batch = _draw_attack_batch(attack_split, cfg)
    rng = np.random.default_rng(cfg.seed)
    loss, acc = target.metrics(batch)
    trace = AttackTrace("random", cfg.seed, initial_loss=loss, initial_accuracy=acc,
                        final_loss=loss, final_accuracy=acc)
    while len(trace.flips) < cfg.flip_budget:
        if cfg.objective.met(trace.final_loss, trace.final_accuracy):
            break
        li = int(rng.integers(0, len(target.entries)))
        shape = target.dram(li).shape
        r, l = int(rng.integers(0, shape[0])), int(rng.integers(0, shape[1]))
        bit = int(rng.integers(0, fp16.BIT_WIDTH))
        before, after = target.flip(li, r, l, bit)
        loss, acc = target.metrics(batch)
        trace.flips.append(FlipRecord(li, r, l, bit, before, after, loss, acc))
        trace.final_loss, trace.final_accuracy = loss, acc
        trace.iterations += 1
    trace.success = cfg.objective.met(trace.final_loss, trace.final_accuracy)
    return trace


def replay_trace(target: AttackTarget, trace: AttackTrace, attack_split: Batch,
                 cfg: AttackConfig) -> tuple[float, float]:
    """Re-apply a committed-flip history to a fresh target; returns metrics."""
    batch = _draw_attack_batch(attack_split, cfg)
    for f in trace.flips:
        before, after = target.flip(f.layer, f.row, f.lane, f.bit)
        if before != f.before or after != f.after:
            raise ValueError(f"trace does not match target at flip {f}")
    return target.metrics(batch)


def flips_to_objective(trace: AttackTrace, budget: int) -> int:
    """Committed flips when the objective was reached, else the full budget."""
    return len(trace.flips) if trace.success else budget


def compare_robustness(make_baseline, make_hardened, attack_split: Batch,
                       cfg: AttackConfig, seeds: list[int]) -> dict:
    """Median flips-to-objective for both models under PBS and random flips.

    ``make_baseline``/``make_hardened`` are factories returning fresh
    AttackTargets so committed flips never leak across seeds.
    """
    rows = {"pbs": {"baseline": [], "hardened": []},
            "random": {"baseline": [], "hardened": []}}
    for seed in seeds:
        c = AttackConfig(cfg.top_n, cfg.flip_budget, cfg.objective,
                         cfg.attacker_view, seed, cfg.batch_size)
        rows["pbs"]["baseline"].append(
            flips_to_objective(run_attack(make_baseline(), attack_split, c), c.flip_budget))
        rows["pbs"]["hardened"].append(
            flips_to_objective(run_attack(make_hardened(), attack_split, c), c.flip_budget))
        rows["random"]["baseline"].append(
            flips_to_objective(random_attack(make_baseline(), attack_split, c), c.flip_budget))
        rows["random"]["hardened"].append(
            flips_to_objective(random_attack(make_hardened(), attack_split, c), c.flip_budget))
    out = {"seeds": list(seeds)}
    for mode, data in rows.items():
        base_med = float(np.median(data["baseline"]))
        hard_med = float(np.median(data["hardened"]))
        out[mode] = {
            "baseline_flips": data["baseline"],
            "hardened_flips": data["hardened"],
            "baseline_median": base_med,
            "hardened_median": hard_med,
            "ratio": hard_med / base_med if base_med else math.inf,
        }
    return out


# --- trace files -------------------------------------------------------------

def trace_to_jsonl(trace: AttackTrace, cfg: AttackConfig) -> str:
    header = {"view": trace.view, "seed": trace.seed, "top_n": cfg.top_n,
              "flip_budget": cfg.flip_budget, "objective": asdict(cfg.objective),
              "iterations": trace.iterations, "success": trace.success,
              "saturated": trace.saturated,
              "initial_loss": trace.initial_loss,
              "initial_accuracy": trace.initial_accuracy,
              "final_loss": trace.final_loss, "final_accuracy": trace.final_accuracy}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(asdict(f), sort_keys=True) for f in trace.flips]
    return "\n".join(lines) + "\n"


def trace_from_jsonl(text: str) -> tuple[AttackTrace, dict]:
    lines = [l for l in text.splitlines() if l.strip()]
    header = json.loads(lines[0])
    trace = AttackTrace(header["view"], header["seed"],
                        iterations=header["iterations"], success=header["success"],
                        saturated=header.get("saturated", False),
                        initial_loss=header["initial_loss"],
                        initial_accuracy=header["initial_accuracy"],
                        final_loss=header["final_loss"],
                        final_accuracy=header["final_accuracy"])
    trace.flips = [FlipRecord(**json.loads(l)) for l in lines[1:]]
    return trace, header
