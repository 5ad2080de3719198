import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from farbench import compiler, fp16, models


@pytest.fixture(scope="session")
def bundled():
    """Canonical trained victim + dataset; trained once per session."""
    net, data = models.bundled_model("clusters3")
    return net, data


@pytest.fixture(scope="session")
def bundled_hardened(bundled):
    net, data = bundled
    hardened, outcomes = compiler.harden_network(net, data.train)
    return hardened, outcomes


def random_tile_slice(rng, lanes=32, shadow_len=16, budget=4):
    """Structurally plausible tile-local map slice plus a shadow store."""
    entries = []
    for r in range(lanes):
        if rng.random() < 0.5:
            continue
        chosen = rng.permutation(lanes)[:int(rng.integers(1, budget + 1))]
        for l in chosen:
            if rng.random() < 0.25:
                entries.append(compiler.FarMapEntry(r, int(l), compiler.SKIP))
            else:
                entries.append(compiler.FarMapEntry(
                    r, int(l), compiler.REWIRE,
                    donor=int(rng.integers(0, lanes)),
                    div=int(rng.choice([2, 3])),
                    shadow_addr=int(rng.integers(0, shadow_len))))
    entries.sort(key=lambda e: (e.row, e.lane))
    shadow = compiler.ShadowStore(rng.integers(0, 0x10000, shadow_len, dtype=np.uint16))
    return entries, shadow


def random_hardened(rng, fan_in=8, fan_out=8, div=2, budget_fraction=0.5,
                    dead=2, lane_block=32):
    """Compile a random layer with ``dead`` synthetic near-zero lanes."""
    w = fp16.encode_array(rng.normal(0, 1, (fan_out, fan_in)))
    layer = models.LinearLayer(w, fp16.encode_array(rng.normal(0, 0.1, fan_out)))
    deadness = rng.uniform(0.5, 2.0, fan_in)
    dead_lanes = rng.choice(fan_in, dead, replace=False)
    deadness[dead_lanes] = rng.uniform(0, 1e-6, dead)
    grad = rng.uniform(0.1, 1.0, (fan_out, fan_in)) * rng.choice([-1, 1], (fan_out, fan_in))
    stats = models.LayerStats(grad=grad, grad_abs_mean=np.abs(grad),
                              input_abs_mean=deadness, bias_grad=np.zeros(fan_out))
    ranking = compiler.rank_sensitivity(stats)
    cfg = compiler.CompilerConfig(budget_fraction=budget_fraction, div=div,
                                  lane_block=lane_block)
    h, _ = compiler.compile_far(layer, ranking, cfg)
    return h
