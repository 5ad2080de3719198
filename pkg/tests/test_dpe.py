"""Cycle-level engine: counts, bit-exactness, hazards, structural checks."""

import ast
import inspect
import textwrap

import numpy as np
import pytest

from farbench import compiler, dpe, fp16, models, reference

from conftest import random_hardened, random_tile_slice

RNG = np.random.default_rng(77)


def random_tile(rng, scale=1.0):
    return fp16.encode_array(rng.normal(0, scale, (32, 32)))


# --- select vector synthesis --------------------------------------------------

def test_select_vector_defaults():
    sel = dpe.synth_select_vector(0, [])
    assert np.all(sel.weight_source == dpe.WS_BASE)
    assert list(sel.act_source) == list(range(32))


def test_select_vector_worked_example():
    entries = [compiler.FarMapEntry(4, 0, compiler.REWIRE, 0, 2, 3),
               compiler.FarMapEntry(4, 1, compiler.REWIRE, 0, 2, 3)]
    sel = dpe.synth_select_vector(4, entries)
    assert sel.weight_source[0] == sel.weight_source[1] == dpe.WS_SHADOW
    assert sel.shadow_addr[0] == sel.shadow_addr[1] == 3
    assert sel.act_source[0] == sel.act_source[1] == 0
    assert np.all(sel.weight_source[2:] == dpe.WS_BASE)
    assert list(sel.act_source[2:]) == list(range(2, 32))


def test_select_vector_skip_lane():
    sel = dpe.synth_select_vector(0, [compiler.FarMapEntry(0, 7, compiler.SKIP)])
    assert sel.weight_source[7] == dpe.WS_ZERO
    assert sel.act_source[7] == 7
    assert np.sum(sel.weight_source == dpe.WS_ZERO) == 1


def test_select_vector_duplicate_lane_rejected():
    entries = [compiler.FarMapEntry(0, 7, compiler.SKIP),
               compiler.FarMapEntry(0, 7, compiler.SKIP)]
    with pytest.raises(dpe.FarValidationError) as err:
        dpe.synth_select_vector(0, entries)
    assert err.value.reason == "duplicate"


def test_select_vector_padding_lanes_are_zero():
    sel = dpe.synth_select_vector(0, [], active_lanes=20)
    assert np.all(sel.weight_source[20:] == dpe.WS_ZERO)
    assert np.all(sel.weight_source[:20] == dpe.WS_BASE)


def test_config_invariants():
    with pytest.raises(ValueError):
        dpe.DpeConfig(lanes=32, adder_tree_levels=4)
    with pytest.raises(ValueError):
        dpe.DpeConfig(pipeline_fill_cycles=5)  # cannot cover mult + tree + reg
    cfg = dpe.DpeConfig(lanes=16, pipeline_fill_cycles=8, adder_tree_levels=4)
    assert cfg.lanes == 16


# --- cycle accounting ---------------------------------------------------------

def test_baseline_tile_cycle_count():
    _, rep = dpe.run_tile(random_tile(RNG), random_tile(RNG), None, None)
    assert rep.total_cycles == 1036
    assert rep.dots_retired == 1024
    assert rep.select_synthesis_cycles == 0
    assert rep.steady_state_issue_rate == 1.0


def test_far_tile_cycle_counts():
    rng = np.random.default_rng(3)
    entries, shadow = random_tile_slice(rng)
    act, wt = random_tile(rng), random_tile(rng)
    _, rep = dpe.run_tile(act, wt, entries, shadow, dpe.DpeConfig(overlap_select=False))
    assert rep.total_cycles == 1068
    _, rep = dpe.run_tile(act, wt, entries, shadow, dpe.DpeConfig(overlap_select=True))
    assert rep.total_cycles == 1037
    assert rep.select_synthesis_cycles == 32
    assert rep.overlapped_select_cycles == 31
    # an empty (but present) map costs the same: density-independent
    _, rep = dpe.run_tile(act, wt, [], shadow, dpe.DpeConfig(overlap_select=False))
    assert rep.total_cycles == 1068


def test_cycle_monotonicity():
    rng = np.random.default_rng(11)
    for _ in range(10):
        entries, shadow = random_tile_slice(rng)
        act, wt = random_tile(rng), random_tile(rng)
        base = dpe.run_tile(act, wt, None, None)[1].total_cycles
        no_ov = dpe.run_tile(act, wt, entries, shadow,
                             dpe.DpeConfig(overlap_select=False))[1].total_cycles
        ov = dpe.run_tile(act, wt, entries, shadow,
                          dpe.DpeConfig(overlap_select=True))[1].total_cycles
        assert base <= ov <= no_ov


def test_dual_port_never_stalls_single_port_stalls_on_mixing():
    rng = np.random.default_rng(5)
    for _ in range(10):
        entries, shadow = random_tile_slice(rng)
        act, wt = random_tile(rng), random_tile(rng)
        _, rep = dpe.run_tile(act, wt, entries, shadow,
                              dpe.DpeConfig(dual_port_weights=True))
        assert rep.stall_cycles == 0
        assert rep.steady_state_issue_rate == 1.0
        _, rep = dpe.run_tile(act, wt, entries, shadow,
                              dpe.DpeConfig(dual_port_weights=False))
        mixing_rows = 0
        by_row = {}
        for e in entries:
            by_row.setdefault(e.row, []).append(e)
        for row, es in by_row.items():
            shadow_lanes = sum(1 for e in es if e.action == compiler.REWIRE)
            zero_lanes = sum(1 for e in es if e.action == compiler.SKIP)
            if shadow_lanes and shadow_lanes + zero_lanes < 32:
                mixing_rows += 1
        assert rep.stall_cycles == mixing_rows
        if mixing_rows:
            assert rep.steady_state_issue_rate < 1.0


def test_illegal_shadow_address_aborts_with_fallback():
    entries = [compiler.FarMapEntry(0, 0, compiler.REWIRE, 0, 2, 9),
               compiler.FarMapEntry(0, 1, compiler.REWIRE, 0, 2, 9)]
    shadow = compiler.ShadowStore(np.zeros(2, np.uint16))
    with pytest.raises(dpe.FarValidationError) as err:
        dpe.run_tile(random_tile(RNG), random_tile(RNG), entries, shadow)
    assert err.value.reason == "index"
    assert err.value.fallback_to_baseline


# --- functional bit-exactness -------------------------------------------------

def test_bit_exact_against_reference_random_cases():
    rng = np.random.default_rng(2024)
    for case in range(200):
        entries, shadow = random_tile_slice(rng, shadow_len=int(rng.integers(1, 24)))
        act = random_tile(rng, scale=float(rng.choice([0.1, 1.0, 30.0])))
        wt = random_tile(rng, scale=float(rng.choice([0.1, 1.0, 30.0])))
        if case % 7 == 0:  # raw random patterns: NaN/inf paths must agree too
            act = rng.integers(0, 0x10000, (32, 32), dtype=np.uint16)
        got, _ = dpe.run_tile(act, wt, entries, shadow)
        want = reference.tile_rows_fp16(act, wt, entries, shadow)
        np.testing.assert_array_equal(got, want)


def test_run_layer_matches_reference_and_closed_form():
    rng = np.random.default_rng(15)
    h = random_hardened(rng, fan_in=64, fan_out=48, div=2, dead=8,
                        budget_fraction=0.15, lane_block=32)
    assert h.farmap.entries
    x = fp16.encode_array(rng.normal(size=(40, 64)) * 0.5)
    cfg = dpe.DpeConfig(overlap_select=True)
    out, rep = dpe.run_layer(x, h, cfg)
    want = reference.far_linear_fp16(x, h)
    np.testing.assert_array_equal(out, want)
    # closed form: ceil(40/32) * ceil(48/32) * ceil(64/32) tile passes
    passes = 2 * 2 * 2
    assert rep.total_cycles == passes * dpe.tile_pass_cycles(cfg, True)
    assert rep.dots_retired == passes * 1024


def test_run_layer_baseline_closed_form():
    rng = np.random.default_rng(16)
    layer = models.LinearLayer(fp16.encode_array(rng.normal(size=(64, 64)) * 0.3),
                               fp16.encode_array(rng.normal(size=64)))
    x = fp16.encode_array(rng.normal(size=(64, 64)))
    out, rep = dpe.run_layer(x, layer)
    assert rep.total_cycles == 8 * 1036
    empty = compiler.FarMap(0, 64, 64, [])
    h = compiler.HardenedLayer(layer, layer.weights.copy(), empty,
                               compiler.ShadowStore(np.zeros(0, np.uint16)))
    np.testing.assert_array_equal(out, reference.far_linear_fp16(x, h))


def test_run_layer_disabled_hardening_is_baseline():
    rng = np.random.default_rng(17)
    h = random_hardened(rng, fan_in=32, fan_out=32, dead=4, budget_fraction=0.3)
    h.enabled = False
    x = fp16.encode_array(rng.normal(size=(8, 32)))
    out, rep = dpe.run_layer(x, h, dpe.DpeConfig())
    assert rep.select_synthesis_cycles == 0
    base_out, _ = dpe.run_layer(x, compiler.HardenedLayer(
        models.LinearLayer(h.dram_weights, h.layer.bias, h.layer.activation),
        h.dram_weights, compiler.FarMap(0, 32, 32, []),
        compiler.ShadowStore(np.zeros(0, np.uint16))))
    np.testing.assert_array_equal(out, base_out)


def test_run_layer_single_tile_overhead_ratio():
    rng = np.random.default_rng(19)
    h = random_hardened(rng, fan_in=32, fan_out=32, dead=5, budget_fraction=0.15)
    assert h.farmap.entries
    x = fp16.encode_array(rng.normal(size=(32, 32)))
    _, far_rep = dpe.run_layer(x, h, dpe.DpeConfig(overlap_select=True))
    base = models.LinearLayer(h.dram_weights, h.layer.bias)
    _, base_rep = dpe.run_layer(x, base, dpe.DpeConfig(overlap_select=True))
    assert far_rep.total_cycles / base_rep.total_cycles <= 1.03


def test_run_layer_zero_size_input():
    layer = models.LinearLayer(np.zeros((4, 8), np.uint16), np.zeros(4, np.uint16))
    out, rep = dpe.run_layer(np.zeros((0, 8), np.uint16), layer)
    assert out.shape == (0, 4)
    assert rep.total_cycles == 0


def test_partial_tiles_are_zero_padded():
    rng = np.random.default_rng(18)
    layer = models.LinearLayer(fp16.encode_array(rng.normal(size=(10, 20)) * 0.3),
                               fp16.encode_array(rng.normal(size=10)))
    x = fp16.encode_array(rng.normal(size=(7, 20)))
    out, rep = dpe.run_layer(x, layer)
    assert out.shape == (7, 10)
    assert rep.total_cycles == 1036
    empty = compiler.FarMap(0, 20, 10, [])
    h = compiler.HardenedLayer(layer, layer.weights.copy(), empty,
                               compiler.ShadowStore(np.zeros(0, np.uint16)))
    np.testing.assert_array_equal(out, reference.far_linear_fp16(x, h))


# --- structural property --------------------------------------------------------

FORBIDDEN_CALLS = {"mul", "add", "mul_array", "add_array", "multiply", "divide",
                   "dot", "matmul", "tree_sum", "linear_fp16"}


def assert_no_arithmetic(fn):
    tree = ast.parse(textwrap.dedent(inspect.getsource(fn)))
    for node in ast.walk(tree):
        if isinstance(node, ast.BinOp):
            assert not isinstance(node.op, (ast.Mult, ast.Div, ast.Add, ast.Sub)), \
                f"arithmetic operator in {fn.__name__}"
        if isinstance(node, ast.Call):
            name = node.func.attr if isinstance(node.func, ast.Attribute) else \
                getattr(node.func, "id", "")
            assert name not in FORBIDDEN_CALLS, f"{name} called in {fn.__name__}"


def test_redirect_network_is_arithmetic_free():
    assert_no_arithmetic(dpe.apply_select)


def test_run_layer_out_of_block_donor_rejected():
    # a donor outside the victim's 32-lane block cannot be expressed in a
    # per-tile select vector; the engine must refuse rather than mis-route
    rng = np.random.default_rng(20)
    layer = models.LinearLayer(fp16.encode_array(rng.normal(size=(4, 64))),
                               np.zeros(4, np.uint16))
    entries = [compiler.FarMapEntry(0, 0, compiler.REWIRE, 40, 2, 0),
               compiler.FarMapEntry(0, 40, compiler.REWIRE, 40, 2, 0)]
    h = compiler.HardenedLayer(layer, layer.weights.copy(),
                               compiler.FarMap(0, 64, 4, entries),
                               compiler.ShadowStore(np.zeros(1, np.uint16)))
    with pytest.raises(dpe.FarValidationError) as err:
        dpe.run_layer(fp16.encode_array(rng.normal(size=(4, 64))), h)
    assert err.value.reason == "index"
