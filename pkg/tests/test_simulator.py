import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckksearch.config_space import Embedding, LayerOverride
from ckksearch.errors import BatchShapeMismatch
from ckksearch.model_ir import graph_from_dict, parse_model
from ckksearch.simulator import (
    GateConfig,
    calibration_batch,
    check_gates,
    count_primitives,
    evaluate_gates,
    precision_from_mae,
    simulate,
)
from ckksearch.static_analyzer import analyze
from conftest import make_config
from graphgen import random_graph_doc

PUBLISHED = [(5.89e-6, 17.37), (1.13e-7, 23.07), (1.31e-6, 19.54), (2.9e-2, 5.12), (1.6e-3, 9.27)]


@pytest.mark.parametrize("mae,bits", PUBLISHED)
def test_precision_rule_matches_published_pairs(mae, bits):
    assert abs(precision_from_mae(mae) - bits) < 0.1


def test_precision_zero_needs_cap():
    assert precision_from_mae(0.0, 24.82) == 24.82
    with pytest.raises(ValueError):
        precision_from_mae(0.0)


def test_conv_counts(lenet, case_config):
    conv2 = lenet.layer("conv2")
    sq = count_primitives(conv2, case_config)
    assert (sq.rot, sq.mul) == (29, 150)
    hy = count_primitives(conv2, case_config.with_override(LayerOverride("conv2", embedding_method=Embedding.HYBRID)))
    assert (hy.rot, hy.mul) == (27, 150)


def test_flatten_counts_zero(lenet, case_config):
    c = count_primitives(lenet.layer("flatten"), case_config)
    assert c.is_zero


def test_linear_counts(mlp):
    fc1 = mlp.layer("fc1")  # fan-in 784, padded to 1024 diagonals
    diag = make_config(log_n=16, chain=(60,) + (40,) * 10, default_embedding=Embedding.DIAGONAL)
    c = count_primitives(fc1, diag)
    assert (c.mul, c.rot) == (1024, 1023)
    hy = diag.with_override(LayerOverride("fc1", embedding_method=Embedding.HYBRID))
    c = count_primitives(fc1, hy)
    assert (c.mul, c.rot) == (1024, 31 + 32 - 1)
    gapped = diag.with_override(LayerOverride("fc1", embedding_method=Embedding.HYBRID, bsgs_gap=16))
    assert count_primitives(fc1, gapped).rot == 15 + 64 - 1


def test_activation_and_pool_counts(lenet, case_config):
    assert count_primitives(lenet.layer("act1"), case_config).mul == 30
    assert count_primitives(lenet.layer("act1"), case_config).rot == 0
    pool = count_primitives(lenet.layer("pool1"), case_config)
    assert (pool.mul, pool.rot) == (1, 2)


def test_mem_cost_blocks_and_cap(lenet):
    cfg = make_config(log_n=10, chain=(60, 40, 40), log_scale=40)  # 512 slots
    conv1 = lenet.layer("conv1")  # 3456 outputs -> 7 blocks
    assert count_primitives(conv1, cfg, levels_live=3).mem_cost == 21
    capped = cfg.with_override(LayerOverride("conv1", max_parallel_blocks=2))
    assert count_primitives(conv1, capped, levels_live=3).mem_cost == 6


def test_flatten_only_graph():
    g = parse_model('{"name": "id", "input_shape": [2, 2, 2], "layers": [{"id": "f", "kind": "Flatten"}]}')
    cfg = make_config(chain=(60, 40, 40), log_scale=40)
    r = simulate(g, cfg, analyze(g, cfg).plan)
    assert r.global_mae == 0.0
    assert r.precision_bits == min(40, 80)


def test_lenet_case_metrics(lenet, case_config):
    r = simulate(lenet, case_config, analyze(lenet, case_config).plan)
    assert 1e-3 < r.global_mae < 2e-3
    assert r.precision_bits == pytest.approx(-math.log2(r.global_mae))
    assert check_gates(r, analyze(lenet, case_config), GateConfig()).passed


def test_batch_shape_mismatch(lenet, case_config):
    with pytest.raises(BatchShapeMismatch):
        simulate(lenet, case_config, None, np.zeros((2, 1, 27, 28)))
    with pytest.raises(BatchShapeMismatch):
        simulate(lenet, case_config, None, np.zeros((1, 28, 28)))


def test_calibration_batch_is_seeded():
    a = calibration_batch((3, 4))
    assert a.shape == (8, 3, 4)
    assert np.array_equal(a, calibration_batch((3, 4)))
    assert a.min() >= -1 and a.max() <= 1


def test_gate_examples(lenet, case_config):
    static = analyze(lenet, case_config)
    g = GateConfig()
    assert evaluate_gates(static, g, mae=3.0e-4, precision_bits=11.63).passed
    v = evaluate_gates(static, g, mae=2.9e-2, precision_bits=5.12)
    assert not v.passed
    assert not v.gates["mae"] and not v.gates["precision"]
    assert len(v.reasons) == 2
    assert evaluate_gates(static, g, mae=1.6e-3, precision_bits=9.27).passed


def test_gate_security_and_latency(lenet, case_config):
    static = analyze(lenet, case_config)
    v = evaluate_gates(static, GateConfig(security_target_bits=300), mae=1e-4, precision_bits=13)
    assert not v.gates["security"]
    v = evaluate_gates(static, GateConfig(latency_budget_s=1.0), latency_s=2.0)
    assert not v.gates["latency"]


def test_low_margin_flag(lenet, case_config):
    r = simulate(lenet, case_config, analyze(lenet, case_config).plan)
    # the final layers run with fewer than two levels left
    assert r.profiles["fc2"].low_margin == 1
    assert r.profiles["conv1"].low_margin == 0


# ---------------------------------------------------------------- properties


def _random_case(seed):
    rng = random.Random(seed)
    doc = random_graph_doc(rng)
    g = graph_from_dict(doc)
    cfg = make_config(log_n=17, chain=(60,) + (60,) * 12, log_scale=rng.choice(range(20, 42, 2)))
    return g, cfg


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_profile_invariants(seed):
    g, cfg = _random_case(seed)
    static = analyze(g, cfg)
    if static.plan is None:
        return
    r = simulate(g, cfg, static.plan)
    fractions = [p.runtime_fraction for p in r.profiles.values()]
    assert abs(sum(fractions) - 1.0) < 1e-9
    for p in r.profiles.values():
        assert 0 <= p.slot_utilization <= 1
        assert 0 <= p.rot_norm <= 1
        assert p.low_margin == int(p.noise_margin_bits < 2 * cfg.global_config.log_scale)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(20, 56).filter(lambda s: s % 2 == 0))
def test_mae_monotone_in_scale(seed, scale):
    g, _ = _random_case(seed)
    lo = make_config(log_n=17, chain=(60,) + (60,) * 12, log_scale=scale)
    hi = make_config(log_n=17, chain=(60,) + (60,) * 12, log_scale=scale + 2)
    plan_lo, plan_hi = analyze(g, lo).plan, analyze(g, hi).plan
    if plan_lo is None:
        return
    assert simulate(g, hi, plan_hi).global_mae <= simulate(g, lo, plan_lo).global_mae


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_simulation_deterministic(seed):
    g, cfg = _random_case(seed)
    plan = analyze(g, cfg).plan
    if plan is None:
        return
    assert simulate(g, cfg, plan).to_dict() == simulate(g, cfg, plan).to_dict()
