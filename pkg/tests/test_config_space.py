import random

import pytest
from hypothesis import given, settings, strategies as st

from ckksearch.config_space import (
    Direction,
    DirectionKind,
    Embedding,
    FheConfig,
    GlobalConfig,
    LayerOverride,
    Scope,
    apply_direction,
    config_digest,
    enumerate_directions,
    parse_config,
    serialize_config,
    validate_config,
)
from ckksearch.errors import InvariantViolation, MaskViolation, SchemaError, ScopeViolation
from ckksearch.model_ir import graph_from_dict
from conftest import make_config
from graphgen import random_graph_doc

D = DirectionKind


def test_shorten_drops_last_entry(lenet):
    cfg = make_config(chain=(60, 40, 40, 40, 40))
    out = apply_direction(cfg, Direction(D.SHORTEN_MODULUS_TAIL), Scope.GLOBAL_AGENT, lenet)
    assert out.global_config.modulus_chain == (60, 40, 40, 40)
    assert cfg.global_config.modulus_chain == (60, 40, 40, 40, 40)


def test_shorten_floor(lenet):
    cfg = make_config(chain=(60, 40))
    with pytest.raises(InvariantViolation):
        apply_direction(cfg, Direction(D.SHORTEN_MODULUS_TAIL), Scope.GLOBAL_AGENT, lenet)


def test_extend_appends_scale_sized_prime(lenet):
    cfg = make_config(chain=(60, 40, 40), log_scale=36)
    out = apply_direction(cfg, Direction(D.EXTEND_MODULUS_TAIL), Scope.GLOBAL_AGENT, lenet)
    assert out.global_config.modulus_chain == (60, 40, 40, 36)


def test_relax_and_tighten_step(lenet):
    cfg = make_config(log_scale=38)
    relaxed = apply_direction(cfg, Direction(D.RELAX_SCALE_ONE_STEP), Scope.GLOBAL_AGENT, lenet)
    assert relaxed.global_config.log_scale == 36
    tight = apply_direction(relaxed, Direction(D.TIGHTEN_SCALE_ONE_STEP), Scope.GLOBAL_AGENT, lenet)
    assert tight == cfg
    with pytest.raises(InvariantViolation):
        apply_direction(make_config(log_scale=40), Direction(D.TIGHTEN_SCALE_ONE_STEP), Scope.GLOBAL_AGENT, lenet)


def test_lower_activation_via_compute_layer(lenet, case_config):
    out = apply_direction(
        case_config, Direction(D.LOWER_ACTIVATION_DEGREE, "conv1"), Scope.LAYER_AGENT, lenet, lenet.layer_ids
    )
    assert out.override("act1").act_degree == 15
    again = apply_direction(out, Direction(D.LOWER_ACTIVATION_DEGREE, "act1"), Scope.LAYER_AGENT, lenet)
    assert again.override("act1").act_degree == 7


def test_lower_activation_bottom_of_ladder(lenet, case_config):
    cfg = case_config.with_override(LayerOverride("act1", act_degree=3))
    with pytest.raises(InvariantViolation):
        apply_direction(cfg, Direction(D.LOWER_ACTIVATION_DEGREE, "act1"), Scope.LAYER_AGENT, lenet)


def test_layer_scope_cannot_touch_globals(lenet, case_config):
    with pytest.raises(ScopeViolation):
        apply_direction(case_config, Direction(D.RELAX_SCALE_ONE_STEP), Scope.LAYER_AGENT, lenet)


def test_mask_blocks_shorten(lenet):
    cfg = make_config(chain=(60,) + (40,) * 6)
    with pytest.raises(MaskViolation):
        apply_direction(cfg, Direction(D.SHORTEN_MODULUS_TAIL), Scope.GLOBAL_AGENT, lenet, {"conv1"})


def test_packing_switch_and_back(lenet, case_config):
    hy = apply_direction(case_config, Direction(D.SWITCH_PACKING_SQUARE_TO_HYBRID, "conv2"), Scope.LAYER_AGENT, lenet)
    assert hy.override("conv2").embedding_method is Embedding.HYBRID
    back = apply_direction(hy, Direction(D.SWITCH_PACKING_HYBRID_TO_SQUARE, "conv2"), Scope.LAYER_AGENT, lenet)
    assert back == case_config
    assert back.overrides == ()
    with pytest.raises(InvariantViolation):
        apply_direction(hy, Direction(D.SWITCH_PACKING_SQUARE_TO_HYBRID, "conv2"), Scope.LAYER_AGENT, lenet)
    with pytest.raises(InvariantViolation):
        apply_direction(case_config, Direction(D.SWITCH_PACKING_SQUARE_TO_HYBRID, "act1"), Scope.LAYER_AGENT, lenet)


def test_gap_bounds(lenet, case_config):
    # conv2 has 25 kernel diagonals, default gap 5
    cfg = case_config
    for _ in range(20):
        cfg = apply_direction(cfg, Direction(D.ADJUST_BSGS_GAP_UP, "conv2"), Scope.LAYER_AGENT, lenet)
    assert cfg.override("conv2").bsgs_gap == 25
    with pytest.raises(InvariantViolation):
        apply_direction(cfg, Direction(D.ADJUST_BSGS_GAP_UP, "conv2"), Scope.LAYER_AGENT, lenet)


def test_cap_blocks(lenet, case_config):
    cfg = apply_direction(case_config, Direction(D.CAP_PARALLEL_BLOCKS, "conv1", 2), Scope.LAYER_AGENT, lenet)
    assert cfg.override("conv1").max_parallel_blocks == 2
    with pytest.raises(InvariantViolation):
        apply_direction(cfg, Direction(D.CAP_PARALLEL_BLOCKS, "conv1", 2), Scope.LAYER_AGENT, lenet)


def test_direction_shape_rules():
    with pytest.raises(InvariantViolation):
        Direction(D.ADJUST_BSGS_GAP_UP)
    with pytest.raises(InvariantViolation):
        Direction(D.SHORTEN_MODULUS_TAIL, "conv1")
    d = Direction(D.CAP_PARALLEL_BLOCKS, "conv1", 2)
    assert d.id == "CapParallelBlocks@conv1=2"
    assert Direction.from_dict(d.to_dict()) == d
    with pytest.raises(SchemaError):
        Direction.from_dict({"kind": "DeleteEverything"})


def test_enumerate_layer_agent(lenet, case_config):
    dirs = enumerate_directions(case_config, Scope.LAYER_AGENT, lenet, ["conv2"], lenet.layer_ids)
    ids = {d.id for d in dirs}
    assert "SwitchPackingSquareToHybrid@conv2" in ids
    assert "AdjustBsgsGapUp@conv2" in ids
    assert all(d.kind.layer_local and d.target_layer == "conv2" for d in dirs)


def test_enumerate_empty_bottlenecks(lenet, case_config):
    assert enumerate_directions(case_config, Scope.LAYER_AGENT, lenet, [], ()) == []


def test_enumerate_global_short_chain(lenet):
    cfg = make_config(chain=(60, 40))
    kinds = {d.kind for d in enumerate_directions(cfg, Scope.GLOBAL_AGENT, lenet)}
    assert D.SHORTEN_MODULUS_TAIL not in kinds
    assert D.EXTEND_MODULUS_TAIL in kinds


def test_global_invariants():
    with pytest.raises(InvariantViolation):
        GlobalConfig(9, (60, 40), 40)
    with pytest.raises(InvariantViolation):
        GlobalConfig(15, (60,), 40)
    with pytest.raises(InvariantViolation):
        GlobalConfig(15, (60, 61), 40)
    with pytest.raises(InvariantViolation):
        GlobalConfig(15, (60, 40), 40, bootstrap_interval=0)


def test_override_validation(lenet, case_config):
    with pytest.raises(InvariantViolation):
        validate_config(case_config.with_override(LayerOverride("nope", bsgs_gap=2)), lenet)
    with pytest.raises(InvariantViolation):
        validate_config(case_config.with_override(LayerOverride("conv1", act_degree=3)), lenet)
    with pytest.raises(InvariantViolation):
        validate_config(case_config.with_override(LayerOverride("act1", act_degree=63)), lenet)


def test_digest_behaviour(case_config):
    other = case_config.with_override(LayerOverride("conv2", embedding_method=Embedding.HYBRID))
    assert config_digest(case_config) == config_digest(FheConfig(case_config.global_config))
    assert config_digest(case_config) != config_digest(other)
    assert config_digest(parse_config(serialize_config(other))) == config_digest(other)


def test_parse_config_errors():
    with pytest.raises(SchemaError):
        parse_config('{"global": {"log_n": 15}}')
    with pytest.raises(SchemaError):
        parse_config('{"global": {"log_n": 15, "modulus_chain": [60, 40], "log_scale": 40, "extra": 1}}')
    with pytest.raises(SchemaError):
        parse_config("[]")


# ---------------------------------------------------------------- properties

INVERSES = [
    (D.SHORTEN_MODULUS_TAIL, D.EXTEND_MODULUS_TAIL),
    (D.RELAX_SCALE_ONE_STEP, D.TIGHTEN_SCALE_ONE_STEP),
    (D.INCREASE_BOOTSTRAP_INTERVAL, D.DECREASE_BOOTSTRAP_INTERVAL),
]

configs = st.builds(
    lambda log_n, n, scale, interval: make_config(
        log_n=log_n, chain=(60,) + (scale,) * n, log_scale=scale, bootstrap_interval=interval
    ),
    st.integers(10, 17),
    st.integers(1, 12),
    st.integers(20, 60).filter(lambda s: s % 2 == 0),
    st.integers(1, 4),
)


@settings(max_examples=200, deadline=None)
@given(configs, st.sampled_from(INVERSES))
def test_inverse_pairs_are_identity(cfg, pair):
    g = graph_from_dict(random_graph_doc(random.Random(0)))
    a, b = pair
    try:
        mid = apply_direction(cfg, Direction(a), Scope.GLOBAL_AGENT, g)
        back = apply_direction(mid, Direction(b), Scope.GLOBAL_AGENT, g)
    except InvariantViolation:
        return
    assert back == cfg


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), configs, st.booleans())
def test_enumeration_soundness(seed, cfg, layer_scope):
    rng = random.Random(seed)
    g = graph_from_dict(random_graph_doc(rng))
    scope = Scope.LAYER_AGENT if layer_scope else Scope.GLOBAL_AGENT
    bottlenecks = rng.sample(list(g.layer_ids), k=rng.randint(0, len(g.layers)))
    mask = set(rng.sample(list(g.layer_ids), k=rng.randint(0, 2)))
    for d in enumerate_directions(cfg, scope, g, bottlenecks, mask):
        apply_direction(cfg, d, scope, g, mask)
        if scope is Scope.LAYER_AGENT:
            assert d.target_layer in bottlenecks


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), configs)
def test_layer_agent_sequences_keep_globals(seed, cfg):
    rng = random.Random(seed)
    g = graph_from_dict(random_graph_doc(rng))
    current = cfg
    for _ in range(6):
        options = enumerate_directions(current, Scope.LAYER_AGENT, g, g.layer_ids)
        if not options:
            break
        before = current
        current = apply_direction(current, rng.choice(options), Scope.LAYER_AGENT, g)
        assert before is not current
    assert current.global_config == cfg.global_config
