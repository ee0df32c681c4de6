"""Hierarchical FHE configurations, the direction vocabulary, and patching.

A configuration is a global CKKS parameter block plus sparse per-layer
overrides. Agents never edit a configuration directly; they pick
:class:`Direction` values which :func:`apply_direction` compiles into a new,
validated configuration.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Iterable

from .errors import InvariantViolation, MaskViolation, SchemaError, ScopeViolation
from .model_ir import COMPUTE_KINDS, LayerKind, LayerSpec, ModelGraph

if TYPE_CHECKING:
    from .bootstrap import BootstrapPlan

LOG_N_RANGE = (10, 17)
CHAIN_ENTRY_RANGE = (20, 60)
HEAD_PRIME_BITS = 60
SCALE_STEP_BITS = 2
ACT_DEGREE_LADDER = (31, 15, 7, 3)
DEFAULT_BLOCK_CAP = 2


class Embedding(str, Enum):
    SQUARE = "Square"
    HYBRID = "Hybrid"
    DIAGONAL = "Diagonal"


class Scope(str, Enum):
    GLOBAL_AGENT = "GlobalAgent"
    LAYER_AGENT = "LayerAgent"


class DirectionKind(str, Enum):
    SHORTEN_MODULUS_TAIL = "ShortenModulusTail"
    EXTEND_MODULUS_TAIL = "ExtendModulusTail"
    RELAX_SCALE_ONE_STEP = "RelaxScaleOneStep"
    TIGHTEN_SCALE_ONE_STEP = "TightenScaleOneStep"
    INCREASE_BOOTSTRAP_INTERVAL = "IncreaseBootstrapInterval"
    DECREASE_BOOTSTRAP_INTERVAL = "DecreaseBootstrapInterval"
    SWITCH_PACKING_SQUARE_TO_HYBRID = "SwitchPackingSquareToHybrid"
    SWITCH_PACKING_HYBRID_TO_SQUARE = "SwitchPackingHybridToSquare"
    ADJUST_BSGS_GAP_UP = "AdjustBsgsGapUp"
    ADJUST_BSGS_GAP_DOWN = "AdjustBsgsGapDown"
    LOWER_ACTIVATION_DEGREE = "LowerActivationDegree"
    CAP_PARALLEL_BLOCKS = "CapParallelBlocks"

    @property
    def layer_local(self) -> bool:
        return self in LAYER_LOCAL_KINDS


GLOBAL_KINDS = (
    DirectionKind.SHORTEN_MODULUS_TAIL,
    DirectionKind.EXTEND_MODULUS_TAIL,
    DirectionKind.RELAX_SCALE_ONE_STEP,
    DirectionKind.TIGHTEN_SCALE_ONE_STEP,
    DirectionKind.INCREASE_BOOTSTRAP_INTERVAL,
    DirectionKind.DECREASE_BOOTSTRAP_INTERVAL,
)
LAYER_LOCAL_KINDS = (
    DirectionKind.SWITCH_PACKING_SQUARE_TO_HYBRID,
    DirectionKind.SWITCH_PACKING_HYBRID_TO_SQUARE,
    DirectionKind.ADJUST_BSGS_GAP_UP,
    DirectionKind.ADJUST_BSGS_GAP_DOWN,
    DirectionKind.LOWER_ACTIVATION_DEGREE,
    DirectionKind.CAP_PARALLEL_BLOCKS,
)


def _check_int(value: Any, name: str, lo: int | None = None, hi: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvariantViolation(f"{name} must be an integer, got {value!r}")
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise InvariantViolation(f"{name}={value} outside [{lo}, {hi}]")
    return value


@dataclass(frozen=True)
class GlobalConfig:
    log_n: int
    modulus_chain: tuple[int, ...]
    log_scale: int
    sigma: float = 3.2
    default_embedding: Embedding = Embedding.SQUARE
    bootstrap_interval: int = 1
    security_target_bits: int = 128

    def __post_init__(self) -> None:
        _check_int(self.log_n, "log_n", *LOG_N_RANGE)
        chain = tuple(self.modulus_chain)
        object.__setattr__(self, "modulus_chain", chain)
        if len(chain) < 2:
            raise InvariantViolation("modulus_chain needs at least 2 entries (one is reserved)")
        for bits in chain:
            _check_int(bits, "modulus_chain entry", *CHAIN_ENTRY_RANGE)
        _check_int(self.log_scale, "log_scale", *CHAIN_ENTRY_RANGE)
        _check_int(self.bootstrap_interval, "bootstrap_interval", 1)
        _check_int(self.security_target_bits, "security_target_bits", 1)
        if not isinstance(self.sigma, (int, float)) or not math.isfinite(self.sigma) or self.sigma <= 0:
            raise InvariantViolation(f"sigma must be a positive real, got {self.sigma!r}")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "default_embedding", Embedding(self.default_embedding))

    @property
    def log_q_total(self) -> int:
        return sum(self.modulus_chain)

    @property
    def usable_levels(self) -> int:
        return len(self.modulus_chain) - 1

    @property
    def slots(self) -> int:
        return 2 ** (self.log_n - 1)

    @property
    def scale_consistent(self) -> bool:
        return all(self.log_scale <= bits for bits in self.modulus_chain[1:])

    def to_dict(self) -> dict[str, Any]:
        return {
            "log_n": self.log_n,
            "modulus_chain": list(self.modulus_chain),
            "log_scale": self.log_scale,
            "sigma": self.sigma,
            "default_embedding": self.default_embedding.value,
            "bootstrap_interval": self.bootstrap_interval,
            "security_target_bits": self.security_target_bits,
        }


@dataclass(frozen=True)
class LayerOverride:
    layer_id: str
    embedding_method: Embedding | None = None
    bsgs_gap: int | None = None
    max_parallel_blocks: int | None = None
    act_degree: int | None = None

    def __post_init__(self) -> None:
        if self.embedding_method is not None:
            object.__setattr__(self, "embedding_method", Embedding(self.embedding_method))
        for name in ("bsgs_gap", "max_parallel_blocks", "act_degree"):
            value = getattr(self, name)
            if value is not None:
                _check_int(value, name, 1)

    @property
    def is_empty(self) -> bool:
        return all(
            getattr(self, n) is None for n in ("embedding_method", "bsgs_gap", "max_parallel_blocks", "act_degree")
        )

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        if self.embedding_method is not None:
            doc["embedding_method"] = self.embedding_method.value
        for name in ("bsgs_gap", "max_parallel_blocks", "act_degree"):
            if getattr(self, name) is not None:
                doc[name] = getattr(self, name)
        return doc


@dataclass(frozen=True)
class FheConfig:
    global_config: GlobalConfig
    overrides: tuple[LayerOverride, ...] = ()

    def __post_init__(self) -> None:
        ovs = tuple(sorted((o for o in self.overrides if not o.is_empty), key=lambda o: o.layer_id))
        ids = [o.layer_id for o in ovs]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("duplicate override for the same layer")
        object.__setattr__(self, "overrides", ovs)

    def override(self, layer_id: str) -> LayerOverride | None:
        for ov in self.overrides:
            if ov.layer_id == layer_id:
                return ov
        return None

    def with_override(self, ov: LayerOverride) -> FheConfig:
        rest = tuple(o for o in self.overrides if o.layer_id != ov.layer_id)
        return FheConfig(self.global_config, rest + (ov,))

    def to_dict(self) -> dict[str, Any]:
        return {
            "global": self.global_config.to_dict(),
            "overrides": {o.layer_id: o.to_dict() for o in self.overrides},
        }


@dataclass(frozen=True)
class Direction:
    kind: DirectionKind
    target_layer: str | None = None
    arg: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DirectionKind(self.kind))
        if self.kind.layer_local and not self.target_layer:
            raise InvariantViolation(f"{self.kind.value} needs a target layer")
        if not self.kind.layer_local and self.target_layer is not None:
            raise InvariantViolation(f"{self.kind.value} is global and takes no target layer")
        if self.arg is not None:
            _check_int(self.arg, "direction arg", 1)
        if self.kind is DirectionKind.CAP_PARALLEL_BLOCKS and self.arg is None:
            raise InvariantViolation("CapParallelBlocks needs a block cap argument")

    @property
    def id(self) -> str:
        out = self.kind.value
        if self.target_layer is not None:
            out += f"@{self.target_layer}"
        if self.arg is not None:
            out += f"={self.arg}"
        return out

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind.value}
        if self.target_layer is not None:
            doc["target_layer"] = self.target_layer
        if self.arg is not None:
            doc["arg"] = self.arg
        return doc

    @classmethod
    def from_dict(cls, doc: Any) -> Direction:
        if not isinstance(doc, dict) or "kind" not in doc:
            raise SchemaError("direction must be an object with a 'kind'")
        extra = doc.keys() - {"kind", "target_layer", "arg"}
        if extra:
            raise SchemaError(f"direction has unknown fields {sorted(extra)}")
        try:
            kind = DirectionKind(doc["kind"])
        except ValueError:
            raise SchemaError(f"unknown direction kind {doc['kind']!r}") from None
        return cls(kind, doc.get("target_layer"), doc.get("arg"))


# ---------------------------------------------------------------- documents


def config_from_dict(doc: Any) -> FheConfig:
    if not isinstance(doc, dict) or "global" not in doc:
        raise SchemaError("config document needs a 'global' object")
    extra = doc.keys() - {"global", "overrides"}
    if extra:
        raise SchemaError(f"config document has unknown fields {sorted(extra)}")
    g = doc["global"]
    allowed = {
        "log_n", "modulus_chain", "log_scale", "sigma", "default_embedding",
        "bootstrap_interval", "security_target_bits",
    }
    if not isinstance(g, dict):
        raise SchemaError("'global' must be an object")
    if g.keys() - allowed:
        raise SchemaError(f"global has unknown fields {sorted(g.keys() - allowed)}")
    if {"log_n", "modulus_chain", "log_scale"} - g.keys():
        raise SchemaError("global requires log_n, modulus_chain, log_scale")
    if not isinstance(g["modulus_chain"], list):
        raise SchemaError("modulus_chain must be a list")
    try:
        glob = GlobalConfig(
            log_n=g["log_n"],
            modulus_chain=tuple(g["modulus_chain"]),
            log_scale=g["log_scale"],
            sigma=g.get("sigma", 3.2),
            default_embedding=Embedding(g.get("default_embedding", "Square")),
            bootstrap_interval=g.get("bootstrap_interval", 1),
            security_target_bits=g.get("security_target_bits", 128),
        )
        overrides = []
        raw_ovs = doc.get("overrides", {})
        if not isinstance(raw_ovs, dict):
            raise SchemaError("overrides must be an object keyed by layer id")
        for layer_id, ov in raw_ovs.items():
            if not isinstance(ov, dict):
                raise SchemaError(f"override for {layer_id} must be an object")
            bad = ov.keys() - {"embedding_method", "bsgs_gap", "max_parallel_blocks", "act_degree"}
            if bad:
                raise SchemaError(f"override for {layer_id} has unknown fields {sorted(bad)}")
            overrides.append(LayerOverride(layer_id=layer_id, **ov))
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    return FheConfig(glob, tuple(overrides))


def parse_config(text: str) -> FheConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config document is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def serialize_config(config: FheConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def config_digest(config: FheConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------- packing helpers


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def n_diagonals(layer: LayerSpec) -> int:
    """Number of plaintext diagonals a packed linear operator iterates over."""
    if layer.kind is LayerKind.LINEAR:
        return _next_pow2(layer.in_elems)
    if layer.kind is LayerKind.CONV2D:
        return layer.kernel * layer.kernel
    return 1


def default_bsgs_gap(layer: LayerSpec) -> int:
    return max(1, int(math.floor(math.sqrt(n_diagonals(layer)) + 0.5)))


def effective_embedding(layer: LayerSpec, config: FheConfig) -> Embedding:
    ov = config.override(layer.id)
    if ov is not None and ov.embedding_method is not None:
        return ov.embedding_method
    return config.global_config.default_embedding


def effective_gap(layer: LayerSpec, config: FheConfig) -> int:
    ov = config.override(layer.id)
    if ov is not None and ov.bsgs_gap is not None:
        return ov.bsgs_gap
    return default_bsgs_gap(layer)


def effective_act_degree(layer: LayerSpec, config: FheConfig) -> int | None:
    if layer.kind is not LayerKind.ACT_POLY:
        return None
    ov = config.override(layer.id)
    if ov is not None and ov.act_degree is not None:
        return ov.act_degree
    return layer.act_degree


def effective_block_cap(layer: LayerSpec, config: FheConfig) -> int | None:
    ov = config.override(layer.id)
    return None if ov is None else ov.max_parallel_blocks


def lower_degree_step(degree: int) -> int | None:
    lower = [d for d in ACT_DEGREE_LADDER if d < degree]
    return max(lower) if lower else None


def next_block_cap(cap: int | None) -> int | None:
    if cap is None or cap > DEFAULT_BLOCK_CAP:
        return DEFAULT_BLOCK_CAP
    return cap - 1 if cap > 1 else None


def validate_config(config: FheConfig, graph: ModelGraph) -> None:
    """Raise InvariantViolation if overrides do not fit the graph."""
    ids = set(graph.layer_ids)
    for ov in config.overrides:
        if ov.layer_id not in ids:
            raise InvariantViolation(f"override references unknown layer {ov.layer_id!r}")
        layer = graph.layer(ov.layer_id)
        if ov.act_degree is not None:
            if layer.kind is not LayerKind.ACT_POLY:
                raise InvariantViolation(f"act_degree override on non-activation layer {layer.id}")
            if ov.act_degree > layer.act_degree:
                raise InvariantViolation(
                    f"act_degree override {ov.act_degree} exceeds declared degree {layer.act_degree} on {layer.id}"
                )
        if layer.kind not in COMPUTE_KINDS and (
            ov.embedding_method is not None or ov.bsgs_gap is not None or ov.max_parallel_blocks is not None
        ):
            raise InvariantViolation(f"packing override on non-linear layer {layer.id}")
        if ov.bsgs_gap is not None and ov.bsgs_gap > n_diagonals(layer):
            raise InvariantViolation(f"bsgs_gap {ov.bsgs_gap} exceeds diagonal count on {layer.id}")


def _normalized(ov: LayerOverride, layer: LayerSpec, config: FheConfig) -> LayerOverride:
    """Drop override fields that restate the default they would replace."""
    if ov.embedding_method == config.global_config.default_embedding:
        ov = replace(ov, embedding_method=None)
    if ov.bsgs_gap is not None and ov.bsgs_gap == default_bsgs_gap(layer):
        ov = replace(ov, bsgs_gap=None)
    if ov.act_degree is not None and ov.act_degree == layer.act_degree:
        ov = replace(ov, act_degree=None)
    return ov


# ----------------------------------------------------------------- patching


def _resolve_activation(graph: ModelGraph, target: str) -> LayerSpec:
    layer = graph.layer(target)
    if layer.kind is LayerKind.ACT_POLY:
        return layer
    fused = graph.fused_activation(target)
    if fused is None:
        raise InvariantViolation(f"{target} has no activation polynomial to lower")
    return fused


def _patch_layer(config: FheConfig, layer: LayerSpec, **changes: Any) -> FheConfig:
    ov = config.override(layer.id) or LayerOverride(layer_id=layer.id)
    ov = _normalized(replace(ov, **changes), layer, config)
    return config.with_override(ov)


def _apply_global(config: FheConfig, d: Direction) -> FheConfig:
    g = config.global_config
    k = d.kind
    if k is DirectionKind.SHORTEN_MODULUS_TAIL:
        if len(g.modulus_chain) <= 2:
            raise InvariantViolation("modulus chain cannot drop below 2 entries")
        new = replace(g, modulus_chain=g.modulus_chain[:-1])
    elif k is DirectionKind.EXTEND_MODULUS_TAIL:
        new = replace(g, modulus_chain=g.modulus_chain + (g.log_scale,))
    elif k is DirectionKind.RELAX_SCALE_ONE_STEP:
        if g.log_scale - SCALE_STEP_BITS < CHAIN_ENTRY_RANGE[0]:
            raise InvariantViolation("log_scale already at its floor")
        new = replace(g, log_scale=g.log_scale - SCALE_STEP_BITS)
    elif k is DirectionKind.TIGHTEN_SCALE_ONE_STEP:
        target = g.log_scale + SCALE_STEP_BITS
        if target > min(g.modulus_chain[1:]):
            raise InvariantViolation(f"log_scale {target} would exceed an interior chain entry")
        new = replace(g, log_scale=target)
    elif k is DirectionKind.INCREASE_BOOTSTRAP_INTERVAL:
        new = replace(g, bootstrap_interval=g.bootstrap_interval + 1)
    elif k is DirectionKind.DECREASE_BOOTSTRAP_INTERVAL:
        if g.bootstrap_interval <= 1:
            raise InvariantViolation("bootstrap_interval already 1")
        new = replace(g, bootstrap_interval=g.bootstrap_interval - 1)
    else:  # pragma: no cover - guarded by caller
        raise InvariantViolation(f"{k.value} is not a global direction")
    return FheConfig(new, config.overrides)


def _apply_local(config: FheConfig, d: Direction, graph: ModelGraph) -> FheConfig:
    try:
        layer = graph.layer(d.target_layer)
    except KeyError:
        raise InvariantViolation(f"direction targets unknown layer {d.target_layer!r}") from None
    k = d.kind
    if k is DirectionKind.LOWER_ACTIVATION_DEGREE:
        act = _resolve_activation(graph, layer.id)
        current = effective_act_degree(act, config)
        lower = lower_degree_step(current)
        if lower is None:
            raise InvariantViolation(f"activation {act.id} already at the lowest ladder degree")
        return _patch_layer(config, act, act_degree=lower)

    if layer.kind not in COMPUTE_KINDS:
        raise InvariantViolation(f"{k.value} applies to Linear/Conv2d layers, not {layer.kind.value}")
    if k is DirectionKind.SWITCH_PACKING_SQUARE_TO_HYBRID:
        if effective_embedding(layer, config) is Embedding.HYBRID:
            raise InvariantViolation(f"{layer.id} is already Hybrid")
        return _patch_layer(config, layer, embedding_method=Embedding.HYBRID)
    if k is DirectionKind.SWITCH_PACKING_HYBRID_TO_SQUARE:
        if effective_embedding(layer, config) is not Embedding.HYBRID:
            raise InvariantViolation(f"{layer.id} is not Hybrid")
        return _patch_layer(config, layer, embedding_method=Embedding.SQUARE)
    if k is DirectionKind.ADJUST_BSGS_GAP_UP:
        gap = effective_gap(layer, config) + 1
        if gap > n_diagonals(layer):
            raise InvariantViolation(f"bsgs_gap on {layer.id} already at its maximum")
        return _patch_layer(config, layer, bsgs_gap=gap)
    if k is DirectionKind.ADJUST_BSGS_GAP_DOWN:
        gap = effective_gap(layer, config) - 1
        if gap < 1:
            raise InvariantViolation(f"bsgs_gap on {layer.id} already 1")
        return _patch_layer(config, layer, bsgs_gap=gap)
    if k is DirectionKind.CAP_PARALLEL_BLOCKS:
        cap = effective_block_cap(layer, config)
        if cap is not None and d.arg >= cap:
            raise InvariantViolation(f"block cap {d.arg} does not tighten current cap {cap} on {layer.id}")
        return _patch_layer(config, layer, max_parallel_blocks=d.arg)
    raise InvariantViolation(f"{k.value} is not a layer-local direction")  # pragma: no cover


def apply_direction(
    config: FheConfig,
    direction: Direction,
    scope: Scope,
    graph: ModelGraph,
    depth_mask: Iterable[str] = (),
    plan: BootstrapPlan | None = None,
) -> FheConfig:
    """Compile one direction into a new configuration.

    Raises ScopeViolation for a layer agent touching global fields,
    MaskViolation when the depth mask forbids the edit, and
    InvariantViolation when the result would be structurally invalid.
    """
    from .bootstrap import mask_blocks, mask_blocks_without_plan

    scope = Scope(scope)
    if scope is Scope.LAYER_AGENT and not direction.kind.layer_local:
        raise ScopeViolation(f"layer agent may not apply global direction {direction.kind.value}")
    blocked = mask_blocks(plan, direction) if plan is not None else mask_blocks_without_plan(
        frozenset(depth_mask), direction
    )
    if blocked:
        raise MaskViolation(f"{direction.id} is blocked by the depth mask")
    if direction.kind.layer_local:
        patched = _apply_local(config, direction, graph)
    else:
        patched = _apply_global(config, direction)
    validate_config(patched, graph)
    return patched


def enumerate_directions(
    config: FheConfig,
    scope: Scope,
    graph: ModelGraph,
    bottlenecks: Iterable[str] = (),
    depth_mask: Iterable[str] = (),
    plan: BootstrapPlan | None = None,
) -> list[Direction]:
    """All directions that apply cleanly in the given scope, in vocabulary order."""
    scope = Scope(scope)
    mask = frozenset(depth_mask)
    raw: list[Direction] = []
    if scope is Scope.GLOBAL_AGENT:
        raw.extend(Direction(k) for k in GLOBAL_KINDS)
    else:
        targets = [lid for lid in graph.layer_ids if lid in set(bottlenecks)]
        for lid in targets:
            layer = graph.layer(lid)
            for k in LAYER_LOCAL_KINDS:
                if k is DirectionKind.CAP_PARALLEL_BLOCKS:
                    if layer.kind not in COMPUTE_KINDS:
                        continue
                    cap = next_block_cap(effective_block_cap(layer, config))
                    if cap is None:
                        continue
                    raw.append(Direction(k, lid, cap))
                else:
                    raw.append(Direction(k, lid))
    out = []
    for d in raw:
        try:
            apply_direction(config, d, scope, graph, mask, plan)
        except (InvariantViolation, MaskViolation, ScopeViolation):
            continue
        out.append(d)
    return out


__all__ = [
    "ACT_DEGREE_LADDER",
    "Direction",
    "DirectionKind",
    "Embedding",
    "FheConfig",
    "GlobalConfig",
    "LayerOverride",
    "Scope",
    "apply_direction",
    "config_digest",
    "config_from_dict",
    "enumerate_directions",
    "parse_config",
    "serialize_config",
    "validate_config",
]
