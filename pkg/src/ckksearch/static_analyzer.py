"""Structural feasibility checks that never touch data.

Three questions are answered here: does the multiplicative depth fit the
modulus chain (given a bootstrap plan), is the scale schedule consistent
with the chain, and how many bits of lattice security does the parameter
set provide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .errors import Infeasible, UnsupportedRing
from .model_ir import LayerKind, LayerSpec, ModelGraph

if TYPE_CHECKING:
    from .bootstrap import BootstrapPlan
    from .config_space import FheConfig, LayerOverride

# Largest total modulus (bits) that still gives 128-bit classical security
# against the primal uSVP attack, ternary secret, sigma = 3.2.
# Provenance: regenerated with the core-SVP cost model
# (BKZ cost 0.292*beta + 16.4 + log2(8d), root Hermite factor from the
# asymptotic BKZ formula, optimal sample count), script in
# tests/oracles/lattice.py. Entries 12-15 agree with the commonly
# published HE-standard values within one bit; 16 is 1777 rather than the
# frequently quoted 1761 (see the decisions ledger).
MAX_LOGQ_128: dict[int, int] = {
    10: 27,
    11: 54,
    12: 109,
    13: 218,
    14: 438,
    15: 881,
    16: 1777,
    17: 3576,
}
REFERENCE_SIGMA = 3.2
LEVEL_RESERVE = 1


@dataclass(frozen=True)
class DepthReport:
    per_layer: dict[str, int]
    cumulative: tuple[int, ...]
    remaining_after: tuple[int, ...]
    depth_ok: bool
    first_overflow_layer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_layer": dict(self.per_layer),
            "cumulative": list(self.cumulative),
            "remaining_after": list(self.remaining_after),
            "depth_ok": self.depth_ok,
            "first_overflow_layer": self.first_overflow_layer,
        }


@dataclass(frozen=True)
class StaticReport:
    depth_ok: bool
    sec_bits: int
    scale_ok: bool
    reasons: tuple[str, ...] = ()
    depth: DepthReport | None = None
    plan: BootstrapPlan | None = field(default=None, compare=False)

    @property
    def passed(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict[str, Any]:
        return {
            "depth_ok": self.depth_ok,
            "sec_bits": self.sec_bits,
            "scale_ok": self.scale_ok,
            "reasons": list(self.reasons),
            "depth": None if self.depth is None else self.depth.to_dict(),
            "plan": None if self.plan is None else self.plan.to_dict(),
        }


def activation_levels(degree: int) -> int:
    return math.ceil(math.log2(degree + 1))


def layer_depth_cost(layer: LayerSpec, override: LayerOverride | None = None) -> int:
    """Levels consumed by one layer."""
    if layer.kind is LayerKind.FLATTEN:
        return 0
    if layer.kind is LayerKind.ACT_POLY:
        degree = layer.act_degree
        if override is not None and override.act_degree is not None:
            degree = override.act_degree
        return activation_levels(degree)
    return 1


def depth_costs(graph: ModelGraph, config: FheConfig) -> dict[str, int]:
    return {spec.id: layer_depth_cost(spec, config.override(spec.id)) for spec in graph.layers}


def check_depth(graph: ModelGraph, config: FheConfig, plan: BootstrapPlan | None = None) -> DepthReport:
    """Walk the layers, spending levels and refreshing them at bootstraps."""
    from .bootstrap import L_BOOT

    usable = config.global_config.usable_levels
    boots = set(plan.boot_after) if plan is not None else set()
    costs = depth_costs(graph, config)
    remaining = usable
    total = 0
    cumulative: list[int] = []
    remaining_after: list[int] = []
    overflow: str | None = None
    for spec in graph.layers:
        cost = costs[spec.id]
        if cost > remaining and overflow is None:
            overflow = spec.id
        remaining -= cost
        total += cost
        cumulative.append(total)
        remaining_after.append(remaining)
        if spec.id in boots:
            remaining = max(0, usable - L_BOOT)
    return DepthReport(
        per_layer=costs,
        cumulative=tuple(cumulative),
        remaining_after=tuple(remaining_after),
        depth_ok=overflow is None,
        first_overflow_layer=overflow,
    )


def estimate_security(log_n: int, log_q_total: int, sigma: float = REFERENCE_SIGMA) -> int:
    """Security bits by 1/logQ interpolation from the 128-bit anchor table.

    A wider error distribution buys extra modulus headroom; this is folded
    in as log2(sigma / 3.2) bits taken off the effective modulus.
    """
    if log_n not in MAX_LOGQ_128:
        raise UnsupportedRing(f"log_n={log_n} outside the security table {min(MAX_LOGQ_128)}..{max(MAX_LOGQ_128)}")
    if log_q_total <= 0:
        raise ValueError("log_q_total must be positive")
    effective = log_q_total - math.log2(sigma / REFERENCE_SIGMA)
    if effective <= 0:
        effective = 1e-9
    return math.floor(128 * MAX_LOGQ_128[log_n] / effective)


def analyze(graph: ModelGraph, config: FheConfig) -> StaticReport:
    """Depth, scale and security checks; every failure adds one reason."""
    from .bootstrap import schedule

    g = config.global_config
    reasons: list[str] = []

    scale_ok = g.scale_consistent
    if not scale_ok:
        worst = min(g.modulus_chain[1:])
        reasons.append(f"scale: log_scale={g.log_scale} exceeds interior chain entry of {worst} bits")

    costs = depth_costs(graph, config)
    try:
        plan = schedule(graph, config, costs)
    except Infeasible as exc:
        plan = None
        reasons.append(f"depth: no bootstrap schedule fits ({exc})")
    depth = check_depth(graph, config, plan)
    if plan is not None and not depth.depth_ok:  # pragma: no cover - plans are valid by construction
        reasons.append(f"depth: overflow at layer {depth.first_overflow_layer}")

    sec_bits = estimate_security(g.log_n, g.log_q_total, g.sigma)
    if sec_bits < g.security_target_bits:
        reasons.append(
            f"security: sec_bits={sec_bits} below target {g.security_target_bits} "
            f"(log_n={g.log_n}, log_q_total={g.log_q_total})"
        )
    return StaticReport(
        depth_ok=plan is not None and depth.depth_ok,
        sec_bits=sec_bits,
        scale_ok=scale_ok,
        reasons=tuple(reasons),
        depth=depth,
        plan=plan,
    )
