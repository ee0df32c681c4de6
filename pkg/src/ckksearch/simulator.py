"""Cleartext simulation with CKKS metadata tracking (CLEAR_ONLY fidelity).

Values travel as float64 tensors. Two error sources are tracked against an
exact reference pass:

* activation error: the backend's fixed polynomial is emulated as
  ``relu(x) + e * B * T_{d+1}(x / B)``, i.e. a uniform-norm error of ``e``
  relative to the input range ``B`` shaped like the Chebyshev alternation;
* encoding error: a per-element linear envelope that grows by half a
  quantization step at each level and is propagated through ``|W|``.

Layer MAE is the mean of ``|activation error| + envelope`` at the layer
output, which makes it an upper-envelope estimate and keeps it monotone in
the scale.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bootstrap import BootstrapPlan
from .config_space import (
    Embedding,
    FheConfig,
    effective_act_degree,
    effective_block_cap,
    effective_embedding,
    effective_gap,
    n_diagonals,
)
from .cost_model import CostCoefficients, PrimitiveCounts, SEED_COEFFICIENTS, predict
from .errors import BatchShapeMismatch, ZeroCost
from .model_ir import LayerKind, LayerSpec, ModelGraph
from .static_analyzer import StaticReport, check_depth, depth_costs

CALIBRATION_SEED = 20240601
CALIBRATION_BATCH = 8
BOOTSTRAP_NOISE_BITS = 10  # bootstrap error relative to a fresh encoding step
MARGIN_THRESHOLD_LEVELS = 2


# --------------------------------------------------------------- counting


def _ceil_log2(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def count_primitives(
    layer: LayerSpec,
    config: FheConfig,
    levels_live: int = 1,
    boot: int = 0,
) -> PrimitiveCounts:
    """Primitive counts of one layer under the packing model."""
    slots = config.global_config.slots
    kind = layer.kind
    mul = rot = 0
    if kind is LayerKind.LINEAR:
        n_diag = n_diagonals(layer)
        mul = n_diag
        if effective_embedding(layer, config) is Embedding.HYBRID:
            g = effective_gap(layer, config)
            rot = (g - 1) + math.ceil(n_diag / g) - 1
        else:
            rot = n_diag - 1
    elif kind is LayerKind.CONV2D:
        k2 = layer.kernel * layer.kernel
        mul = k2 * layer.channels_in
        if effective_embedding(layer, config) is Embedding.HYBRID:
            rot = (k2 - 1) + _ceil_log2(layer.channels_in)
        else:
            rot = (k2 - 1) + (layer.channels_in - 1)
    elif kind is LayerKind.ACT_POLY:
        mul = effective_act_degree(layer, config) - 1
    elif kind is LayerKind.AVG_POOL:
        mul = 1
        rot = _ceil_log2(layer.stride * layer.stride)
    else:
        return PrimitiveCounts(0, 0, boot, 0.0)
    blocks = math.ceil(layer.out_elems / slots)
    cap = effective_block_cap(layer, config)
    if cap is not None:
        blocks = min(blocks, cap)
    return PrimitiveCounts(mul, rot, boot, float(blocks * max(1, levels_live)))


def level_trace(graph: ModelGraph, config: FheConfig, plan: BootstrapPlan | None) -> tuple[list[int], list[int]]:
    """Remaining levels before and after each layer under the plan."""
    report = check_depth(graph, config, plan)
    after = list(report.remaining_after)
    before = []
    for i, spec in enumerate(graph.layers):
        before.append(after[i] + report.per_layer[spec.id])
    return before, after


def layer_counts(graph: ModelGraph, config: FheConfig, plan: BootstrapPlan | None) -> dict[str, PrimitiveCounts]:
    before, _ = level_trace(graph, config, plan)
    boots = set(plan.boot_after) if plan is not None else set()
    return {
        spec.id: count_primitives(spec, config, levels_live=max(0, before[i]) + 1, boot=int(spec.id in boots))
        for i, spec in enumerate(graph.layers)
    }


def proxy_latency(graph: ModelGraph, config: FheConfig, plan: BootstrapPlan | None, coeffs: CostCoefficients) -> float:
    try:
        return predict(layer_counts(graph, config, plan), coeffs).total
    except ZeroCost:
        return 0.0


# --------------------------------------------------------------- profiles


@dataclass(frozen=True)
class LayerProfile:
    layer_id: str
    kind: str
    shape_in: tuple[int, ...]
    shape_out: tuple[int, ...]
    runtime_fraction: float
    slot_utilization: float
    counts: PrimitiveCounts
    rot_norm: float
    layer_mae: float
    eff_bits: float
    noise_margin_bits: float
    low_margin: int
    act_degree: int | None = None
    act_error: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "s": {"layer_id": self.layer_id, "kind": self.kind, "shape_in": list(self.shape_in), "shape_out": list(self.shape_out)},
            "p": {
                "runtime_fraction": self.runtime_fraction,
                "slot_utilization": self.slot_utilization,
                "counts": self.counts.to_dict(),
                "rot_norm": self.rot_norm,
            },
            "n": {
                "layer_mae": self.layer_mae,
                "eff_bits": self.eff_bits,
                "noise_margin_bits": self.noise_margin_bits,
                "low_margin": self.low_margin,
                "act_degree": self.act_degree,
                "act_error": self.act_error,
            },
        }


@dataclass(frozen=True)
class ClearRunReport:
    profiles: dict[str, LayerProfile]
    global_mae: float
    precision_bits: float
    proxy_latency: float
    gates: dict[str, bool] = field(default_factory=dict)

    def with_runtime_shares(self, shares: Mapping[str, float]) -> ClearRunReport:
        """Replace proxy runtime fractions with measured ones."""
        profiles = {lid: replace(p, runtime_fraction=float(shares.get(lid, 0.0))) for lid, p in self.profiles.items()}
        return replace(self, profiles=profiles)

    def to_dict(self) -> dict[str, Any]:
        return {
            "profiles": {lid: p.to_dict() for lid, p in self.profiles.items()},
            "global_mae": self.global_mae,
            "precision_bits": self.precision_bits,
            "proxy_latency": self.proxy_latency,
            "gates": dict(self.gates),
        }


def precision_from_mae(mae: float, cap_bits: float | None = None) -> float:
    """Effective bits: -log2(MAE), or the cap when the error vanishes."""
    if mae > 0:
        return -math.log2(mae)
    if cap_bits is None:
        raise ValueError("zero MAE needs a cap")
    return float(cap_bits)


def calibration_batch(input_shape: tuple[int, ...], size: int = CALIBRATION_BATCH, seed: int = CALIBRATION_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(size, *input_shape))


def _layer_rng(layer: LayerSpec) -> np.random.Generator:
    key = f"{layer.id}|{layer.kind.value}|{layer.shape_in}|{layer.shape_out}".encode()
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key).digest()[:8], "little"))


def _weights(layer: LayerSpec) -> np.ndarray:
    rng = _layer_rng(layer)
    if layer.kind is LayerKind.LINEAR:
        fan_in = layer.in_elems
        bound = math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=(layer.out_elems, fan_in))
    k, cin = layer.kernel, layer.channels_in
    bound = math.sqrt(3.0 / (cin * k * k))
    return rng.uniform(-bound, bound, size=(layer.channels_out, cin, k, k))


def _conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,ocij->bohw", win, w)


def _pool(x: np.ndarray, s: int) -> np.ndarray:
    b, c, h, w = x.shape
    x = x[:, :, : (h // s) * s, : (w // s) * s]
    return x.reshape(b, c, h // s, s, w // s, s).mean(axis=(3, 5))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _chebyshev(n: int, t: np.ndarray) -> np.ndarray:
    return np.cos(n * np.arccos(np.clip(t, -1.0, 1.0)))


def emulated_act_error(layer: LayerSpec, config: FheConfig) -> float:
    """Uniform error of the activation at its effective degree.

    Lowering the degree scales the declared error by (d0 + 1) / (d + 1),
    the Jackson-type rate for Lipschitz targets.
    """
    d0 = layer.act_degree
    d = effective_act_degree(layer, config)
    return layer.act_error * (d0 + 1) / (d + 1)


def simulate(
    graph: ModelGraph,
    config: FheConfig,
    plan: BootstrapPlan | None,
    batch: np.ndarray | None = None,
    coeffs: CostCoefficients = SEED_COEFFICIENTS,
) -> ClearRunReport:
    """CLEAR_ONLY forward pass with error tracking and per-layer profiles."""
    if batch is None:
        batch = calibration_batch(graph.input_shape)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(graph.input_shape) + 1 or tuple(batch.shape[1:]) != tuple(graph.input_shape):
        raise BatchShapeMismatch(
            f"batch shape {list(batch.shape)} does not match input_shape {list(graph.input_shape)} (plus batch axis)"
        )
    g = config.global_config
    delta = 2.0 ** (-g.log_scale - 1)
    boots = set(plan.boot_after) if plan is not None else set()
    costs = depth_costs(graph, config)
    before, after = level_trace(graph, config, plan)
    interior = g.modulus_chain[1:]

    ref = batch
    emu = batch  # activation error only, no quantization
    env = np.zeros(graph.input_shape)  # encoding-error envelope, per element

    maes: dict[str, float] = {}
    margins: dict[str, float] = {}
    for i, spec in enumerate(graph.layers):
        kind = spec.kind
        levels = costs[spec.id]
        if kind is LayerKind.LINEAR:
            w = _weights(spec)
            ref = ref @ w.T
            emu = emu @ w.T
            env = np.abs(w) @ env + delta
        elif kind is LayerKind.CONV2D:
            w = _weights(spec)
            ref = _conv(ref, w, spec.stride)
            emu = _conv(emu, w, spec.stride)
            env = _conv(env[None], np.abs(w), spec.stride)[0] + delta
        elif kind is LayerKind.AVG_POOL:
            ref = _pool(ref, spec.stride)
            emu = _pool(emu, spec.stride)
            env = _pool(env[None], spec.stride)[0] + delta
        elif kind is LayerKind.FLATTEN:
            ref = ref.reshape(ref.shape[0], -1)
            emu = emu.reshape(emu.shape[0], -1)
            env = env.reshape(-1)
        elif kind is LayerKind.ACT_POLY:
            bound = float(np.max(np.abs(ref))) or 1.0
            err = emulated_act_error(spec, config)
            d = effective_act_degree(spec, config)
            emu = _relu(emu) + err * bound * _chebyshev(d + 1, emu / bound)
            ref = _relu(ref)
            env = env + levels * delta  # relu is 1-Lipschitz
        if spec.id in boots:
            env = env + delta * 2.0**BOOTSTRAP_NOISE_BITS
        maes[spec.id] = float(np.mean(np.abs(emu - ref) + env))
        remaining = max(0, after[i])
        margins[spec.id] = float(sum(interior[:remaining]))

    global_mae = maes[graph.layers[-1].id]
    final_margin = margins[graph.layers[-1].id]
    precision = precision_from_mae(global_mae, min(g.log_scale, final_margin))

    counts = layer_counts(graph, config, plan)
    try:
        pred = predict(counts, coeffs)
        shares, proxy = pred.shares, pred.total
    except ZeroCost:
        n = len(graph.layers)
        shares, proxy = {spec.id: 1.0 / n for spec in graph.layers}, 0.0
    max_rot = max(c.rot for c in counts.values())
    threshold = MARGIN_THRESHOLD_LEVELS * g.log_scale

    profiles: dict[str, LayerProfile] = {}
    for spec in graph.layers:
        c = counts[spec.id]
        blocks = math.ceil(spec.out_elems / g.slots)
        mae = maes[spec.id]
        profiles[spec.id] = LayerProfile(
            layer_id=spec.id,
            kind=spec.kind.value,
            shape_in=spec.shape_in,
            shape_out=spec.shape_out,
            runtime_fraction=shares[spec.id],
            slot_utilization=spec.out_elems / (blocks * g.slots),
            counts=c,
            rot_norm=c.rot / max_rot if max_rot else 0.0,
            layer_mae=mae,
            eff_bits=precision_from_mae(mae, min(g.log_scale, margins[spec.id])),
            noise_margin_bits=margins[spec.id],
            low_margin=int(margins[spec.id] < threshold),
            act_degree=effective_act_degree(spec, config),
            act_error=emulated_act_error(spec, config) if spec.kind is LayerKind.ACT_POLY else None,
        )
    return ClearRunReport(profiles=profiles, global_mae=global_mae, precision_bits=precision, proxy_latency=proxy)


# ------------------------------------------------------------------ gates


@dataclass(frozen=True)
class GateConfig:
    mae_max: float = 1e-2
    precision_min_bits: float = 8.0
    layer_mae_max: float = 5e-2
    security_target_bits: int = 128
    latency_budget_s: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "mae_max": self.mae_max,
            "precision_min_bits": self.precision_min_bits,
            "layer_mae_max": self.layer_mae_max,
            "security_target_bits": self.security_target_bits,
            "latency_budget_s": self.latency_budget_s,
        }


@dataclass(frozen=True)
class GateVerdict:
    passed: bool
    gates: dict[str, bool]
    reasons: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "gates": dict(self.gates), "reasons": list(self.reasons)}


def evaluate_gates(
    static: StaticReport,
    gates: GateConfig,
    mae: float | None = None,
    precision_bits: float | None = None,
    layer_maes: Mapping[str, float] | None = None,
    latency_s: float | None = None,
) -> GateVerdict:
    """Gate verdict from whichever metrics are available at this fidelity."""
    result: dict[str, bool] = {}
    reasons: list[str] = []

    def gate(name: str, ok: bool, why: str) -> None:
        result[name] = ok
        if not ok:
            reasons.append(why)

    gate("depth", static.depth_ok, "depth: configuration does not fit the modulus chain")
    gate("scale", static.scale_ok, "scale: log_scale inconsistent with the modulus chain")
    gate(
        "security",
        static.sec_bits >= gates.security_target_bits and not any(r.startswith("security") for r in static.reasons),
        f"security: sec_bits={static.sec_bits} below target",
    )
    if mae is not None:
        gate("mae", mae <= gates.mae_max, f"mae: {mae:.3g} exceeds mae_max {gates.mae_max:.3g}")
    if precision_bits is not None:
        gate(
            "precision",
            precision_bits >= gates.precision_min_bits,
            f"precision: {precision_bits:.2f} bits below minimum {gates.precision_min_bits}",
        )
    if layer_maes is not None:
        worst = [lid for lid, v in layer_maes.items() if v > gates.layer_mae_max]
        gate("layer_mae", not worst, f"layer_mae: layers {worst} exceed {gates.layer_mae_max:.3g}")
    if latency_s is not None and gates.latency_budget_s is not None:
        gate(
            "latency",
            latency_s <= gates.latency_budget_s,
            f"latency: {latency_s:.3f}s exceeds budget {gates.latency_budget_s}s",
        )
    return GateVerdict(passed=all(result.values()), gates=result, reasons=tuple(reasons))


def check_gates(report: ClearRunReport, static: StaticReport, gates: GateConfig) -> GateVerdict:
    return evaluate_gates(
        static,
        gates,
        mae=report.global_mae,
        precision_bits=report.precision_bits,
        layer_maes={lid: p.layer_mae for lid, p in report.profiles.items()},
        latency_s=report.proxy_latency,
    )
