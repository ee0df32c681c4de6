"""The ``run_trial`` oracle across four fidelities, and encrypted backends.

Two encrypted backends ship: a synthetic mock whose latencies follow a
hidden linear model, and a replay backend that reads measurements from a
recorded trace. A third, process-based adapter is declared for real CKKS
toolchains but not implemented.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from .config_space import FheConfig, config_digest
from .cost_model import CostCoefficients, PrimitiveCounts, SEED_COEFFICIENTS
from .errors import BackendUnavailable, ConfigError, RecordedMiss
from .model_ir import ModelGraph, architecture_signature
from .simulator import (
    ClearRunReport,
    GateConfig,
    GateVerdict,
    calibration_batch,
    check_gates,
    evaluate_gates,
    layer_counts,
    simulate,
)
from .static_analyzer import StaticReport, analyze
from .trace import TraceRepository, TrialRecord, read_checked_jsonl

DEFAULT_WORKLOAD_RATIO = 10.0


class EvalMode(str, Enum):
    STATIC_ONLY = "STATIC_ONLY"
    CLEAR_ONLY = "CLEAR_ONLY"
    FHE_LIGHT = "FHE_LIGHT"
    FHE_FULL = "FHE_FULL"

    @property
    def rank(self) -> int:
        return _MODE_RANK[self]

    @property
    def encrypted(self) -> bool:
        return self.rank >= 2

    def __lt__(self, other: object) -> bool:  # type: ignore[override]
        if not isinstance(other, EvalMode):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: object) -> bool:  # type: ignore[override]
        if not isinstance(other, EvalMode):
            return NotImplemented
        return self.rank <= other.rank


_MODE_RANK = {EvalMode.STATIC_ONLY: 0, EvalMode.CLEAR_ONLY: 1, EvalMode.FHE_LIGHT: 2, EvalMode.FHE_FULL: 3}


@dataclass(frozen=True)
class Measurement:
    total_s: float
    layer_s: dict[str, float]
    mae: float
    precision_bits: float


@dataclass(frozen=True)
class Metrics:
    mode: EvalMode
    static: StaticReport
    clear: ClearRunReport | None = None
    measured_latency_s: float | None = None
    measured_layer_seconds: dict[str, float] | None = None
    measured_mae: float | None = None
    measured_precision_bits: float | None = None

    @property
    def latency(self) -> float | None:
        """Best available latency: measured if encrypted, else proxy."""
        if self.measured_latency_s is not None:
            return self.measured_latency_s
        return None if self.clear is None else self.clear.proxy_latency

    @property
    def precision_bits(self) -> float | None:
        if self.measured_precision_bits is not None:
            return self.measured_precision_bits
        return None if self.clear is None else self.clear.precision_bits

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "static": self.static.to_dict(),
            "clear": None if self.clear is None else self.clear.to_dict(),
            "measured_latency_s": self.measured_latency_s,
            "measured_layer_seconds": self.measured_layer_seconds,
            "measured_mae": self.measured_mae,
            "measured_precision_bits": self.measured_precision_bits,
        }


@dataclass(frozen=True)
class BackendBinding:
    kind: str = "mock"
    hidden: CostCoefficients = CostCoefficients(2e-3, 5e-3, 0.4, 5e-2)
    perturbation: float = 0.0
    seed: int = 0
    workload_ratio: float = DEFAULT_WORKLOAD_RATIO
    trace_path: str | None = None
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "recorded", "external"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.perturbation < 0 or self.perturbation >= 1:
            raise ConfigError("perturbation amplitude must be in [0, 1)")
        if self.workload_ratio <= 0:
            raise ConfigError("workload_ratio must be positive")
        if self.kind == "recorded" and not self.trace_path:
            raise ConfigError("recorded backend needs a trace path")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "hidden": self.hidden.to_dict(),
            "perturbation": self.perturbation,
            "seed": self.seed,
            "workload_ratio": self.workload_ratio,
            "trace_path": self.trace_path,
            "aliases": dict(self.aliases),
        }


class EncryptedBackend(Protocol):
    def measure(
        self,
        config: FheConfig,
        digest: str,
        counts: Mapping[str, PrimitiveCounts],
        clear: ClearRunReport,
        mode: EvalMode,
    ) -> Measurement: ...


def _unit_noise(*parts: object) -> float:
    """Deterministic value in [-1, 1] derived from the given keys."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2**64 * 2.0 - 1.0


def mock_latency(
    digest: str, counts: Mapping[str, PrimitiveCounts], binding: BackendBinding
) -> dict[str, float]:
    """Per-layer seconds from the hidden linear model with bounded jitter."""
    out = {}
    for lid, c in counts.items():
        base = binding.hidden.term(c)
        eps = binding.perturbation * _unit_noise(digest, lid, binding.seed)
        out[lid] = base * (1.0 + eps)
    return out


class MockBackend:
    def __init__(self, binding: BackendBinding):
        self.binding = binding

    def measure(self, config, digest, counts, clear, mode) -> Measurement:
        layer_s = mock_latency(digest, counts, self.binding)
        if mode is EvalMode.FHE_FULL:
            layer_s = {k: v * self.binding.workload_ratio for k, v in layer_s.items()}
        return Measurement(float(sum(layer_s.values())), layer_s, clear.global_mae, clear.precision_bits)


class RecordedBackend:
    """Replays measurements keyed by config digest or by a scenario alias."""

    def __init__(self, binding: BackendBinding):
        self.binding = binding
        try:
            records = read_checked_jsonl(binding.trace_path)
        except FileNotFoundError:
            raise BackendUnavailable(f"recorded trace {binding.trace_path} not found") from None
        self.entries: dict[tuple[str, str], dict[str, Any]] = {}
        for rec in records:
            self.entries[(rec["digest_or_alias"], rec["mode"])] = rec

    def _lookup(self, key: str, mode: EvalMode) -> tuple[dict[str, Any], float] | None:
        if (key, mode.value) in self.entries:
            return self.entries[(key, mode.value)], 1.0
        if mode is EvalMode.FHE_FULL and (key, EvalMode.FHE_LIGHT.value) in self.entries:
            return self.entries[(key, EvalMode.FHE_LIGHT.value)], self.binding.workload_ratio
        return None

    def measure(self, config, digest, counts, clear, mode) -> Measurement:
        hit = self._lookup(digest, mode)
        if hit is None and digest in self.binding.aliases:
            hit = self._lookup(self.binding.aliases[digest], mode)
        if hit is None:
            raise RecordedMiss(f"no recorded {mode.value} entry for config {digest[:12]}")
        rec, factor = hit
        layer_s = {k: float(v) * factor for k, v in rec["layer_s"].items()}
        return Measurement(float(rec["total_s"]) * factor, layer_s, float(rec["mae"]), float(rec["precision_bits"]))


class ExternalProcessBackend:
    """Adapter slot for a real toolchain (spawn a process, parse timings).

    It must honour the same contract as the shipped backends: per-layer
    seconds, total seconds, MAE and precision for one config and mode.
    """

    def __init__(self, binding: BackendBinding):
        self.binding = binding

    def measure(self, config, digest, counts, clear, mode) -> Measurement:
        raise BackendUnavailable("no external CKKS backend is bundled with this package")


def make_backend(binding: BackendBinding) -> EncryptedBackend:
    if binding.kind == "mock":
        return MockBackend(binding)
    if binding.kind == "recorded":
        return RecordedBackend(binding)
    return ExternalProcessBackend(binding)


@dataclass(frozen=True)
class Trial:
    record: TrialRecord
    metrics: Metrics
    verdict: GateVerdict
    config: FheConfig

    @property
    def digest(self) -> str:
        return self.record.digest


Judge = Callable[[Metrics, GateVerdict], "str | None"]


class Evaluator:
    """Owner of ``run_trial``: every call appends exactly one TrialRecord."""

    def __init__(
        self,
        graph: ModelGraph,
        gates: GateConfig,
        backend: EncryptedBackend | None,
        trace: TraceRepository | None = None,
        batch: np.ndarray | None = None,
        coeffs: CostCoefficients = SEED_COEFFICIENTS,
        clock: Callable[[], float] = time.time,
    ):
        self.graph = graph
        self.gates = gates
        self.backend = backend
        self.trace = trace if trace is not None else TraceRepository()
        self.batch = batch if batch is not None else calibration_batch(graph.input_shape)
        self.signature = architecture_signature(graph)
        self._coeffs = coeffs
        self._frozen = False
        self._clock = clock
        self._static: dict[str, StaticReport] = {}
        self._clear: dict[tuple[str, tuple[float, ...]], ClearRunReport] = {}
        self._measured: dict[tuple[str, EvalMode], Measurement] = {}
        self.session_records: list[TrialRecord] = []

    # coefficient lifecycle -------------------------------------------------
    @property
    def coeffs(self) -> CostCoefficients:
        return self._coeffs

    @coeffs.setter
    def coeffs(self, value: CostCoefficients) -> None:
        if self._frozen:
            raise RuntimeError("cost coefficients are frozen")
        self._coeffs = value

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    # evaluation --------------------------------------------------------------
    def static(self, config: FheConfig, digest: str | None = None) -> StaticReport:
        digest = digest or config_digest(config)
        if digest not in self._static:
            self._static[digest] = analyze(self.graph, config)
        return self._static[digest]

    def clear(self, config: FheConfig, digest: str | None = None) -> ClearRunReport:
        digest = digest or config_digest(config)
        key = (digest, self._coeffs.as_tuple())
        if key not in self._clear:
            st = self.static(config, digest)
            self._clear[key] = simulate(self.graph, config, st.plan, self.batch, self._coeffs)
        return self._clear[key]

    def evaluate(self, config: FheConfig, mode: EvalMode) -> tuple[Metrics, GateVerdict]:
        """Compute metrics without touching the trace."""
        mode = EvalMode(mode)
        digest = config_digest(config)
        st = self.static(config, digest)
        if mode is EvalMode.STATIC_ONLY:
            return Metrics(mode, st), evaluate_gates(st, self.gates)
        clear = self.clear(config, digest)
        if mode is EvalMode.CLEAR_ONLY:
            verdict = check_gates(clear, st, self.gates)
            return Metrics(mode, st, replace(clear, gates=verdict.gates)), verdict
        if self.backend is None:
            raise BackendUnavailable("no encrypted backend configured")
        key = (digest, mode)
        if key not in self._measured:
            counts = layer_counts(self.graph, config, st.plan)
            self._measured[key] = self.backend.measure(config, digest, counts, clear, mode)
        m = self._measured[key]
        total_layer = sum(m.layer_s.values())
        shares = {lid: (m.layer_s.get(lid, 0.0) / total_layer if total_layer > 0 else 0.0) for lid in clear.profiles}
        verdict = evaluate_gates(
            st,
            self.gates,
            mae=m.mae,
            precision_bits=m.precision_bits,
            layer_maes={lid: p.layer_mae for lid, p in clear.profiles.items()},
            latency_s=m.total_s,
        )
        measured_clear = replace(clear.with_runtime_shares(shares), gates=verdict.gates)
        metrics = Metrics(mode, st, measured_clear, m.total_s, dict(m.layer_s), m.mae, m.precision_bits)
        return metrics, verdict

    def run_trial(
        self,
        config: FheConfig,
        mode: EvalMode,
        *,
        phase: str,
        role: str = "",
        iteration: int | None = None,
        proposer: str | None = None,
        directions: tuple[str, ...] | list[str] = (),
        rationale: str = "",
        judge: Judge | None = None,
    ) -> Trial:
        mode = EvalMode(mode)
        metrics, verdict = self.evaluate(config, mode)
        decision = judge(metrics, verdict) if judge is not None else None
        record = TrialRecord(
            ordinal=self.trace.next_ordinal,
            phase=phase,
            mode=mode.value,
            digest=config_digest(config),
            config=config.to_dict(),
            metrics=metrics.to_dict(),
            verdict=verdict.to_dict(),
            signature=self.signature,
            role=role,
            iteration=iteration,
            decision=decision,
            proposer=proposer,
            directions=list(directions),
            rationale=rationale,
            coefficients=self._coeffs.to_dict(),
            timestamp=self._clock(),
        )
        self.trace.append(record)
        self.session_records.append(record)
        return Trial(record, metrics, verdict, config)


def load_aliases(doc: Mapping[str, str] | None) -> dict[str, str]:
    return dict(doc or {})


def binding_from_dict(doc: Mapping[str, Any] | None, base_dir: Path | None = None) -> BackendBinding:
    doc = dict(doc or {})
    allowed = {"kind", "hidden", "perturbation", "seed", "workload_ratio", "trace_path", "aliases"}
    extra = doc.keys() - allowed
    if extra:
        raise ConfigError(f"backend has unknown fields {sorted(extra)}")
    hidden = doc.get("hidden")
    trace_path = doc.get("trace_path")
    if trace_path and base_dir is not None and not Path(trace_path).is_absolute():
        trace_path = str(base_dir / trace_path)
    try:
        return BackendBinding(
            kind=doc.get("kind", "mock"),
            hidden=CostCoefficients.from_dict(hidden) if hidden else BackendBinding.hidden,
            perturbation=float(doc.get("perturbation", 0.0)),
            seed=int(doc.get("seed", 0)),
            workload_ratio=float(doc.get("workload_ratio", DEFAULT_WORKLOAD_RATIO)),
            trace_path=trace_path,
            aliases=load_aliases(doc.get("aliases")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid backend binding: {exc}") from None
