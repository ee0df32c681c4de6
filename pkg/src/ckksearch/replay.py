"""Replay a scripted sequence of trials against recorded measurements.

A scenario names a base configuration and a list of trials, each derived
from an earlier trial by layer-local directions. The harness re-runs the
admission and acceptance logic on the recorded metrics and compares the
resulting verdicts with the expected ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backend import BackendBinding, EvalMode, Evaluator, RecordedBackend
from .config_space import Direction, FheConfig, Scope, apply_direction, config_digest, config_from_dict
from .controller import Candidate, patch_gate_admit
from .cost_model import calibrate
from .errors import ConfigError, RecordedMiss, SchemaError
from .model_ir import ModelGraph, graph_from_dict, parse_model
from .orchestrator import PhaseCState, judge_trial, update_state
from .simulator import GateConfig
from .static_analyzer import analyze
from .trace import TraceRepository

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_SCENARIO = DATA_DIR / "lenet_scenario.json"
DEFAULT_TRACE = DATA_DIR / "lenet_case_trace.jsonl"


@dataclass(frozen=True)
class ScenarioTrial:
    alias: str
    parent: str | None
    directions: tuple[Direction, ...]
    expected: str


@dataclass(frozen=True)
class Scenario:
    name: str
    graph: ModelGraph
    base_config: FheConfig
    gates: GateConfig
    budget: int
    trials: tuple[ScenarioTrial, ...]


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario is not valid JSON: {exc}") from None
    need = {"name", "model", "base_config", "trials"}
    if not isinstance(doc, dict) or need - doc.keys():
        raise SchemaError(f"scenario needs fields {sorted(need)}")
    model = doc["model"]
    if isinstance(model, str):
        graph = parse_model((path.parent / model).read_text(encoding="utf-8"))
    else:
        graph = graph_from_dict(model)
    trials = []
    for raw in doc["trials"]:
        try:
            trials.append(
                ScenarioTrial(
                    alias=raw["alias"],
                    parent=raw.get("from"),
                    directions=tuple(Direction.from_dict(d) for d in raw.get("directions", [])),
                    expected=raw["expected"],
                )
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed scenario trial: {exc}") from None
    if not trials or trials[0].parent is not None:
        raise SchemaError("the first scenario trial is the base and has no parent")
    try:
        gates = GateConfig(**doc.get("gates", {}))
    except TypeError as exc:
        raise ConfigError(f"invalid gates: {exc}") from None
    return Scenario(
        name=doc["name"],
        graph=graph,
        base_config=config_from_dict(doc["base_config"]),
        gates=gates,
        budget=int(doc.get("budget", len(trials))),
        trials=tuple(trials),
    )


@dataclass
class ReplayRow:
    trial: int
    alias: str
    digest: str
    admitted: bool
    expected: str
    actual: str
    measured_latency_s: float | None = None
    measured_mae: float | None = None
    measured_precision_bits: float | None = None
    layer_seconds: dict[str, float] | None = None
    reasons: list[str] = field(default_factory=list)

    @property
    def match(self) -> bool:
        return self.expected == self.actual

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial": self.trial,
            "alias": self.alias,
            "digest": self.digest,
            "admitted": self.admitted,
            "expected": self.expected,
            "actual": self.actual,
            "match": self.match,
            "measured_latency_s": self.measured_latency_s,
            "measured_mae": self.measured_mae,
            "measured_precision_bits": self.measured_precision_bits,
            "layer_seconds": self.layer_seconds,
            "reasons": self.reasons,
        }


@dataclass
class ReplayResult:
    scenario: str
    rows: list[ReplayRow]
    encrypted_trials: int
    best_alias: str | None

    @property
    def all_match(self) -> bool:
        return all(r.match for r in self.rows)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "all_match": self.all_match,
            "encrypted_trials": self.encrypted_trials,
            "best_alias": self.best_alias,
            "rows": [r.to_dict() for r in self.rows],
        }


def derive_configs(scenario: Scenario) -> dict[str, FheConfig]:
    configs: dict[str, FheConfig] = {}
    for t in scenario.trials:
        if t.parent is None:
            configs[t.alias] = scenario.base_config
            continue
        if t.parent not in configs:
            raise RecordedMiss(f"trial {t.alias} derives from unknown alias {t.parent!r}")
        cfg = configs[t.parent]
        for d in t.directions:
            plan = analyze(scenario.graph, cfg).plan
            mask = plan.depth_mask if plan is not None else frozenset()
            cfg = apply_direction(cfg, d, Scope.LAYER_AGENT, scenario.graph, mask, plan)
        configs[t.alias] = cfg
    return configs


def replay(scenario: Scenario, trace_path: str | Path, trace: TraceRepository | None = None) -> ReplayResult:
    configs = derive_configs(scenario)
    aliases = {config_digest(cfg): alias for alias, cfg in configs.items()}
    binding = BackendBinding(kind="recorded", trace_path=str(trace_path), aliases=aliases)
    ev = Evaluator(scenario.graph, scenario.gates, RecordedBackend(binding), trace)
    rows: list[ReplayRow] = []
    remaining = scenario.budget

    def row_for(i: int, t: ScenarioTrial, trial, admitted: bool, actual: str) -> ReplayRow:
        m = None if trial is None else trial.metrics
        return ReplayRow(
            trial=i,
            alias=t.alias,
            digest=config_digest(configs[t.alias]),
            admitted=admitted,
            expected=t.expected,
            actual=actual,
            measured_latency_s=None if m is None else m.measured_latency_s,
            measured_mae=None if m is None else m.measured_mae,
            measured_precision_bits=None if m is None else m.measured_precision_bits,
            layer_seconds=None if m is None else m.measured_layer_seconds,
            reasons=[] if trial is None else list(trial.verdict.reasons),
        )

    base_t = scenario.trials[0]
    base_cfg = configs[base_t.alias]
    ev.run_trial(base_cfg, EvalMode.STATIC_ONLY, phase="B", role="base")
    ev.run_trial(base_cfg, EvalMode.CLEAR_ONLY, phase="B", role="base")
    remaining -= 1
    base = ev.run_trial(
        base_cfg, EvalMode.FHE_LIGHT, phase="B", role="base",
        judge=lambda m, v: "accept" if v.passed else "reject",
    )
    rows.append(row_for(0, base_t, base, True, base.record.decision))
    layer_s = base.metrics.measured_layer_seconds or {}
    obs = [(p.counts, layer_s[lid]) for lid, p in base.metrics.clear.profiles.items() if lid in layer_s]
    ev.coeffs = calibrate(obs).coefficients
    ev.freeze()
    if not base.verdict.passed:
        for i, t in enumerate(scenario.trials[1:], 1):
            rows.append(row_for(i, t, None, False, "not-run"))
        return ReplayResult(scenario.name, rows, 1, None)

    state = PhaseCState(best=base, current=base, accepted_best=[base], evaluated={base.digest})
    for i, t in enumerate(scenario.trials[1:], 1):
        if remaining <= 0:
            rows.append(row_for(i, t, None, False, "budget-exhausted"))
            continue
        cfg = configs[t.alias]
        failed = state.infeasible_latest
        adm = patch_gate_admit(
            [Candidate(cfg, tuple(d.id for d in t.directions), "Scenario")],
            ev,
            ev.clear(state.best.config).proxy_latency,
            failed_precision_bits=None if failed is None else failed.metrics.precision_bits,
            iteration=i,
        )
        if adm.admitted is None:
            rows.append(row_for(i, t, None, False, "not-admitted"))
            continue
        remaining -= 1
        trial = ev.run_trial(
            cfg, EvalMode.FHE_LIGHT, phase="C", role="admitted", iteration=i, proposer="Scenario",
            directions=tuple(d.id for d in t.directions), rationale=adm.admitted.reason,
            judge=lambda m, v: judge_trial(m.measured_latency_s, v.passed, state),
        )
        update_state(state, trial)
        actual = "accept" if trial.record.decision in ("accept", "repair-accept") else "reject"
        rows.append(row_for(i, t, trial, True, actual))

    encrypted = sum(1 for r in ev.session_records if r.encrypted)
    best_alias = aliases.get(state.best.digest)
    return ReplayResult(scenario.name, rows, encrypted, best_alias)
