"""Three-phase workflow under a global encrypted-trial budget.

Phase A screens a cold-start grid with static checks and cleartext
simulation only. Phase B spends one light encrypted trial per survivor,
fits the cost model once and freezes it. Phase C admits at most one patched
configuration per iteration for a light encrypted trial.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .backend import BackendBinding, EvalMode, Evaluator, Trial, binding_from_dict, make_backend
from .config_space import FheConfig, Scope, apply_direction, config_digest
from .controller import (
    MAX_BUNDLE,
    Candidate,
    PolicyContext,
    PolicyDecision,
    UserConstraints,
    global_tradeoff_propose,
    init_propose,
    layerwise_propose,
    metrics_digest,
    offer_directions,
    patch_gate_admit,
    rank_tunable,
    regime_select,
)
from .cost_model import (
    BottleneckWeights,
    CalibrationResult,
    PrimitiveCounts,
    SEED_COEFFICIENTS,
    bottleneck_scores,
    calibrate,
)
from .errors import CkksearchError, ConfigError, NoFeasibleRegime
from .model_ir import ModelGraph, summarize_model
from .policy import RemotePolicy, Transport
from .simulator import CALIBRATION_BATCH, GateConfig, calibration_batch
from .trace import TraceRepository, TrialRecord

log = logging.getLogger(__name__)

CONVERGENCE_PATIENCE = 2


class Termination(str, Enum):
    BUDGET_EXHAUSTED = "BudgetExhausted"
    CONVERGED = "Converged"
    NO_FEASIBLE_REGIME = "NoFeasibleRegime"
    NO_ADMISSIBLE_CANDIDATE = "NoAdmissibleCandidate"
    ALL_SURVIVORS_FAILED_ENCRYPTED = "AllSurvivorsFailedEncrypted"
    ITERATION_LIMIT = "IterationLimit"


FAILURE_TERMINATIONS = (Termination.NO_FEASIBLE_REGIME, Termination.ALL_SURVIVORS_FAILED_ENCRYPTED)


@dataclass(frozen=True)
class RunConfig:
    gates: GateConfig = GateConfig()
    budget: int = 6
    phase_a_keep: int = 2
    max_c_iterations: int = 10
    backend: BackendBinding = BackendBinding()
    policy_endpoint: str | None = None
    policy_timeout_s: float = 10.0
    seed: int = 20240601
    batch_size: int = CALIBRATION_BATCH
    final_full: bool = False
    top_k: int = 2
    weights: BottleneckWeights = BottleneckWeights()
    constraints: UserConstraints = UserConstraints()
    trace_path: str | None = None

    def __post_init__(self) -> None:
        for name in ("budget", "phase_a_keep", "max_c_iterations", "batch_size", "top_k"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer")
        if self.phase_a_keep < 1:
            raise ConfigError("phase_a_keep must be at least 1")
        if self.budget < self.phase_a_keep:
            raise ConfigError(
                f"budget {self.budget} < phase_a_keep {self.phase_a_keep}: Phase B needs one encrypted trial per survivor"
            )
        if self.top_k < 1 or self.batch_size < 1:
            raise ConfigError("top_k and batch_size must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "gates": self.gates.to_dict(),
            "budget": self.budget,
            "phase_a_keep": self.phase_a_keep,
            "max_c_iterations": self.max_c_iterations,
            "backend": self.backend.to_dict(),
            "policy_endpoint": self.policy_endpoint,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "final_full": self.final_full,
            "top_k": self.top_k,
            "weights": list(self.weights.as_tuple()),
            "constraints": self.constraints.to_dict(),
        }


_RUN_FIELDS = {
    "gates", "budget", "phase_a_keep", "max_c_iterations", "backend", "policy_endpoint", "policy_timeout_s",
    "seed", "batch_size", "final_full", "top_k", "weights", "constraints", "trace_path",
}


def run_config_from_dict(doc: Any, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run-config must be a JSON object")
    extra = doc.keys() - _RUN_FIELDS
    if extra:
        raise ConfigError(f"run-config has unknown fields {sorted(extra)}")
    try:
        gates = GateConfig(**doc.get("gates", {}))
        weights = BottleneckWeights(*doc["weights"]) if "weights" in doc else BottleneckWeights()
        constraints = UserConstraints.from_dict(doc.get("constraints"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run-config: {exc}") from None
    kwargs = {k: doc[k] for k in ("budget", "phase_a_keep", "max_c_iterations", "policy_endpoint",
                                   "policy_timeout_s", "seed", "batch_size", "final_full", "top_k", "trace_path")
              if k in doc}
    return RunConfig(
        gates=gates,
        backend=binding_from_dict(doc.get("backend"), base_dir),
        weights=weights,
        constraints=constraints,
        **kwargs,
    )


def parse_run_config(text: str, base_dir: Path | None = None) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"run-config is not valid JSON: {exc}") from None
    return run_config_from_dict(doc, base_dir)


@dataclass
class RunReport:
    model: str
    signature: str
    termination: Termination
    budget: int
    best: dict[str, Any] | None
    baseline: dict[str, Any] | None
    accepted_best_latencies: list[float]
    calibration: dict[str, Any] | None
    trials: list[dict[str, Any]]
    notes: list[str] = field(default_factory=list)

    @property
    def encrypted_trials(self) -> int:
        return sum(1 for t in self.trials if t["mode"] in ("FHE_LIGHT", "FHE_FULL"))

    @property
    def succeeded(self) -> bool:
        return self.best is not None and self.termination not in FAILURE_TERMINATIONS

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "signature": self.signature,
            "termination": self.termination.value,
            "budget": self.budget,
            "encrypted_trials": self.encrypted_trials,
            "best": self.best,
            "baseline": self.baseline,
            "accepted_best_latencies": self.accepted_best_latencies,
            "calibration": self.calibration,
            "notes": self.notes,
            "trials": self.trials,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _best_entry(trial: Trial) -> dict[str, Any]:
    return {
        "digest": trial.digest,
        "config": trial.config.to_dict(),
        "fidelity": trial.metrics.mode.value,
        "measured_latency_s": trial.metrics.measured_latency_s,
        "measured_mae": trial.metrics.measured_mae,
        "measured_precision_bits": trial.metrics.measured_precision_bits,
        "layer_seconds": trial.metrics.measured_layer_seconds,
        "ordinal": trial.record.ordinal,
    }


@dataclass
class PhaseCState:
    best: Trial
    current: Trial
    infeasible_latest: Trial | None = None
    streak: int = 0
    accepted_best: list[Trial] = field(default_factory=list)
    evaluated: set[str] = field(default_factory=set)


class Orchestrator:
    def __init__(
        self,
        run: RunConfig,
        graph: ModelGraph,
        trace: TraceRepository | None = None,
        transport: Transport | None = None,
        backend=None,
    ):
        self.run = run
        self.graph = graph
        self.summary = summarize_model(graph)
        self.trace = trace if trace is not None else TraceRepository(run.trace_path)
        batch = calibration_batch(graph.input_shape, run.batch_size, run.seed)
        self.evaluator = Evaluator(
            graph,
            run.gates,
            backend if backend is not None else make_backend(run.backend),
            self.trace,
            batch,
            SEED_COEFFICIENTS,
        )
        self.policy = RemotePolicy(run.policy_endpoint, transport, run.policy_timeout_s)
        self.remaining = run.budget
        self.calibration: CalibrationResult | None = None
        self.observations: list[tuple[PrimitiveCounts, float]] = []
        self.notes: list[str] = []
        self._history: list[dict[str, Any]] = []

    # ---------------------------------------------------------------- helpers
    @property
    def records(self) -> list[TrialRecord]:
        return self.evaluator.session_records

    def _light(self, config: FheConfig, mode: EvalMode = EvalMode.FHE_LIGHT, **kw) -> Trial:
        if self.remaining <= 0:
            raise RuntimeError("encrypted budget exhausted")  # pragma: no cover - guarded by callers
        self.remaining -= 1
        trial = self.evaluator.run_trial(config, mode, **kw)
        self._history.append(
            {
                "ordinal": trial.record.ordinal,
                "digest": trial.digest[:12],
                "mode": mode.value,
                "latency_s": trial.metrics.measured_latency_s,
                "precision_bits": trial.metrics.measured_precision_bits,
                "passed": trial.verdict.passed,
                "decision": trial.record.decision,
                "directions": list(trial.record.directions),
            }
        )
        return trial

    # ---------------------------------------------------------------- phases
    def phase_a(self) -> list[FheConfig]:
        exemplars = self.trace.exemplars(self.summary.signature)
        proposals = init_propose(self.summary, None, self.run.constraints, exemplars)
        clear_trials: list[Trial] = []
        for cfg in proposals:
            st = self.evaluator.run_trial(cfg, EvalMode.STATIC_ONLY, phase="A", role="candidate", proposer="HeuristicInit")
            if not st.verdict.passed:
                continue
            clear_trials.append(
                self.evaluator.run_trial(cfg, EvalMode.CLEAR_ONLY, phase="A", role="candidate", proposer="HeuristicInit")
            )
        return regime_select(clear_trials, self.run.phase_a_keep)

    def phase_b(self, survivors: Sequence[FheConfig]) -> Trial | None:
        if self.remaining < len(survivors):
            raise ConfigError("budget cannot cover one encrypted trial per survivor")
        trials = []
        for cfg in survivors:
            trials.append(
                self._light(
                    cfg, phase="B", role="survivor", proposer="HeuristicRegime",
                    judge=lambda m, v: "accept" if v.passed else "reject",
                )
            )
        for t in trials:
            layer_s = t.metrics.measured_layer_seconds or {}
            for lid, prof in t.metrics.clear.profiles.items():
                if lid in layer_s:
                    self.observations.append((prof.counts, float(layer_s[lid])))
        self.calibration = calibrate(self.observations)
        if self.calibration.rank_deficient:
            self.notes.append("calibration rank deficient; seed coefficients kept")
        self.evaluator.coeffs = self.calibration.coefficients
        self.evaluator.freeze()
        passing = [t for t in trials if t.verdict.passed]
        if not passing:
            return None
        return min(passing, key=lambda t: (t.metrics.measured_latency_s, t.record.ordinal))

    def _context(self, state: PhaseCState) -> tuple[PolicyContext, list[tuple[str, float]]]:
        cur = state.current
        profiles = list(cur.metrics.clear.profiles.values())
        ranking = bottleneck_scores(profiles, self.run.weights, top_k=len(profiles))
        top = rank_tunable(ranking, self.graph, self.run.top_k)
        plan = cur.metrics.static.plan
        ctx = PolicyContext(
            phase="C",
            model_summary=self.summary.to_dict(),
            best_digest=state.best.digest,
            metrics_digest=metrics_digest(state.best.record.metrics),
            bottlenecks=tuple(cur.metrics.clear.profiles[lid].to_dict() for lid, _ in top),
            ranking=tuple(top),
            history=tuple(self._history),
            budget_remaining=self.remaining,
            precision_bits=cur.metrics.precision_bits or 0.0,
            precision_min_bits=self.run.gates.precision_min_bits,
            boot_count=plan.boot_count if plan is not None else 0,
            min_slack=min(plan.segment_slack) if plan is not None else 0,
            repair_mode=state.infeasible_latest is not None,
        )
        return ctx, top

    def _candidates(self, state: PhaseCState, iteration: int) -> list[Candidate]:
        coeffs = self.evaluator.coeffs
        base_cfg = state.current.config
        ctx, top = self._context(state)

        g_ctx = ctx.with_offered(offer_directions(self.graph, base_cfg, Scope.GLOBAL_AGENT, coeffs))
        g_heur, bottlenecks = global_tradeoff_propose(g_ctx)
        g_dec = self.policy.decide("global", g_ctx, g_heur)

        l_ctx = ctx.with_offered(offer_directions(self.graph, base_cfg, Scope.LAYER_AGENT, coeffs, bottlenecks))
        l_dec = self.policy.decide("layerwise", l_ctx, layerwise_propose(l_ctx))

        out: list[Candidate] = []
        seen = set(state.evaluated)

        def add(cfg: FheConfig, ids: tuple[str, ...], dec: PolicyDecision) -> None:
            d = config_digest(cfg)
            if d in seen:
                return
            seen.add(d)
            out.append(Candidate(cfg, ids, dec.proposer.value, dec.rationale))

        for dec, ctx_, scope in ((g_dec, g_ctx, Scope.GLOBAL_AGENT), (l_dec, l_ctx, Scope.LAYER_AGENT)):
            lookup = {o.id: o.direction for o in ctx_.offered}
            for did in dec.chosen:
                try:
                    add(self._patch(base_cfg, [lookup[did]], scope), (did,), dec)
                except (CkksearchError, KeyError):
                    continue
        if len(l_dec.chosen) >= 2:
            lookup = {o.id: o.direction for o in l_ctx.offered}
            ids = tuple(l_dec.chosen[:MAX_BUNDLE])
            try:
                add(self._patch(base_cfg, [lookup[i] for i in ids], Scope.LAYER_AGENT), ids, l_dec)
            except (CkksearchError, KeyError):
                pass
        return out

    def _patch(self, config: FheConfig, directions, scope: Scope) -> FheConfig:
        from .static_analyzer import analyze

        for d in directions:
            plan = analyze(self.graph, config).plan
            mask = plan.depth_mask if plan is not None else frozenset()
            config = apply_direction(config, d, scope, self.graph, mask, plan)
        return config

    def phase_c(self, base: Trial) -> tuple[Termination, PhaseCState]:
        state = PhaseCState(best=base, current=base, accepted_best=[base], evaluated={base.digest})
        reserve = 1 if self.run.final_full and self.remaining >= 1 else 0
        termination = Termination.ITERATION_LIMIT
        if self.remaining - reserve <= 0:
            return Termination.BUDGET_EXHAUSTED, state
        for iteration in range(1, self.run.max_c_iterations + 1):
            if self.remaining - reserve <= 0:
                termination = Termination.BUDGET_EXHAUSTED
                break
            cands = self._candidates(state, iteration)
            best_pred = self.evaluator.clear(state.best.config).proxy_latency
            failed = state.infeasible_latest
            adm = patch_gate_admit(
                cands,
                self.evaluator,
                best_pred,
                failed_precision_bits=None if failed is None else failed.metrics.precision_bits,
                iteration=iteration,
            )
            if adm.admitted is None:
                termination = Termination.NO_ADMISSIBLE_CANDIDATE
                break
            cand = adm.admitted.candidate
            trial = self._light(
                cand.config, phase="C", role="admitted", iteration=iteration, proposer=cand.proposer,
                directions=cand.directions, rationale=f"{adm.admitted.reason}; {cand.rationale}",
                judge=lambda m, v: judge_trial(m.measured_latency_s, v.passed, state),
            )
            state.evaluated.add(trial.digest)
            update_state(state, trial)
            if state.streak >= CONVERGENCE_PATIENCE:
                termination = Termination.CONVERGED
                break
        else:
            if self.remaining - reserve <= 0:
                termination = Termination.BUDGET_EXHAUSTED
        return termination, state

    def final_verification(self, state: PhaseCState) -> Trial | None:
        best = state.best
        if not self.run.final_full:
            return best
        if self.remaining <= 0:
            self.notes.append("final FHE_FULL skipped: no budget left")
            return best
        full = self._light(
            best.config, EvalMode.FHE_FULL, phase="C", role="final", proposer="Orchestrator",
            judge=lambda m, v: "accept" if v.passed else "reject",
        )
        if full.verdict.passed:
            return full
        self.notes.append(
            f"final FHE_FULL failed gates that FHE_LIGHT passed ({'; '.join(full.verdict.reasons)}); "
            "demoted to the previous feasible best"
        )
        previous = [t for t in state.accepted_best if t.digest != best.digest]
        return previous[-1] if previous else None

    # ---------------------------------------------------------------- driver
    def optimize(self) -> RunReport:
        best: Trial | None = None
        baseline: Trial | None = None
        state: PhaseCState | None = None
        try:
            survivors = self.phase_a()
        except NoFeasibleRegime:
            return self._report(Termination.NO_FEASIBLE_REGIME, None, None, None)
        baseline = self.phase_b(survivors)
        if baseline is None:
            return self._report(Termination.ALL_SURVIVORS_FAILED_ENCRYPTED, None, None, None)
        termination, state = self.phase_c(baseline)
        best = self.final_verification(state)
        return self._report(termination, best, baseline, state)

    def _report(self, termination, best, baseline, state) -> RunReport:
        return RunReport(
            model=self.graph.name,
            signature=self.summary.signature,
            termination=termination,
            budget=self.run.budget,
            best=None if best is None else _best_entry(best),
            baseline=None if baseline is None else _best_entry(baseline),
            accepted_best_latencies=[] if state is None else [t.metrics.measured_latency_s for t in state.accepted_best],
            calibration=None if self.calibration is None else {
                **self.calibration.to_dict(),
                "observations": [{"counts": c.to_dict(), "seconds": s} for c, s in self.observations],
            },
            trials=[r.to_dict(with_timestamp=False) for r in self.records],
            notes=list(self.notes),
        )


def update_state(state: PhaseCState, trial: Trial) -> None:
    """Fold one judged Phase-C trial into the search state."""
    decision = trial.record.decision
    if decision == "accept":
        state.best = state.current = trial
        state.accepted_best.append(trial)
        state.infeasible_latest = None
        state.streak = 0
    elif decision == "repair-accept":
        state.current = trial
        state.infeasible_latest = None
        state.streak += 1
    elif trial.verdict.passed:
        state.streak += 1
    else:
        state.infeasible_latest = trial


def judge_trial(latency: float | None, passed: bool, state: PhaseCState) -> str:
    """Verdict for an admitted Phase-C trial."""
    if not passed:
        return "reject"
    if latency is not None and latency < state.best.metrics.measured_latency_s:
        return "accept"
    if state.infeasible_latest is not None:
        return "repair-accept"
    return "reject"


def optimize(
    run: RunConfig,
    graph: ModelGraph,
    trace: TraceRepository | None = None,
    transport: Transport | None = None,
) -> RunReport:
    return Orchestrator(run, graph, trace, transport).optimize()
