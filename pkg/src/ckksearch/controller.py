"""Agent roles as deterministic decision policies.

Tools generate and validate every candidate; a policy only picks among the
ids it is offered. The heuristic policies here are the defaults, and the
remote policy in :mod:`ckksearch.policy` can replace the two exploration
roles (global trade-off and layerwise).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

from .backend import EvalMode, Evaluator, Trial
from .config_space import (
    Direction,
    DirectionKind,
    Embedding,
    FheConfig,
    GlobalConfig,
    Scope,
    apply_direction,
    config_digest,
    config_from_dict,
    enumerate_directions,
)
from .cost_model import CostCoefficients
from .errors import CkksearchError, NoFeasibleRegime
from .model_ir import COMPUTE_KINDS, LayerKind, ModelGraph, ModelSummary
from .simulator import proxy_latency
from .static_analyzer import analyze

MAX_HISTORY = 10
MAX_BOTTLENECK_PROFILES = 2
MAX_RATIONALE = 2000
MAX_BUNDLE = 3
HEAD_PRIME = 60
RELAX_MARGIN_BITS = 4
SHORTEN_MIN_SLACK = 2


class Proposer(str, Enum):
    HEURISTIC_INIT = "HeuristicInit"
    HEURISTIC_REGIME = "HeuristicRegime"
    HEURISTIC_GLOBAL = "HeuristicGlobal"
    HEURISTIC_LAYER = "HeuristicLayer"
    REMOTE_LLM = "RemoteLLM"
    FALLBACK = "Fallback"


@dataclass(frozen=True)
class PolicyDecision:
    chosen: tuple[str, ...]
    rationale: str
    proposer: Proposer

    def __post_init__(self) -> None:
        object.__setattr__(self, "chosen", tuple(self.chosen))
        object.__setattr__(self, "rationale", self.rationale[:MAX_RATIONALE])
        object.__setattr__(self, "proposer", Proposer(self.proposer))


@dataclass(frozen=True)
class Offered:
    direction: Direction
    predicted_delta: float

    @property
    def id(self) -> str:
        return self.direction.id

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "direction": self.direction.to_dict(), "predicted_delta": self.predicted_delta}


@dataclass(frozen=True)
class PolicyContext:
    phase: str
    model_summary: dict[str, Any]
    best_digest: str
    metrics_digest: str
    offered: tuple[Offered, ...] = ()
    bottlenecks: tuple[dict[str, Any], ...] = ()
    ranking: tuple[tuple[str, float], ...] = ()
    history: tuple[dict[str, Any], ...] = ()
    budget_remaining: int = 0
    precision_bits: float = 0.0
    precision_min_bits: float = 8.0
    boot_count: int = 0
    min_slack: int = 0
    repair_mode: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(self.history)[-MAX_HISTORY:])
        object.__setattr__(self, "bottlenecks", tuple(self.bottlenecks)[:MAX_BOTTLENECK_PROFILES])

    @property
    def offered_ids(self) -> tuple[str, ...]:
        return tuple(o.id for o in self.offered)

    def with_offered(self, offered: Iterable[Offered]) -> PolicyContext:
        from dataclasses import replace

        return replace(self, offered=tuple(offered))

    def to_request(self, role: str) -> dict[str, Any]:
        return {
            "phase": self.phase,
            "role": role,
            "model_summary": self.model_summary,
            "budget_remaining": self.budget_remaining,
            "offered": [o.to_dict() for o in self.offered],
            "bottlenecks": list(self.bottlenecks),
            "history": list(self.history),
            "best_digest": self.best_digest,
            "metrics_digest": self.metrics_digest,
            "repair_mode": self.repair_mode,
        }


def metrics_digest(doc: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ init


@dataclass(frozen=True)
class Template:
    name: str
    log_scale: int
    embedding: Embedding


TEMPLATES: dict[str, Template] = {
    "high-precision": Template("high-precision", 40, Embedding.DIAGONAL),
    "aggressive-packing": Template("aggressive-packing", 30, Embedding.HYBRID),
}
DEFAULT_LOG_N = (14, 15, 16)


@dataclass(frozen=True)
class UserConstraints:
    log_n_values: tuple[int, ...] = DEFAULT_LOG_N
    templates: tuple[str, ...] = tuple(TEMPLATES)
    max_chain_length: int | None = None
    security_target_bits: int = 128

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> UserConstraints:
        doc = dict(doc or {})
        return cls(
            log_n_values=tuple(doc.get("log_n_values", DEFAULT_LOG_N)),
            templates=tuple(doc.get("templates", tuple(TEMPLATES))),
            max_chain_length=doc.get("max_chain_length"),
            security_target_bits=int(doc.get("security_target_bits", 128)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "log_n_values": list(self.log_n_values),
            "templates": list(self.templates),
            "max_chain_length": self.max_chain_length,
            "security_target_bits": self.security_target_bits,
        }


def chain_length_for(depth: int, max_len: int | None = None) -> int:
    n = max(depth + 2, 3)
    if max_len is not None:
        n = max(2, min(n, max_len))
    return n


def init_propose(
    summary: ModelSummary,
    templates: Sequence[str] | None = None,
    user_constraints: UserConstraints | None = None,
    exemplars: Sequence[dict[str, Any]] = (),
) -> list[FheConfig]:
    """Cold-start grid over ring sizes and templates, exemplars first."""
    uc = user_constraints or UserConstraints()
    names = tuple(templates) if templates is not None else uc.templates
    length = chain_length_for(summary.depth_lower_bound, uc.max_chain_length)
    out: list[FheConfig] = []
    seen: set[str] = set()

    def add(cfg: FheConfig) -> None:
        d = config_digest(cfg)
        if d not in seen:
            seen.add(d)
            out.append(cfg)

    for doc in exemplars:
        try:
            add(config_from_dict(doc))
        except CkksearchError:
            continue
    for log_n in uc.log_n_values:
        for name in names:
            t = TEMPLATES[name]
            glob = GlobalConfig(
                log_n=log_n,
                modulus_chain=(HEAD_PRIME,) + (t.log_scale,) * (length - 1),
                log_scale=t.log_scale,
                default_embedding=t.embedding,
                security_target_bits=uc.security_target_bits,
            )
            add(FheConfig(glob))
    return out


# ---------------------------------------------------------------- regime


def regime_select(trials: Sequence[Trial], keep: int) -> list[FheConfig]:
    """Gate-passing CLEAR trials, cheapest proxy first, higher precision on ties."""
    feasible = [t for t in trials if t.verdict.passed and t.metrics.clear is not None]
    if not feasible:
        raise NoFeasibleRegime("every cold-start candidate failed a gate")
    feasible.sort(key=lambda t: (t.metrics.clear.proxy_latency, -t.metrics.clear.precision_bits, t.digest))
    out: list[FheConfig] = []
    seen: set[str] = set()
    for t in feasible:
        if t.digest in seen:
            continue
        seen.add(t.digest)
        out.append(t.config)
        if len(out) >= keep:
            break
    return out


# ---------------------------------------------------------- exploration

TUNABLE_KINDS = COMPUTE_KINDS | {LayerKind.ACT_POLY}
PACKING_KINDS = (
    DirectionKind.SWITCH_PACKING_SQUARE_TO_HYBRID,
    DirectionKind.SWITCH_PACKING_HYBRID_TO_SQUARE,
    DirectionKind.ADJUST_BSGS_GAP_UP,
    DirectionKind.ADJUST_BSGS_GAP_DOWN,
)
REPAIR_KINDS = (DirectionKind.LOWER_ACTIVATION_DEGREE, DirectionKind.CAP_PARALLEL_BLOCKS)


def offer_directions(
    graph: ModelGraph,
    config: FheConfig,
    scope: Scope,
    coeffs: CostCoefficients,
    bottlenecks: Sequence[str] = (),
) -> list[Offered]:
    """Valid directions for the scope, each with its predicted latency delta."""
    st = analyze(graph, config)
    plan = st.plan
    mask = plan.depth_mask if plan is not None else frozenset()
    base = proxy_latency(graph, config, plan, coeffs)
    out = []
    for d in enumerate_directions(config, scope, graph, bottlenecks, mask, plan):
        patched = apply_direction(config, d, scope, graph, mask, plan)
        p_plan = analyze(graph, patched).plan
        out.append(Offered(d, proxy_latency(graph, patched, p_plan, coeffs) - base))
    return out


def _by_improvement(items: Iterable[Offered]) -> list[Offered]:
    return sorted(items, key=lambda o: (o.predicted_delta, o.id))


def heuristic_global(ctx: PolicyContext) -> PolicyDecision:
    picks = []
    for o in ctx.offered:
        k = o.direction.kind
        if k is DirectionKind.SHORTEN_MODULUS_TAIL and ctx.min_slack >= SHORTEN_MIN_SLACK:
            picks.append(o)
        elif k is DirectionKind.RELAX_SCALE_ONE_STEP and ctx.precision_bits >= ctx.precision_min_bits + RELAX_MARGIN_BITS:
            picks.append(o)
        elif k is DirectionKind.INCREASE_BOOTSTRAP_INTERVAL and ctx.boot_count > 0:
            picks.append(o)
        elif k is DirectionKind.TIGHTEN_SCALE_ONE_STEP and ctx.repair_mode:
            picks.append(o)
    picks = _by_improvement(picks)
    why = (
        f"slack={ctx.min_slack}, precision={ctx.precision_bits:.2f} (floor {ctx.precision_min_bits}), "
        f"boots={ctx.boot_count}, repair={ctx.repair_mode}"
    )
    return PolicyDecision(tuple(o.id for o in picks), why, Proposer.HEURISTIC_GLOBAL)


def global_tradeoff_propose(ctx: PolicyContext) -> tuple[PolicyDecision, list[str]]:
    """Global directions worth trying plus the bottleneck set for the layer agent."""
    return heuristic_global(ctx), [lid for lid, _ in ctx.ranking]


def layerwise_propose(ctx: PolicyContext) -> PolicyDecision:
    """Packing edits that cut predicted cost; repair edits first after a gate failure."""
    packing = [o for o in ctx.offered if o.direction.kind in PACKING_KINDS and o.predicted_delta < 0]
    picks = _by_improvement(packing)
    if ctx.repair_mode:
        repair = [o for o in ctx.offered if o.direction.kind in REPAIR_KINDS]
        picks = _by_improvement(repair) + picks
    why = f"{len(picks)} of {len(ctx.offered)} offered layer edits kept (repair={ctx.repair_mode})"
    return PolicyDecision(tuple(o.id for o in picks), why, Proposer.HEURISTIC_LAYER)


def rank_tunable(ranking: Sequence[tuple[str, float]], graph: ModelGraph, top_k: int) -> list[tuple[str, float]]:
    return [(lid, s) for lid, s in ranking if graph.layer(lid).kind in TUNABLE_KINDS][:top_k]


# -------------------------------------------------------------- admission


@dataclass(frozen=True)
class Candidate:
    config: FheConfig
    directions: tuple[str, ...]
    proposer: str
    rationale: str = ""

    @property
    def digest(self) -> str:
        return config_digest(self.config)


@dataclass(frozen=True)
class Admission:
    candidate: Candidate
    predicted_latency: float
    clear_trial: Trial
    reason: str


@dataclass
class AdmissionResult:
    admitted: Admission | None
    screened: list[Trial] = field(default_factory=list)


def patch_gate_admit(
    candidates: Sequence[Candidate],
    evaluator: Evaluator,
    best_predicted_latency: float,
    *,
    failed_precision_bits: float | None = None,
    phase: str = "C",
    iteration: int | None = None,
) -> AdmissionResult:
    """Screen candidates at STATIC then CLEAR fidelity and admit at most one.

    Normal mode admits the largest predicted latency gain over the best.
    When ``failed_precision_bits`` is set (the latest encrypted trial failed
    its gates), candidates that raise precision above that trial are
    preferred, cheapest first among equal gains.
    """
    result = AdmissionResult(None)
    survivors: list[tuple[Candidate, Trial]] = []
    for cand in candidates:
        st = evaluator.run_trial(
            cand.config, EvalMode.STATIC_ONLY, phase=phase, role="screen", iteration=iteration,
            proposer=cand.proposer, directions=cand.directions, rationale=cand.rationale,
        )
        result.screened.append(st)
        if not st.verdict.passed:
            continue
        cl = evaluator.run_trial(
            cand.config, EvalMode.CLEAR_ONLY, phase=phase, role="screen", iteration=iteration,
            proposer=cand.proposer, directions=cand.directions, rationale=cand.rationale,
        )
        result.screened.append(cl)
        if cl.verdict.passed:
            survivors.append((cand, cl))

    def latency(t: Trial) -> float:
        return t.metrics.clear.proxy_latency

    if failed_precision_bits is not None:
        repair = [
            (c, t) for c, t in survivors if t.metrics.clear.precision_bits - failed_precision_bits > 0
        ]
        if repair:
            repair.sort(key=lambda ct: (-(ct[1].metrics.clear.precision_bits - failed_precision_bits), latency(ct[1])))
            c, t = repair[0]
            gain = t.metrics.clear.precision_bits - failed_precision_bits
            result.admitted = Admission(c, latency(t), t, f"repair: +{gain:.2f} predicted bits over failed trial")
            return result
    gains = [(best_predicted_latency - latency(t), i, c, t) for i, (c, t) in enumerate(survivors)]
    gains = [g for g in gains if g[0] > 0]
    if gains:
        gains.sort(key=lambda g: (-g[0], g[1]))
        gain, _, c, t = gains[0]
        result.admitted = Admission(c, latency(t), t, f"predicted gain {gain:.6g}s")
    return result
