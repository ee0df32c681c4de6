"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import random
import time

import pytest

from ckksearch.backend import BackendBinding
from ckksearch.config_space import Scope
from ckksearch.controller import Proposer, UserConstraints
from ckksearch.cost_model import CostCoefficients
from ckksearch.model_ir import graph_from_dict
from ckksearch.orchestrator import Orchestrator, RunConfig, Termination
from ckksearch.replay import DATA_DIR, DEFAULT_SCENARIO, DEFAULT_TRACE, load_scenario, replay
from ckksearch.model_ir import parse_model
from ckksearch.simulator import GateConfig, precision_from_mae
from ckksearch.static_analyzer import MAX_LOGQ_128, check_depth, estimate_security
from ckksearch.bootstrap import BootstrapPlan
from conftest import make_config
from graphgen import random_graph_doc
from oracles.lattice import max_log_q
from oracles.levels import interpret
from oracles.lstsq import solve_normal_equations

HIDDEN = CostCoefficients(0.002, 0.005, 0.4, 0.05)


@pytest.fixture
def verdict(capsys):
    """Run a criterion body, time it, print one line, then assert."""

    def run(number, title, body, limit_s):
        start = time.perf_counter()
        detail = ""
        ok = False
        try:
            detail = body() or ""
            ok = True
        except AssertionError as exc:
            detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        elapsed = time.perf_counter() - start
        if ok and elapsed >= limit_s:
            ok = False
            detail = f"runtime {elapsed:.2f}s over the {limit_s}s limit"
        with capsys.disabled():
            print(f"\nACCEPTANCE #{number} {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s) {title}: {detail}")
        assert ok, detail

    return run


# 1 ----------------------------------------------------------------------------


def test_criterion_01_precision_rule(verdict):
    pairs = [(5.89e-6, 17.37), (1.13e-7, 23.07), (1.31e-6, 19.54), (2.9e-2, 5.12), (1.6e-3, 9.27)]

    def body():
        worst = max(abs(precision_from_mae(m) - b) for m, b in pairs)
        assert worst <= 0.1, f"worst deviation {worst:.3f} bits"
        return f"max deviation {worst:.3f} bits over 5 pairs"

    verdict(1, "precision rule", body, 1.0)


# 2 ----------------------------------------------------------------------------


def test_criterion_02_case_study_replay(verdict):
    def body():
        scenario = load_scenario(DEFAULT_SCENARIO)
        assert scenario.gates == GateConfig(mae_max=1e-2, precision_min_bits=8.0)
        result = replay(scenario, DEFAULT_TRACE)
        got = [r.actual for r in result.rows]
        assert got == ["accept", "reject", "reject", "accept"], f"verdicts {got}"
        assert result.encrypted_trials == 4, f"{result.encrypted_trials} encrypted trials"
        return f"verdicts {'/'.join(got)}, {result.encrypted_trials} encrypted trials"

    verdict(2, "recorded case-study replay", body, 5.0)


# 3 ----------------------------------------------------------------------------


def _deep_mlp():
    layers = []
    for i in range(6):
        layers.append({"id": f"fc{i}", "kind": "Linear", "shape_out": [32]})
        layers.append({"id": f"act{i}", "kind": "ActPoly", "act_degree": 7, "act_error": 1e-4})
    return graph_from_dict({"name": "deep-mlp", "input_shape": [64], "layers": layers})


def _calibrate_on_mock(perturbation):
    run = RunConfig(
        budget=2,
        phase_a_keep=2,
        max_c_iterations=0,
        backend=BackendBinding(hidden=HIDDEN, perturbation=perturbation, seed=3),
        constraints=UserConstraints(max_chain_length=12),  # forces bootstraps into the design
    )
    o = Orchestrator(run, _deep_mlp())
    o.optimize()
    assert o.calibration is not None and not o.calibration.rank_deficient, "calibration fell back to seeds"
    return o


def test_criterion_03_calibration_recovery(verdict):
    def body():
        exact = _calibrate_on_mock(0.0)
        for got, want in zip(exact.calibration.coefficients.as_tuple(), HIDDEN.as_tuple()):
            assert abs(got - want) <= 1e-6 * want, f"exact fit {got} vs {want}"
        noisy = _calibrate_on_mock(0.01)
        oracle = solve_normal_equations(
            [list(c.vector()) for c, _ in noisy.observations], [t for _, t in noisy.observations]
        )
        worst = 0.0
        for got, ref, want in zip(noisy.calibration.coefficients.as_tuple(), oracle, HIDDEN.as_tuple()):
            assert abs(got - float(ref)) <= 1e-6 * abs(float(ref)), f"fit {got} differs from oracle {float(ref)}"
            worst = max(worst, abs(got - want) / want)
        assert worst <= 0.05, f"worst relative error {worst:.3%}"
        return f"{len(noisy.observations)} rows; 1% perturbation worst error {worst:.2%}"

    verdict(3, "calibration recovery", body, 5.0)


# 4 and 5 ----------------------------------------------------------------------

_CORPUS = []


def _workflow_corpus():
    if _CORPUS:
        return _CORPUS
    for seed in range(200):
        rng = random.Random(seed)
        graph = graph_from_dict(random_graph_doc(rng, name=f"g{seed}"))
        templates = rng.choice((("high-precision",), ("high-precision", "aggressive-packing")))
        keep = rng.randint(1, 2)
        budget = rng.randint(max(2, keep), 8)
        run = RunConfig(
            budget=budget,
            phase_a_keep=keep,
            final_full=rng.random() < 0.3,
            constraints=UserConstraints(templates=templates),
            backend=BackendBinding(hidden=HIDDEN, perturbation=rng.choice((0.0, 0.01, 0.05)), seed=seed),
        )
        _CORPUS.append((run, Orchestrator(run, graph).optimize()))
    return _CORPUS


def test_criterion_04_budget_safety(verdict):
    def body():
        corpus = _workflow_corpus()
        max_ratio = 0
        for run, report in corpus:
            assert report.encrypted_trials <= run.budget, f"{report.encrypted_trials} > {run.budget}"
            per_iter = {}
            for t in report.trials:
                if t["phase"] == "C" and t["mode"] == "FHE_LIGHT":
                    per_iter[t["iteration"]] = per_iter.get(t["iteration"], 0) + 1
            assert all(v <= 1 for v in per_iter.values()), f"iteration with {max(per_iter.values())} LIGHT trials"
            max_ratio = max(max_ratio, report.encrypted_trials / run.budget)
        phase_c = sum(any(t["phase"] == "C" and t["mode"] == "FHE_LIGHT" for t in r.trials) for _, r in corpus)
        return f"{len(corpus)} runs, max budget use {max_ratio:.0%}, {phase_c} runs with Phase-C trials"

    verdict(4, "budget safety", body, 60.0)


def test_criterion_05_admission_soundness(verdict):
    def body():
        corpus = _workflow_corpus()
        checked = 0
        for run, report in corpus:
            cleared = set()
            for t in report.trials:
                if t["mode"] == "CLEAR_ONLY" and t["verdict"]["passed"]:
                    cleared.add(t["digest"])
                if t["mode"] in ("FHE_LIGHT", "FHE_FULL"):
                    assert t["digest"] in cleared, f"encrypted trial {t['ordinal']} without a CLEAR pass"
                    checked += 1
            if report.best is not None:
                best = [t for t in report.trials if t["ordinal"] == report.best["ordinal"]][0]
                assert best["verdict"]["passed"], f"best config of {report.model} fails {best['verdict']['reasons']}"
        return f"{checked} encrypted entries checked"

    verdict(5, "admission soundness", body, 60.0)


# 6 ----------------------------------------------------------------------------


def test_criterion_06_depth_oracle(verdict):
    def body():
        rng = random.Random(606)
        for _ in range(500):
            doc = random_graph_doc(rng)
            graph = graph_from_dict(doc)
            chain_len = rng.randint(2, 14)
            cfg = make_config(log_n=17, chain=(60,) + (40,) * (chain_len - 1))
            boots = {lid for lid in graph.layer_ids[:-1] if rng.random() < 0.3}
            plan = BootstrapPlan(tuple(b for b in graph.layer_ids if b in boots), (), (), frozenset())
            got = check_depth(graph, cfg, plan)
            ref = interpret(doc["layers"], chain_len, boots)
            assert (got.depth_ok, got.first_overflow_layer) == (ref.ok, ref.first_overflow), "verdict mismatch"
            assert list(got.remaining_after) == ref.remaining_after, "level trace mismatch"
        return "500 triples agree"

    verdict(6, "depth accounting oracle", body, 10.0)


# 7 ----------------------------------------------------------------------------


def test_criterion_07_security_estimator(verdict):
    def body():
        for log_n in MAX_LOGQ_128:
            prev = None
            for logq in range(20, 4000):
                s = estimate_security(log_n, logq)
                assert prev is None or s <= prev, f"not monotone in logQ at {log_n}/{logq}"
                prev = s
                if log_n < 17:
                    assert estimate_security(log_n + 1, logq) >= s, f"not monotone in logN at {log_n}/{logq}"
        worst = 0
        for log_n, value in MAX_LOGQ_128.items():
            ref = max_log_q(log_n)
            worst = max(worst, abs(ref - value))
            assert abs(ref - value) <= 2, f"log_n {log_n}: table {value} vs regenerated {ref}"
            assert abs(estimate_security(log_n, ref) - 128) <= 2
        return f"monotone on the grid; anchors within {worst} bit(s) of the regenerated table"

    verdict(7, "security estimator", body, 1.0)


# 8 ----------------------------------------------------------------------------


def test_criterion_08_mock_improvement(verdict):
    def body():
        mlp = parse_model((DATA_DIR / "mlp.json").read_text())
        run = RunConfig(
            budget=8,
            constraints=UserConstraints(templates=("high-precision",)),
            backend=BackendBinding(hidden=HIDDEN, perturbation=0.01, seed=7),
        )
        report = Orchestrator(run, mlp).optimize()
        base, best = report.baseline["measured_latency_s"], report.best["measured_latency_s"]
        seq = report.accepted_best_latencies
        assert best < base, f"best {best} not below baseline {base}"
        assert all(b < a for a, b in zip(seq, seq[1:])), f"accepted-best sequence {seq} not monotone"
        return " -> ".join(f"{v:.2f}s" for v in seq)

    verdict(8, "end-to-end improvement on mock", body, 10.0)


# 9 ----------------------------------------------------------------------------


def test_criterion_09_honest_infeasibility(verdict):
    def body():
        layers = []
        for i in range(14):
            layers.append({"id": f"fc{i}", "kind": "Linear", "shape_out": [64]})
            layers.append({"id": f"act{i}", "kind": "ActPoly", "act_degree": 31, "act_error": 1e-4})
        graph = graph_from_dict({"name": "too-deep", "input_shape": [64], "layers": layers})
        report = Orchestrator(RunConfig(), graph).optimize()
        assert report.termination is Termination.NO_FEASIBLE_REGIME, report.termination.value
        assert report.encrypted_trials == 0
        assert report.best is None
        return f"{report.termination.value}, 0 encrypted trials"

    verdict(9, "honest infeasibility", body, 5.0)


# 10 ---------------------------------------------------------------------------


class _Adversary:
    """Stub endpoint serving malformed, unknown or out-of-scope choices."""

    def __init__(self, seed):
        self.rng = random.Random(seed)
        self.served = 0

    def __call__(self, endpoint, body, timeout):
        self.served += 1
        offered = [o["id"] for o in body["offered"]]
        kind = self.served % 6
        if kind == 0:
            raise TimeoutError("stub timeout")
        if kind == 1:
            return self.rng.choice([None, "accept everything", [1, 2], {"choice": offered}, {"chosen": "x"}])
        if kind == 2:
            return {"chosen": ["SetLogScale@global=99", "DisableSecurity"]}
        if kind == 3:  # global edits offered to the layer agent
            return {"chosen": ["ShortenModulusTail", "RelaxScaleOneStep"] + offered[:1]}
        if kind == 4:
            return {"chosen": offered[:1] * 2}
        return {"chosen": [o + "!" for o in offered[:2]], "rationale": 5}


class _ScopeCheckingOrchestrator(Orchestrator):
    def _patch(self, config, directions, scope):
        out = super()._patch(config, directions, scope)
        if scope is Scope.LAYER_AGENT:
            assert out.global_config == config.global_config, "layer agent changed a global field"
        return out


def test_criterion_10_policy_safety(verdict):
    def body():
        mlp = parse_model((DATA_DIR / "mlp.json").read_text())
        served = fallbacks = 0
        seed = 0
        while served < 120:
            adversary = _Adversary(seed)
            budget = 4 + seed % 5
            run = RunConfig(
                budget=budget,
                policy_endpoint="http://stub",
                constraints=UserConstraints(templates=("high-precision",)),
                backend=BackendBinding(hidden=HIDDEN, perturbation=0.01, seed=seed),
            )
            o = _ScopeCheckingOrchestrator(run, mlp, transport=adversary)
            report = o.optimize()
            served += adversary.served
            fallbacks += o.policy.fallbacks
            assert o.policy.fallbacks == o.policy.calls == adversary.served, "a bad response was not rejected"
            assert report.encrypted_trials <= budget, "budget overrun"
            assert all(t["proposer"] != Proposer.REMOTE_LLM.value for t in report.trials)
            if report.best is not None:
                best = [t for t in report.trials if t["ordinal"] == report.best["ordinal"]][0]
                assert best["verdict"]["passed"], "gate bypass"
            seed += 1
        return f"{served} adversarial responses, {fallbacks} fallbacks, {seed} runs"

    verdict(10, "policy safety under adversarial responses", body, 10.0)
