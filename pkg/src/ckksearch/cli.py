"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (a failed check, no feasible
configuration, a replay mismatch), 2 malformed input or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config_space import parse_config
from .errors import CkksearchError, CorruptTrace, InputError
from .model_ir import parse_model


class ExitCode:
    OK = 0
    FAILURE = 1
    INPUT = 2


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _emit(doc: Any, out: str | None, text: str | None = None) -> None:
    body = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(body, encoding="utf-8")
    sys.stdout.write(text if text is not None else body)


def cmd_analyze(args: argparse.Namespace) -> int:
    from .static_analyzer import analyze

    graph = parse_model(_read(args.model))
    config = parse_config(_read(args.config))
    report = analyze(graph, config)
    _emit(report.to_dict(), args.out)
    return ExitCode.OK if report.passed else ExitCode.FAILURE


def cmd_profile(args: argparse.Namespace) -> int:
    from .simulator import GateConfig, calibration_batch, check_gates, simulate
    from .static_analyzer import analyze

    graph = parse_model(_read(args.model))
    config = parse_config(_read(args.config))
    static = analyze(graph, config)
    batch = calibration_batch(graph.input_shape, seed=args.seed) if args.seed is not None else None
    report = simulate(graph, config, static.plan, batch)
    verdict = check_gates(report, static, GateConfig(security_target_bits=config.global_config.security_target_bits))
    _emit({"static": static.to_dict(), "clear": report.to_dict(), "verdict": verdict.to_dict()}, args.out)
    return ExitCode.OK if verdict.passed else ExitCode.FAILURE


def cmd_optimize(args: argparse.Namespace) -> int:
    from .orchestrator import RunConfig, optimize, parse_run_config
    from .trace import TraceRepository

    graph = parse_model(_read(args.model))
    run = parse_run_config(_read(args.run_config), Path(args.run_config).parent) if args.run_config else RunConfig()
    changes: dict[str, Any] = {}
    if args.budget is not None:
        changes["budget"] = args.budget
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.policy_endpoint is not None:
        changes["policy_endpoint"] = args.policy_endpoint
    if args.backend is not None:
        changes["backend"] = dataclasses.replace(run.backend, kind=args.backend)
    if args.trace is not None:
        changes["trace_path"] = args.trace
    if changes:
        try:
            run = dataclasses.replace(run, **changes)
        except (TypeError, ValueError) as exc:
            raise InputError(str(exc)) from None
    trace = TraceRepository(run.trace_path)
    report = optimize(run, graph, trace)
    summary = (
        f"termination: {report.termination.value}\n"
        f"encrypted trials: {report.encrypted_trials} of {run.budget}\n"
        + (f"best latency: {report.best['measured_latency_s']:.4f}s ({report.best['digest'][:12]})\n" if report.best else "best: none\n")
    )
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
        sys.stdout.write(summary)
    else:
        sys.stdout.write(report.to_json() + "\n")
    return ExitCode.OK if report.succeeded else ExitCode.FAILURE


def cmd_replay(args: argparse.Namespace) -> int:
    from .replay import DEFAULT_SCENARIO, DEFAULT_TRACE, load_scenario, replay

    scenario_path = args.scenario or DEFAULT_SCENARIO
    trace_path = args.trace or DEFAULT_TRACE
    if not Path(trace_path).exists():
        raise InputError(f"recorded trace {trace_path} not found")
    if not Path(scenario_path).exists():
        raise InputError(f"scenario {scenario_path} not found")
    result = replay(load_scenario(scenario_path), trace_path)
    lines = [f"{'trial':>5}  {'alias':<10} {'expected':<9} {'actual':<13} {'latency_s':>9} {'mae':>9} {'bits':>6}"]
    for r in result.rows:
        lat = f"{r.measured_latency_s:.2f}" if r.measured_latency_s is not None else "-"
        mae = f"{r.measured_mae:.2e}" if r.measured_mae is not None else "-"
        bits = f"{r.measured_precision_bits:.2f}" if r.measured_precision_bits is not None else "-"
        mark = "" if r.match else "  MISMATCH"
        lines.append(f"{r.trial:>5}  {r.alias:<10} {r.expected:<9} {r.actual:<13} {lat:>9} {mae:>9} {bits:>6}{mark}")
    lines.append(f"encrypted trials: {result.encrypted_trials}; best: {result.best_alias}")
    text = "\n".join(lines) + "\n"
    _emit(result.to_dict(), args.out, text if args.out or not args.json else None)
    return ExitCode.OK if result.all_match else ExitCode.FAILURE


def render_report(doc: dict[str, Any]) -> str:
    """Plain-text view of a run report: global metrics, then per-layer shares."""
    out = [
        f"model: {doc['model']}  termination: {doc['termination']}",
        f"encrypted trials: {doc['encrypted_trials']} / budget {doc['budget']}",
    ]
    rows = [("baseline", doc.get("baseline")), ("best", doc.get("best"))]
    out.append("")
    out.append(f"{'':<10}{'latency [s]':>12}{'MAE':>11}{'bits':>8}  digest")
    for name, entry in rows:
        if entry is None:
            out.append(f"{name:<10}{'N/A':>12}")
            continue
        out.append(
            f"{name:<10}{entry['measured_latency_s']:>12.3f}{entry['measured_mae']:>11.2e}"
            f"{entry['measured_precision_bits']:>8.2f}  {entry['digest'][:12]}"
        )
    best = doc.get("best")
    if best and best.get("layer_seconds"):
        total = sum(best["layer_seconds"].values()) or 1.0
        out.append("")
        out.append(f"{'layer':<12}{'seconds':>10}{'share':>9}")
        for lid, s in best["layer_seconds"].items():
            if s > 0:
                out.append(f"{lid:<12}{s:>10.3f}{100 * s / total:>8.1f}%")
    out.append("")
    out.append(f"{'#':>4} {'phase':<5} {'mode':<12} {'decision':<14} {'latency':>9}  directions")
    for t in doc["trials"]:
        if t["mode"] not in ("FHE_LIGHT", "FHE_FULL"):
            continue
        lat = t["metrics"].get("measured_latency_s")
        out.append(
            f"{t['ordinal']:>4} {t['phase']:<5} {t['mode']:<12} {str(t['decision']):<14} "
            f"{lat if lat is None else round(lat, 3)!s:>9}  {', '.join(t['directions']) or '-'}"
        )
    for note in doc.get("notes", []):
        out.append(f"note: {note}")
    return "\n".join(out) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(_read(args.report))
    except json.JSONDecodeError as exc:
        raise InputError(f"report is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not {"model", "termination", "trials"} <= doc.keys():
        raise InputError("not a run report document")
    text = render_report(doc)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckksearch", description="CKKS configuration search for encrypted inference")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="static depth/scale/security checks")
    a.add_argument("--model", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    pr = sub.add_parser("profile", help="cleartext simulation and per-layer profiles")
    pr.add_argument("--model", required=True)
    pr.add_argument("--config", required=True)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_profile)

    o = sub.add_parser("optimize", help="run the three-phase search")
    o.add_argument("--model", required=True)
    o.add_argument("--run-config")
    o.add_argument("--trace", help="trace repository (appended to)")
    o.add_argument("--out")
    o.add_argument("--seed", type=int)
    o.add_argument("--backend", choices=["mock", "recorded"])
    o.add_argument("--policy-endpoint")
    o.add_argument("--budget", type=int)
    o.set_defaults(func=cmd_optimize)

    r = sub.add_parser("replay", help="replay a recorded scenario and compare verdicts")
    r.add_argument("--trace", help="recorded trace (defaults to the bundled LeNet fixture)")
    r.add_argument("--scenario", help="scenario script (defaults to the bundled LeNet fixture)")
    r.add_argument("--json", action="store_true", help="print the JSON comparison instead of the table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    rp = sub.add_parser("report", help="render a run report as text")
    rp.add_argument("report")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return ExitCode.INPUT if exc.code else ExitCode.OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (InputError, CorruptTrace) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.INPUT
    except CkksearchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ExitCode.FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
