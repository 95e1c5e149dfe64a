"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 chain verification failure,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import analytics, policy, simulation
from .governance import acknowledgement_record
from .ledger import (AnchorMode, Chain, KeyedDigestSigner, LedgerError, export_jsonl,
                     read_chain_file, verify_chain_file)

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
OUT_ENV = "TRUSTGOV_OUT"
SECRET_ENV = "TRUSTGOV_SECRET"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    subcommand: str
    out_dir: Path
    scenario: str | None = None
    policy_path: Path | None = None
    seed: int | None = None
    flags: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.policy_path is not None and not self.policy_path.is_file():
            raise UsageError(f"policy file not found: {self.policy_path}")
        if self.scenario is not None:
            p = Path(self.scenario)
            if p.suffix in (".yaml", ".yml") and not p.is_file():
                raise UsageError(f"scenario file not found: {p}")
            if p.suffix not in (".yaml", ".yml") and self.scenario not in simulation.packaged_scenarios():
                raise UsageError(f"unknown scenario {self.scenario!r}; packaged: "
                                 + ", ".join(simulation.packaged_scenarios()))


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be integers >= 1")
    return vals


def _secret(args) -> bytes:
    if getattr(args, "secret", None):
        return args.secret.encode("utf-8")
    env = os.environ.get(SECRET_ENV)
    return env.encode("utf-8") if env else simulation.DEFAULT_SECRET


def _signer(args) -> KeyedDigestSigner:
    return KeyedDigestSigner(master_secret=_secret(args), auto_register=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trustgov", description="Trust-governed multi-agent experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, policy_opt=True):
        sp.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default ${OUT_ENV} or ./out)")
        if policy_opt:
            sp.add_argument("--policy", type=Path, default=None, help="policy matrix YAML")
        sp.add_argument("--secret", default=None, help=f"signing master secret (default ${SECRET_ENV})")

    c = sub.add_parser("run-convergence", help="feedback convergence experiment")
    common(c)
    c.add_argument("--scenario", default="default", help="packaged scenario name or YAML path")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--iterations", type=int, default=None)
    c.add_argument("--requests", type=int, default=None)
    c.add_argument("--noise", type=float, default=None, help="override every reasoner's noise amplitude")
    c.add_argument("--anchor", choices=("synchronous", "batched"), default=None,
                   help="agent chain anchoring mode")

    r = sub.add_parser("run-perf", help="throughput and delay measurement")
    common(r)
    r.add_argument("--sizes", type=_int_list, default=[100, 500, 1000, 2000])
    r.add_argument("--agents", type=int, default=3)
    r.add_argument("--seed", type=int, default=7)
    r.add_argument("--concurrent", action="store_true",
                   help="run each round's agents on a thread pool (not replayable)")

    s = sub.add_parser("project-scale", help="queueing projection to more agents")
    common(s, policy_opt=False)
    s.add_argument("--agents", type=_int_list, default=[3, 6, 9])
    s.add_argument("--from-measured", type=Path, default=None, help="performance CSV from run-perf")
    s.add_argument("--size", type=int, default=None, help="row of the performance CSV to calibrate on")
    s.add_argument("--contention", type=float, default=None)
    s.add_argument("--servers", type=int, default=1)

    v = sub.add_parser("verify-chain", help="verify a persisted chain file")
    v.add_argument("chain", type=Path)
    v.add_argument("--secret", default=None)

    e = sub.add_parser("export", help="export a chain to JSONL and/or analyse a convergence CSV")
    common(e, policy_opt=False)
    e.add_argument("--chain", type=Path, action="append", default=[])
    e.add_argument("--convergence-csv", type=Path, default=None)
    e.add_argument("--baseline-model", default="gpt")

    a = sub.add_parser("ack-escalation", help="confirm a pending escalation; token on stdin")
    common(a, policy_opt=False)
    return p


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "out"))


def _matrix(args) -> policy.PolicyMatrix:
    if args.policy is None:
        return policy.DEFAULT_MATRIX
    return policy.load_matrix(args.policy)


def cmd_run_convergence(args) -> int:
    cfg = RunConfig("run-convergence", _out_dir(args), args.scenario, args.policy, args.seed)
    cfg.validate()
    scenario = simulation.load_scenario(args.scenario).with_overrides(
        seed=args.seed, iterations=args.iterations, requests=args.requests, noise=args.noise,
        agent_anchor=None if args.anchor is None else (
            AnchorMode.synchronous() if args.anchor == "synchronous" else AnchorMode.batched()),
    )
    out = cfg.out_dir
    run = simulation.run_convergence(scenario, _matrix(args), chain_dir=out / "chains",
                                     secret=_secret(args))
    paths = simulation.write_convergence_outputs(run, out)
    if scenario.iterations >= 2:
        red = analytics.mae_reduction(run.reports, scenario.baseline_model)
        (out / "analysis.csv").write_text(analytics.reduction_csv(red), encoding="utf-8")
        (out / "baseline_oracle.csv").write_text(analytics.comparison_csv(red), encoding="utf-8")
        (out / "report.md").write_text(analytics.markdown_report(red), encoding="utf-8")
        avg = red.average_reduction()
        if avg is not None:
            print(f"average pooled MAE reduction: {100 * avg:.1f}%")
    if run.node.pending_confirmations:
        print(f"{len(run.node.pending_confirmations)} escalation(s) await human confirmation; "
              f"see {paths['pending']}")
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def cmd_run_perf(args) -> int:
    cfg = RunConfig("run-perf", _out_dir(args), policy_path=args.policy, seed=args.seed)
    cfg.validate()
    if args.agents < 1:
        raise UsageError("--agents must be >= 1")
    results = simulation.run_performance(args.sizes, args.agents, args.seed, _matrix(args),
                                         concurrent=args.concurrent)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "perf.csv").write_text(simulation.perf_csv(results), encoding="utf-8")
    table = simulation.perf_markdown(results)
    (cfg.out_dir / "perf.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_project_scale(args) -> int:
    out = _out_dir(args)
    if args.from_measured is not None:
        if not args.from_measured.is_file():
            raise UsageError(f"measured CSV not found: {args.from_measured}")
        measured = analytics.read_measured(args.from_measured, args.size)
    else:
        measured = analytics.Measured(*analytics.DEFAULT_MEASURED, agents=analytics.REFERENCE_AGENTS[0])
    rows = analytics.mmc_project(measured, args.agents, args.contention, args.servers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "projection.csv").write_text(analytics.projection_csv(rows), encoding="utf-8")
    md = analytics.markdown_report(projection=rows)
    (out / "projection.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def cmd_verify_chain(args) -> int:
    if not args.chain.is_file():
        raise UsageError(f"chain file not found: {args.chain}")
    bad = verify_chain_file(args.chain, _signer(args))
    if bad is not None:
        print(f"first bad height: {bad}")
        return EXIT_VERIFY
    print(f"ok: {len(read_chain_file(args.chain))} blocks verified")
    return EXIT_OK


def cmd_export(args) -> int:
    if not args.chain and args.convergence_csv is None:
        raise UsageError("export needs --chain and/or --convergence-csv")
    out = _out_dir(args)
    for path in [*args.chain, args.convergence_csv]:
        if path is not None and not path.is_file():
            raise UsageError(f"file not found: {path}")
    out.mkdir(parents=True, exist_ok=True)
    for path in args.chain:
        target = out / (path.name + ".jsonl")
        export_jsonl(read_chain_file(path), target)
        print(f"wrote {target}")
    if args.convergence_csv is not None:
        reports = analytics.reports_from_csv(args.convergence_csv)
        red = analytics.mae_reduction(reports, args.baseline_model)
        (out / "analysis.csv").write_text(analytics.reduction_csv(red), encoding="utf-8")
        (out / "baseline_oracle.csv").write_text(analytics.comparison_csv(red), encoding="utf-8")
        (out / "report.md").write_text(analytics.markdown_report(red), encoding="utf-8")
        print(f"wrote {out / 'report.md'}")
    return EXIT_OK


def cmd_ack_escalation(args) -> int:
    out = _out_dir(args)
    pending_path = out / "pending_escalations.json"
    chain_path = out / "chains" / "sora.chain"
    if not pending_path.is_file() or not chain_path.is_file():
        raise UsageError(f"no halted run under {out}")
    token = sys.stdin.readline().strip()
    if not token:
        raise UsageError("expected a confirmation token on standard input")
    pending = json.loads(pending_path.read_text(encoding="utf-8"))
    match = [p for p in pending if p.get("token") == token]
    if not match:
        raise RuntimeError(f"no pending escalation with token {token!r}")
    chain = Chain.open("sora", _signer(args), chain_path)
    now = max(match[0]["timestamp"], chain[-1].timestamp if chain.height else 0.0)
    rec = acknowledgement_record(match[0], now)
    chain.append(rec.to_dict(), "sora", now)
    pending.remove(match[0])
    pending_path.write_text(json.dumps(pending, indent=2) + "\n", encoding="utf-8")
    print(rec.to_line())
    return EXIT_OK


COMMANDS = {
    "run-convergence": cmd_run_convergence,
    "run-perf": cmd_run_perf,
    "project-scale": cmd_project_scale,
    "verify-chain": cmd_verify_chain,
    "export": cmd_export,
    "ack-escalation": cmd_ack_escalation,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"trustgov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LedgerError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"trustgov: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
