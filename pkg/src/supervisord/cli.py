"""Command-line entry points.

Commands: run, session, simulate, inspect, tools list, models list.
Config precedence: flags > environment (SUPERVISORD_*) > config file > defaults.
Stable exit codes: 2 workload spec violation, 3 unknown session, 4 corrupt
state, 10 unreachable attachment, 11 unplannable query, 12 budget exceeded,
20 clarification required in non-interactive mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

from .couplet import SimulatedBackend
from .engine import (
    EngineConfig,
    Supervisor,
    append_trace_rows,
    load_session_memory,
    load_state_file,
    save_session_memory,
    save_state_file,
    state_path,
    trace_path,
)
from .errors import (
    BudgetExceeded,
    CorruptState,
    UnplannableQuery,
    UnreachableAttachment,
    WorkloadSpecError,
)
from .harness import (
    POLICIES,
    PolicyConfig,
    compare,
    default_workload_spec,
    generate_workload,
    load_workload_file,
    per_query_delta_csv,
    run_policy,
    throughput_from_report,
)
from .memory import MemoryStore
from .routing import ModelCatalog, default_model_catalog, load_model_catalog, select_tier
from .state import Attachment, Money, QueryState
from .tools import ToolRegistry, default_registry, load_catalog, spec_to_json

EXIT_WORKLOAD_SPEC = 2
EXIT_UNKNOWN_SESSION = 3
EXIT_CORRUPT_STATE = 4
EXIT_UNREACHABLE = 10
EXIT_UNPLANNABLE = 11
EXIT_BUDGET = 12
EXIT_CLARIFICATION = 20


@dataclass
class CliConfig:
    store_root: str = "./supervisord-store"
    tools_path: Optional[str] = None
    models_path: Optional[str] = None
    flag_rules_path: Optional[str] = None
    clock_mode: str = "virtual"
    seed: int = 0
    budget_usd: Optional[str] = None
    parallelism: int = 8

    def registry(self) -> ToolRegistry:
        return load_catalog(self.tools_path) if self.tools_path else default_registry()

    def catalog(self) -> ModelCatalog:
        return load_model_catalog(self.models_path) if self.models_path else default_model_catalog()

    def engine_config(self) -> EngineConfig:
        budget = Money.from_usd(self.budget_usd) if self.budget_usd else None
        flag_rules = None
        if self.flag_rules_path:
            from .decomposition import load_flag_rules

            flag_rules = load_flag_rules(self.flag_rules_path)
        return EngineConfig(
            registry=self.registry(),
            catalog=self.catalog(),
            seed=self.seed,
            clock_mode=self.clock_mode,
            budget_cap=budget,
            flag_rules=flag_rules,
        )


def resolve_config(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        cfg.store_root = file_cfg.get("store_root", cfg.store_root)
        cfg.tools_path = file_cfg.get("tools", cfg.tools_path)
        cfg.models_path = file_cfg.get("models", cfg.models_path)
        cfg.flag_rules_path = file_cfg.get("flag_rules", cfg.flag_rules_path)
        cfg.clock_mode = file_cfg.get("clock", cfg.clock_mode)
        cfg.seed = file_cfg.get("seed", cfg.seed)
        cfg.budget_usd = file_cfg.get("budget_usd", cfg.budget_usd)
        cfg.parallelism = file_cfg.get("parallelism", cfg.parallelism)
    if os.environ.get("SUPERVISORD_STORE_ROOT"):
        cfg.store_root = os.environ["SUPERVISORD_STORE_ROOT"]
    if os.environ.get("SUPERVISORD_BUDGET_USD"):
        cfg.budget_usd = os.environ["SUPERVISORD_BUDGET_USD"]
    if getattr(args, "store_root", None):
        cfg.store_root = args.store_root
    if getattr(args, "tools", None):
        cfg.tools_path = args.tools
    if getattr(args, "models", None):
        cfg.models_path = args.models
    if getattr(args, "flag_rules", None):
        cfg.flag_rules_path = args.flag_rules
    if getattr(args, "clock", None):
        cfg.clock_mode = args.clock
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "budget_usd", None):
        cfg.budget_usd = args.budget_usd
    return cfg


def _attachment_from_arg(arg: str) -> Attachment:
    kind = "url" if "://" in arg else "path"
    return Attachment(kind, arg, declared_name=os.path.basename(arg) or arg)


def _load_fixtures(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# --- run ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    engine_cfg = cfg.engine_config()
    supervisor = Supervisor(engine_cfg)
    session = supervisor.new_session()
    state = QueryState(
        user_query=args.query,
        cost_knob=select_tier(args.knob),
        session=session,
        attachments=[_attachment_from_arg(a) for a in args.attach or []],
    )
    memory = MemoryStore()
    backend = SimulatedBackend(_load_fixtures(args.fixtures))
    try:
        outcome = supervisor.process(
            state,
            memory_store=memory,
            perceptual_backend=backend,
            clarifier=None,  # non-interactive: emit the question and exit 20
            query_id=session.session_id,
        )
    except UnreachableAttachment as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except UnplannableQuery as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNPLANNABLE
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    save_state_file(cfg.store_root, state)
    save_session_memory(cfg.store_root, session.session_id, memory)
    trace_file = append_trace_rows(cfg.store_root, session.session_id, outcome.trace_rows)
    if outcome.clarifications_user and state.clarify_response is None:
        _emit(
            args,
            {"clarification": state.clarify_question, "session_id": session.session_id},
            f"clarification needed: {state.clarify_question}",
        )
        return EXIT_CLARIFICATION
    payload = {
        "session_id": session.session_id,
        "flag": outcome.flag.value if outcome.flag else None,
        "answer": outcome.answer_text,
        "tta_ms": outcome.tta_ms,
        "cost_usd": outcome.cost.usd_str(),
        "verified": outcome.verified,
        "trace_path": trace_file,
    }
    text = (
        f"{outcome.answer_text}\n\n"
        f"flag={payload['flag']}  tta={outcome.tta_ms} ms  "
        f"cost=${payload['cost_usd']}  trace={trace_file}"
    )
    _emit(args, payload, text)
    return 0


# --- session (interactive REPL) ------------------------------------------------------


def cmd_session(args) -> int:
    cfg = resolve_config(args)
    engine_cfg = cfg.engine_config()
    supervisor = Supervisor(engine_cfg)
    if args.session:
        try:
            state = load_state_file(cfg.store_root, args.session)
        except FileNotFoundError:
            print(f"error: unknown session {args.session!r}", file=sys.stderr)
            return EXIT_UNKNOWN_SESSION
        except CorruptState as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CORRUPT_STATE
        session = state.session
    else:
        session = supervisor.new_session()
    memory = load_session_memory(cfg.store_root, session.session_id)
    backend = SimulatedBackend(_load_fixtures(args.fixtures))
    print(f"session {session.session_id} (:cost :memory :summary :quit)")
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            break
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":cost":
            print(f"cumulative cost: ${session.cumulative_cost.usd_str()}")
            continue
        if line == ":memory":
            window = list(memory.short_term)
            print(f"short-term window ({len(window)} of last {memory.turn_count} turns):")
            for rec in window:
                print(f"  [turn {rec.turn_index}] {rec.content[:80]}")
            if memory.compressed:
                print(f"compressed summary over turns "
                      f"{memory.compressed.source_start_turn}-{memory.compressed.source_end_turn}")
            continue
        if line == ":summary":
            memory.maybe_compress(force=True, on_event=lambda m: print(f"  {m}"))
            save_session_memory(cfg.store_root, session.session_id, memory)
            print("session summarized." if memory.compressed else "nothing to summarize.")
            continue
        state = QueryState(
            user_query=line,
            cost_knob=select_tier(args.knob),
            session=session,
            attachments=[],
        )
        try:
            outcome = supervisor.process(
                state,
                memory_store=memory,
                perceptual_backend=backend,
                clarifier=lambda q: input(f"{q}\n>> ") or None,
                query_id=f"{session.session_id}:{session.turn_count}",
            )
        except BudgetExceeded as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BUDGET
        print(outcome.answer_text)
        print(f"  ({outcome.tta_ms} ms, ${outcome.cost.usd_str()})")
        save_state_file(cfg.store_root, state)
        save_session_memory(cfg.store_root, session.session_id, memory)
        append_trace_rows(cfg.store_root, session.session_id, outcome.trace_rows)
    return 0


# --- simulate -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    queries = None
    try:
        if args.workload:
            spec, queries = load_workload_file(args.workload)
        else:
            spec = default_workload_spec(args.queries)
        if queries is None:
            if args.queries and args.workload:
                spec.total_queries = args.queries
            if cfg.seed:
                spec.seed = cfg.seed
            spec.validate()
    except WorkloadSpecError as exc:
        print(f"error: workload spec invalid at {exc.field_path}: {exc}", file=sys.stderr)
        return EXIT_WORKLOAD_SPEC
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for policy in policies:
        if policy not in POLICIES:
            print(f"error: unknown policy {policy!r}", file=sys.stderr)
            return EXIT_WORKLOAD_SPEC
    if queries is None:
        queries = generate_workload(spec)
    out_dir = args.out or cfg.store_root
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for policy in policies:
        report = run_policy(queries, policy, spec, PolicyConfig(), seed=cfg.seed)
        reports.append(report)
        path = os.path.join(out_dir, f"report-{policy}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
        if not args.json:
            print(report.render_table())
            print(f"  report written to {path}\n")
    payload = {"reports": [r.to_json_dict()["aggregates"] | {"policy": r.policy} for r in reports]}
    if len(reports) >= 2:
        delta = compare(reports[0], reports[1])
        payload["comparison"] = delta.to_json_dict()
        payload["throughput_64_sessions"] = {
            reports[0].policy: throughput_from_report(reports[0], 64),
            reports[1].policy: throughput_from_report(reports[1], 64),
        }
        csv_path = os.path.join(out_dir, "per-query-deltas.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(per_query_delta_csv(reports[0], reports[1]))
        if not args.json:
            print(f"comparison ({reports[0].policy} vs {reports[1].policy}):")
            print(delta.render_table())
            print(f"  per-query deltas: {csv_path}")
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    return 0


# --- inspect --------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    sid = args.session_id
    if not os.path.exists(state_path(cfg.store_root, sid)):
        print(f"error: unknown session {sid!r} under {cfg.store_root}", file=sys.stderr)
        return EXIT_UNKNOWN_SESSION
    try:
        state = load_state_file(cfg.store_root, sid)
    except CorruptState as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT_STATE
    memory = load_session_memory(cfg.store_root, sid)
    trace_file = trace_path(cfg.store_root, sid)
    rows = []
    if os.path.exists(trace_file):
        with open(trace_file, "r", encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    if args.json:
        print(json.dumps({
            "state": {
                "session_id": sid,
                "user_query": state.user_query,
                "flag": state.flag.value if state.flag else None,
                "turn_count": state.session.turn_count,
                "cumulative_cost_usd": state.session.cumulative_cost.usd_str(),
            },
            "memory": {
                "turns": memory.turn_count,
                "short_term": [r.content for r in memory.short_term],
                "compressed": bool(memory.compressed),
            },
            "trace": rows,
        }, sort_keys=True))
        return 0
    print(f"session {sid}")
    print(f"  last query : {state.user_query!r}")
    print(f"  flag       : {state.flag.value if state.flag else '-'}")
    print(f"  turns      : {state.session.turn_count}")
    print(f"  cost       : ${state.session.cumulative_cost.usd_str()}")
    print(f"memory layers: {memory.turn_count} turns, "
          f"{len(memory.short_term)} in short-term window, "
          f"compressed={'yes' if memory.compressed else 'no'}")
    for rec in memory.short_term:
        print(f"  [turn {rec.turn_index}] {rec.content[:72]}")
    print(f"trace timeline ({len(rows)} events):")
    for row in rows:
        lat = f" {row['latency_ms']}ms" if row.get("latency_ms") else ""
        print(f"  t={row['ts']:>8} {row['event']:<9} {row['node_id']:<10} {row['tool']}{lat}")
    return 0


# --- tools / models listings -----------------------------------------------------------


def cmd_tools_list(args) -> int:
    cfg = resolve_config(args)
    registry = cfg.registry()
    specs = [registry.get(t) for t in registry.all_ids()]
    if args.json:
        print(json.dumps([spec_to_json(s) for s in specs], sort_keys=True))
        return 0
    for s in specs:
        mods = ",".join(sorted(m.value for m in s.input_modalities)) or "-"
        print(f"{s.name:<22} {s.category.value:<20} in[{mods}] "
              f"latency {s.latency_prior.min_ms}-{s.latency_prior.max_ms} ms "
              f"tier {s.tier.value}")
    return 0


def cmd_models_list(args) -> int:
    cfg = resolve_config(args)
    catalog = cfg.catalog()
    if args.json:
        print(json.dumps([
            {
                "model_name": e.model_name,
                "tier": e.tier.value,
                "subflag_affinity": e.subflag_affinity.value if e.subflag_affinity else None,
                "cost_per_mtok_usd": e.cost_per_mtok.usd_str(),
            }
            for e in catalog.entries
        ], sort_keys=True))
        return 0
    for e in catalog.entries:
        affinity = e.subflag_affinity.value if e.subflag_affinity else "strong"
        print(f"{e.model_name:<26} {e.tier.value:<13} {affinity:<24} "
              f"${e.cost_per_mtok.usd_str()}/MTok")
    return 0


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supervisord",
        description="Centralized multimodal query supervisor and policy simulator.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--store-root", help="session store directory")
    parser.add_argument("--tools", help="tool catalog JSON")
    parser.add_argument("--models", help="model catalog JSON")
    parser.add_argument("--flag-rules", help="flag rule table JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--clock", choices=("virtual", "wall"))
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process one query")
    p_run.add_argument("query")
    p_run.add_argument("--attach", action="append", help="attachment path or URL")
    p_run.add_argument("--knob", default="closed_src", help="cost knob tier")
    p_run.add_argument("--fixtures", help="simulated backend fixtures JSON")
    p_run.add_argument("--budget-usd", dest="budget_usd")
    p_run.set_defaults(func=cmd_run)

    p_sess = sub.add_parser("session", help="interactive session REPL")
    p_sess.add_argument("--session", help="resume an existing session id")
    p_sess.add_argument("--knob", default="closed_src")
    p_sess.add_argument("--fixtures")
    p_sess.add_argument("--budget-usd", dest="budget_usd")
    p_sess.set_defaults(func=cmd_session)

    p_sim = sub.add_parser("simulate", help="run policy simulation over a workload")
    p_sim.add_argument("workload", nargs="?", help="workload spec JSON (default: built-in)")
    p_sim.add_argument("--policies", default="centralized,hierarchical")
    p_sim.add_argument("--queries", type=int, default=1000)
    p_sim.add_argument("--out", help="output directory for reports")
    p_sim.set_defaults(func=cmd_simulate)

    p_ins = sub.add_parser("inspect", help="print session state, memory, trace")
    p_ins.add_argument("session_id")
    p_ins.set_defaults(func=cmd_inspect)

    p_tools = sub.add_parser("tools", help="tool registry commands")
    tools_sub = p_tools.add_subparsers(dest="tools_command", required=True)
    p_tools_list = tools_sub.add_parser("list")
    p_tools_list.set_defaults(func=cmd_tools_list)

    p_models = sub.add_parser("models", help="model catalog commands")
    models_sub = p_models.add_subparsers(dest="models_command", required=True)
    p_models_list = models_sub.add_parser("list")
    p_models_list.set_defaults(func=cmd_models_list)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
