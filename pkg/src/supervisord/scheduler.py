"""Execution graphs: flag-shaped DAG construction, virtual-clock execution,
local repair, clarification checks, and structural output verification.

Independent branches run concurrently, so total latency under the virtual
clock equals the longest dependency chain of sampled node latencies rather
than their sum. A failing node is repaired in place: its tool is swapped for
the next-ranked capable alternative while every completed node's result is
preserved.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .couplet import PerceptualTask, TaskKind
from .errors import NoCapableTool, NodeFailure, PipelineFailed, UnplannableQuery
from .routing import RoutingDecision
from .state import (
    CostKnob,
    ExecutionFlag,
    Modality,
    Money,
    QueryState,
)
from .tools import Requirement, ToolId, ToolRegistry

DEFAULT_REPAIR_LIMIT = 2
DEFAULT_CLARIFICATION_LIMIT = 3
DEFAULT_CLARIFICATION_THRESHOLD = 0.5
DEFAULT_FAILURE_CONFIDENCE = 0.35
DEFAULT_MOE_WIDTH = 3

# Task kind -> capability tag its node's tool must produce. OCR and native
# parsing are distinct capabilities so scanned pages avoid native parsers.
KIND_OUTPUT_TAGS: dict[TaskKind, str] = {
    TaskKind.DETECT_OBJECTS: "detections",
    TaskKind.EMBED_IMAGE: "image_embedding",
    TaskKind.OCR: "ocr",
    TaskKind.TRANSCRIBE: "transcript",
    TaskKind.EXTRACT_TABLES: "tables",
    TaskKind.GENERATE_IMAGE: "image_ref",
    TaskKind.PARSE_PDF: "parse",
}


def stable_seed(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


@dataclass
class GraphNode:
    node_id: str
    tool: ToolId
    requirement: Requirement
    role: str  # perceptual | model | route | align | aggregate | decompose | synthesize | overhead
    task: Optional[PerceptualTask] = None
    model_name: Optional[str] = None
    segment: Optional[str] = None  # answer segment this node feeds
    status: str = "pending"  # pending | running | done | failed | repaired
    failed_tools: list[ToolId] = field(default_factory=list)
    repairs: int = 0


@dataclass
class RepairEvent:
    failed_node: str
    cause: str
    replacement_tool: ToolId
    preserved_nodes: int


@dataclass
class NodeResult:
    node_id: str
    output: dict[str, Any]
    confidence: float
    latency_ms: int
    cost: Money
    tool_name: str
    tokens: int = 0
    critical: bool = False


@dataclass
class TraceRow:
    """One JSON-lines trace event."""

    ts: int
    session_id: str
    node_id: str
    tool: str
    event: str  # start | done | failed | repaired | clarify
    latency_ms: Optional[int] = None
    cost_usd: Optional[str] = None
    confidence: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "ts": self.ts,
            "session_id": self.session_id,
            "node_id": self.node_id,
            "tool": self.tool,
            "event": self.event,
            "latency_ms": self.latency_ms,
            "cost_usd": self.cost_usd,
            "confidence": self.confidence,
        }


class ExecutionGraph:
    """DAG of tool invocations with per-node status and a repair log."""

    def __init__(self):
        self.nodes: dict[str, GraphNode] = {}
        self.edges: list[tuple[str, str]] = []
        self.repair_log: list[RepairEvent] = []

    def add_node(self, node: GraphNode) -> GraphNode:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node
        return node

    def add_edge(self, producer: str, consumer: str) -> None:
        if producer not in self.nodes or consumer not in self.nodes:
            raise ValueError(f"edge references unknown node: {producer} -> {consumer}")
        self.edges.append((producer, consumer))

    def parents(self, node_id: str) -> list[str]:
        return [p for p, c in self.edges if c == node_id]

    def children(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]

    def validate_acyclic(self) -> None:
        state: dict[str, int] = {}

        def visit(node_id: str) -> None:
            mark = state.get(node_id, 0)
            if mark == 1:
                raise ValueError("execution graph contains a dependency cycle")
            if mark == 2:
                return
            state[node_id] = 1
            for child in self.children(node_id):
                visit(child)
            state[node_id] = 2

        for node_id in self.nodes:
            visit(node_id)

    def done_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.status == "done")


# --- graph construction -----------------------------------------------------------


def _attachments_by_modality(state: QueryState, *modalities: Modality):
    wanted = set(modalities)
    return [
        a for a in state.attachments
        if a.detected_modality in wanted
    ]


def _attachment_ref(att) -> str:
    return att.declared_name or str(att.source)


def build_graph(
    flag: ExecutionFlag,
    state: QueryState,
    registry: ToolRegistry,
    *,
    routing_decision: Optional[RoutingDecision] = None,
    parse_task: Optional[Callable[..., PerceptualTask]] = None,
    moe_width: int = DEFAULT_MOE_WIDTH,
) -> ExecutionGraph:
    """Build the flag-shaped execution graph for a reconciled query state.

    Raises UnplannableQuery when no registered tool covers a required step.
    """
    from .couplet import parse_intent  # local import avoids a cycle at module load

    parse = parse_task or parse_intent
    graph = ExecutionGraph()

    def match(requirement: Requirement) -> ToolId:
        try:
            return registry.match_tools(requirement)[0]
        except NoCapableTool as exc:
            raise UnplannableQuery(str(exc), requirement=exc.requirement) from exc

    def perceptual_node(node_id: str, att, segment: str, modalities=None) -> GraphNode:
        modality = att.detected_modality
        scanned = modality is Modality.IMAGE or (
            att.declared_name is not None and "scan" in att.declared_name.lower()
        )
        task = parse(
            state.user_query,
            modality,
            attachment_ref=_attachment_ref(att),
            scanned=scanned,
        )
        requirement = Requirement(
            input_modalities=frozenset(modalities or {modality}),
            output_tags=frozenset({KIND_OUTPUT_TAGS[task.kind]}),
            state=state,
        )
        return graph.add_node(
            GraphNode(
                node_id=node_id,
                tool=match(requirement),
                requirement=requirement,
                role="perceptual",
                task=task,
                segment=segment,
            )
        )

    if flag in (ExecutionFlag.AUDIO, ExecutionFlag.VISION, ExecutionFlag.DOCUMENT,
                ExecutionFlag.IMAGEN):
        modality_map = {
            ExecutionFlag.AUDIO: (Modality.AUDIO,),
            ExecutionFlag.VISION: (Modality.IMAGE,),
            ExecutionFlag.DOCUMENT: (Modality.DOCUMENT, Modality.IMAGE),
            ExecutionFlag.IMAGEN: (Modality.IMAGE,),
        }
        attachments = _attachments_by_modality(state, *modality_map[flag])
        if not attachments:
            raise UnplannableQuery(f"flag {flag.value} requires a matching attachment")
        segment = {
            ExecutionFlag.AUDIO: "transcript",
            ExecutionFlag.VISION: "detections",
            ExecutionFlag.DOCUMENT: "extraction",
            ExecutionFlag.IMAGEN: "image",
        }[flag]
        if len(attachments) == 1:
            perceptual_node("p0", attachments[0], segment)
        else:
            # Several attachments of the same modality: independent branches
            # joined by a synthesis node.
            synth_req = Requirement(output_tags=frozenset({"synthesis"}), state=state)
            synth = graph.add_node(
                GraphNode("synth", match(synth_req), synth_req, role="synthesize",
                          segment="synthesis")
            )
            for i, att in enumerate(attachments):
                node = perceptual_node(f"p{i}", att, f"{segment}_{i}")
                graph.add_edge(node.node_id, synth.node_id)

    elif flag is ExecutionFlag.VIDEO:
        videos = _attachments_by_modality(state, Modality.VIDEO)
        if not videos:
            raise UnplannableQuery("video flag requires a video attachment")
        att = videos[0]
        ref = _attachment_ref(att)
        detect_req = Requirement(
            input_modalities=frozenset({Modality.VIDEO}),
            output_tags=frozenset({"detections"}),
            state=state,
        )
        frames = graph.add_node(
            GraphNode(
                "frames", match(detect_req), detect_req, role="perceptual",
                task=PerceptualTask(TaskKind.DETECT_OBJECTS, {"frame_interval_s": 1.0}, ref),
                segment="detections",
            )
        )
        audio_req = Requirement(
            input_modalities=frozenset({Modality.VIDEO}),
            output_tags=frozenset({"transcript"}),
            state=state,
        )
        speech = graph.add_node(
            GraphNode(
                "speech", match(audio_req), audio_req, role="perceptual",
                task=PerceptualTask(TaskKind.TRANSCRIBE, {"language": "auto"}, ref),
                segment="transcript",
            )
        )
        align_req = Requirement(output_tags=frozenset({"timeline"}), state=state)
        align = graph.add_node(
            GraphNode("align", match(align_req), align_req, role="align", segment="timeline")
        )
        graph.add_edge(frames.node_id, align.node_id)
        graph.add_edge(speech.node_id, align.node_id)

    elif flag is ExecutionFlag.ROUTELLM:
        if routing_decision is None:
            raise UnplannableQuery("routellm flag requires a routing decision")
        route_req = Requirement(
            input_modalities=frozenset({Modality.TEXT}),
            output_tags=frozenset({"complexity_score"}),
            state=state,
        )
        route = graph.add_node(
            GraphNode("route", match(route_req), route_req, role="route")
        )
        invoke_req = Requirement(
            input_modalities=frozenset({Modality.TEXT}),
            output_tags=frozenset({"answer_text"}),
            tier=_invoke_tier(routing_decision),
            state=state,
        )
        invoke = graph.add_node(
            GraphNode(
                "invoke", match(invoke_req), invoke_req, role="model",
                model_name=routing_decision.chosen_model, segment="answer",
            )
        )
        graph.add_edge(route.node_id, invoke.node_id)

    elif flag is ExecutionFlag.MOE:
        agg_req = Requirement(output_tags=frozenset({"aggregation"}), state=state)
        agg = graph.add_node(
            GraphNode("aggregate", match(agg_req), agg_req, role="aggregate",
                      segment="answer")
        )
        expert_req = Requirement(
            input_modalities=frozenset({Modality.TEXT}),
            output_tags=frozenset({"answer_text"}),
            state=state,
        )
        for i in range(moe_width):
            expert = graph.add_node(
                GraphNode(f"expert{i}", match(expert_req), expert_req, role="model",
                          segment=f"expert_{i}")
            )
            graph.add_edge(expert.node_id, agg.node_id)

    elif flag is ExecutionFlag.COMPLEX:
        decomp_req = Requirement(
            input_modalities=frozenset({Modality.TEXT}),
            output_tags=frozenset({"complexity_score"}),
            state=state,
        )
        decomp = graph.add_node(
            GraphNode("decompose", match(decomp_req), decomp_req, role="decompose")
        )
        synth_req = Requirement(output_tags=frozenset({"synthesis"}), state=state)
        synth = graph.add_node(
            GraphNode("synth", match(synth_req), synth_req, role="synthesize",
                      segment="synthesis")
        )
        subtasks = _complex_subtasks(state)
        for i, (att, segment) in enumerate(subtasks):
            if att is not None:
                node = perceptual_node(f"branch{i}", att, segment)
            else:
                # Text-only subtask runs on a lightweight model.
                req = Requirement(
                    input_modalities=frozenset({Modality.TEXT}),
                    output_tags=frozenset({"answer_text"}),
                    state=state,
                )
                node = graph.add_node(
                    GraphNode(f"branch{i}", match(req), req, role="model", segment=segment)
                )
            graph.add_edge(decomp.node_id, node.node_id)
            graph.add_edge(node.node_id, synth.node_id)
    else:  # pragma: no cover - flag enum is closed
        raise UnplannableQuery(f"unsupported flag {flag}")

    graph.validate_acyclic()
    return graph


def _invoke_tier(decision: RoutingDecision) -> Optional[CostKnob]:
    # The invoke node's latency/tool tier mirrors the chosen model family;
    # strong routes bind to the closed-tier tool, weak to the open-tier one,
    # except couplet-tier weak models which bind to the couplet coordinator.
    if decision.route == "strong":
        return CostKnob.CLOSED_SRC
    if decision.chosen_model.startswith("couplet-"):
        return CostKnob.TRAD_COUPLET
    return CostKnob.OPEN_SRC


def _complex_subtasks(state: QueryState):
    """Split a complex query into enumerable subtasks (heuristic).

    Attachments become per-attachment branches; with fewer than two
    attachments, conjunction clauses become text subtasks.
    """
    perceptual = [a for a in state.attachments if a.detected_modality]
    if len(perceptual) >= 2:
        return [(att, f"part_{i}") for i, att in enumerate(perceptual)]
    if len(perceptual) == 1:
        return [(perceptual[0], "part_0"), (None, "part_1")]
    clauses = max(2, min(4, state.user_query.lower().count(" and ") + 1))
    return [(None, f"part_{i}") for i in range(clauses)]


# --- execution ---------------------------------------------------------------------


@dataclass
class ExecutionOutcome:
    results: list[NodeResult]
    total_latency_ms: int
    trace: list[TraceRow]
    critical_node_ids: set[str] = field(default_factory=set)

    def min_critical_confidence(self) -> float:
        critical = [r.confidence for r in self.results if r.critical]
        return min(critical) if critical else 1.0


def longest_path_ms(edges: list[tuple[str, str]], latencies: dict[str, int]) -> int:
    """Longest dependency chain over per-node latencies (DAG assumed)."""
    children: dict[str, list[str]] = {}
    indegree: dict[str, int] = {n: 0 for n in latencies}
    for p, c in edges:
        children.setdefault(p, []).append(c)
        indegree[c] += 1
    finish: dict[str, int] = {}
    order = [n for n in latencies if indegree[n] == 0]
    queue = list(order)
    while queue:
        node = queue.pop(0)
        start = max((finish[p] for p, c in edges if c == node), default=0)
        finish[node] = start + latencies[node]
        for child in children.get(node, ()):
            indegree[child] -= 1
            if indegree[child] == 0:
                queue.append(child)
    return max(finish.values(), default=0)


class Scheduler:
    """Runs execution graphs under a clock with bounded local repair."""

    def __init__(
        self,
        registry: ToolRegistry,
        *,
        repair_limit: int = DEFAULT_REPAIR_LIMIT,
        failure_confidence_threshold: float = DEFAULT_FAILURE_CONFIDENCE,
        parallelism: Optional[int] = None,
        repair_enabled: bool = True,
        parallel_enabled: bool = True,
    ):
        self.registry = registry
        self.repair_limit = repair_limit
        self.failure_confidence_threshold = failure_confidence_threshold
        self.parallelism = parallelism
        self.repair_enabled = repair_enabled
        self.parallel_enabled = parallel_enabled

    # -- repair ------------------------------------------------------------------

    def repair(self, graph: ExecutionGraph, node_id: str, cause: str) -> ToolId:
        """Swap the failed node's tool for the next-ranked capable alternative.

        Completed nodes keep their status and results; exhausting alternatives
        or the per-node repair budget raises PipelineFailed.
        """
        node = graph.nodes[node_id]
        node.failed_tools.append(node.tool)
        node.status = "failed"
        if not self.repair_enabled or node.repairs >= self.repair_limit:
            raise PipelineFailed(
                f"node {node_id} failed ({cause}) with repair budget exhausted"
            )
        try:
            ranked = self.registry.match_tools(node.requirement, exclude=node.failed_tools)
        except NoCapableTool:
            raise PipelineFailed(
                f"node {node_id} failed ({cause}) with no alternative tool"
            ) from None
        replacement = ranked[0]
        node.tool = replacement
        node.repairs += 1
        node.status = "repaired"
        graph.repair_log.append(
            RepairEvent(
                failed_node=node_id,
                cause=cause,
                replacement_tool=replacement,
                preserved_nodes=graph.done_count(),
            )
        )
        return replacement

    # -- execution -----------------------------------------------------------------

    def execute(
        self,
        graph: ExecutionGraph,
        clock,
        backends,
        seed: int,
        session_id: str = "",
    ) -> ExecutionOutcome:
        """Event-driven execution: nodes start as soon as dependencies complete.

        Deterministic for a fixed seed. Returns per-node results and the
        virtual total latency (equal to the critical path when branches are
        independent and parallelism is unbounded). A wall clock switches to
        real threaded execution with measured latencies.
        """
        graph.validate_acyclic()
        if not getattr(clock, "virtual", True):
            return self._execute_wall(graph, clock, backends, seed, session_id)
        start_ms = clock.now_ms()
        results: dict[str, NodeResult] = {}
        trace: list[TraceRow] = []
        node_elapsed: dict[str, int] = {}
        insertion = {node_id: i for i, node_id in enumerate(graph.nodes)}
        running: list[tuple[int, int, str]] = []  # (finish_ts, insertion, node_id)
        started: set[str] = set()

        def ready_nodes() -> list[str]:
            out = []
            for node_id, node in graph.nodes.items():
                if node_id in started or node.status == "done":
                    continue
                parents = graph.parents(node_id)
                if all(graph.nodes[p].status == "done" for p in parents):
                    out.append(node_id)
            out.sort(key=lambda n: insertion[n])
            return out

        def capacity() -> int:
            if not self.parallel_enabled:
                return max(0, 1 - len(running))
            if self.parallelism is None:
                return len(graph.nodes)
            return max(0, self.parallelism - len(running))

        def launch(node_id: str, at_ms: int) -> None:
            node = graph.nodes[node_id]
            node.status = "running"
            started.add(node_id)
            attempt = len(node.failed_tools)
            attempt_seed = stable_seed(seed, node_id, attempt)
            tool_spec = self.registry.get(node.tool)
            trace.append(
                TraceRow(ts=at_ms, session_id=session_id, node_id=node_id,
                         tool=tool_spec.name, event="start")
            )
            try:
                invocation = backends.run_node(node, attempt_seed)
                latency = (
                    invocation.latency_ms
                    if invocation.latency_ms is not None
                    else self.registry.sample_latency(node.tool, attempt_seed)
                )
                failed = invocation.confidence < self.failure_confidence_threshold
                cause = f"low confidence {invocation.confidence:.2f}" if failed else ""
            except NodeFailure as exc:
                invocation = None
                latency = self.registry.sample_latency(node.tool, attempt_seed)
                failed = True
                cause = str(exc)
            finish = at_ms + int(latency)
            node_elapsed[node_id] = node_elapsed.get(node_id, 0) + int(latency)
            heapq.heappush(running, (finish, insertion[node_id], node_id))
            pending_attempts[node_id] = (invocation, failed, cause)

        pending_attempts: dict[str, tuple] = {}

        for node_id in ready_nodes()[: max(1, capacity())]:
            if capacity() <= 0:
                break
            launch(node_id, start_ms)

        while running:
            finish_ts, _, node_id = heapq.heappop(running)
            clock.advance_to(finish_ts)
            node = graph.nodes[node_id]
            invocation, failed, cause = pending_attempts.pop(node_id)
            tool_spec = self.registry.get(node.tool)
            if failed:
                trace.append(
                    TraceRow(ts=finish_ts, session_id=session_id, node_id=node_id,
                             tool=tool_spec.name, event="failed",
                             latency_ms=node_elapsed[node_id],
                             confidence=None if invocation is None else invocation.confidence)
                )
                try:
                    replacement = self.repair(graph, node_id, cause or "backend failure")
                except PipelineFailed as exc:
                    exc.partial_results = list(results.values())
                    exc.trace = trace
                    raise
                trace.append(
                    TraceRow(ts=finish_ts, session_id=session_id, node_id=node_id,
                             tool=self.registry.get(replacement).name, event="repaired")
                )
                started.discard(node_id)
            else:
                node.status = "done"
                cost = backends.node_cost(node, invocation)
                result = NodeResult(
                    node_id=node_id,
                    output=invocation.payload,
                    confidence=invocation.confidence,
                    latency_ms=node_elapsed[node_id],
                    cost=cost,
                    tool_name=tool_spec.name,
                    tokens=invocation.tokens,
                )
                results[node_id] = result
                trace.append(
                    TraceRow(ts=finish_ts, session_id=session_id, node_id=node_id,
                             tool=tool_spec.name, event="done",
                             latency_ms=node_elapsed[node_id],
                             cost_usd=cost.usd_str(), confidence=invocation.confidence)
                )
            for ready in ready_nodes():
                if capacity() <= 0:
                    break
                launch(ready, finish_ts)

        total = clock.now_ms() - start_ms
        outcome = ExecutionOutcome(
            results=[results[n] for n in graph.nodes if n in results],
            total_latency_ms=total,
            trace=trace,
        )
        outcome.critical_node_ids = self._critical_nodes(graph, node_elapsed)
        for result in outcome.results:
            result.critical = result.node_id in outcome.critical_node_ids
        return outcome

    def _execute_wall(self, graph, clock, backends, seed, session_id):
        """Live mode: nodes run on a thread pool and latencies are measured."""
        import time as _time
        from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait

        start_ms = clock.now_ms()
        if not self.parallel_enabled:
            workers = 1
        else:
            workers = self.parallelism or 8
        results: dict[str, NodeResult] = {}
        trace: list[TraceRow] = []
        node_elapsed: dict[str, int] = {}
        started: set[str] = set()

        def run_one(node, attempt_seed):
            t0 = _time.perf_counter()
            try:
                invocation = backends.run_node(node, attempt_seed)
                failed = invocation.confidence < self.failure_confidence_threshold
                cause = f"low confidence {invocation.confidence:.2f}" if failed else ""
            except NodeFailure as exc:
                invocation, failed, cause = None, True, str(exc)
            return invocation, failed, cause, max(1, int((_time.perf_counter() - t0) * 1000))

        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending: dict = {}

            def submit_ready():
                for node_id, node in graph.nodes.items():
                    if node_id in started or node.status == "done":
                        continue
                    if not all(graph.nodes[p].status == "done" for p in graph.parents(node_id)):
                        continue
                    node.status = "running"
                    started.add(node_id)
                    trace.append(TraceRow(
                        ts=clock.now_ms(), session_id=session_id, node_id=node_id,
                        tool=self.registry.get(node.tool).name, event="start",
                    ))
                    attempt_seed = stable_seed(seed, node_id, len(node.failed_tools))
                    pending[pool.submit(run_one, node, attempt_seed)] = node_id

            submit_ready()
            while pending:
                finished, _ = wait(list(pending), return_when=FIRST_COMPLETED)
                for future in finished:
                    node_id = pending.pop(future)
                    node = graph.nodes[node_id]
                    invocation, failed, cause, real_ms = future.result()
                    node_elapsed[node_id] = node_elapsed.get(node_id, 0) + real_ms
                    tool_name = self.registry.get(node.tool).name
                    if failed:
                        trace.append(TraceRow(
                            ts=clock.now_ms(), session_id=session_id, node_id=node_id,
                            tool=tool_name, event="failed", latency_ms=node_elapsed[node_id],
                        ))
                        try:
                            replacement = self.repair(graph, node_id, cause or "backend failure")
                        except PipelineFailed as exc:
                            exc.partial_results = list(results.values())
                            exc.trace = trace
                            raise
                        trace.append(TraceRow(
                            ts=clock.now_ms(), session_id=session_id, node_id=node_id,
                            tool=self.registry.get(replacement).name, event="repaired",
                        ))
                        started.discard(node_id)
                    else:
                        node.status = "done"
                        cost = backends.node_cost(node, invocation)
                        results[node_id] = NodeResult(
                            node_id=node_id, output=invocation.payload,
                            confidence=invocation.confidence,
                            latency_ms=node_elapsed[node_id], cost=cost,
                            tool_name=tool_name, tokens=invocation.tokens,
                        )
                        trace.append(TraceRow(
                            ts=clock.now_ms(), session_id=session_id, node_id=node_id,
                            tool=tool_name, event="done", latency_ms=node_elapsed[node_id],
                            cost_usd=cost.usd_str(), confidence=invocation.confidence,
                        ))
                submit_ready()

        outcome = ExecutionOutcome(
            results=[results[n] for n in graph.nodes if n in results],
            total_latency_ms=clock.now_ms() - start_ms,
            trace=trace,
        )
        outcome.critical_node_ids = self._critical_nodes(graph, node_elapsed)
        for result in outcome.results:
            result.critical = result.node_id in outcome.critical_node_ids
        return outcome

    def _critical_nodes(self, graph: ExecutionGraph, elapsed: dict[str, int]) -> set[str]:
        """Nodes on (one of) the longest dependency chains."""
        if not elapsed:
            return set()
        indegree = {n: 0 for n in graph.nodes}
        for _, consumer in graph.edges:
            indegree[consumer] += 1
        topo: list[str] = [n for n in graph.nodes if indegree[n] == 0]
        cursor = 0
        while cursor < len(topo):
            for child in graph.children(topo[cursor]):
                indegree[child] -= 1
                if indegree[child] == 0:
                    topo.append(child)
            cursor += 1
        finish: dict[str, int] = {}
        for node_id in topo:
            if node_id not in elapsed:
                continue
            start = max(
                (finish[p] for p in graph.parents(node_id) if p in finish), default=0
            )
            finish[node_id] = start + elapsed[node_id]
        if not finish:
            return set()
        total = max(finish.values())
        critical: set[str] = set()

        def walk_back(node_id: str) -> None:
            critical.add(node_id)
            start = finish[node_id] - elapsed[node_id]
            for p in graph.parents(node_id):
                if p in finish and finish[p] == start:
                    walk_back(p)

        for node_id, value in finish.items():
            if value == total:
                walk_back(node_id)
                break
        return critical


# --- clarification and verification ---------------------------------------------------


def check_clarification(
    results: list[NodeResult],
    threshold: float = DEFAULT_CLARIFICATION_THRESHOLD,
    *,
    repair_attempted: bool = False,
    hint: str = "",
) -> Optional[str]:
    """Emit a clarification question when critical-path confidence is low.

    Only fires after a repair has been attempted: the engine first tries to
    self-serve, then asks.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    if not repair_attempted:
        return None
    critical = [r for r in results if r.critical]
    if not critical:
        return None
    worst = min(critical, key=lambda r: (r.confidence, r.node_id))
    if worst.confidence >= threshold:
        return None
    subject = hint
    if not subject and isinstance(worst.output, dict):
        subject = worst.output.get("clarify_hint") or ""
    if subject:
        return f"I notice this is {subject}. What specific information are you looking for?"
    return (
        f"Confidence is low on the {worst.tool_name} output. "
        f"What specific information are you looking for?"
    )


@dataclass
class VerificationVerdict:
    status: str  # "pass" | "fail" | "unverified"
    reasons: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def verify_output(
    answer_segments: dict[str, str],
    trace: list[TraceRow],
    required_segments: list[str],
    cited_nodes: Optional[dict[str, list[str]]] = None,
    verifier: Optional[Callable[..., bool]] = None,
) -> VerificationVerdict:
    """Structural verification: every required segment answered, every cited
    evidence node present in the trace. A failing verifier backend downgrades
    to `unverified` rather than blocking the answer."""
    if verifier is not None:
        try:
            ok = verifier(answer_segments, trace, required_segments)
            return VerificationVerdict("pass" if ok else "fail")
        except Exception as exc:
            return VerificationVerdict("unverified", [f"verifier backend failed: {exc}"])
    reasons = []
    for segment in required_segments:
        if not answer_segments.get(segment, "").strip():
            reasons.append(f"missing answer segment {segment!r}")
    if cited_nodes:
        trace_ids = {row.node_id for row in trace}
        for segment, nodes in cited_nodes.items():
            for node_id in nodes:
                if node_id not in trace_ids:
                    reasons.append(
                        f"segment {segment!r} cites node {node_id!r} absent from trace"
                    )
    return VerificationVerdict("fail" if reasons else "pass", reasons)
