"""Execution graphs: parallel branches, the critical path, and local repair.

Runs the same video-analysis graph twice: once clean, once with the object
detector failing so the scheduler swaps in the fallback vision tool without
re-running the finished transcription branch.
"""

from supervisord.clock import VirtualClock
from supervisord.couplet import SimulatedBackend
from supervisord.engine import EngineBackends, EngineConfig
from supervisord.scheduler import Scheduler, build_graph
from supervisord.state import Attachment, CostKnob, ExecutionFlag, QueryState, SessionMeta

fixtures = {
    "launch.mp4": {
        "frames": 12,
        "detections": [
            {"label": "laptop", "box": [10, 10, 200, 160], "t_start": 3, "t_end": 9, "conf": 0.92}
        ],
        "transcript": [
            {"word": w, "t": 4.0 + 0.5 * i, "conf": 0.96}
            for i, w in enumerate("the new laptop boots in nine seconds".split())
        ],
    }
}


def run(failure_rates):
    config = EngineConfig(seed=4)
    state = QueryState(
        user_query="What products are shown in this advertisement video",
        cost_knob=CostKnob.TRAD_COUPLET,
        session=SessionMeta("demo-video", 0),
        attachments=[Attachment("path", "launch.mp4", declared_name="launch.mp4")],
    )
    state.flag = ExecutionFlag.VIDEO
    for att in state.attachments:
        from supervisord.decomposition import detect_modality

        att.detected_modality = detect_modality(att)
    graph = build_graph(ExecutionFlag.VIDEO, state, config.registry)
    backends = EngineBackends(
        graph, state, config, SimulatedBackend(fixtures),
        failure_rates=failure_rates, failure_seed=4, query_id="demo",
    )
    scheduler = Scheduler(config.registry)
    outcome = scheduler.execute(graph, VirtualClock(), backends, seed=4)
    print(f"total latency: {outcome.total_latency_ms} ms "
          f"(critical path through {sorted(outcome.critical_node_ids)})")
    for row in outcome.trace:
        lat = f" {row.latency_ms}ms" if row.latency_ms else ""
        print(f"  t={row.ts:>6} {row.event:<9} {row.node_id:<7} {row.tool}{lat}")
    if graph.repair_log:
        event = graph.repair_log[0]
        replacement = event.replacement_tool.value.split(":", 1)[1]
        print(f"repair: {event.failed_node} ({event.cause}) -> "
              f"{replacement}, {event.preserved_nodes} done node(s) preserved")
    return outcome


print("=== clean run: frame analysis and transcription overlap ===")
clean = run(failure_rates=None)

print("\n=== detector fails: local repair, no restart of the speech branch ===")
repaired = run(failure_rates={"yolo-detect": 1.0})

print(f"\nlatency cost of the repair: "
      f"{repaired.total_latency_ms - clean.total_latency_ms} ms on the failed branch only")
