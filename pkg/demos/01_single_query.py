"""Walk one query of each kind through the supervisor.

Shows decomposition (flag assignment), routing, graph execution under the
virtual clock, and the resulting answer segments, trace, and cost.
"""

from supervisord import EngineConfig, Supervisor
from supervisord.couplet import SimulatedBackend
from supervisord.memory import MemoryStore
from supervisord.state import Attachment, CostKnob, QueryState


def show(title, outcome):
    print(f"\n=== {title} ===")
    print(f"flag={outcome.flag.value}  tta={outcome.tta_ms} ms  cost=${outcome.cost.usd_str()}")
    if outcome.routing:
        print(f"routing: {outcome.routing.route} (P={outcome.routing.win_probability:.2f}) "
              f"-> {outcome.routing.chosen_model}")
    for name, text in outcome.segments.items():
        print(f"  [{name}] {text[:90]}")
    print("trace:", " -> ".join(f"{r.node_id}:{r.event}" for r in outcome.trace_rows))


supervisor = Supervisor(EngineConfig(seed=11))

# 1. plain text query: routed to a lightweight model
state = QueryState(
    user_query="What makes a hash map faster than a list lookup",
    cost_knob=CostKnob.OPEN_SRC,
    session=supervisor.new_session(),
)
show("text / weak route", supervisor.process(state, memory_store=MemoryStore(), query_id="d1"))

# 2. hard reasoning query: the win predictor sends it to the strong model
state = QueryState(
    user_query=(
        "Analyze the trade-off between eventual and strong consistency, prove your "
        "reasoning step by step, evaluate the implications for replication, and "
        "compare recovery strategies"
    ),
    cost_knob=CostKnob.CLOSED_SRC,
    session=supervisor.new_session(),
)
show("text / strong route", supervisor.process(state, memory_store=MemoryStore(), query_id="d2"))

# 3. audio attachment: the couplet transcribes against a scripted fixture
fixtures = {
    "standup.mp3": {
        "transcript": [
            {"word": w, "t": 0.6 * i, "conf": 0.97}
            for i, w in enumerate("yesterday we shipped the importer today we test it".split())
        ]
    }
}
state = QueryState(
    user_query="Transcribe this recording",
    cost_knob=CostKnob.TRAD_COUPLET,
    session=supervisor.new_session(),
    attachments=[Attachment("path", "standup.mp3", declared_name="standup.mp3")],
)
show(
    "audio / couplet",
    supervisor.process(
        state, memory_store=MemoryStore(),
        perceptual_backend=SimulatedBackend(fixtures), query_id="d3",
    ),
)

# 4. vision flag without an image attachment is demoted to the expert ensemble
state = QueryState(
    user_query="Identify the objects shown please",
    cost_knob=CostKnob.OPEN_SRC,
    session=supervisor.new_session(),
)
show("safety reassignment -> moe", supervisor.process(state, memory_store=MemoryStore(), query_id="d4"))
