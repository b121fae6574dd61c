"""Query state: the single record carried across every processing stage.

Holds the user query, cost tier, clarification dialogue, attachments,
accumulated context, session metadata, and the execution trace, plus a
lossless serialize/rehydrate pair so state can move between stages and
processes without information loss.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_EVEN
from enum import Enum
from typing import Any, Callable, Optional

from .errors import CorruptState, SizeExceeded, VersionMismatch

STATE_VERSION = 1

# Inline attachment payloads above this size must be path/URL references.
DEFAULT_MAX_INLINE_BYTES = 64 * 1024 * 1024

MICROS_PER_USD = 1_000_000


class Money:
    """USD amount held as integer micro-dollars; arithmetic is exact.

    Division (e.g. per-token pricing) rounds half-to-even at the final
    micro-dollar, so sums are permutation-invariant.
    """

    __slots__ = ("micros",)

    def __init__(self, micros: int = 0):
        self.micros = int(micros)

    @classmethod
    def from_usd(cls, value: "str | int | float | Decimal") -> "Money":
        dec = Decimal(str(value)).quantize(
            Decimal("0.000001"), rounding=ROUND_HALF_EVEN
        )
        return cls(int(dec * MICROS_PER_USD))

    def usd(self) -> Decimal:
        return Decimal(self.micros) / MICROS_PER_USD

    def usd_str(self) -> str:
        return f"{self.usd():.6f}"

    def __add__(self, other: "Money") -> "Money":
        return Money(self.micros + other.micros)

    def __sub__(self, other: "Money") -> "Money":
        return Money(self.micros - other.micros)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Money) and self.micros == other.micros

    def __lt__(self, other: "Money") -> bool:
        return self.micros < other.micros

    def __le__(self, other: "Money") -> bool:
        return self.micros <= other.micros

    def __gt__(self, other: "Money") -> bool:
        return self.micros > other.micros

    def __ge__(self, other: "Money") -> bool:
        return self.micros >= other.micros

    def __hash__(self) -> int:
        return hash(("Money", self.micros))

    def __repr__(self) -> str:
        return f"Money({self.usd_str()})"


def money_div_rounded(numerator_micros: int, denominator: int) -> Money:
    """Divide an exact micro-dollar product, rounding half-to-even."""
    q, r = divmod(numerator_micros, denominator)
    double = r * 2
    if double > denominator or (double == denominator and q % 2 == 1):
        q += 1
    return Money(q)


class CostKnob(str, Enum):
    """User-selected computational tier."""

    OPEN_SRC = "open_src"
    CLOSED_SRC = "closed_src"
    TRAD_COUPLET = "trad_couplet"


class ExecutionFlag(str, Enum):
    """Eight-way routing category assigned by decomposition."""

    AUDIO = "audio"
    VIDEO = "video"
    VISION = "vision"
    IMAGEN = "imagen"
    DOCUMENT = "document"
    ROUTELLM = "routellm"
    MOE = "moe"
    COMPLEX = "complex"


# Fixed precedence used to break classification ties.
FLAG_PRECEDENCE: tuple[ExecutionFlag, ...] = (
    ExecutionFlag.AUDIO,
    ExecutionFlag.VIDEO,
    ExecutionFlag.VISION,
    ExecutionFlag.IMAGEN,
    ExecutionFlag.DOCUMENT,
    ExecutionFlag.ROUTELLM,
    ExecutionFlag.MOE,
    ExecutionFlag.COMPLEX,
)


class Subflag(str, Enum):
    """Four-way weak-query category for lightweight model selection."""

    CODING = "coding"
    SUMMARIZATION_REWRITING = "summarization_rewriting"
    ANALYTICAL_MATHS = "analytical_maths"
    GENERAL = "general"


class Modality(str, Enum):
    """Attachment content categories."""

    TEXT = "text"
    IMAGE = "image"
    AUDIO = "audio"
    VIDEO = "video"
    DOCUMENT = "document"
    UNKNOWN = "unknown"


@dataclass
class Attachment:
    """One attached input: a URL, a local path, or inline bytes."""

    source_kind: str  # "url" | "path" | "bytes"
    source: Any  # str for url/path, bytes for inline payloads
    declared_name: Optional[str] = None
    detected_modality: Optional[Modality] = None
    mime: Optional[str] = None

    def validate(self) -> None:
        if self.source_kind not in ("url", "path", "bytes"):
            raise ValueError(f"unknown attachment source kind {self.source_kind!r}")
        if self.source_kind == "bytes" and not isinstance(self.source, (bytes, bytearray)):
            raise ValueError("inline attachment requires a bytes payload")


@dataclass
class SessionMeta:
    """Per-session metadata: unique id, creation time, cost, turn counter."""

    session_id: str
    created_at_ms: int
    cumulative_cost: Money = field(default_factory=Money)
    turn_count: int = 0

    def add_cost(self, amount: Money) -> None:
        if amount.micros < 0:
            raise ValueError("session cost is monotonically nondecreasing")
        self.cumulative_cost = self.cumulative_cost + amount


@dataclass(frozen=True)
class TraceEvent:
    """One tool invocation record: name, argument digest, virtual times, outcome."""

    tool: str
    args_digest: str
    start_ms: int
    end_ms: int
    outcome: str


@dataclass(frozen=True)
class ContextSegment:
    """One weighted slice of integrated context (short / relevant / compressed)."""

    layer: str
    weight: float
    text: str


@dataclass
class ContextBundle:
    """Ordered, weighted context segments fed to downstream model invocations."""

    segments: tuple[ContextSegment, ...] = ()

    def text(self) -> str:
        return "\n\n".join(s.text for s in self.segments if s.text)


@dataclass
class QueryState:
    """Everything one query needs to move between stages without loss."""

    user_query: str
    cost_knob: CostKnob
    session: SessionMeta
    clarify_question: Optional[str] = None
    clarify_response: Optional[str] = None
    attachments: list[Attachment] = field(default_factory=list)
    context: ContextBundle = field(default_factory=ContextBundle)
    flag: Optional[ExecutionFlag] = None
    subflag: Optional[Subflag] = None
    trace: list[TraceEvent] = field(default_factory=list)

    def validate(self) -> None:
        if self.clarify_response is not None and self.clarify_question is None:
            raise ValueError("clarify_response requires clarify_question")
        if self.flag is not None and not isinstance(self.flag, ExecutionFlag):
            raise ValueError(f"flag {self.flag!r} outside the execution flag set")
        if self.subflag is not None and not isinstance(self.subflag, Subflag):
            raise ValueError(f"subflag {self.subflag!r} outside the subflag set")
        for att in self.attachments:
            att.validate()
        if self.session.turn_count < 0:
            raise ValueError("turn_count must be nonnegative")

    def append_trace(self, event: TraceEvent) -> None:
        """Trace is append-only; events are never reordered or removed."""
        self.trace.append(event)


def new_session(clock: Callable[[], int], entropy: Callable[[], bytes]) -> SessionMeta:
    """Create fresh session metadata.

    `clock` returns epoch milliseconds; `entropy` must yield at least 96 bits
    per call (the id consumes the first 64). The id has the form
    `<epoch-millis>-<16 lowercase hex chars>`.
    """
    now_ms = int(clock())
    raw = entropy()
    if len(raw) < 12:
        raise ValueError("entropy source must yield at least 96 bits per call")
    suffix = raw[:8].hex()
    return SessionMeta(session_id=f"{now_ms}-{suffix}", created_at_ms=now_ms)


# --- serialization -----------------------------------------------------------


def _attachment_to_json(att: Attachment, max_inline_bytes: int) -> dict:
    if att.source_kind == "bytes":
        payload = bytes(att.source)
        if len(payload) > max_inline_bytes:
            raise SizeExceeded(
                f"inline attachment of {len(payload)} bytes exceeds the "
                f"{max_inline_bytes}-byte limit; use a path or URL reference"
            )
        source: Any = base64.b64encode(payload).decode("ascii")
    else:
        source = att.source
    return {
        "source_kind": att.source_kind,
        "source": source,
        "declared_name": att.declared_name,
        "detected_modality": att.detected_modality.value if att.detected_modality else None,
        "mime": att.mime,
    }


def _attachment_from_json(obj: dict) -> Attachment:
    kind = obj["source_kind"]
    source = obj["source"]
    if kind == "bytes":
        source = base64.b64decode(source)
    modality = obj.get("detected_modality")
    return Attachment(
        source_kind=kind,
        source=source,
        declared_name=obj.get("declared_name"),
        detected_modality=Modality(modality) if modality else None,
        mime=obj.get("mime"),
    )


def state_to_json_dict(state: QueryState, max_inline_bytes: int = DEFAULT_MAX_INLINE_BYTES) -> dict:
    return {
        "user_query": state.user_query,
        "cost_knob": state.cost_knob.value,
        "clarify_question": state.clarify_question,
        "clarify_response": state.clarify_response,
        "attachments": [_attachment_to_json(a, max_inline_bytes) for a in state.attachments],
        "context": {
            "segments": [
                {"layer": s.layer, "weight": s.weight, "text": s.text}
                for s in state.context.segments
            ]
        },
        "session": {
            "session_id": state.session.session_id,
            "created_at_ms": state.session.created_at_ms,
            "cumulative_cost_usd": state.session.cumulative_cost.usd_str(),
            "turn_count": state.session.turn_count,
        },
        "flag": state.flag.value if state.flag else None,
        "subflag": state.subflag.value if state.subflag else None,
        "trace": [
            {
                "tool": ev.tool,
                "args_digest": ev.args_digest,
                "start_ms": ev.start_ms,
                "end_ms": ev.end_ms,
                "outcome": ev.outcome,
            }
            for ev in state.trace
        ],
    }


def state_from_json_dict(obj: dict) -> QueryState:
    session_obj = obj["session"]
    session = SessionMeta(
        session_id=session_obj["session_id"],
        created_at_ms=int(session_obj["created_at_ms"]),
        cumulative_cost=Money.from_usd(session_obj["cumulative_cost_usd"]),
        turn_count=int(session_obj["turn_count"]),
    )
    state = QueryState(
        user_query=obj["user_query"],
        cost_knob=CostKnob(obj["cost_knob"]),
        session=session,
        clarify_question=obj.get("clarify_question"),
        clarify_response=obj.get("clarify_response"),
        attachments=[_attachment_from_json(a) for a in obj["attachments"]],
        context=ContextBundle(
            segments=tuple(
                ContextSegment(layer=s["layer"], weight=s["weight"], text=s["text"])
                for s in obj["context"]["segments"]
            )
        ),
        flag=ExecutionFlag(obj["flag"]) if obj.get("flag") else None,
        subflag=Subflag(obj["subflag"]) if obj.get("subflag") else None,
        trace=[
            TraceEvent(
                tool=ev["tool"],
                args_digest=ev["args_digest"],
                start_ms=int(ev["start_ms"]),
                end_ms=int(ev["end_ms"]),
                outcome=ev["outcome"],
            )
            for ev in obj["trace"]
        ],
    )
    return state


def serialize_state(
    state: QueryState, max_inline_bytes: int = DEFAULT_MAX_INLINE_BYTES
) -> bytes:
    """Encode a well-formed state as a versioned, deterministic UTF-8 JSON document."""
    state.validate()
    doc = {"version": STATE_VERSION, "state": state_to_json_dict(state, max_inline_bytes)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def deserialize_state(data: bytes) -> QueryState:
    """Rebuild a QueryState; rejects unknown versions and truncated documents."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptState(f"unreadable state document: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptState("state document missing version tag")
    if doc["version"] != STATE_VERSION:
        raise VersionMismatch(
            f"unsupported state version {doc['version']!r} (expected {STATE_VERSION})"
        )
    try:
        state = state_from_json_dict(doc["state"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptState(f"malformed state payload: {exc}") from exc
    state.validate()
    return state


def clone_state(state: QueryState) -> QueryState:
    """Deep copy via the serialization pair (guarantees round-trip fidelity)."""
    return deserialize_state(serialize_state(state))


__all__ = [
    "Attachment",
    "ContextBundle",
    "ContextSegment",
    "CostKnob",
    "ExecutionFlag",
    "FLAG_PRECEDENCE",
    "Modality",
    "Money",
    "QueryState",
    "STATE_VERSION",
    "SessionMeta",
    "Subflag",
    "TraceEvent",
    "clone_state",
    "deserialize_state",
    "money_div_rounded",
    "new_session",
    "serialize_state",
    "state_from_json_dict",
    "state_to_json_dict",
]
