"""Query state: session ids, serialization laws, money exactness."""

from __future__ import annotations

import random
import re

import pytest
from hypothesis import given, settings, strategies as st

from supervisord.errors import CorruptState, SizeExceeded, VersionMismatch
from supervisord.state import (
    Attachment,
    ContextBundle,
    ContextSegment,
    CostKnob,
    ExecutionFlag,
    Modality,
    Money,
    QueryState,
    SessionMeta,
    Subflag,
    TraceEvent,
    deserialize_state,
    money_div_rounded,
    new_session,
    serialize_state,
)


def fixed_clock():
    return 0


def seeded_entropy(seed=1):
    rng = random.Random(seed)
    return lambda: rng.randbytes(16)


class TestNewSession:
    def test_consecutive_ids_differ(self):
        entropy = seeded_entropy()
        a = new_session(fixed_clock, entropy)
        b = new_session(fixed_clock, entropy)
        assert a.session_id != b.session_id

    def test_id_format(self):
        meta = new_session(fixed_clock, seeded_entropy())
        assert re.fullmatch(r"0-[0-9a-f]{16}", meta.session_id)

    def test_many_ids_distinct(self):
        entropy = seeded_entropy(42)
        ids = {new_session(fixed_clock, entropy).session_id for _ in range(10_000)}
        assert len(ids) == 10_000

    def test_fresh_session_counters(self):
        meta = new_session(fixed_clock, seeded_entropy())
        assert meta.cumulative_cost == Money(0)
        assert meta.turn_count == 0

    def test_entropy_starvation_rejected(self):
        with pytest.raises(ValueError):
            new_session(fixed_clock, lambda: b"short")


def make_state(**overrides) -> QueryState:
    state = QueryState(
        user_query="what is in this image",
        cost_knob=CostKnob.TRAD_COUPLET,
        session=SessionMeta(session_id="0-" + "ab" * 8, created_at_ms=0),
        attachments=[
            Attachment("path", "photo.png", declared_name="photo.png",
                       detected_modality=Modality.IMAGE, mime="image/png"),
        ],
        flag=ExecutionFlag.VISION,
    )
    for key, value in overrides.items():
        setattr(state, key, value)
    return state


class TestSerializationRoundTrip:
    def test_empty_context_round_trip_bit_exact(self):
        state = make_state(attachments=[], flag=None)
        data = serialize_state(state)
        assert serialize_state(deserialize_state(data)) == data

    def test_rich_state_field_equality(self):
        state = make_state(
            attachments=[
                Attachment("url", "https://x/y.png", declared_name="y.png"),
                Attachment("bytes", b"\x89PNG\r\n\x1a\n123", declared_name="raw.png"),
                Attachment("path", "a.mp3", detected_modality=Modality.AUDIO),
            ],
            trace=[
                TraceEvent("yolo-detect", "abcd", 0, 1450, "done"),
                TraceEvent("slm-weak-invoke", "ef01", 1450, 2100, "done"),
            ],
            context=ContextBundle(segments=(
                ContextSegment("short", 0.6, "earlier turn"),
                ContextSegment("relevant", 0.3, ""),
                ContextSegment("compressed", 0.1, ""),
            )),
            clarify_question="which fields?",
            clarify_response="dates",
            subflag=Subflag.GENERAL,
        )
        back = deserialize_state(serialize_state(state))
        assert back.user_query == state.user_query
        assert back.cost_knob is state.cost_knob
        assert back.clarify_question == state.clarify_question
        assert back.clarify_response == state.clarify_response
        assert back.flag is state.flag
        assert back.subflag is state.subflag
        assert [a.__dict__ for a in back.attachments] == [a.__dict__ for a in state.attachments]
        assert back.trace == state.trace
        assert back.context.segments == state.context.segments
        assert back.session == state.session

    def test_serialize_is_deterministic(self):
        state = make_state()
        assert serialize_state(state) == serialize_state(state)

    def test_unknown_version_rejected(self):
        data = serialize_state(make_state())
        tampered = data.replace(b'"version":1', b'"version":9', 1)
        with pytest.raises(VersionMismatch):
            deserialize_state(tampered)

    def test_truncated_input_rejected(self):
        data = serialize_state(make_state())
        with pytest.raises(CorruptState):
            deserialize_state(data[: len(data) // 2])

    def test_not_json_rejected(self):
        with pytest.raises(CorruptState):
            deserialize_state(b"\xff\xfe not json")

    def test_oversized_inline_attachment(self):
        state = make_state(
            attachments=[Attachment("bytes", b"x" * 2048, declared_name="big.bin")]
        )
        with pytest.raises(SizeExceeded):
            serialize_state(state, max_inline_bytes=1024)

    def test_clarify_response_requires_question(self):
        state = make_state(clarify_response="yes")
        with pytest.raises(ValueError):
            serialize_state(state)


_flags = st.none() | st.sampled_from(list(ExecutionFlag))
_modalities = st.none() | st.sampled_from(list(Modality))


@st.composite
def states(draw):
    session = SessionMeta(
        session_id=f"{draw(st.integers(0, 2**40))}-{draw(st.integers(0, 2**64 - 1)):016x}",
        created_at_ms=draw(st.integers(0, 2**40)),
        cumulative_cost=Money(draw(st.integers(0, 10**9))),
        turn_count=draw(st.integers(0, 200)),
    )
    attachments = draw(
        st.lists(
            st.builds(
                Attachment,
                source_kind=st.just("path"),
                source=st.text(min_size=1, max_size=30),
                declared_name=st.none() | st.text(max_size=20),
                detected_modality=_modalities,
                mime=st.none() | st.sampled_from(["image/png", "application/pdf"]),
            ),
            max_size=4,
        )
    )
    question = draw(st.none() | st.text(max_size=40))
    response = draw(st.none() | st.text(max_size=40)) if question is not None else None
    trace = draw(
        st.lists(
            st.builds(
                TraceEvent,
                tool=st.sampled_from(["yolo-detect", "memory-retrieve"]),
                args_digest=st.text("0123456789abcdef", min_size=4, max_size=8),
                start_ms=st.integers(0, 10**6),
                end_ms=st.integers(0, 10**6),
                outcome=st.sampled_from(["done", "failed"]),
            ),
            max_size=5,
        )
    )
    return QueryState(
        user_query=draw(st.text(max_size=120)),
        cost_knob=draw(st.sampled_from(list(CostKnob))),
        session=session,
        clarify_question=question,
        clarify_response=response,
        attachments=attachments,
        flag=draw(_flags),
        trace=trace,
    )


@settings(max_examples=200, deadline=None)
@given(states())
def test_round_trip_law(state):
    assert serialize_state(deserialize_state(serialize_state(state))) == serialize_state(state)


class TestMoney:
    def test_from_usd_exact(self):
        assert Money.from_usd("2.50").micros == 2_500_000
        assert Money.from_usd("0.061").micros == 61_000

    def test_div_rounds_half_even(self):
        assert money_div_rounded(5, 2).micros == 2  # 2.5 -> 2 (even)
        assert money_div_rounded(7, 2).micros == 4  # 3.5 -> 4 (even)
        assert money_div_rounded(6, 2).micros == 3

    def test_session_cost_monotone(self):
        session = SessionMeta("0-" + "00" * 8, 0)
        session.add_cost(Money(10))
        session.add_cost(Money(0))
        assert session.cumulative_cost == Money(10)
        with pytest.raises(ValueError):
            session.add_cost(Money(-1))

    def test_usd_str_resolution(self):
        assert Money(61_000).usd_str() == "0.061000"
