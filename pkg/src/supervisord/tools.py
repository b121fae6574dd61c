"""Typed tool registry: specifications, capability matching, latency priors.

Tools declare what they consume (modalities), what they produce (output tags),
the predicates that must hold before invocation, and a bounded latency prior.
Matching filters on capability coverage and precondition satisfiability, then
ranks by (expected latency, expected cost, name) in O(|T| log |T|).
"""

from __future__ import annotations

import json
import random
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Optional

from .errors import DuplicateTool, InvalidSpec, NoCapableTool, UnknownTool
from .state import CostKnob, Modality, Money, QueryState

# Token volume assumed when ranking per-token tools against flat-fee tools.
NOMINAL_TOKENS = 1000


class ToolCategory(str, Enum):
    SEMANTIC_ANALYZER = "semantic_analyzer"
    IMAGE = "image"
    AUDIO = "audio"
    DOCUMENT = "document"
    MEMORY = "memory"
    ORCHESTRATION = "orchestration"
    COMPLEXITY_ANALYSIS = "complexity_analysis"


@dataclass(frozen=True)
class LatencyPrior:
    """Bounded latency distribution in integer milliseconds."""

    min_ms: int
    max_ms: int
    shape: str = "uniform"  # "uniform" | "triangular" (mode at midpoint)

    def validate(self) -> None:
        if self.min_ms <= 0 or self.max_ms <= 0:
            raise InvalidSpec("latency bounds must be strictly positive")
        if self.min_ms > self.max_ms:
            raise InvalidSpec(
                f"latency prior inverted: min {self.min_ms} > max {self.max_ms}"
            )
        if self.shape not in ("uniform", "triangular"):
            raise InvalidSpec(f"unknown latency shape {self.shape!r}")

    def mean_ms(self) -> float:
        # Mode sits at the midpoint for the triangular option, so both
        # supported shapes share the same mean.
        return (self.min_ms + self.max_ms) / 2.0

    def sample(self, seed: int) -> int:
        rng = random.Random(seed)
        if self.shape == "triangular":
            value = int(round(rng.triangular(self.min_ms, self.max_ms)))
        else:
            value = rng.randint(self.min_ms, self.max_ms)
        return min(max(value, self.min_ms), self.max_ms)


@dataclass(frozen=True)
class ToolCost:
    """Cost profile: flat fee per invocation plus per-token pricing."""

    per_invocation: Money = field(default_factory=Money)
    per_mtok: Money = field(default_factory=Money)

    def expected_micros(self, tokens: int = NOMINAL_TOKENS) -> int:
        return self.per_invocation.micros + (self.per_mtok.micros * tokens) // 1_000_000


# Closed predicate vocabulary evaluated against the current QueryState.
_PREDICATE_RE = re.compile(r"^(?P<name>[a-z_]+)(?:\((?P<arg>[a-z_]+)\))?$")
_KNOWN_PREDICATES = {
    "always",
    "nonempty_query",
    "has_attachment",        # has_attachment(<modality>)
    "has_visual_attachment",  # image or video present
    "has_av_attachment",      # audio or video present
    "has_context",
}


def _parse_predicate(text: str) -> tuple[str, Optional[str]]:
    m = _PREDICATE_RE.match(text.strip())
    if not m or m.group("name") not in _KNOWN_PREDICATES:
        raise InvalidSpec(f"unknown precondition predicate {text!r}")
    return m.group("name"), m.group("arg")


def evaluate_predicate(text: str, state: Optional[QueryState]) -> bool:
    """Evaluate one predicate descriptor; a missing state satisfies everything."""
    name, arg = _parse_predicate(text)
    if state is None:
        return True
    modalities = {
        a.detected_modality for a in state.attachments if a.detected_modality
    }
    if name == "always":
        return True
    if name == "nonempty_query":
        return bool(state.user_query.strip())
    if name == "has_attachment":
        return Modality(arg) in modalities
    if name == "has_visual_attachment":
        return bool(modalities & {Modality.IMAGE, Modality.VIDEO})
    if name == "has_av_attachment":
        return bool(modalities & {Modality.AUDIO, Modality.VIDEO})
    if name == "has_context":
        return bool(state.context.segments)
    raise InvalidSpec(f"unknown precondition predicate {text!r}")


@dataclass(frozen=True)
class ToolSpec:
    """Typed tool interface: signature, contracts, latency prior, cost, tier."""

    name: str
    category: ToolCategory
    input_modalities: frozenset[Modality]
    output_tags: frozenset[str]
    preconditions: tuple[str, ...] = ()
    postconditions: tuple[str, ...] = ()
    latency_prior: LatencyPrior = LatencyPrior(1, 1)
    cost: ToolCost = field(default_factory=ToolCost)
    tier: CostKnob = CostKnob.TRAD_COUPLET

    def validate(self) -> None:
        if not self.name:
            raise InvalidSpec("tool name must be nonempty")
        self.latency_prior.validate()
        for pred in self.preconditions:
            _parse_predicate(pred)


@dataclass(frozen=True, order=True)
class ToolId:
    """Opaque stable identifier assigned at registration."""

    value: str

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Requirement:
    """What a graph node needs from a tool."""

    input_modalities: frozenset[Modality] = frozenset()
    output_tags: frozenset[str] = frozenset()
    tier: Optional[CostKnob] = None
    state: Optional[QueryState] = None

    def describe(self) -> str:
        mods = ",".join(sorted(m.value for m in self.input_modalities)) or "-"
        tags = ",".join(sorted(self.output_tags)) or "-"
        tier = self.tier.value if self.tier else "any"
        return f"inputs[{mods}] outputs[{tags}] tier[{tier}]"


class ToolRegistry:
    """Registry with serialized registration and snapshot-pure matching."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict[ToolId, ToolSpec] = {}
        self._names: set[str] = set()

    def register_tool(self, spec: ToolSpec) -> ToolId:
        spec.validate()
        with self._lock:
            if spec.name in self._names:
                raise DuplicateTool(f"tool {spec.name!r} already registered")
            tool_id = ToolId(f"t{len(self._by_id):03d}:{spec.name}")
            self._by_id[tool_id] = spec
            self._names.add(spec.name)
        return tool_id

    def get(self, tool_id: ToolId) -> ToolSpec:
        try:
            return self._by_id[tool_id]
        except KeyError:
            raise UnknownTool(f"no tool registered under {tool_id}") from None

    def id_for_name(self, name: str) -> ToolId:
        for tool_id, spec in self._by_id.items():
            if spec.name == name:
                return tool_id
        raise UnknownTool(f"no tool named {name!r}")

    def __len__(self) -> int:
        return len(self._by_id)

    def all_ids(self) -> list[ToolId]:
        return list(self._by_id)

    def _covers(self, spec: ToolSpec, req: Requirement) -> bool:
        if not req.input_modalities <= spec.input_modalities:
            return False
        if not req.output_tags <= spec.output_tags:
            return False
        if req.tier is not None and spec.tier != req.tier:
            return False
        return all(evaluate_predicate(p, req.state) for p in spec.preconditions)

    def match_tools(
        self, requirement: Requirement, exclude: Iterable[ToolId] = ()
    ) -> list[ToolId]:
        """Rank capable tools ascending by (expected latency, expected cost, name)."""
        with self._lock:
            snapshot = list(self._by_id.items())
        if not snapshot:
            raise NoCapableTool("registry is empty", requirement)
        excluded = set(exclude)
        matched = [
            (spec.latency_prior.mean_ms(), spec.cost.expected_micros(), spec.name, tool_id)
            for tool_id, spec in snapshot
            if tool_id not in excluded and self._covers(spec, requirement)
        ]
        if not matched:
            raise NoCapableTool(
                f"no capable tool for requirement {requirement.describe()}", requirement
            )
        matched.sort()
        return [tool_id for _, _, _, tool_id in matched]

    def sample_latency(self, tool_id: ToolId, seed: int) -> int:
        """Deterministic latency draw (ms) from the tool's declared prior."""
        return self.get(tool_id).latency_prior.sample(seed)


# --- catalog files -----------------------------------------------------------


def spec_from_json(obj: dict) -> ToolSpec:
    latency = obj.get("latency_ms", {})
    cost = obj.get("cost", {})
    return ToolSpec(
        name=obj["name"],
        category=ToolCategory(obj["category"]),
        input_modalities=frozenset(Modality(m) for m in obj.get("input_modalities", [])),
        output_tags=frozenset(obj.get("output_tags", [])),
        preconditions=tuple(obj.get("preconditions", [])),
        postconditions=tuple(obj.get("postconditions", [])),
        latency_prior=LatencyPrior(
            min_ms=int(latency["min"]),
            max_ms=int(latency["max"]),
            shape=latency.get("shape", "uniform"),
        ),
        cost=ToolCost(
            per_invocation=Money.from_usd(cost.get("per_invocation_usd", 0)),
            per_mtok=Money.from_usd(cost.get("per_mtok_usd", 0)),
        ),
        tier=CostKnob(obj.get("tier", "trad_couplet")),
    )


def spec_to_json(spec: ToolSpec) -> dict:
    return {
        "name": spec.name,
        "category": spec.category.value,
        "input_modalities": sorted(m.value for m in spec.input_modalities),
        "output_tags": sorted(spec.output_tags),
        "preconditions": list(spec.preconditions),
        "postconditions": list(spec.postconditions),
        "latency_ms": {
            "min": spec.latency_prior.min_ms,
            "max": spec.latency_prior.max_ms,
            "shape": spec.latency_prior.shape,
        },
        "cost": {
            "per_invocation_usd": str(spec.cost.per_invocation.usd()),
            "per_mtok_usd": str(spec.cost.per_mtok.usd()),
        },
        "tier": spec.tier.value,
    }


def load_catalog(path: str) -> ToolRegistry:
    """Build a registry from a JSON array of tool specifications."""
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    registry = ToolRegistry()
    for obj in entries:
        registry.register_tool(spec_from_json(obj))
    return registry


def default_registry() -> ToolRegistry:
    """Registry built from the bundled catalog (seven category families)."""
    text = resources.files("supervisord.data").joinpath("tools.json").read_text("utf-8")
    registry = ToolRegistry()
    for obj in json.loads(text):
        registry.register_tool(spec_from_json(obj))
    return registry
