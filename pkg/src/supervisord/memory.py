"""Five-layer hierarchical conversation memory with modality segregation.

Layers: a five-turn short-term ring (O(1) access), the append-only full
history, per-modality vector indices, the last retrieval result, and an
optional compressed summary. Retrieval scores records on cosine similarity,
exponential recency decay with modality-specific rates, and a modality-match
bonus; the default index is an exhaustive scan (exact at desk scale), with a
small navigable-graph index available behind the same interface.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import os
import random
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmbeddingUnavailable
from .state import ContextBundle, ContextSegment, Modality

DEFAULT_EMBEDDING_DIM = 64
DEFAULT_TOP_K = 6
SHORT_TERM_TURNS = 5
COMPRESSION_TRIGGER_TOKENS = 8000
COMPRESSION_RATIO_BAND = (10.0, 15.0)

# Per-turn exponential decay rates by modality. The unknown modality is not
# covered by the published table; it reuses the video rate as a middle value.
DEFAULT_DECAY_RATES: dict[Modality, float] = {
    Modality.TEXT: 0.15,
    Modality.IMAGE: 0.08,
    Modality.AUDIO: 0.12,
    Modality.DOCUMENT: 0.06,
    Modality.VIDEO: 0.10,
    Modality.UNKNOWN: 0.10,
}


@dataclass(frozen=True)
class ScoreWeights:
    similarity: float = 0.5
    recency: float = 0.3
    modality: float = 0.2

    def validate(self) -> None:
        if min(self.similarity, self.recency, self.modality) < 0:
            raise ValueError("score weights must be nonnegative")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


# --- embedding ----------------------------------------------------------------


class HashingEmbedder:
    """Deterministic feature-hash embedder over token unigrams and bigrams.

    Dependency-free stand-in for an external embedding service; vectors are
    unit-normalized float64 of a configurable dimension.
    """

    def __init__(self, dimension: int = DEFAULT_EMBEDDING_DIM, seed: int = 0):
        if dimension < 2:
            raise ValueError("embedding dimension must be at least 2")
        self.dimension = dimension
        self.seed = seed

    def _grams(self, text: str) -> list[str]:
        tokens = text.lower().split()
        grams = list(tokens)
        grams.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
        return grams

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for gram in self._grams(text):
            digest = hashlib.blake2b(
                f"{self.seed}|{gram}".encode("utf-8"), digest_size=8
            ).digest()
            value = int.from_bytes(digest, "big")
            bucket = value % self.dimension
            sign = 1.0 if (value >> 62) & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            anchor = int.from_bytes(
                hashlib.blake2b(f"{self.seed}|".encode(), digest_size=8).digest(), "big"
            )
            vec[anchor % self.dimension] = 1.0
            return vec
        return vec / norm


def embed(content: str, embedder) -> np.ndarray:
    """Embed text via the configured backend; output is unit-normalized."""
    try:
        raw = np.asarray(embedder.embed(content), dtype=np.float64)
    except Exception as exc:
        raise EmbeddingUnavailable(f"embedding backend failed: {exc}") from exc
    if raw.ndim != 1 or raw.shape[0] != embedder.dimension:
        raise EmbeddingUnavailable(
            f"backend returned shape {raw.shape}, expected ({embedder.dimension},)"
        )
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise EmbeddingUnavailable("backend returned a zero vector")
    return raw / norm


# --- records and scoring --------------------------------------------------------


@dataclass
class MemoryRecord:
    record_id: str
    content: str
    modality: Modality
    embedding: np.ndarray
    turn_index: int
    created_at_ms: int = 0


def score_memory(
    record: MemoryRecord,
    query_embedding: np.ndarray,
    query_modality: Modality,
    now_turn: int,
    weights: ScoreWeights = ScoreWeights(),
    decay_rates: Optional[dict[Modality, float]] = None,
) -> float:
    """Weighted sum of cosine similarity, exponential recency, and modality match."""
    weights.validate()
    rates = decay_rates or DEFAULT_DECAY_RATES
    similarity = float(np.dot(record.embedding, query_embedding))
    age = max(0, now_turn - record.turn_index)
    recency = math.exp(-rates[record.modality] * age)
    match = 1.0 if record.modality == query_modality else 0.0
    return (
        weights.similarity * similarity
        + weights.recency * recency
        + weights.modality * match
    )


@dataclass
class CompressedSummary:
    text: str
    source_start_turn: int
    source_end_turn: int
    ratio: float


# --- indices --------------------------------------------------------------------


class ExhaustiveIndex:
    """Exact index: keeps references and lets retrieval scan everything."""

    def __init__(self):
        self.records: list[MemoryRecord] = []

    def add(self, record: MemoryRecord) -> None:
        self.records.append(record)

    def candidates(self, query: np.ndarray, limit: int) -> list[MemoryRecord]:
        return list(self.records)


class HnswIndex:
    """Small navigable-graph index (M=16, ef-construct=100) over unit vectors.

    Approximate: returns a candidate set by cosine similarity; callers re-rank
    with the full memory score. Level draws are seeded, so builds are
    deterministic.
    """

    def __init__(self, m: int = 16, ef_construction: int = 100, ef_search: int = 64,
                 seed: int = 0):
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self._level_mult = 1.0 / math.log(m)
        self._rng = random.Random(seed)
        self.records: dict[str, MemoryRecord] = {}
        self._levels: dict[str, int] = {}
        self._links: dict[tuple[str, int], list[str]] = {}
        self._entry: Optional[str] = None
        self._max_level = -1

    def _dist(self, a: np.ndarray, b: np.ndarray) -> float:
        return 1.0 - float(np.dot(a, b))

    def _search_layer(self, query: np.ndarray, entry: str, ef: int, level: int) -> list[tuple[float, str]]:
        start = (self._dist(query, self.records[entry].embedding), entry)
        visited = {entry}
        candidates = [start]
        best: list[tuple[float, str]] = [(-start[0], start[1])]
        while candidates:
            dist, node = heapq.heappop(candidates)
            if dist > -best[0][0]:
                break
            for neighbor in self._links.get((node, level), ()):
                if neighbor in visited:
                    continue
                visited.add(neighbor)
                d = self._dist(query, self.records[neighbor].embedding)
                if len(best) < ef or d < -best[0][0]:
                    heapq.heappush(candidates, (d, neighbor))
                    heapq.heappush(best, (-d, neighbor))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-d, node) for d, node in best)

    def add(self, record: MemoryRecord) -> None:
        node = record.record_id
        self.records[node] = record
        level = int(-math.log(max(self._rng.random(), 1e-12)) * self._level_mult)
        self._levels[node] = level
        for lv in range(level + 1):
            self._links[(node, lv)] = []
        if self._entry is None:
            self._entry = node
            self._max_level = level
            return
        entry = self._entry
        for lv in range(self._max_level, level, -1):
            entry = self._search_layer(record.embedding, entry, 1, lv)[0][1]
        for lv in range(min(level, self._max_level), -1, -1):
            neighbors = self._search_layer(
                record.embedding, entry, self.ef_construction, lv
            )
            cap = self.m0 if lv == 0 else self.m
            chosen = [n for _, n in neighbors[:cap]]
            self._links[(node, lv)] = chosen
            for other in chosen:
                links = self._links[(other, lv)]
                links.append(node)
                if len(links) > cap:
                    links.sort(
                        key=lambda x: self._dist(
                            self.records[other].embedding, self.records[x].embedding
                        )
                    )
                    del links[cap:]
            entry = chosen[0] if chosen else entry
        if level > self._max_level:
            self._max_level = level
            self._entry = node

    def candidates(self, query: np.ndarray, limit: int) -> list[MemoryRecord]:
        if self._entry is None:
            return []
        entry = self._entry
        for lv in range(self._max_level, 0, -1):
            entry = self._search_layer(query, entry, 1, lv)[0][1]
        ef = max(self.ef_search, limit)
        found = self._search_layer(query, entry, ef, 0)
        return [self.records[node] for _, node in found[:limit]]


# --- the layered store ------------------------------------------------------------


class MemoryStore:
    """Modality-segregated layered memory for one session."""

    def __init__(
        self,
        dimension: int = DEFAULT_EMBEDDING_DIM,
        index_kind: str = "exact",
        weights: ScoreWeights = ScoreWeights(),
        decay_rates: Optional[dict[Modality, float]] = None,
        index_seed: int = 0,
    ):
        if index_kind not in ("exact", "hnsw"):
            raise ValueError(f"unknown index kind {index_kind!r}")
        self.dimension = dimension
        self.index_kind = index_kind
        self.weights = weights
        self.decay_rates = decay_rates or DEFAULT_DECAY_RATES
        self._index_seed = index_seed
        self.full_history: list[MemoryRecord] = []
        self.short_term: deque[MemoryRecord] = deque(maxlen=SHORT_TERM_TURNS)
        self.modality_indices: dict[Modality, object] = {}
        self.relevant_cache: list[MemoryRecord] = []
        self.compressed: Optional[CompressedSummary] = None
        self._write_lock = threading.Lock()

    @property
    def turn_count(self) -> int:
        return len(self.full_history)

    def _index_for(self, modality: Modality):
        if modality not in self.modality_indices:
            if self.index_kind == "hnsw":
                self.modality_indices[modality] = HnswIndex(seed=self._index_seed)
            else:
                self.modality_indices[modality] = ExhaustiveIndex()
        return self.modality_indices[modality]

    def store(self, record: MemoryRecord) -> "MemoryStore":
        if record.embedding.shape != (self.dimension,):
            raise DimensionMismatch(
                f"record embedding has shape {record.embedding.shape}, store expects "
                f"({self.dimension},)"
            )
        with self._write_lock:
            self.full_history.append(record)
            self._index_for(record.modality).add(record)
            self.short_term.append(record)
        return self

    def add_turn(
        self,
        content: str,
        modality: Modality,
        embedder,
        created_at_ms: int = 0,
    ) -> MemoryRecord:
        record = MemoryRecord(
            record_id=f"m{len(self.full_history):06d}",
            content=content,
            modality=modality,
            embedding=embed(content, embedder),
            turn_index=len(self.full_history) + 1,
            created_at_ms=created_at_ms,
        )
        self.store(record)
        return record

    def _retrievable(self) -> list[MemoryRecord]:
        # Compressed turns are represented by the summary, not retrieved raw.
        if self.compressed is None:
            return list(self.full_history)
        cutoff = self.compressed.source_end_turn
        return [r for r in self.full_history if r.turn_index > cutoff]

    def retrieve_relevant(
        self,
        query_embedding: np.ndarray,
        query_modality: Modality,
        k: int = DEFAULT_TOP_K,
        now_turn: Optional[int] = None,
    ) -> list[MemoryRecord]:
        """Top-k records by score across all partitions, newest-first on ties."""
        if k < 1:
            raise ValueError("k must be at least 1")
        now = self.turn_count + 1 if now_turn is None else now_turn
        if self.index_kind == "exact":
            pool = self._retrievable()
        else:
            limit = max(k * 8, 64)
            pool_map: dict[str, MemoryRecord] = {}
            for index in self.modality_indices.values():
                for rec in index.candidates(query_embedding, limit):
                    pool_map[rec.record_id] = rec
            # Recency-favored records may have modest cosine; keep the newest
            # turns in the candidate set so re-ranking can surface them.
            for rec in self.full_history[-50:]:
                pool_map[rec.record_id] = rec
            retrievable_ids = {r.record_id for r in self._retrievable()}
            pool = [r for r in pool_map.values() if r.record_id in retrievable_ids]
        scored = [
            (
                -score_memory(
                    rec, query_embedding, query_modality, now, self.weights, self.decay_rates
                ),
                -rec.turn_index,
                rec.record_id,
                rec,
            )
            for rec in pool
        ]
        scored.sort(key=lambda item: item[:3])
        result = [rec for *_, rec in scored[:k]]
        self.relevant_cache = result
        return result

    # --- context integration ----------------------------------------------------

    def integrate_context(
        self,
        retrieved: Sequence[MemoryRecord],
        weights: tuple[float, float, float] = (0.6, 0.3, 0.1),
    ) -> ContextBundle:
        """Weighted short / relevant / compressed segments, in that fixed order."""
        short_text = "\n".join(r.content for r in self.short_term)
        relevant_text = "\n".join(r.content for r in retrieved)
        compressed_text = self.compressed.text if self.compressed else ""
        return ContextBundle(
            segments=(
                ContextSegment("short", weights[0], short_text),
                ContextSegment("relevant", weights[1], relevant_text),
                ContextSegment("compressed", weights[2], compressed_text),
            )
        )

    # --- compression -------------------------------------------------------------

    def maybe_compress(
        self,
        token_counter: Callable[[str], int] = whitespace_tokens,
        compressor: Optional[Callable[[str], str]] = None,
        force: bool = False,
        on_event: Optional[Callable[[str], None]] = None,
    ) -> "MemoryStore":
        """Summarize the uncompressed prefix once history passes 8,000 tokens.

        Explicit requests (`force=True`) compress regardless of size. The
        short-term ring is a separate layer and keeps its raw turns.
        Compressor failure keeps history intact.
        """
        candidates = self._retrievable()
        if not candidates:
            return self
        total_tokens = sum(token_counter(r.content) for r in candidates)
        if not force and total_tokens <= COMPRESSION_TRIGGER_TOKENS:
            return self
        source_text = "\n".join(r.content for r in candidates)
        compress = compressor or extractive_compressor
        try:
            summary_text = compress(source_text)
        except Exception as exc:
            if on_event:
                on_event(f"compression failed, history retained: {exc}")
            return self
        in_tokens = token_counter(source_text)
        out_tokens = max(1, token_counter(summary_text))
        ratio = in_tokens / out_tokens
        if on_event:
            low, high = COMPRESSION_RATIO_BAND
            status = "within" if low <= ratio <= high else "outside"
            on_event(f"compressed {in_tokens} tokens at {ratio:.1f}:1 ({status} target band)")
        prior_start = self.compressed.source_start_turn if self.compressed else candidates[0].turn_index
        prior_text = f"{self.compressed.text}\n" if self.compressed else ""
        self.compressed = CompressedSummary(
            text=prior_text + summary_text,
            source_start_turn=prior_start,
            source_end_turn=candidates[-1].turn_index,
            ratio=ratio,
        )
        return self


def extractive_compressor(text: str) -> str:
    """Deterministic fallback compressor: keeps roughly one token in twelve."""
    lines = text.splitlines()
    kept: list[str] = []
    for line in lines:
        tokens = line.split()
        if not tokens:
            continue
        keep = max(1, len(tokens) // 12)
        kept.append(" ".join(tokens[:keep]))
    return " / ".join(kept)


# --- persistence ---------------------------------------------------------------


def memory_path(store_root: str, session_id: str) -> str:
    return os.path.join(store_root, f"{session_id}.memory.json")


def save_memory(store: MemoryStore, path: str) -> None:
    payload = {
        "dimension": store.dimension,
        "index_kind": store.index_kind,
        "records": [
            {
                "record_id": r.record_id,
                "content": r.content,
                "modality": r.modality.value,
                "embedding": [float(x) for x in r.embedding],
                "turn_index": r.turn_index,
                "created_at_ms": r.created_at_ms,
            }
            for r in store.full_history
        ],
        "compressed": (
            {
                "text": store.compressed.text,
                "source_start_turn": store.compressed.source_start_turn,
                "source_end_turn": store.compressed.source_end_turn,
                "ratio": store.compressed.ratio,
            }
            if store.compressed
            else None
        ),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def load_memory(path: str, **store_kwargs) -> MemoryStore:
    """Rehydrate a store from disk; indices are rebuilt on load."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    store = MemoryStore(dimension=int(payload["dimension"]),
                        index_kind=payload.get("index_kind", "exact"), **store_kwargs)
    for obj in payload["records"]:
        record = MemoryRecord(
            record_id=obj["record_id"],
            content=obj["content"],
            modality=Modality(obj["modality"]),
            embedding=np.asarray(obj["embedding"], dtype=np.float64),
            turn_index=int(obj["turn_index"]),
            created_at_ms=int(obj["created_at_ms"]),
        )
        store.store(record)
    comp = payload.get("compressed")
    if comp:
        store.compressed = CompressedSummary(
            text=comp["text"],
            source_start_turn=int(comp["source_start_turn"]),
            source_end_turn=int(comp["source_end_turn"]),
            ratio=float(comp["ratio"]),
        )
    return store
