"""Two-stage query decomposition.

Stage one resolves attachment modality deterministically: extension map,
then MIME header (HEAD request for URLs), then magic-byte signature, then
unknown. Stage two assigns one of the eight execution flags from a published
rule table (or a pluggable external classifier), followed by a safety
reconciliation that demotes modality flags lacking a matching attachment
to the mixture-of-experts flag.
"""

from __future__ import annotations

import json
import os
import urllib.request
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional
from urllib.parse import urlparse

from .errors import UnreachableAttachment
from .state import Attachment, ExecutionFlag, FLAG_PRECEDENCE, Modality

EXTENSION_MAP: dict[str, Modality] = {
    # images
    "jpg": Modality.IMAGE, "jpeg": Modality.IMAGE, "png": Modality.IMAGE,
    "gif": Modality.IMAGE, "webp": Modality.IMAGE, "bmp": Modality.IMAGE,
    # audio
    "mp3": Modality.AUDIO, "wav": Modality.AUDIO, "m4a": Modality.AUDIO,
    "flac": Modality.AUDIO, "ogg": Modality.AUDIO,
    # video
    "mp4": Modality.VIDEO, "avi": Modality.VIDEO, "mov": Modality.VIDEO,
    "mkv": Modality.VIDEO, "webm": Modality.VIDEO,
    # documents
    "pdf": Modality.DOCUMENT, "docx": Modality.DOCUMENT, "xlsx": Modality.DOCUMENT,
    "pptx": Modality.DOCUMENT, "doc": Modality.DOCUMENT, "xls": Modality.DOCUMENT,
    "ppt": Modality.DOCUMENT,
    # plain text
    "txt": Modality.TEXT, "md": Modality.TEXT, "rst": Modality.TEXT,
}

# (offset, signature bytes, modality); RIFF containers discriminated below.
MAGIC_SIGNATURES: tuple[tuple[int, bytes, Modality], ...] = (
    (0, b"\x89PNG\r\n\x1a\n", Modality.IMAGE),
    (0, b"\xff\xd8\xff", Modality.IMAGE),
    (0, b"GIF87a", Modality.IMAGE),
    (0, b"GIF89a", Modality.IMAGE),
    (0, b"%PDF-", Modality.DOCUMENT),
    (0, b"PK\x03\x04", Modality.DOCUMENT),
    (0, b"ID3", Modality.AUDIO),
    (0, b"\xff\xfb", Modality.AUDIO),
    (0, b"\xff\xf3", Modality.AUDIO),
    (0, b"fLaC", Modality.AUDIO),
    (4, b"ftyp", Modality.VIDEO),
    (0, b"\x1aE\xdf\xa3", Modality.VIDEO),
)

# Modality a flag demands of the attachment set; empty intersection demotes
# the flag to moe. Scanned pages arrive as images, so document accepts both.
FLAG_REQUIRED_MODALITIES: dict[ExecutionFlag, frozenset[Modality]] = {
    ExecutionFlag.AUDIO: frozenset({Modality.AUDIO}),
    ExecutionFlag.VIDEO: frozenset({Modality.VIDEO}),
    ExecutionFlag.VISION: frozenset({Modality.IMAGE}),
    ExecutionFlag.IMAGEN: frozenset({Modality.IMAGE}),
    ExecutionFlag.DOCUMENT: frozenset({Modality.DOCUMENT, Modality.IMAGE}),
}


class UrlProber:
    """Issues HTTP HEAD requests; 3 s timeout, one retry."""

    def __init__(self, timeout_s: float = 3.0, retries: int = 1):
        self.timeout_s = timeout_s
        self.retries = retries

    def head(self, url: str) -> tuple[int, dict[str, str]]:
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                req = urllib.request.Request(url, method="HEAD")
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    headers = {k.lower(): v for k, v in resp.headers.items()}
                    return resp.status, headers
            except Exception as exc:  # noqa: BLE001 - network errors fall through tiers
                last_error = exc
        raise ConnectionError(f"HEAD {url} failed: {last_error}")


def modality_from_mime(mime: str) -> Modality:
    base = mime.split(";", 1)[0].strip().lower()
    if base.startswith("image/"):
        return Modality.IMAGE
    if base.startswith("audio/"):
        return Modality.AUDIO
    if base.startswith("video/"):
        return Modality.VIDEO
    if base == "application/pdf" or "officedocument" in base or base in (
        "application/msword", "application/vnd.ms-excel", "application/vnd.ms-powerpoint"
    ):
        return Modality.DOCUMENT
    if base.startswith("text/"):
        return Modality.TEXT
    return Modality.UNKNOWN


def modality_from_magic(head: bytes) -> Modality:
    if head[:4] == b"RIFF" and len(head) >= 12:
        tag = head[8:12]
        if tag == b"WEBP":
            return Modality.IMAGE
        if tag == b"WAVE":
            return Modality.AUDIO
        if tag == b"AVI ":
            return Modality.VIDEO
    for offset, sig, modality in MAGIC_SIGNATURES:
        if head[offset:offset + len(sig)] == sig:
            return modality
    return Modality.UNKNOWN


def _extension_of(name: str) -> Optional[str]:
    path = urlparse(name).path if "://" in name else name
    base = os.path.basename(path)
    if "." not in base:
        return None
    return base.rsplit(".", 1)[1].lower()


def detect_modality(attachment: Attachment, prober=None) -> Modality:
    """Resolve modality: extension, then MIME header, then magic bytes, then unknown."""
    names = []
    if attachment.declared_name:
        names.append(attachment.declared_name)
    if attachment.source_kind in ("url", "path"):
        names.append(str(attachment.source))
    for name in names:
        ext = _extension_of(name)
        if ext and ext in EXTENSION_MAP:
            return EXTENSION_MAP[ext]

    mime = attachment.mime
    if not mime and attachment.source_kind == "url" and prober is not None:
        try:
            _, headers = prober.head(str(attachment.source))
            mime = headers.get("content-type")
        except Exception:
            mime = None  # network failure never aborts detection
    if mime:
        resolved = modality_from_mime(mime)
        if resolved is not Modality.UNKNOWN:
            return resolved

    head = b""
    if attachment.source_kind == "bytes":
        head = bytes(attachment.source[:64])
    elif attachment.source_kind == "path":
        try:
            with open(attachment.source, "rb") as fh:
                head = fh.read(64)
        except OSError:
            head = b""
    if head:
        resolved = modality_from_magic(head)
        if resolved is not Modality.UNKNOWN:
            return resolved
    return Modality.UNKNOWN


@dataclass
class ValidationResult:
    """Outcome of the three sequential URL verification tiers."""

    scheme_ok: bool
    reachable: bool
    content_type_ok: bool
    resolved_mime: Optional[str] = None
    fallback_local_path: Optional[str] = None

    def __post_init__(self):
        # Tiers are sequential: a later tier cannot pass if an earlier failed.
        if self.content_type_ok and not self.reachable:
            raise ValueError("content_type_ok implies reachable")
        if self.reachable and not self.scheme_ok:
            raise ValueError("reachable implies scheme_ok")


def _expected_modalities(expected) -> Optional[frozenset[Modality]]:
    if expected is None:
        return None
    if isinstance(expected, ExecutionFlag):
        return FLAG_REQUIRED_MODALITIES.get(expected)
    if isinstance(expected, Modality):
        return frozenset({expected})
    return frozenset(expected)


def validate_url(
    url: str,
    prober,
    expected=None,
    fs_exists: Callable[[str], bool] = os.path.exists,
) -> ValidationResult:
    """Three-tier URL verification with local-path fallback.

    Tier 1 accepts only http/https; tier 2 requires a 2xx/3xx HEAD response;
    tier 3 checks the resolved MIME against the expected modality (or the
    modality set of the assigned flag). Any tier failure triggers a local-path
    interpretation attempt; if that also fails, UnreachableAttachment names
    the failing tier.
    """
    scheme = urlparse(url).scheme.lower()
    scheme_ok = scheme in ("http", "https")
    reachable = False
    content_type_ok = False
    resolved_mime: Optional[str] = None
    failed_tier = None

    if not scheme_ok:
        failed_tier = "scheme"
    else:
        try:
            status, headers = prober.head(url)
            reachable = 200 <= status < 400
        except Exception:
            reachable = False
            headers = {}
        if not reachable:
            failed_tier = "reachability"
        else:
            resolved_mime = headers.get("content-type")
            want = _expected_modalities(expected)
            if want is None:
                content_type_ok = resolved_mime is not None
            else:
                content_type_ok = (
                    resolved_mime is not None
                    and modality_from_mime(resolved_mime) in want
                )
            if not content_type_ok:
                failed_tier = "content-type"

    fallback = None
    if failed_tier is not None:
        for candidate in (url, urlparse(url).path):
            if candidate and fs_exists(candidate):
                fallback = candidate
                break
        if fallback is None:
            raise UnreachableAttachment(
                f"attachment {url!r} failed {failed_tier} verification and has no "
                f"local fallback",
                failed_tier=failed_tier,
            )

    return ValidationResult(
        scheme_ok=scheme_ok,
        reachable=reachable,
        content_type_ok=content_type_ok,
        resolved_mime=resolved_mime,
        fallback_local_path=fallback,
    )


# --- flag classification -----------------------------------------------------


@dataclass(frozen=True)
class FlagRule:
    keywords: tuple[str, ...] = ()
    keyword_weight: float = 1.0
    base: float = 0.0
    bonus_modalities: tuple[Modality, ...] = ()  # any-of
    modality_bonus: float = 0.0
    no_attachment_bonus: float = 0.0
    absent_modalities: tuple[Modality, ...] = ()
    absent_bonus: float = 0.0
    multi_step_bonus: float = 0.0


_MULTI_STEP_MARKERS = (
    " and then ", " then ", "after that", "first,", "second,", "finally",
    "two ", "three ", "four ", "five ", "1.", "2.", "3.",
)


def _multi_step_score(query: str) -> int:
    q = query.lower()
    hits = sum(1 for marker in _MULTI_STEP_MARKERS if marker in q)
    hits += max(0, q.count(" and ") - 1)
    if q.count(",") >= 2:
        hits += 1
    return hits


def score_flags(
    query: str, modalities: set[Modality], rules: dict[ExecutionFlag, FlagRule]
) -> dict[ExecutionFlag, float]:
    q = query.lower()
    scores: dict[ExecutionFlag, float] = {}
    for flag in FLAG_PRECEDENCE:
        rule = rules.get(flag, FlagRule())
        score = rule.base
        score += rule.keyword_weight * sum(1 for kw in rule.keywords if kw in q)
        if rule.bonus_modalities and any(m in modalities for m in rule.bonus_modalities):
            score += rule.modality_bonus
        if rule.no_attachment_bonus and not modalities:
            score += rule.no_attachment_bonus
        if rule.absent_bonus and rule.absent_modalities and not any(
            m in modalities for m in rule.absent_modalities
        ):
            score += rule.absent_bonus
        if rule.multi_step_bonus and _multi_step_score(q) >= 2:
            score += rule.multi_step_bonus
        scores[flag] = score
    return scores


@dataclass
class FlagDecision:
    flag: ExecutionFlag
    scores: dict[ExecutionFlag, float]
    used_fallback: bool = False


def classify_flag_detail(
    query: str,
    modalities: set[Modality],
    classifier: Optional[Callable[[str, set[Modality]], dict[ExecutionFlag, float]]] = None,
    rules: Optional[dict[ExecutionFlag, FlagRule]] = None,
) -> FlagDecision:
    """Argmax flag assignment; ties broken by the fixed flag precedence.

    A failing or incomplete external classifier falls back to the rule table.
    """
    used_fallback = False
    scores: Optional[dict[ExecutionFlag, float]] = None
    if classifier is not None:
        try:
            scores = classifier(query, modalities)
            if scores is None or set(scores) != set(ExecutionFlag):
                raise ValueError("classifier must score every execution flag")
        except Exception:
            scores = None
            used_fallback = True
    if scores is None:
        scores = score_flags(query, modalities, rules or default_flag_rules())
    best = max(FLAG_PRECEDENCE, key=lambda f: (scores[f], -FLAG_PRECEDENCE.index(f)))
    return FlagDecision(flag=best, scores=scores, used_fallback=used_fallback)


def classify_flag(query, modalities, classifier=None, rules=None) -> ExecutionFlag:
    return classify_flag_detail(query, modalities, classifier, rules).flag


def reconcile_flag(flag: ExecutionFlag, modalities: set[Modality]) -> ExecutionFlag:
    """Demote a modality flag to moe when no matching attachment exists."""
    required = FLAG_REQUIRED_MODALITIES.get(flag)
    if required is not None and not (required & modalities):
        return ExecutionFlag.MOE
    return flag


# --- rule table file ----------------------------------------------------------


def rules_from_json(obj: dict) -> dict[ExecutionFlag, FlagRule]:
    rules = {}
    for flag_name, raw in obj.items():
        rules[ExecutionFlag(flag_name)] = FlagRule(
            keywords=tuple(raw.get("keywords", [])),
            keyword_weight=float(raw.get("keyword_weight", 1.0)),
            base=float(raw.get("base", 0.0)),
            bonus_modalities=tuple(Modality(m) for m in raw.get("bonus_modalities", [])),
            modality_bonus=float(raw.get("modality_bonus", 0.0)),
            no_attachment_bonus=float(raw.get("no_attachment_bonus", 0.0)),
            absent_modalities=tuple(Modality(m) for m in raw.get("absent_modalities", [])),
            absent_bonus=float(raw.get("absent_bonus", 0.0)),
            multi_step_bonus=float(raw.get("multi_step_bonus", 0.0)),
        )
    return rules


def load_flag_rules(path: str) -> dict[ExecutionFlag, FlagRule]:
    with open(path, "r", encoding="utf-8") as fh:
        return rules_from_json(json.load(fh))


_default_rules_cache: Optional[dict[ExecutionFlag, FlagRule]] = None


def default_flag_rules() -> dict[ExecutionFlag, FlagRule]:
    global _default_rules_cache
    if _default_rules_cache is None:
        text = resources.files("supervisord.data").joinpath("flag_rules.json").read_text("utf-8")
        _default_rules_cache = rules_from_json(json.loads(text))
    return _default_rules_cache
