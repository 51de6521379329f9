"""Core note model: ids, timestamps, the note record, and its canonical encoding.

A memory note is an immutable record of one agent interaction plus the
structure layered on top of it: keywords, tags, a one-sentence context
summary, an embedding of the enriched text, and links to related notes.
Notes are value objects; evolution replaces a note with a rewritten copy
rather than mutating it in place.

The canonical encoding is a stable byte representation used for journal
payloads, snapshots, and change detection. Two notes are equal exactly when
their canonical bytes are equal.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Collection, Iterable

import numpy as np

from .errors import EmptyContent, InvalidTimestamp

NoteId = str

_ID_RE = re.compile(r"^[0-9a-f]{32}$")
_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")
_TIMESTAMP_FMT = "%Y-%m-%dT%H:%M:%SZ"

# Fixed field order of the canonical JSON encoding. Decoders require exactly
# these keys and encoders emit them in exactly this order.
CANONICAL_FIELDS = (
    "id",
    "content",
    "timestamp",
    "keywords",
    "tags",
    "context",
    "embedding",
    "links",
)


def is_note_id(value: Any) -> bool:
    """True when value is a 32-character lowercase hex note id."""
    return isinstance(value, str) and _ID_RE.match(value) is not None


class IdGenerator:
    """Draws fresh 128-bit note ids.

    Seeded generators replay the same id sequence, which keeps full pipeline
    runs byte-reproducible. When a drawn id collides with an existing one the
    generator draws again, so uniqueness never depends on the seed.
    """

    def __init__(self, seed: int | None = None) -> None:
        self._rng: random.Random = (
            random.Random(seed) if seed is not None else random.SystemRandom()
        )

    def fresh(self, taken: Collection[str] = frozenset()) -> NoteId:
        while True:
            candidate = f"{self._rng.getrandbits(128):032x}"
            if candidate not in taken:
                return candidate


def validate_timestamp(value: str) -> str:
    """Return value unchanged if it is a canonical UTC timestamp.

    The only accepted shape is 'YYYY-MM-DDTHH:MM:SSZ' with zero-padded
    fields, so lexicographic order on valid timestamps matches time order.
    Raises InvalidTimestamp otherwise.
    """
    if not isinstance(value, str) or _TIMESTAMP_RE.match(value) is None:
        raise InvalidTimestamp(f"timestamp not in YYYY-MM-DDTHH:MM:SSZ form: {value!r}")
    try:
        datetime.strptime(value, _TIMESTAMP_FMT)
    except ValueError as exc:
        raise InvalidTimestamp(f"timestamp has impossible date or time: {value!r}") from exc
    return value


def now_timestamp() -> str:
    """Current UTC time in canonical timestamp form (seconds precision)."""
    return datetime.now(timezone.utc).strftime(_TIMESTAMP_FMT)


def normalize_terms(terms: Iterable[str]) -> tuple[str, ...]:
    """Lowercase, trim, drop empties, and deduplicate, preserving first-seen order."""
    out: list[str] = []
    seen: set[str] = set()
    for term in terms:
        cleaned = str(term).strip().lower()
        if cleaned and cleaned not in seen:
            seen.add(cleaned)
            out.append(cleaned)
    return tuple(out)


def compose_note_text(
    content: str, keywords: Iterable[str], tags: Iterable[str], context: str
) -> str:
    """Build the enriched text that gets embedded for a note.

    Content, comma-joined keywords, comma-joined tags, and context, one per
    line. Queries are embedded raw and never pass through this composition.
    """
    return "\n".join([content, ", ".join(keywords), ", ".join(tags), context])


def note_text(note: "MemoryNote") -> str:
    """The enriched text a stored note's embedding must correspond to."""
    return compose_note_text(note.content, note.keywords, note.tags, note.context)


@dataclass(frozen=True)
class DraftNote:
    """A note before enrichment: fresh id, raw content, validated timestamp."""

    id: NoteId
    content: str
    timestamp: str


def new_draft(content: str, timestamp: str, ids: IdGenerator | None = None) -> DraftNote:
    """Validate raw inputs and allocate an id for a note under construction."""
    if not isinstance(content, str) or not content.strip():
        raise EmptyContent("note content is empty or whitespace-only")
    generator = ids if ids is not None else _DEFAULT_IDS
    return DraftNote(id=generator.fresh(), content=content, timestamp=validate_timestamp(timestamp))


_DEFAULT_IDS = IdGenerator()


def _check_terms(label: str, terms: tuple[str, ...]) -> None:
    if not isinstance(terms, tuple) or len(terms) < 1:
        raise ValueError(f"{label} must be a non-empty tuple")
    seen: set[str] = set()
    for term in terms:
        if not isinstance(term, str) or not term or term != term.strip().lower():
            raise ValueError(f"{label} entry not normalized lowercase text: {term!r}")
        if term in seen:
            raise ValueError(f"duplicate {label} entry: {term!r}")
        seen.add(term)


@dataclass(frozen=True, eq=False)
class MemoryNote:
    """One immutable memory record.

    Invariants are enforced at construction: well-formed id and timestamp,
    non-empty content and context, normalized duplicate-free keywords and
    tags with at least one entry each, a finite 1-D float32 embedding, and
    links that resolve to other notes (never to the note itself).
    """

    id: NoteId
    content: str
    timestamp: str
    keywords: tuple[str, ...]
    tags: tuple[str, ...]
    context: str
    embedding: np.ndarray
    links: frozenset[NoteId] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not is_note_id(self.id):
            raise ValueError(f"malformed note id: {self.id!r}")
        if not isinstance(self.content, str) or not self.content.strip():
            raise EmptyContent("note content is empty or whitespace-only")
        validate_timestamp(self.timestamp)
        _check_terms("keywords", self.keywords)
        _check_terms("tags", self.tags)
        if not isinstance(self.context, str) or not self.context.strip():
            raise ValueError("note context is empty")

        vec = np.asarray(self.embedding, dtype=np.float32)
        if vec.ndim != 1 or vec.size < 1:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embedding contains NaN or Inf")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "embedding", vec)

        if not isinstance(self.links, frozenset):
            object.__setattr__(self, "links", frozenset(self.links))
        for link in self.links:
            if not is_note_id(link):
                raise ValueError(f"malformed link id: {link!r}")
        if self.id in self.links:
            raise ValueError("note may not link to itself")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryNote):
            return NotImplemented
        return (
            self.id == other.id
            and self.content == other.content
            and self.timestamp == other.timestamp
            and self.keywords == other.keywords
            and self.tags == other.tags
            and self.context == other.context
            and self.links == other.links
            and self.embedding.shape == other.embedding.shape
            and bool(np.all(self.embedding == other.embedding))
        )

    def __hash__(self) -> int:
        return hash(self.id)


def format_float32(value: float) -> str:
    """Render one float32 component at 9 significant digits.

    Nine digits are enough to round-trip any float32 exactly through a
    decimal string, so canonical bytes stay bitwise stable across encode
    and decode cycles.
    """
    return format(float(value), ".9g")


def _dumps(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"))


def encode_embedding(vec: np.ndarray) -> str:
    return "[" + ",".join(format_float32(v) for v in vec) + "]"


def canonical_json(note: MemoryNote) -> str:
    """Canonical JSON text for a note: fixed field order, 9-digit floats."""
    return "".join(
        (
            '{"id":', _dumps(note.id),
            ',"content":', _dumps(note.content),
            ',"timestamp":', _dumps(note.timestamp),
            ',"keywords":', _dumps(list(note.keywords)),
            ',"tags":', _dumps(list(note.tags)),
            ',"context":', _dumps(note.context),
            ',"embedding":', encode_embedding(note.embedding),
            ',"links":', _dumps(sorted(note.links)),
            "}",
        )
    )


def canonical_bytes(note: MemoryNote) -> bytes:
    """UTF-8 bytes of the canonical JSON encoding."""
    return canonical_json(note).encode("utf-8")


def note_from_fields(data: dict[str, Any]) -> MemoryNote:
    """Build a note from decoded JSON fields, enforcing exact key set and types."""
    if not isinstance(data, dict):
        raise ValueError("note record must be a JSON object")
    keys = tuple(data.keys())
    if set(keys) != set(CANONICAL_FIELDS):
        raise ValueError(f"note record has wrong field set: {sorted(keys)}")
    for name in ("keywords", "tags"):
        if not isinstance(data[name], list):
            raise ValueError(f"{name} must be a list")
    if not isinstance(data["embedding"], list):
        raise ValueError("embedding must be a list of numbers")
    if not isinstance(data["links"], list):
        raise ValueError("links must be a list")
    embedding = np.asarray(data["embedding"], dtype=np.float32)
    return MemoryNote(
        id=data["id"],
        content=data["content"],
        timestamp=data["timestamp"],
        keywords=tuple(data["keywords"]),
        tags=tuple(data["tags"]),
        context=data["context"],
        embedding=embedding,
        links=frozenset(data["links"]),
    )


def decode_note(blob: bytes | str) -> MemoryNote:
    """Decode canonical bytes back into a note. Inverse of canonical_bytes."""
    text = blob.decode("utf-8") if isinstance(blob, bytes) else blob
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"note record is not valid JSON: {exc}") from exc
    return note_from_fields(data)
