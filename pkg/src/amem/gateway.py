"""LLM gateway: prompt templates, structured-output validation, and backends.

Three prompts drive the memory pipeline. Template s1 asks for a structured
analysis of new content (keywords, context, tags). Template s2 asks whether
a new note should evolve given its nearest neighbors. Template s3 asks for
the concrete evolution decision: which neighbors to connect, which tags the
new note gains, and rewritten context/tags for neighbors.

The gateway validates every backend response against the expected schema,
retries malformed completions a bounded number of times, and guarantees that
whatever it hands to the engine is schema-valid. The mock backend is a pure
function of its inputs and makes the whole pipeline runnable offline with
reproducible results; it also serves as the fallback when a live backend
keeps returning garbage for attribute extraction.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Any, Mapping, Protocol, Sequence

import requests

from .errors import BackendUnavailable, EmptyContent, MissingSlot, SchemaViolation
from .notes import MemoryNote, validate_timestamp

logger = logging.getLogger(__name__)

LLM_API_KEY_ENV = "AMEM_LLM_API_KEY"

SUPPORTED_ACTIONS = ("strengthen", "update_neighbor")

TEMPLATE_SLOTS: dict[str, tuple[str, ...]] = {
    "s1": ("timestamp", "content"),
    "s2": ("context", "content", "keywords", "nearest_neighbors_memories"),
    "s3": ("context", "content", "keywords", "nearest_neighbors_memories"),
}

_TEMPLATE_CACHE: dict[str, str] = {}


def load_template(template_id: str) -> str:
    """Raw template text shipped with the package."""
    if template_id not in TEMPLATE_SLOTS:
        raise ValueError(f"unknown template id: {template_id!r}")
    cached = _TEMPLATE_CACHE.get(template_id)
    if cached is None:
        cached = (
            resources.files("amem").joinpath(f"prompts/{template_id}.txt").read_text("utf-8")
        )
        _TEMPLATE_CACHE[template_id] = cached
    return cached


def render_prompt(template_id: str, slots: Mapping[str, str]) -> str:
    """Substitute slot values into a template.

    Substitution replaces only the declared {slot} markers, so the literal
    braces in the templates' JSON examples pass through untouched.
    """
    template = load_template(template_id)
    rendered = template
    for name in TEMPLATE_SLOTS[template_id]:
        if name not in slots:
            raise MissingSlot(f"template {template_id} needs slot {name!r}")
        rendered = rendered.replace("{" + name + "}", str(slots[name]))
    return rendered


def render_neighbors(neighbors: Sequence[MemoryNote]) -> str:
    """One block per neighbor, in retrieval-rank order."""
    blocks = []
    for note in neighbors:
        blocks.append(
            "memory id: {id}\n"
            "content: {content}\n"
            "context: {context}\n"
            "keywords: {keywords}\n"
            "tags: {tags}\n"
            "timestamp: {timestamp}".format(
                id=note.id,
                content=note.content,
                context=note.context,
                keywords=", ".join(note.keywords),
                tags=", ".join(note.tags),
                timestamp=note.timestamp,
            )
        )
    return "\n".join(blocks)


@dataclass(frozen=True)
class NoteAttributes:
    """Structured analysis of new content: what s1 returns."""

    keywords: tuple[str, ...]
    context: str
    tags: tuple[str, ...]


@dataclass(frozen=True)
class LinkOpinion:
    """Yes/no answer to 'should this new memory be evolved?', with rationale."""

    should_evolve: bool
    rationale: str


@dataclass(frozen=True)
class EvolutionDirective:
    """Concrete evolution decision against a fixed ranked neighbor list.

    suggested_connections name neighbors the new note should link to.
    tags_to_update are tags appended to the new note. The neighborhood lists
    are positional: entry i rewrites neighbor i's context or tags, an empty
    entry leaves that neighbor untouched.
    """

    should_evolve: bool
    actions: tuple[str, ...] = ()
    suggested_connections: tuple[str, ...] = ()
    tags_to_update: tuple[str, ...] = ()
    new_context_neighborhood: tuple[str, ...] = ()
    new_tags_neighborhood: tuple[tuple[str, ...], ...] = ()

    @classmethod
    def no_op(cls) -> "EvolutionDirective":
        return cls(should_evolve=False)

    def without_rewrites(self) -> "EvolutionDirective":
        """Keep link and tag suggestions, drop neighbor rewrites."""
        return EvolutionDirective(
            should_evolve=self.should_evolve,
            actions=tuple(a for a in self.actions if a != "update_neighbor"),
            suggested_connections=self.suggested_connections,
            tags_to_update=self.tags_to_update,
        )


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise SchemaViolation(message)


def _string_list(value: Any, label: str, minimum: int = 0) -> tuple[str, ...]:
    _require(isinstance(value, list), f"{label} must be a list")
    out = []
    for entry in value:
        _require(isinstance(entry, str), f"{label} entries must be strings")
        out.append(entry)
    _require(len(out) >= minimum, f"{label} needs at least {minimum} entries")
    return tuple(out)


def parse_note_attributes(raw: Any) -> NoteAttributes:
    """Validate a backend response against the s1 output shape."""
    _require(isinstance(raw, dict), "attribute response must be a JSON object")
    _require(
        set(raw.keys()) == {"keywords", "context", "tags"},
        f"attribute response has wrong keys: {sorted(raw.keys())}",
    )
    keywords = _string_list(raw["keywords"], "keywords", minimum=3)
    tags = _string_list(raw["tags"], "tags", minimum=3)
    _require(all(k.strip() for k in keywords), "keywords contain blank entries")
    _require(all(t.strip() for t in tags), "tags contain blank entries")
    context = raw["context"]
    _require(isinstance(context, str) and bool(context.strip()), "context must be non-empty text")
    return NoteAttributes(keywords=keywords, context=context, tags=tags)


def parse_link_opinion(raw: Any) -> LinkOpinion:
    _require(isinstance(raw, dict), "link opinion must be a JSON object")
    _require("should_evolve" in raw, "link opinion missing should_evolve")
    _require("rationale" in raw, "link opinion missing rationale")
    should = raw["should_evolve"]
    rationale = raw["rationale"]
    _require(isinstance(should, bool), "should_evolve must be a boolean")
    _require(isinstance(rationale, str), "rationale must be text")
    return LinkOpinion(should_evolve=should, rationale=rationale)


_DIRECTIVE_KEYS = (
    "should_evolve",
    "actions",
    "suggested_connections",
    "tags_to_update",
    "new_context_neighborhood",
    "new_tags_neighborhood",
)


def parse_evolution_directive(raw: Any, neighbor_ids: Sequence[str]) -> EvolutionDirective:
    """Validate and sanitize a backend response against the s3 output shape.

    Unknown actions are dropped with a warning rather than rejected, since
    live models occasionally emit actions nobody defined semantics for.
    Connection suggestions outside the candidate neighbor set are filtered
    out, and the positional neighborhood lists are truncated to the number
    of candidates.
    """
    _require(isinstance(raw, dict), "evolution directive must be a JSON object")
    for key in _DIRECTIVE_KEYS:
        _require(key in raw, f"evolution directive missing key {key!r}")
    should = raw["should_evolve"]
    _require(isinstance(should, bool), "should_evolve must be a boolean")

    actions_in = _string_list(raw["actions"], "actions")
    actions: list[str] = []
    for action in actions_in:
        if action in SUPPORTED_ACTIONS:
            if action not in actions:
                actions.append(action)
        else:
            logger.warning("dropping unsupported evolution action %r", action)

    allowed = set(neighbor_ids)
    connections = tuple(
        nid
        for nid in _string_list(raw["suggested_connections"], "suggested_connections")
        if nid in allowed
    )
    tags_to_update = _string_list(raw["tags_to_update"], "tags_to_update")

    contexts = _string_list(raw["new_context_neighborhood"], "new_context_neighborhood")
    contexts = contexts[: len(neighbor_ids)]

    raw_tag_lists = raw["new_tags_neighborhood"]
    _require(isinstance(raw_tag_lists, list), "new_tags_neighborhood must be a list")
    tag_lists = tuple(
        _string_list(entry, "new_tags_neighborhood entry")
        for entry in raw_tag_lists[: len(neighbor_ids)]
    )

    if not should:
        return EvolutionDirective.no_op()
    return EvolutionDirective(
        should_evolve=True,
        actions=tuple(actions),
        suggested_connections=connections,
        tags_to_update=tags_to_update,
        new_context_neighborhood=contexts,
        new_tags_neighborhood=tag_lists,
    )


# ---------------------------------------------------------------------------
# Deterministic mock rules


_MOCK_TOKEN_RE = re.compile(r"\w+")

_STOPWORDS = frozenset(
    """
    a about above after again all am an and any are aren as at be because
    been before being below between both but by can cannot could d did didn
    do does doesn doing don down during each few for from further had hadn
    has hasn have haven having he her here hers him his how i if in into is
    isn it its itself just ll m me more most my myself no nor not of off on
    once only or other our ours out over own re s same she should shouldn so
    some such t than that the their theirs them then there these they this
    those through to too under until up ve very was wasn we were weren what
    when where which while who whom why will with won would wouldn you your
    yours
    """.split()
)


def mock_note_attributes(content: str, timestamp: str) -> dict[str, Any]:
    """Deterministic attribute extraction used by the mock backend.

    Keywords are the top 3 non-stopword tokens ranked by frequency with an
    alphabetical tie-break. When content yields fewer than 3 keywords, the
    first keyword k is padded with "k-note" and "k-topic". Context names the
    top keyword; tags mirror keywords with a "topic:" prefix.
    """
    tokens = _MOCK_TOKEN_RE.findall(content.lower())
    candidates = [token for token in tokens if token not in _STOPWORDS]
    if not candidates:
        candidates = tokens
    counts = Counter(candidates)
    ranked = sorted(counts, key=lambda token: (-counts[token], token))
    keywords = ranked[:3]
    base = keywords[0] if keywords else "text"
    if not keywords:
        # Content with no word tokens at all still needs three keywords.
        keywords = [base]
    for suffix in ("-note", "-topic"):
        if len(keywords) >= 3:
            break
        padded = base + suffix
        if padded not in keywords:
            keywords.append(padded)
    context = f"Discusses {keywords[0]} and related topics."
    tags = ["topic:" + keyword for keyword in keywords]
    return {"keywords": keywords, "context": context, "tags": tags}


def _shared_keywords(new_note: MemoryNote, neighbor: MemoryNote) -> list[str]:
    return sorted(set(new_note.keywords) & set(neighbor.keywords))


def mock_link_opinion(new_note: MemoryNote, neighbors: Sequence[MemoryNote]) -> dict[str, Any]:
    """Mock rule: evolve exactly when any neighbor shares a keyword."""
    shared: list[str] = []
    for neighbor in neighbors:
        for keyword in _shared_keywords(new_note, neighbor):
            if keyword not in shared:
                shared.append(keyword)
    if shared:
        return {
            "should_evolve": True,
            "rationale": "Shares keywords with neighbors: " + ", ".join(sorted(shared)) + ".",
        }
    return {"should_evolve": False, "rationale": "No keyword overlap with any neighbor."}


def mock_evolution_directive(
    new_note: MemoryNote, neighbors: Sequence[MemoryNote]
) -> dict[str, Any]:
    """Mock rule for the s3 decision.

    A neighbor sharing at least one keyword gets connected, and each shared
    keyword k contributes tag "topic:k" for the new note. A neighbor sharing
    two or more keywords is additionally rewritten: fresh context naming the
    first two shared keywords, and tags extended with the shared topics.
    """
    connections: list[str] = []
    tags_to_update: list[str] = []
    contexts = [""] * len(neighbors)
    tag_lists: list[list[str]] = [[] for _ in neighbors]
    any_rewrite = False
    for position, neighbor in enumerate(neighbors):
        shared = _shared_keywords(new_note, neighbor)
        if not shared:
            continue
        connections.append(neighbor.id)
        for keyword in shared:
            tag = "topic:" + keyword
            if tag not in tags_to_update:
                tags_to_update.append(tag)
        if len(shared) >= 2:
            any_rewrite = True
            contexts[position] = (
                f"Expands on {shared[0]} and {shared[1]} with newer material."
            )
            merged = list(neighbor.tags)
            for keyword in shared:
                tag = "topic:" + keyword
                if tag not in merged:
                    merged.append(tag)
            tag_lists[position] = merged
    if not connections:
        return {
            "should_evolve": False,
            "actions": [],
            "suggested_connections": [],
            "tags_to_update": [],
            "new_context_neighborhood": [],
            "new_tags_neighborhood": [],
        }
    actions = ["strengthen"] + (["update_neighbor"] if any_rewrite else [])
    return {
        "should_evolve": True,
        "actions": actions,
        "suggested_connections": connections,
        "tags_to_update": tags_to_update,
        "new_context_neighborhood": contexts,
        "new_tags_neighborhood": tag_lists,
    }


# ---------------------------------------------------------------------------
# Backends


class ChatBackend(Protocol):
    """A backend turns one task request into a parsed JSON object."""

    name: str

    def complete(self, task: str, prompt: str, payload: Mapping[str, Any]) -> Any: ...


class MockBackend:
    """Offline backend driven entirely by the deterministic rules above."""

    name = "mock"

    def complete(self, task: str, prompt: str, payload: Mapping[str, Any]) -> Any:
        if task == "note_attributes":
            return mock_note_attributes(payload["content"], payload["timestamp"])
        if task == "link_opinion":
            return mock_link_opinion(payload["new_note"], payload["neighbors"])
        if task == "evolution_directive":
            return mock_evolution_directive(payload["new_note"], payload["neighbors"])
        raise ValueError(f"unknown gateway task: {task!r}")


_RESPONSE_SCHEMAS: dict[str, dict[str, Any]] = {
    "note_attributes": {
        "type": "object",
        "properties": {
            "keywords": {"type": "array", "items": {"type": "string"}, "minItems": 3},
            "context": {"type": "string"},
            "tags": {"type": "array", "items": {"type": "string"}, "minItems": 3},
        },
        "required": ["keywords", "context", "tags"],
        "additionalProperties": False,
    },
    "link_opinion": {
        "type": "object",
        "properties": {
            "should_evolve": {"type": "boolean"},
            "rationale": {"type": "string"},
        },
        "required": ["should_evolve", "rationale"],
        "additionalProperties": False,
    },
    "evolution_directive": {
        "type": "object",
        "properties": {
            "should_evolve": {"type": "boolean"},
            "actions": {"type": "array", "items": {"type": "string"}},
            "suggested_connections": {"type": "array", "items": {"type": "string"}},
            "tags_to_update": {"type": "array", "items": {"type": "string"}},
            "new_context_neighborhood": {"type": "array", "items": {"type": "string"}},
            "new_tags_neighborhood": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "string"}},
            },
        },
        "required": [
            "should_evolve",
            "actions",
            "suggested_connections",
            "tags_to_update",
            "new_context_neighborhood",
            "new_tags_neighborhood",
        ],
        "additionalProperties": False,
    },
}


def _strip_code_fences(text: str) -> str:
    stripped = text.strip()
    if not stripped.startswith("```"):
        return stripped
    lines = stripped.splitlines()
    if lines and lines[0].startswith("```"):
        lines = lines[1:]
    if lines and lines[-1].strip() == "```":
        lines = lines[:-1]
    return "\n".join(lines).strip()


class RemoteChatBackend:
    """Chat-completion client for an OpenAI-style HTTP endpoint.

    Each request carries the model name, a single user message, and a JSON
    schema response-format block for the task at hand. In-flight requests
    are bounded by a semaphore. Transport failures and malformed response
    envelopes raise BackendUnavailable; completion text that fails to parse
    as a JSON object raises SchemaViolation so the gateway's retry loop can
    ask again.
    """

    name = "remote"

    def __init__(
        self,
        url: str,
        model: str,
        timeout: float = 60.0,
        session: requests.Session | None = None,
        api_key: str | None = None,
        max_in_flight: int = 4,
    ) -> None:
        self.url = url
        self.model = model
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()
        self._api_key = api_key if api_key is not None else os.environ.get(LLM_API_KEY_ENV)
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def complete(self, task: str, prompt: str, payload: Mapping[str, Any]) -> Any:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": task, "schema": _RESPONSE_SCHEMAS[task]},
            },
        }
        logger.debug(
            "chat request: task=%s model=%s prompt=[redacted %d chars]",
            task,
            self.model,
            len(prompt),
        )
        with self._slots:
            try:
                response = self._session.post(
                    self.url, json=body, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                raise BackendUnavailable(f"chat endpoint unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendUnavailable(f"chat endpoint returned HTTP {response.status_code}")
        try:
            envelope = response.json()
            content = envelope["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion envelope: {exc}") from exc
        if not isinstance(content, str):
            raise BackendUnavailable("completion content is not text")
        logger.debug("chat response: task=%s content=[redacted %d chars]", task, len(content))
        try:
            parsed = json.loads(_strip_code_fences(content))
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"completion is not valid JSON: {exc}") from exc
        return parsed


# ---------------------------------------------------------------------------
# Gateway


class LlmGateway:
    """Validated front door to whichever chat backend is configured.

    Retry policy: a schema-violating response is retried up to max_retries
    times. After that, attribute extraction falls back to the deterministic
    mock rule (unless fallback is disabled), the link opinion falls back to
    the mock rule (an opinion is always produced), and the evolution
    directive raises, since silently inventing rewrites would be worse than
    skipping evolution.
    """

    def __init__(
        self,
        backend: ChatBackend | None = None,
        fallback_to_mock: bool = True,
        max_retries: int = 2,
    ) -> None:
        self._backend: ChatBackend = backend if backend is not None else MockBackend()
        self._fallback = fallback_to_mock
        self._retries = max(0, max_retries)

    @property
    def backend_name(self) -> str:
        return self._backend.name

    def _attempt(self, task: str, prompt: str, payload: Mapping[str, Any], parse):
        last: SchemaViolation | None = None
        for attempt in range(self._retries + 1):
            try:
                return parse(self._backend.complete(task, prompt, payload))
            except SchemaViolation as exc:
                last = exc
                logger.warning(
                    "schema violation from %s backend on %s (attempt %d/%d): %s",
                    self._backend.name,
                    task,
                    attempt + 1,
                    self._retries + 1,
                    exc,
                )
        assert last is not None
        raise last

    def generate_note_attributes(self, content: str, timestamp: str) -> NoteAttributes:
        """Run the s1 analysis for new content."""
        if not isinstance(content, str) or not content.strip():
            raise EmptyContent("cannot analyze empty content")
        validate_timestamp(timestamp)
        prompt = render_prompt("s1", {"content": content, "timestamp": timestamp})
        payload = {"content": content, "timestamp": timestamp}
        try:
            return self._attempt("note_attributes", prompt, payload, parse_note_attributes)
        except SchemaViolation:
            if not self._fallback:
                raise
            logger.warning("falling back to deterministic attribute extraction")
            return parse_note_attributes(mock_note_attributes(content, timestamp))

    def _neighbor_slots(
        self, new_note: MemoryNote, neighbors: Sequence[MemoryNote]
    ) -> dict[str, str]:
        return {
            "context": new_note.context,
            "content": new_note.content,
            "keywords": ", ".join(new_note.keywords),
            "nearest_neighbors_memories": render_neighbors(neighbors),
        }

    def opine_links(self, new_note: MemoryNote, neighbors: Sequence[MemoryNote]) -> LinkOpinion:
        """Run the s2 should-this-memory-evolve question."""
        if not neighbors:
            raise ValueError("opine_links requires at least one neighbor")
        prompt = render_prompt("s2", self._neighbor_slots(new_note, neighbors))
        payload = {"new_note": new_note, "neighbors": list(neighbors)}
        try:
            return self._attempt("link_opinion", prompt, payload, parse_link_opinion)
        except SchemaViolation:
            logger.warning("falling back to deterministic link opinion")
            return parse_link_opinion(mock_link_opinion(new_note, neighbors))

    def propose_evolution(
        self, new_note: MemoryNote, neighbors: Sequence[MemoryNote]
    ) -> EvolutionDirective:
        """Run the s3 evolution decision."""
        if not neighbors:
            raise ValueError("propose_evolution requires at least one neighbor")
        prompt = render_prompt("s3", self._neighbor_slots(new_note, neighbors))
        payload = {"new_note": new_note, "neighbors": list(neighbors)}
        neighbor_ids = [note.id for note in neighbors]
        return self._attempt(
            "evolution_directive",
            prompt,
            payload,
            lambda raw: parse_evolution_directive(raw, neighbor_ids),
        )
