"""Memory engine: note construction, autonomous linking, evolution, retrieval.

Adding a memory runs the full pipeline. The gateway analyzes the content
into keywords, context, and tags; the enriched note text is embedded and
the note staged for insertion. If the store already holds notes, the
nearest neighbors by cosine similarity are fetched and the gateway is asked
whether the new memory should evolve; an affirmative opinion yields a
concrete directive that links the new note to chosen neighbors (both
directions), extends the new note's tags, and may rewrite neighbor context
or tags. Rewritten notes replace the originals and are re-encoded so every
stored embedding always matches its note text. All changes from one add are
journaled before the call returns.

Backend calls happen strictly before any state is touched, so a backend
failure leaves the store exactly as it was.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .embedding import Encoder
from .errors import EmptyContent, EmptyQuery, UnknownId
from .gateway import EvolutionDirective, LlmGateway
from .index import ReadWriteLock, VectorIndex, cosine
from .notes import (
    IdGenerator,
    MemoryNote,
    NoteId,
    compose_note_text,
    normalize_terms,
    note_text,
    now_timestamp,
    validate_timestamp,
)

_CONFIG_FIELDS = (
    "k_link",
    "k_retrieve",
    "enable_link_generation",
    "enable_evolution",
    "enable_link_expansion",
    "k_by_category",
)


@dataclass
class EngineConfig:
    """Behavior switches for the memory pipeline.

    k_link controls how many neighbors the link-generation phase sees;
    k_retrieve is the default result count for queries, overridable per
    query category through k_by_category. The three enable flags are
    ablation switches: link generation gates the whole neighbor phase,
    evolution gates neighbor rewrites, and link expansion appends linked
    notes to retrieval results.
    """

    k_link: int = 10
    k_retrieve: int = 10
    enable_link_generation: bool = True
    enable_evolution: bool = True
    enable_link_expansion: bool = False
    k_by_category: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.k_link, int) or self.k_link < 1:
            raise ValueError("k_link must be >= 1")
        if not isinstance(self.k_retrieve, int) or self.k_retrieve < 1:
            raise ValueError("k_retrieve must be >= 1")
        for category, value in self.k_by_category.items():
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"k for category {category!r} must be >= 1")

    def k_for(self, category: str | None = None) -> int:
        if category is not None and category in self.k_by_category:
            return self.k_by_category[category]
        return self.k_retrieve

    def to_mapping(self) -> dict[str, Any]:
        return {
            "k_link": self.k_link,
            "k_retrieve": self.k_retrieve,
            "enable_link_generation": self.enable_link_generation,
            "enable_evolution": self.enable_evolution,
            "enable_link_expansion": self.enable_link_expansion,
            "k_by_category": dict(sorted(self.k_by_category.items())),
        }

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EngineConfig":
        unknown = set(data) - set(_CONFIG_FIELDS)
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        kwargs = {key: data[key] for key in _CONFIG_FIELDS if key in data}
        if "k_by_category" in kwargs:
            kwargs["k_by_category"] = dict(kwargs["k_by_category"])
        return cls(**kwargs)


@dataclass(frozen=True)
class RetrievedMemory:
    """One retrieval hit: the note, its cosine score, and how it got here."""

    note: MemoryNote
    score: float
    expanded: bool = False


def _extend_terms(existing: tuple[str, ...], additions: Sequence[str]) -> tuple[str, ...]:
    merged = list(existing)
    for term in normalize_terms(additions):
        if term not in merged:
            merged.append(term)
    return tuple(merged)


class MemoryEngine:
    """Owns the note store and wires encoder, index, gateway, and journal.

    Mutations (add_memory, apply_evolution) are serialized; reads
    (retrieve, get_note, audit, iteration) run concurrently against a
    consistent snapshot. The notes map is swapped wholesale on commit, so a
    reader never observes a half-applied update.
    """

    def __init__(
        self,
        encoder: Encoder,
        gateway: LlmGateway | None = None,
        config: EngineConfig | None = None,
        journal: Any = None,
        id_seed: int | None = None,
    ) -> None:
        self._encoder = encoder
        self._gateway = gateway if gateway is not None else LlmGateway()
        self.config = config if config is not None else EngineConfig()
        self._journal = journal
        self._ids = IdGenerator(id_seed)
        self._notes: dict[NoteId, MemoryNote] = {}
        self._index = VectorIndex(encoder.dimension)
        self._mutate = threading.RLock()
        self._view = ReadWriteLock()

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    @property
    def journal(self) -> Any:
        return self._journal

    def __len__(self) -> int:
        return len(self._notes)

    def __contains__(self, note_id: str) -> bool:
        return note_id in self._notes

    def note_ids(self) -> list[NoteId]:
        with self._view.read():
            return sorted(self._notes)

    def iter_notes(self) -> Iterator[MemoryNote]:
        """Notes in ascending id order, from one consistent snapshot."""
        with self._view.read():
            notes = self._notes
        for note_id in sorted(notes):
            yield notes[note_id]

    def get_note(self, note_id: NoteId) -> MemoryNote:
        with self._view.read():
            note = self._notes.get(note_id)
        if note is None:
            raise UnknownId(f"no note with id {note_id}")
        return note

    # -- mutation pipeline --------------------------------------------------

    def add_memory(self, content: str, timestamp: str | None = None) -> NoteId:
        """Construct, link, and evolve one new memory. Returns its id.

        Gateway calls run before anything is committed: if the backend
        fails, the store is untouched. The neighbor query runs against the
        store as it was before this note, which is exactly a self-excluding
        top-k over the store with the note inserted.
        """
        if not isinstance(content, str) or not content.strip():
            raise EmptyContent("note content is empty or whitespace-only")
        ts = validate_timestamp(timestamp) if timestamp is not None else now_timestamp()
        with self._mutate:
            attrs = self._gateway.generate_note_attributes(content, ts)
            keywords = normalize_terms(attrs.keywords)
            tags = normalize_terms(attrs.tags)
            context = attrs.context
            text = compose_note_text(content, keywords, tags, context)
            note = MemoryNote(
                id=self._ids.fresh(self._notes.keys()),
                content=content,
                timestamp=ts,
                keywords=keywords,
                tags=tags,
                context=context,
                embedding=self._encoder.encode(text),
            )

            directive: EvolutionDirective | None = None
            neighbor_ids: list[NoteId] = []
            if self.config.enable_link_generation and self._notes:
                ranked = self._index.top_k(note.embedding, self.config.k_link, exclude=(note.id,))
                neighbors = [self._notes[nid] for nid, _ in ranked]
                neighbor_ids = [n.id for n in neighbors]
                opinion = self._gateway.opine_links(note, neighbors)
                if opinion.should_evolve:
                    directive = self._gateway.propose_evolution(note, neighbors)
                    if not self.config.enable_evolution:
                        directive = directive.without_rewrites()

            self._commit_insert(note)
            if directive is not None and directive.should_evolve:
                self._apply_evolution_locked(directive, note.id, neighbor_ids)
            return note.id

    def _commit_insert(self, note: MemoryNote) -> None:
        with self._view.write():
            notes = dict(self._notes)
            notes[note.id] = note
            self._notes = notes
            self._index.insert(note.id, note.embedding)
        if self._journal is not None:
            self._journal.note_added(note)
            self._journal.sync()

    def apply_evolution(
        self,
        directive: EvolutionDirective,
        new_id: NoteId,
        neighbor_ids: Sequence[NoteId],
    ) -> list[NoteId]:
        """Apply an evolution directive as a pure state transition.

        No backend calls happen here; this is the second half of add_memory,
        exposed so evolution logic is testable with hand-built directives.
        Returns the ids of notes that actually changed.
        """
        with self._mutate:
            return self._apply_evolution_locked(directive, new_id, list(neighbor_ids))

    def _apply_evolution_locked(
        self,
        directive: EvolutionDirective,
        new_id: NoteId,
        neighbor_ids: list[NoteId],
    ) -> list[NoteId]:
        notes = self._notes
        if new_id not in notes:
            raise UnknownId(f"no note with id {new_id}")
        for nid in neighbor_ids:
            if nid not in notes:
                raise UnknownId(f"no note with id {nid}")
        if not directive.should_evolve:
            return []

        allowed = set(neighbor_ids)
        connections: list[NoteId] = []
        for nid in directive.suggested_connections:
            if nid in allowed and nid != new_id and nid not in connections:
                connections.append(nid)

        staged: dict[NoteId, MemoryNote] = {}

        def current(nid: NoteId) -> MemoryNote:
            return staged.get(nid, notes[nid])

        new_note = current(new_id)
        new_links = set(new_note.links) | set(connections)
        new_tags = _extend_terms(new_note.tags, directive.tags_to_update)
        if new_links != set(new_note.links) or new_tags != new_note.tags:
            staged[new_id] = replace(
                new_note, links=frozenset(new_links), tags=new_tags
            )
        for nid in connections:
            neighbor = current(nid)
            if new_id not in neighbor.links:
                staged[nid] = replace(neighbor, links=neighbor.links | {new_id})

        for position, nid in enumerate(neighbor_ids):
            context = (
                directive.new_context_neighborhood[position]
                if position < len(directive.new_context_neighborhood)
                else ""
            )
            raw_tags = (
                directive.new_tags_neighborhood[position]
                if position < len(directive.new_tags_neighborhood)
                else ()
            )
            # Blank entries mean "leave this neighbor alone".
            new_context = context.strip()
            rewrite_tags = normalize_terms(raw_tags)
            if not new_context and not rewrite_tags:
                continue
            neighbor = current(nid)
            fields: dict[str, Any] = {}
            if new_context and new_context != neighbor.context:
                fields["context"] = new_context
            if rewrite_tags and rewrite_tags != neighbor.tags:
                fields["tags"] = rewrite_tags
            if fields:
                staged[nid] = replace(neighbor, **fields)

        ordered = [nid for nid in [new_id, *neighbor_ids] if nid in staged]
        if not ordered:
            return []

        # Re-encode every staged note whose enriched text changed, so the
        # embedding-coherence invariant survives rewrites.
        for nid in ordered:
            before, after = notes[nid], staged[nid]
            if note_text(after) != note_text(before):
                staged[nid] = replace(
                    after, embedding=self._encoder.encode(note_text(after))
                )

        with self._view.write():
            merged = dict(self._notes)
            merged.update(staged)
            self._notes = merged
            for nid in ordered:
                if note_text(staged[nid]) != note_text(notes[nid]):
                    self._index.update(nid, staged[nid].embedding)

        if self._journal is not None:
            for nid in ordered:
                before, after = notes[nid], staged[nid]
                content_changed = (
                    before.context != after.context
                    or before.tags != after.tags
                    or before.keywords != after.keywords
                )
                if content_changed:
                    self._journal.note_evolved(after)
                else:
                    self._journal.links_changed(
                        nid,
                        added=sorted(after.links - before.links),
                        removed=sorted(before.links - after.links),
                    )
            self._journal.sync()
        return ordered

    # -- reads ---------------------------------------------------------------

    def retrieve(
        self, query: str, k: int | None = None, category: str | None = None
    ) -> list[RetrievedMemory]:
        """Top-k most relevant notes for a raw text query.

        With link expansion enabled, linked notes of the ranked hits are
        appended after the ranked block, deduplicated, in ascending id
        order, flagged as expansion results.
        """
        if not isinstance(query, str) or not query.strip():
            raise EmptyQuery("query is empty or whitespace-only")
        if k is None:
            k = self.config.k_for(category)
        if not isinstance(k, int) or k < 1:
            raise ValueError("k must be >= 1")
        query_vec = self._encoder.encode(query)
        with self._view.read():
            ranked = self._index.top_k(query_vec, k)
            notes = self._notes
        results = [RetrievedMemory(notes[nid], score) for nid, score in ranked]
        if self.config.enable_link_expansion:
            seen = {nid for nid, _ in ranked}
            linked = sorted(
                {lid for hit in results for lid in hit.note.links if lid not in seen}
            )
            for lid in linked:
                results.append(
                    RetrievedMemory(
                        notes[lid],
                        cosine(query_vec, notes[lid].embedding),
                        expanded=True,
                    )
                )
        return results

    # -- integrity -----------------------------------------------------------

    def audit(
        self,
        verify_embeddings: bool | None = None,
        check_symmetry: bool = True,
    ) -> list[str]:
        """Check store invariants; returns human-readable problem strings.

        Embedding verification defaults to on under a deterministic encoder.
        Symmetry checking is optional because a journal prefix recovered
        after a crash may legitimately hold a half-linked pair.
        """
        verify = (
            getattr(self._encoder, "deterministic", False)
            if verify_embeddings is None
            else verify_embeddings
        )
        problems: list[str] = []
        with self._view.read():
            notes = self._notes
            index_ids = set(self._index.ids())
        note_ids = set(notes)
        for missing in sorted(note_ids - index_ids):
            problems.append(f"note {missing} missing from index")
        for missing in sorted(index_ids - note_ids):
            problems.append(f"index id {missing} has no note")
        for note_id in sorted(notes):
            note = notes[note_id]
            for link in sorted(note.links):
                if link not in notes:
                    problems.append(f"note {note_id} links to unknown id {link}")
                elif check_symmetry and note_id not in notes[link].links:
                    problems.append(f"link {note_id} -> {link} has no backlink")
            if verify:
                expected = self._encoder.encode(note_text(note))
                if not np.array_equal(expected, note.embedding):
                    problems.append(f"note {note_id} embedding does not match its text")
        return problems

    # -- wiring used by persistence and tools ---------------------------------

    def adopt_state(self, notes: Mapping[NoteId, MemoryNote]) -> None:
        """Install a loaded note set wholesale. Only for empty engines."""
        with self._mutate:
            if self._notes:
                raise RuntimeError("adopt_state requires an empty engine")
            ordered = sorted(notes)
            with self._view.write():
                self._notes = {nid: notes[nid] for nid in ordered}
                if ordered:
                    matrix = np.stack([notes[nid].embedding for nid in ordered])
                    self._index.bulk_load(ordered, matrix)

    def attach_journal(self, journal: Any) -> None:
        self._journal = journal

    def state_snapshot(self) -> tuple[dict[NoteId, MemoryNote], int]:
        """Current notes map plus the last journaled sequence number.

        The returned map is the engine's live copy-on-write dict; commits
        swap in a new dict, so holding this one is safe.
        """
        with self._view.read():
            notes = self._notes
        last_seq = self._journal.last_seq if self._journal is not None else 0
        return notes, last_seq

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def memory_bytes(self) -> tuple[int, int]:
        return self._index.memory_bytes()
