"""Engine tests: the insert pipeline, evolution, retrieval, and audits.

Everything runs against the deterministic mock backend and hash encoder,
so expected keywords, links, and rewrites can be stated exactly. Contents
are chosen so the mock keyword rule (top three non-stopword tokens by
frequency, alphabetical on ties) yields known keyword sets.
"""

import json

import numpy as np
import pytest

from amem.embedding import HashEncoder, basis_vector
from amem.engine import EngineConfig, MemoryEngine, RetrievedMemory
from amem.errors import (
    BackendUnavailable,
    EmptyContent,
    EmptyQuery,
    InvalidTimestamp,
    SchemaViolation,
    UnknownId,
)
from amem.gateway import EvolutionDirective, LlmGateway, MockBackend
from amem.index import cosine
from amem.notes import IdGenerator, MemoryNote, canonical_json, note_text
from amem.persistence import Journal, read_journal
from oracles import full_sort_top_k

# keyword sets under the mock rule:
#   A -> camera, photography, tripod
#   B -> camera, darkroom, photography   (shares 2 with A: rewrite)
#   C -> aperture, camera, lens          (shares 1 with A: strengthen only)
#   D -> lentil, recipe, soup            (shares 0 with A)
CONTENT_A = "photography camera tripod photography camera"
CONTENT_B = "photography camera darkroom darkroom photography camera"
CONTENT_C = "camera lens aperture aperture lens camera"
CONTENT_D = "soup recipe lentil soup recipe"

TS = ["2023-06-01T00:%02d:00Z" % i for i in range(60)]


def fresh_engine(config=None, dimension=48, journal=None, backend=None):
    gateway = LlmGateway(backend) if backend is not None else LlmGateway()
    return MemoryEngine(
        HashEncoder(dimension=dimension, seed=0),
        gateway=gateway,
        config=config,
        journal=journal,
        id_seed=99,
    )


class RecordingBackend:
    """Delegates to the mock backend and keeps the task call log."""

    name = "recording"

    def __init__(self, fail_task=None, error=None):
        self.inner = MockBackend()
        self.calls = []
        self.fail_task = fail_task
        self.error = error

    def complete(self, task, prompt, payload):
        self.calls.append(task)
        if task == self.fail_task:
            if self.error is not None:
                raise self.error
            return {"garbage": True}
        return self.inner.complete(task, prompt, payload)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_guards():
    config = EngineConfig()
    assert config.k_link == 10 and config.k_retrieve == 10
    assert config.enable_link_generation and config.enable_evolution
    assert not config.enable_link_expansion
    with pytest.raises(ValueError):
        EngineConfig(k_link=0)
    with pytest.raises(ValueError):
        EngineConfig(k_retrieve=-1)
    with pytest.raises(ValueError):
        EngineConfig(k_by_category={"chat": 0})


def test_config_k_for_category():
    config = EngineConfig(k_retrieve=7, k_by_category={"qa": 3})
    assert config.k_for() == 7
    assert config.k_for("qa") == 3
    assert config.k_for("other") == 7


def test_config_mapping_round_trip():
    config = EngineConfig(
        k_link=4, enable_evolution=False, k_by_category={"b": 2, "a": 5}
    )
    data = config.to_mapping()
    assert list(data["k_by_category"]) == ["a", "b"]
    assert EngineConfig.from_mapping(data) == config
    assert EngineConfig.from_mapping({"k_link": 3}).k_retrieve == 10
    with pytest.raises(ValueError):
        EngineConfig.from_mapping({"k_link": 3, "mystery": 1})


# ---------------------------------------------------------------------------
# insert pipeline


def test_first_note_is_complete_and_unlinked():
    engine = fresh_engine()
    note_id = engine.add_memory(CONTENT_A, TS[0])
    note = engine.get_note(note_id)
    assert note.content == CONTENT_A
    assert note.timestamp == TS[0]
    assert note.keywords == ("camera", "photography", "tripod")
    assert note.tags == ("topic:camera", "topic:photography", "topic:tripod")
    assert note.context == "Discusses camera and related topics."
    assert note.links == frozenset()
    assert np.array_equal(note.embedding, engine.encoder.encode(note_text(note)))
    assert len(engine) == 1 and note_id in engine


def test_insert_guards():
    engine = fresh_engine()
    with pytest.raises(EmptyContent):
        engine.add_memory("   ")
    with pytest.raises(InvalidTimestamp):
        engine.add_memory("hello world", "June 1st")
    assert len(engine) == 0


def test_two_shared_keywords_link_and_rewrite_neighbor():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    before = engine.get_note(id_a)
    id_b = engine.add_memory(CONTENT_B, TS[1])
    after = engine.get_note(id_a)
    note_b = engine.get_note(id_b)

    # bidirectional link
    assert note_b.links == frozenset({id_a})
    assert after.links == frozenset({id_b})
    # the neighbor was rewritten in place: same id, fresh context
    assert after.context == "Expands on camera and photography with newer material."
    assert after.content == before.content
    assert after.timestamp == before.timestamp
    assert after.keywords == before.keywords
    assert after.tags == before.tags
    # and re-encoded to match its new enriched text, bitwise
    assert not np.array_equal(after.embedding, before.embedding)
    assert np.array_equal(after.embedding, engine.encoder.encode(note_text(after)))
    assert engine.audit() == []


def test_one_shared_keyword_strengthens_without_rewrite():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    before = engine.get_note(id_a)
    id_c = engine.add_memory(CONTENT_C, TS[1])
    after = engine.get_note(id_a)

    assert after.links == frozenset({id_c})
    assert engine.get_note(id_c).links == frozenset({id_a})
    assert after.context == before.context
    assert after.tags == before.tags
    assert np.array_equal(after.embedding, before.embedding)
    assert engine.audit() == []


def test_unrelated_notes_stay_unlinked():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    id_d = engine.add_memory(CONTENT_D, TS[1])
    assert engine.get_note(id_a).links == frozenset()
    assert engine.get_note(id_d).links == frozenset()


def test_insert_is_deterministic_across_engines():
    def run():
        engine = fresh_engine()
        for i, content in enumerate((CONTENT_A, CONTENT_B, CONTENT_C, CONTENT_D)):
            engine.add_memory(content, TS[i])
        return [canonical_json(note) for note in engine.iter_notes()]

    assert run() == run()


# ---------------------------------------------------------------------------
# atomicity: a backend failure mid-pipeline must leave the store untouched


def snapshot_bytes(engine):
    return "\n".join(canonical_json(note) for note in engine.iter_notes())


def test_backend_outage_during_linking_leaves_store_untouched(tmp_path):
    backend = RecordingBackend(fail_task="link_opinion", error=BackendUnavailable("down"))
    journal = Journal(tmp_path / "j.jsonl")
    engine = fresh_engine(journal=journal, backend=backend)
    engine.add_memory(CONTENT_A, TS[0])
    before_state = snapshot_bytes(engine)
    before_journal = (tmp_path / "j.jsonl").read_bytes()

    with pytest.raises(BackendUnavailable):
        engine.add_memory(CONTENT_B, TS[1])

    assert snapshot_bytes(engine) == before_state
    assert (tmp_path / "j.jsonl").read_bytes() == before_journal
    assert len(engine) == 1


def test_schema_failure_during_evolution_leaves_store_untouched(tmp_path):
    # evolution has no mock fallback, so persistent garbage becomes an error
    backend = RecordingBackend(fail_task="evolution_directive")
    journal = Journal(tmp_path / "j.jsonl")
    engine = fresh_engine(journal=journal, backend=backend)
    engine.add_memory(CONTENT_A, TS[0])
    before_state = snapshot_bytes(engine)
    before_journal = (tmp_path / "j.jsonl").read_bytes()

    with pytest.raises(SchemaViolation):
        engine.add_memory(CONTENT_B, TS[1])

    assert snapshot_bytes(engine) == before_state
    assert (tmp_path / "j.jsonl").read_bytes() == before_journal
    assert backend.calls.count("evolution_directive") == 3


# ---------------------------------------------------------------------------
# journal event stream


def parsed_events(path):
    events, truncated = read_journal(path)
    assert truncated is None
    return [(e.kind, json.loads(e.payload_json)) for e in events]


def test_journal_event_order_for_a_rewriting_insert(tmp_path):
    journal = Journal(tmp_path / "j.jsonl")
    engine = fresh_engine(journal=journal)
    id_a = engine.add_memory(CONTENT_A, TS[0])
    id_b = engine.add_memory(CONTENT_B, TS[1])
    journal.sync()

    events = parsed_events(tmp_path / "j.jsonl")
    kinds = [kind for kind, _ in events]
    assert kinds == ["note_added", "note_added", "links_changed", "note_evolved"]
    # the insert event carries the note before any links exist
    assert events[1][1]["id"] == id_b
    assert events[1][1]["links"] == []
    # then the new note gains its links, then the neighbor is rewritten
    assert events[2][1] == {"id": id_b, "added": [id_a], "removed": []}
    assert events[3][1]["id"] == id_a
    assert events[3][1]["context"] == (
        "Expands on camera and photography with newer material."
    )


def test_journal_prefix_never_dangles(tmp_path):
    # every event-stream prefix references only already-added notes
    journal = Journal(tmp_path / "j.jsonl")
    engine = fresh_engine(journal=journal)
    for i, content in enumerate((CONTENT_A, CONTENT_B, CONTENT_C, CONTENT_D)):
        engine.add_memory(content, TS[i])
    journal.sync()

    seen = set()
    for kind, payload in parsed_events(tmp_path / "j.jsonl"):
        if kind == "note_added":
            seen.add(payload["id"])
            assert set(payload["links"]) <= seen
        elif kind == "note_evolved":
            assert payload["id"] in seen
            assert set(payload["links"]) <= seen
        else:
            assert payload["id"] in seen
            assert set(payload["added"]) | set(payload["removed"]) <= seen


# ---------------------------------------------------------------------------
# hand-built directives through the public evolution entry point


def test_apply_evolution_no_op_changes_nothing():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    id_d = engine.add_memory(CONTENT_D, TS[1])
    before = snapshot_bytes(engine)
    changed = engine.apply_evolution(EvolutionDirective.no_op(), id_d, [id_a])
    assert changed == []
    assert snapshot_bytes(engine) == before


def test_apply_evolution_extends_new_note_tags():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    id_d = engine.add_memory(CONTENT_D, TS[1])
    directive = EvolutionDirective(
        should_evolve=True,
        actions=("strengthen",),
        suggested_connections=(id_a,),
        tags_to_update=("topic:gear", "topic:soup"),
        new_context_neighborhood=(),
        new_tags_neighborhood=(),
    )
    changed = engine.apply_evolution(directive, id_d, [id_a])
    assert set(changed) == {id_a, id_d}
    note_d = engine.get_note(id_d)
    assert note_d.links == frozenset({id_a})
    # topic:soup is already present, so only topic:gear is appended
    assert note_d.tags == ("topic:recipe", "topic:soup", "topic:lentil", "topic:gear")
    # tag change feeds the enriched text, so the embedding moved with it
    assert np.array_equal(note_d.embedding, engine.encoder.encode(note_text(note_d)))
    assert engine.audit() == []


def test_apply_evolution_rejects_unknown_ids():
    engine = fresh_engine()
    id_a = engine.add_memory(CONTENT_A, TS[0])
    ghost = IdGenerator(seed=1).fresh()
    with pytest.raises(UnknownId):
        engine.apply_evolution(EvolutionDirective.no_op(), ghost, [id_a])
    with pytest.raises(UnknownId):
        engine.apply_evolution(EvolutionDirective.no_op(), id_a, [ghost])


# ---------------------------------------------------------------------------
# ablation switches


def test_link_generation_off_never_consults_neighbors():
    backend = RecordingBackend()
    engine = fresh_engine(
        config=EngineConfig(enable_link_generation=False), backend=backend
    )
    for i, content in enumerate((CONTENT_A, CONTENT_B, CONTENT_C)):
        engine.add_memory(content, TS[i])
    assert all(note.links == frozenset() for note in engine.iter_notes())
    assert set(backend.calls) == {"note_attributes"}


def test_evolution_off_links_but_freezes_existing_notes():
    engine = fresh_engine(config=EngineConfig(enable_evolution=False))
    id_a = engine.add_memory(CONTENT_A, TS[0])
    before = engine.get_note(id_a)
    id_b = engine.add_memory(CONTENT_B, TS[1])
    after = engine.get_note(id_a)

    # links still form both ways
    assert after.links == frozenset({id_b})
    assert engine.get_note(id_b).links == frozenset({id_a})
    # but every content-derived field of the pre-existing note is frozen
    assert after.content == before.content
    assert after.timestamp == before.timestamp
    assert after.keywords == before.keywords
    assert after.tags == before.tags
    assert after.context == before.context
    assert after.embedding.tobytes() == before.embedding.tobytes()
    assert engine.audit() == []


# ---------------------------------------------------------------------------
# retrieval


def corpus_engine(config=None):
    engine = fresh_engine(config=config)
    contents = [
        CONTENT_A,
        CONTENT_B,
        CONTENT_C,
        CONTENT_D,
        "chess opening study chess opening",
        "garden tomato compost garden tomato",
        "hiking trail boots hiking trail",
        "camera tripod night camera night",
        "soup vinegar lentil soup vinegar",
        "trail snacks hiking trail snacks",
    ]
    for i, content in enumerate(contents):
        engine.add_memory(content, TS[i])
    return engine


def test_retrieve_matches_full_sort_oracle():
    engine = corpus_engine()
    notes = list(engine.iter_notes())
    ids = [note.id for note in notes]
    vectors = np.stack([note.embedding for note in notes])
    for query in ("camera tripod", "soup recipe", "trail hiking boots", "chess"):
        query_vec = engine.encoder.encode(query)
        for k in (1, 3, 10, 25):
            got = engine.retrieve(query, k=k)
            assert [hit.note.id for hit in got] == full_sort_top_k(
                ids, vectors, query_vec, k
            )
            for hit in got:
                assert hit.score == pytest.approx(
                    cosine(query_vec, hit.note.embedding), abs=1e-12
                )
                assert hit.expanded is False
            scores = [hit.score for hit in got]
            assert scores == sorted(scores, reverse=True)


def test_retrieve_k_defaults_and_category_override():
    engine = corpus_engine(
        config=EngineConfig(k_retrieve=2, k_by_category={"wide": 6})
    )
    assert len(engine.retrieve("camera")) == 2
    assert len(engine.retrieve("camera", category="wide")) == 6
    assert len(engine.retrieve("camera", category="unknown")) == 2
    assert len(engine.retrieve("camera", k=4)) == 4


def test_retrieve_guards():
    engine = corpus_engine()
    with pytest.raises(EmptyQuery):
        engine.retrieve("  ")
    with pytest.raises(ValueError):
        engine.retrieve("camera", k=0)


def test_link_expansion_appends_linked_notes_in_id_order():
    engine = corpus_engine(config=EngineConfig(enable_link_expansion=True))
    query = "photography darkroom camera"
    query_vec = engine.encoder.encode(query)
    results = engine.retrieve(query, k=1)

    head = results[0]
    assert head.expanded is False
    tail = results[1:]
    expected_ids = sorted(head.note.links - {head.note.id})
    assert [hit.note.id for hit in tail] == expected_ids
    for hit in tail:
        assert hit.expanded is True
        assert hit.score == pytest.approx(
            cosine(query_vec, hit.note.embedding), abs=1e-12
        )
    # ranked hits are never duplicated by expansion
    wide = engine.retrieve(query, k=len(engine))
    assert len({hit.note.id for hit in wide}) == len(wide)
    assert all(not hit.expanded for hit in wide)


def test_link_expansion_off_by_default():
    engine = corpus_engine()
    results = engine.retrieve("photography darkroom camera", k=1)
    assert len(results) == 1


# ---------------------------------------------------------------------------
# audits and adopted state


def hand_note(ids, keyword, dimension=48, links=(), embedding=None):
    encoder = HashEncoder(dimension=dimension, seed=0)
    content = f"{keyword} note body"
    fields = dict(
        id=ids.fresh(),
        content=content,
        timestamp="2023-06-01T00:00:00Z",
        keywords=(keyword,),
        tags=("topic:" + keyword,),
        context=f"Discusses {keyword}.",
        links=frozenset(links),
    )
    text = f"{content}\n{keyword}\ntopic:{keyword}\nDiscusses {keyword}."
    fields["embedding"] = encoder.encode(text) if embedding is None else embedding
    return MemoryNote(**fields)


def test_audit_reports_dangling_and_asymmetric_links():
    ids = IdGenerator(seed=5)
    ghost = ids.fresh()
    a = hand_note(ids, "alpha")
    b = hand_note(ids, "beta", links={a.id, ghost})
    engine = fresh_engine()
    engine.adopt_state({a.id: a, b.id: b})

    problems = engine.audit()
    assert any("unknown id" in p and ghost in p for p in problems)
    assert any("no backlink" in p for p in problems)
    # a crash-recovered prefix may hold half-linked pairs legitimately
    relaxed = engine.audit(check_symmetry=False)
    assert not any("backlink" in p for p in relaxed)
    assert any("unknown id" in p for p in relaxed)


def test_audit_reports_embedding_drift():
    ids = IdGenerator(seed=6)
    stale = hand_note(ids, "gamma", embedding=basis_vector(48))
    engine = fresh_engine()
    engine.adopt_state({stale.id: stale})
    assert any("embedding" in p for p in engine.audit())
    assert engine.audit(verify_embeddings=False) == []


def test_adopt_state_requires_empty_engine():
    ids = IdGenerator(seed=7)
    note = hand_note(ids, "delta")
    engine = fresh_engine()
    engine.add_memory(CONTENT_A, TS[0])
    with pytest.raises(RuntimeError):
        engine.adopt_state({note.id: note})


def test_adopted_state_is_queryable():
    ids = IdGenerator(seed=8)
    a = hand_note(ids, "alpha")
    b = hand_note(ids, "beta")
    engine = fresh_engine()
    engine.adopt_state({a.id: a, b.id: b})
    assert engine.note_ids() == sorted([a.id, b.id])
    hits = engine.retrieve("alpha note body", k=1)
    assert hits[0].note.id == a.id
    rows, overhead = engine.memory_bytes()
    assert rows == 2 * 48 * 4


def test_state_snapshot_is_stable_under_later_writes():
    engine = fresh_engine()
    engine.add_memory(CONTENT_A, TS[0])
    notes, last_seq = engine.state_snapshot()
    assert last_seq == 0
    held = dict(notes)
    engine.add_memory(CONTENT_B, TS[1])
    # commits swap in a new dict; the held snapshot is untouched
    assert notes == held
    assert len(engine) == 2


def test_retrieved_memory_is_immutable():
    engine = corpus_engine()
    hit = engine.retrieve("camera", k=1)[0]
    assert isinstance(hit, RetrievedMemory)
    with pytest.raises(AttributeError):
        hit.score = 0.5
