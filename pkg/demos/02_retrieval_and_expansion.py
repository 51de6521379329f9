"""Retrieval over a small corpus, with and without link expansion.

Link expansion appends the linked notes of each ranked hit after the
ranked block, in ascending id order, flagged so callers can tell them
apart from scored results.
"""

from amem import EngineConfig, HashEncoder, LlmGateway, MemoryEngine

CORPUS = [
    "Dave has taken up photography and loves photography walks",
    "a camera tripod steadies night photography shots",
    "the hiking trail to the ridge needs good boots",
    "winter hiking on an icy trail calls for spikes",
    "lentil soup wants vinegar right before serving",
    "a chess opening repertoire beats random chess moves",
]


def print_hits(hits):
    for hit in hits:
        marker = "expanded" if hit.expanded else f"{hit.score:.4f}  "
        print(f"  [{marker}] {hit.note.content}")
    print()


def main():
    engine = MemoryEngine(HashEncoder(), LlmGateway(), id_seed=0)
    for i, content in enumerate(CORPUS):
        engine.add_memory(content, f"2023-06-01T10:{i:02d}:00Z")

    query = "camera tripod for night photography"
    print(f"query: {query!r}, plain top-3\n")
    print_hits(engine.retrieve(query, k=3))

    print("same store and query with link expansion enabled, k=1:")
    print("the single ranked hit drags its linked note along\n")
    engine.config = EngineConfig(enable_link_expansion=True)
    print_hits(engine.retrieve(query, k=1))

    print("per-category result counts: a 'briefing' query returns more")
    engine.config = EngineConfig(k_retrieve=2, k_by_category={"briefing": 5})
    print(f"  default k:  {len(engine.retrieve('outdoors'))} hits")
    print(f"  briefing k: {len(engine.retrieve('outdoors', category='briefing'))} hits")


if __name__ == "__main__":
    main()
