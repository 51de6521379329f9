"""Walkthrough of one memory's life: construction, linking, evolution.

Runs fully offline on the mock backend, so the output is identical on
every machine.
"""

from amem import HashEncoder, LlmGateway, MemoryEngine


def show(engine, note_id, title):
    note = engine.get_note(note_id)
    print(f"--- {title}")
    print(f"content:  {note.content}")
    print(f"keywords: {', '.join(note.keywords)}")
    print(f"tags:     {', '.join(note.tags)}")
    print(f"context:  {note.context}")
    print(f"links:    {len(note.links)}")
    print()


def main():
    engine = MemoryEngine(HashEncoder(), LlmGateway(), id_seed=0)

    print("A first memory arrives. The model extracts keywords, tags, and")
    print("a one-line context; the enriched text is embedded.\n")
    first = engine.add_memory(
        "Dave has taken up photography and loves photography walks in nature",
        "2023-06-01T09:00:00Z",
    )
    show(engine, first, "after construction")

    print("A related memory arrives. Link generation finds the first note")
    print("among its nearest neighbors, and because they share two keywords")
    print("the evolution step also rewrites the older note's context.\n")
    second = engine.add_memory(
        "Dave bought a camera for night photography; photography gear thrills Dave",
        "2023-06-02T18:30:00Z",
    )
    show(engine, second, "the new note, linked on arrival")
    show(engine, first, "the first note, evolved in place")

    print("An unrelated memory arrives and stays unlinked.\n")
    third = engine.add_memory(
        "lentil soup tastes better with a splash of vinegar",
        "2023-06-03T12:00:00Z",
    )
    show(engine, third, "no shared keywords, no links")

    problems = engine.audit()
    print(f"store audit: {'clean' if not problems else problems}")


if __name__ == "__main__":
    main()
