"""Durability walkthrough: journal, snapshot, crash, recovery.

Builds a store on disk, tears the journal mid-line to simulate a crash
during a write, and reloads. The recovered store is the longest clean
prefix of the history, never a corrupt state.
"""

import tempfile
from pathlib import Path

from amem import HashEncoder, load_store, open_engine, snapshot_engine
from amem.persistence import store_paths

NOTES = [
    "garden tomatoes need consistent watering",
    "tomato blight shows up after wet weeks in the garden",
    "mulch keeps the garden soil moisture steady",
]


def main():
    with tempfile.TemporaryDirectory() as root:
        store = Path(root) / "store"
        engine = open_engine(store, encoder=HashEncoder(), id_seed=0)
        for i, content in enumerate(NOTES):
            engine.add_memory(content, f"2023-06-01T08:{i:02d}:00Z")
        snapshot_path, journal_path = store_paths(store)
        print(f"ingested {len(engine)} notes")
        print(f"journal:  {journal_path.stat().st_size} bytes")

        snapshot_engine(engine, store)
        print(f"snapshot: {snapshot_path.stat().st_size} bytes")
        engine.add_memory("staking tomato vines beats letting them sprawl", "2023-06-01T08:30:00Z")
        engine.close()

        print("\nsimulating a crash: chopping 25 bytes off the journal tail")
        data = journal_path.read_bytes()
        journal_path.write_bytes(data[:-25])

        result = load_store(snapshot_path, journal_path, encoder=HashEncoder())
        print(f"recovered {len(result.notes)} notes (the torn event is dropped)")
        print(f"journal truncation detected at byte {result.journal_truncated_at}")

        reopened = open_engine(store, encoder=HashEncoder(), id_seed=0)
        print(f"reopened store audit: {'clean' if not reopened.audit(check_symmetry=False) else 'PROBLEMS'}")
        hits = reopened.retrieve("how to handle tomato disease", k=1)
        print(f"still answers queries: {hits[0].note.content!r}")
        reopened.close()


if __name__ == "__main__":
    main()
