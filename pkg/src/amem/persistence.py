"""Durable storage: append-only journal, snapshots, and state reconstruction.

The journal is a JSON-lines file; each line carries a strictly increasing
sequence number, an event kind, a canonical payload, and a CRC-32 of the
payload text. Three event kinds exist: note_added and note_evolved carry a
full note in canonical encoding, links_changed carries a small delta. Events
are ordered so that any byte prefix of the journal reconstructs a store with
no dangling references: a note always enters the log before anything points
at it.

A snapshot captures the whole store (notes sorted by id, canonical
encoding), the engine config, and the last applied sequence number, written
atomically via temp-file-and-rename. Loading a snapshot and replaying the
journal events past its sequence number reproduces the live store exactly,
byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
import re
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .embedding import HashEncoder
from .engine import EngineConfig, MemoryEngine
from .errors import (
    EmptyContent,
    InvalidTimestamp,
    LoadIntegrityError,
    SequenceGap,
    VersionMismatch,
)
from .gateway import LlmGateway
from .notes import MemoryNote, canonical_json, note_from_fields, note_text

logger = logging.getLogger(__name__)

SNAPSHOT_FILENAME = "store.snapshot.json"
JOURNAL_FILENAME = "store.journal.jsonl"
FORMAT_VERSION = 1

EVENT_KINDS = ("note_added", "note_evolved", "links_changed")

_LINE_RE = re.compile(
    r'^\{"seq":(\d+),"kind":"(note_added|note_evolved|links_changed)",'
    r'"payload":(.*),"crc":(\d+)\}\s*$'
)


def payload_crc(payload_json: str) -> int:
    return zlib.crc32(payload_json.encode("utf-8")) & 0xFFFFFFFF


@dataclass(frozen=True)
class JournalEvent:
    """One journal line: sequence number, kind, and canonical payload text."""

    seq: int
    kind: str
    payload_json: str

    @property
    def payload(self) -> Any:
        return json.loads(self.payload_json)

    def line(self) -> str:
        crc = payload_crc(self.payload_json)
        return f'{{"seq":{self.seq},"kind":"{self.kind}","payload":{self.payload_json},"crc":{crc}}}\n'


def _parse_line(text: str) -> JournalEvent:
    match = _LINE_RE.match(text)
    if match is None:
        raise ValueError("journal line does not match the event shape")
    seq = int(match.group(1))
    kind = match.group(2)
    payload_json = match.group(3)
    crc = int(match.group(4))
    if payload_crc(payload_json) != crc:
        raise ValueError("journal line checksum mismatch")
    if seq < 1:
        raise ValueError("journal sequence numbers start at 1")
    payload = json.loads(payload_json)
    if not isinstance(payload, dict):
        raise ValueError("journal payload must be a JSON object")
    return JournalEvent(seq=seq, kind=kind, payload_json=payload_json)


class Journal:
    """Writable handle on a journal file.

    Appends buffer in process memory until sync(), which flushes and fsyncs;
    the engine syncs once per mutating operation, after the last event of
    that operation.
    """

    def __init__(self, path: str | os.PathLike[str], last_seq: int = 0) -> None:
        self._path = Path(path)
        self._file = open(self._path, "ab")
        self._last = int(last_seq)

    @property
    def path(self) -> Path:
        return self._path

    @property
    def last_seq(self) -> int:
        return self._last

    def append(self, event: JournalEvent) -> None:
        if event.kind not in EVENT_KINDS:
            raise ValueError(f"unknown journal event kind: {event.kind!r}")
        if event.seq != self._last + 1:
            raise SequenceGap(
                f"journal expected seq {self._last + 1}, got {event.seq}"
            )
        self._file.write(event.line().encode("utf-8"))
        self._last = event.seq

    def note_added(self, note: MemoryNote) -> None:
        self.append(JournalEvent(self._last + 1, "note_added", canonical_json(note)))

    def note_evolved(self, note: MemoryNote) -> None:
        self.append(JournalEvent(self._last + 1, "note_evolved", canonical_json(note)))

    def links_changed(self, note_id: str, added: Iterable[str], removed: Iterable[str]) -> None:
        payload = json.dumps(
            {"id": note_id, "added": sorted(added), "removed": sorted(removed)},
            ensure_ascii=False,
            separators=(",", ":"),
        )
        self.append(JournalEvent(self._last + 1, "links_changed", payload))

    def sync(self) -> None:
        self._file.flush()
        os.fsync(self._file.fileno())

    def truncate(self) -> None:
        """Discard all journal bytes; the sequence counter keeps counting."""
        self._file.flush()
        self._file.seek(0)
        self._file.truncate()
        os.fsync(self._file.fileno())

    def close(self) -> None:
        if not self._file.closed:
            self._file.flush()
            os.fsync(self._file.fileno())
            self._file.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def read_journal(path: str | os.PathLike[str]) -> tuple[list[JournalEvent], int | None]:
    """Read every valid event from a journal file.

    Returns (events, truncation_offset). Reading stops at the first line
    that fails to parse or checksum, which is how a crash-truncated tail is
    skipped; the byte offset of that line is reported, or None for a clean
    file. A parsed line whose sequence number breaks contiguity raises
    SequenceGap, since truncation can never produce gaps.
    """
    data = Path(path).read_bytes()
    events: list[JournalEvent] = []
    truncated: int | None = None
    pos = 0
    last_seq: int | None = None
    while pos < len(data):
        newline = data.find(b"\n", pos)
        end = len(data) if newline == -1 else newline
        line_bytes = data[pos:end]
        if line_bytes.strip() == b"":
            if data[pos:].strip() == b"":
                break
            truncated = pos
            break
        try:
            event = _parse_line(line_bytes.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            truncated = pos
            break
        if last_seq is not None and event.seq != last_seq + 1:
            raise SequenceGap(
                f"journal jumps from seq {last_seq} to {event.seq} at byte {pos}"
            )
        events.append(event)
        last_seq = event.seq
        pos = len(data) if newline == -1 else newline + 1
    return events, truncated


def replay_events(
    notes: dict[str, MemoryNote], events: Iterable[JournalEvent], start_after: int = 0
) -> int:
    """Apply journal events to a note map in place. Returns the last seq applied."""
    last = start_after
    for event in events:
        if event.seq <= start_after:
            continue
        try:
            payload = event.payload
            if event.kind == "note_added":
                note = note_from_fields(payload)
                if note.id in notes:
                    raise ValueError(f"note {note.id} added twice")
                notes[note.id] = note
            elif event.kind == "note_evolved":
                note = note_from_fields(payload)
                if note.id not in notes:
                    raise ValueError(f"evolved note {note.id} does not exist")
                notes[note.id] = note
            else:
                if set(payload.keys()) != {"id", "added", "removed"}:
                    raise ValueError("links_changed payload has wrong fields")
                note = notes.get(payload["id"])
                if note is None:
                    raise ValueError(f"links_changed for unknown note {payload['id']}")
                links = set(note.links) | set(payload["added"])
                links -= set(payload["removed"])
                notes[note.id] = replace(note, links=frozenset(links))
        except (ValueError, EmptyContent, InvalidTimestamp) as exc:
            raise LoadIntegrityError(f"journal event seq {event.seq}: {exc}") from exc
        last = event.seq
    return last


def snapshot_text(
    notes: Mapping[str, MemoryNote], config: EngineConfig, last_seq: int
) -> str:
    config_json = json.dumps(
        config.to_mapping(), ensure_ascii=False, separators=(",", ":"), sort_keys=True
    )
    body = ",".join(canonical_json(notes[nid]) for nid in sorted(notes))
    return (
        f'{{"format_version":{FORMAT_VERSION},"config":{config_json},'
        f'"last_seq":{last_seq},"notes":[{body}]}}'
    )


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def write_snapshot(
    path: str | os.PathLike[str],
    notes: Mapping[str, MemoryNote],
    config: EngineConfig,
    last_seq: int,
) -> None:
    """Write a snapshot atomically: temp file in the same directory, then rename."""
    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    data = snapshot_text(notes, config, last_seq).encode("utf-8")
    with open(tmp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, target)
    _fsync_dir(target.parent)


def read_snapshot(
    path: str | os.PathLike[str],
) -> tuple[dict[str, MemoryNote], dict[str, Any], int]:
    try:
        document = json.loads(Path(path).read_text("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadIntegrityError(f"snapshot is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise LoadIntegrityError("snapshot must be a JSON object")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"snapshot format_version {version!r}, expected {FORMAT_VERSION}")
    for key in ("config", "last_seq", "notes"):
        if key not in document:
            raise LoadIntegrityError(f"snapshot missing key {key!r}")
    last_seq = document["last_seq"]
    if not isinstance(last_seq, int) or last_seq < 0:
        raise LoadIntegrityError("snapshot last_seq must be a non-negative integer")
    notes: dict[str, MemoryNote] = {}
    for entry in document["notes"]:
        try:
            note = note_from_fields(entry)
        except (ValueError, EmptyContent, InvalidTimestamp) as exc:
            raise LoadIntegrityError(f"snapshot note invalid: {exc}") from exc
        if note.id in notes:
            raise LoadIntegrityError(f"snapshot holds note {note.id} twice")
        notes[note.id] = note
    config = document["config"]
    if not isinstance(config, dict):
        raise LoadIntegrityError("snapshot config must be a JSON object")
    return notes, config, last_seq


@dataclass
class LoadResult:
    notes: dict[str, MemoryNote]
    last_seq: int
    config: dict[str, Any] | None
    journal_truncated_at: int | None


def load_store(
    snapshot_path: str | os.PathLike[str],
    journal_path: str | os.PathLike[str],
    encoder: Any = None,
) -> LoadResult:
    """Reconstruct a store from snapshot and journal files.

    Either file may be absent; both absent yields an empty store. Under a
    deterministic encoder every loaded embedding is verified against a fresh
    re-encoding of the note's text; with a non-deterministic encoder the
    check degrades to a warning. Dangling links always fail the load.
    """
    notes: dict[str, MemoryNote] = {}
    config: dict[str, Any] | None = None
    last_seq = 0
    truncated: int | None = None

    snapshot_file = Path(snapshot_path)
    if snapshot_file.exists():
        notes, config, last_seq = read_snapshot(snapshot_file)

    journal_file = Path(journal_path)
    if journal_file.exists():
        events, truncated = read_journal(journal_file)
        fresh = [event for event in events if event.seq > last_seq]
        if fresh and fresh[0].seq != last_seq + 1:
            raise SequenceGap(
                f"journal resumes at seq {fresh[0].seq}, snapshot ends at {last_seq}"
            )
        last_seq = replay_events(notes, fresh, start_after=last_seq)

    for note in notes.values():
        for link in note.links:
            if link not in notes:
                raise LoadIntegrityError(f"note {note.id} links to unknown id {link}")

    if encoder is not None:
        if getattr(encoder, "deterministic", False):
            for note in notes.values():
                expected = encoder.encode(note_text(note))
                if not np.array_equal(expected, note.embedding):
                    raise LoadIntegrityError(
                        f"note {note.id} embedding does not match its text"
                    )
        else:
            logger.warning(
                "encoder is not deterministic; skipping embedding verification"
            )

    return LoadResult(
        notes=notes, last_seq=last_seq, config=config, journal_truncated_at=truncated
    )


def store_paths(store_dir: str | os.PathLike[str]) -> tuple[Path, Path]:
    base = Path(store_dir)
    return base / SNAPSHOT_FILENAME, base / JOURNAL_FILENAME


def open_engine(
    store_dir: str | os.PathLike[str],
    encoder: Any = None,
    gateway: LlmGateway | None = None,
    config: EngineConfig | None = None,
    id_seed: int | None = None,
    read_only: bool = False,
) -> MemoryEngine:
    """Open (or initialize) a store directory and return a live engine.

    Config precedence: explicit argument, then the snapshot's config echo,
    then defaults. Read-only engines get no journal handle, so any mutation
    attempt fails loudly rather than silently diverging from disk.
    """
    base = Path(store_dir)
    base.mkdir(parents=True, exist_ok=True)
    snapshot_path, journal_path = store_paths(base)
    if encoder is None:
        encoder = HashEncoder()
    result = load_store(snapshot_path, journal_path, encoder=encoder)
    if config is None and result.config is not None:
        config = EngineConfig.from_mapping(result.config)
    engine = MemoryEngine(
        encoder, gateway=gateway, config=config, journal=None, id_seed=id_seed
    )
    engine.adopt_state(result.notes)
    if not read_only:
        engine.attach_journal(Journal(journal_path, last_seq=result.last_seq))
    return engine


def snapshot_engine(engine: MemoryEngine, store_dir: str | os.PathLike[str], compact: bool = False) -> Path:
    """Snapshot a live engine's store; optionally drop journaled history."""
    snapshot_path, _ = store_paths(store_dir)
    notes, last_seq = engine.state_snapshot()
    write_snapshot(snapshot_path, notes, engine.config, last_seq)
    if compact and engine.journal is not None:
        engine.journal.truncate()
    return snapshot_path
