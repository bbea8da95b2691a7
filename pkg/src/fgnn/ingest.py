"""Click-stream parsing, filtering, augmentation and dataset files.

The preprocessing recipe: drop items occurring fewer than 5 times (counted
over the raw corpus), then drop sessions shorter than 2, remap the survivors
through a fresh dense vocabulary, and split every length-n session into n-1
prefix/label examples.  Test examples touching any item outside the training
vocabulary are dropped and counted, since the model can only score items it
has embeddings for.

Supported raw formats:

* ``yoochoose``  - comma separated ``session,ISO-8601 timestamp,item[,category]``
* ``diginetica`` - semicolon separated ``session;user;item;timeframe;eventdate``
  (``timeframe`` orders clicks inside a session, ``eventdate`` gives recency)
* ``generic``    - comma separated ``session,numeric timestamp,item``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    EmptyDatasetError,
    MalformedInputError,
    VocabError,
)

MIN_ITEM_COUNT = 5
MIN_SESSION_LENGTH = 2


@dataclass(frozen=True)
class RawClick:
    session_id: str
    timestamp: float
    item_id: str


@dataclass(frozen=True)
class Session:
    """Ordered item sequence; items are raw ids before remapping, indices after."""

    items: tuple
    end_time: float

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Example:
    """A session prefix and the single item that followed it."""

    items: tuple
    label: int


class Vocabulary:
    """Bijection between surviving raw item ids and dense indices."""

    def __init__(self, raw_ids=()):
        self._index: dict[str, int] = {}
        self._raw: list[str] = []
        for raw in raw_ids:
            self.add(raw)

    def add(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            idx = len(self._raw)
            self._index[raw] = idx
            self._raw.append(raw)
        return idx

    def index(self, raw: str) -> int:
        try:
            return self._index[raw]
        except KeyError:
            raise VocabError(f"unknown item id {raw!r}")

    def raw(self, index: int) -> str:
        if not 0 <= index < len(self._raw):
            raise VocabError(f"index {index} outside [0, {len(self._raw)})")
        return self._raw[index]

    def __contains__(self, raw: str) -> bool:
        return raw in self._index

    def __len__(self) -> int:
        return len(self._raw)

    def to_dict(self) -> dict[str, int]:
        return dict(self._index)

    @classmethod
    def from_dict(cls, mapping: dict[str, int]) -> "Vocabulary":
        vocab = cls()
        for raw, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            if idx != vocab.add(raw):
                raise MalformedInputError("vocabulary mapping is not dense")
        return vocab


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_iso_timestamp(text: str) -> float:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_date(text: str) -> float:
    dt = datetime.strptime(text, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_yoochoose(fields):
    if len(fields) < 3:
        return None
    return RawClick(fields[0], _parse_iso_timestamp(fields[1]), fields[2])


def _parse_diginetica(fields):
    if len(fields) < 5:
        return None
    # eventdate dominates, timeframe (millisecond offset) orders within a day
    ts = _parse_date(fields[4]) + float(int(fields[3])) * 1e-6
    return RawClick(fields[0], ts, fields[2])


def _parse_generic(fields):
    if len(fields) < 3:
        return None
    return RawClick(fields[0], float(fields[1]), fields[2])


_FORMATS = {
    "yoochoose": (",", _parse_yoochoose),
    "diginetica": (";", _parse_diginetica),
    "generic": (",", _parse_generic),
}


def parse_clicks(source, fmt: str, counters: dict | None = None) -> list[RawClick]:
    """Parse a delimiter-separated click log into clicks in file order.

    Rows that fail to parse are counted and skipped; more than 10% skipped
    rows raises.  ``source`` is an iterable of text or byte lines (an open
    file works).  When given, ``counters`` receives "rows" and "skipped".
    """
    if fmt not in _FORMATS:
        raise MalformedInputError(f"unknown format {fmt!r}; expected one of {sorted(_FORMATS)}")
    delimiter, parse_row = _FORMATS[fmt]
    clicks: list[RawClick] = []
    skipped = 0
    total = 0
    for line in source:
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        line = line.strip()
        if not line:
            continue
        total += 1
        try:
            click = parse_row([f.strip() for f in line.split(delimiter)])
        except (ValueError, OverflowError):
            click = None
        if click is None or not math.isfinite(click.timestamp) or click.timestamp < 0:
            skipped += 1
            continue
        clicks.append(click)
    if counters is not None:
        counters["rows"] = total
        counters["skipped"] = skipped
    if total and skipped > 0.10 * total:
        raise MalformedInputError(
            f"{skipped} of {total} rows unparseable in format {fmt!r}"
        )
    return clicks


def group_sessions(clicks) -> list[Session]:
    """Group clicks into sessions ordered by first appearance in the stream.

    Clicks within a session are sorted by timestamp, stable on ties, so the
    file order breaks timestamp ties.
    """
    order: list[str] = []
    by_session: dict[str, list[tuple[float, str]]] = {}
    for click in clicks:
        bucket = by_session.get(click.session_id)
        if bucket is None:
            bucket = by_session[click.session_id] = []
            order.append(click.session_id)
        bucket.append((click.timestamp, click.item_id))
    sessions = []
    for sid in order:
        bucket = by_session[sid]
        bucket.sort(key=lambda pair: pair[0])
        sessions.append(
            Session(
                items=tuple(item for _, item in bucket),
                end_time=max(ts for ts, _ in bucket),
            )
        )
    return sessions


# ---------------------------------------------------------------------------
# filtering / augmentation / splitting
# ---------------------------------------------------------------------------

def filter_dataset(sessions) -> tuple[list[Session], Vocabulary]:
    """Drop rare items then short sessions; remap survivors densely.

    Item occurrence counts come from the raw corpus and the filter is applied
    once, not to a fixed point.
    """
    counts: dict = {}
    for session in sessions:
        for item in session.items:
            counts[item] = counts.get(item, 0) + 1
    keep = {item for item, c in counts.items() if c >= MIN_ITEM_COUNT}

    vocab = Vocabulary()
    filtered: list[Session] = []
    for session in sessions:
        items = [item for item in session.items if item in keep]
        if len(items) < MIN_SESSION_LENGTH:
            continue
        filtered.append(
            Session(items=tuple(vocab.add(item) for item in items), end_time=session.end_time)
        )
    if not filtered:
        raise EmptyDatasetError("no sessions survive filtering")
    return filtered, vocab


def augment(session: Session) -> list[Example]:
    """Split a length-n session into its n-1 prefix/label examples."""
    n = len(session.items)
    if n < 2:
        raise EmptyDatasetError(f"cannot augment a session of length {n}")
    return [
        Example(items=tuple(session.items[:i]), label=session.items[i])
        for i in range(1, n)
    ]


def recency_split(sessions, fraction: float) -> list[Session]:
    """The ceil(fraction * N) sessions with the largest end times.

    Ties keep earlier input positions; the result preserves input order.
    """
    if not 0.0 < fraction <= 1.0:
        raise MalformedInputError(f"fraction must be in (0, 1], got {fraction}")
    sessions = list(sessions)
    if not sessions:
        return []
    k = math.ceil(fraction * len(sessions))
    order = sorted(range(len(sessions)), key=lambda i: (-sessions[i].end_time, i))
    chosen = sorted(order[:k])
    return [sessions[i] for i in chosen]


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

VOCAB_FILE = "vocab.json"
TRAIN_FILE = "train.txt"
TEST_FILE = "test.txt"
TRAIN_SESSIONS_FILE = "train_sessions.txt"
STATS_FILE = "stats.json"


@dataclass
class PreprocessResult:
    train_sessions: list[Session]
    train_examples: list[Example]
    test_examples: list[Example]
    vocab: Vocabulary
    stats: dict


def preprocess(
    sessions,
    recency_fraction: float | None = None,
    test_fraction: float = 0.1,
    test_days: float | None = None,
    skipped_rows: int = 0,
) -> PreprocessResult:
    """Run the full recipe on grouped raw sessions.

    The most recent sessions become the test split (either the last
    ``test_days`` by end time, or the most recent ``test_fraction``).  An
    optional ``recency_fraction`` then keeps only the most recent portion of
    the remaining training sessions.  Filtering and the vocabulary are
    computed on the training split alone.
    """
    sessions = list(sessions)
    if not sessions:
        raise EmptyDatasetError("no sessions to preprocess")

    if test_days is not None:
        cutoff = max(s.end_time for s in sessions) - float(test_days) * 86400.0
        test_raw = [s for s in sessions if s.end_time > cutoff]
        train_raw = [s for s in sessions if s.end_time <= cutoff]
    elif test_fraction > 0:
        test_raw = recency_split(sessions, test_fraction)
        test_ids = set(id(s) for s in test_raw)
        train_raw = [s for s in sessions if id(s) not in test_ids]
    else:
        test_raw = []
        train_raw = sessions

    if recency_fraction is not None:
        train_raw = recency_split(train_raw, recency_fraction)
    if not train_raw:
        raise EmptyDatasetError("training split is empty")

    train_sessions, vocab = filter_dataset(train_raw)
    train_examples = [ex for s in train_sessions for ex in augment(s)]

    test_examples: list[Example] = []
    dropped = 0
    for session in test_raw:
        if len(session.items) < MIN_SESSION_LENGTH:
            continue
        for ex in augment(session):
            if all(item in vocab for item in ex.items) and ex.label in vocab:
                test_examples.append(
                    Example(
                        items=tuple(vocab.index(i) for i in ex.items),
                        label=vocab.index(ex.label),
                    )
                )
            else:
                dropped += 1

    train_clicks = sum(len(s) for s in train_sessions)
    test_clicks = sum(len(s) for s in test_raw)
    n_unaugmented = len(train_sessions) + len(test_raw)
    stats = {
        "clicks": train_clicks + test_clicks,
        "train_sessions": len(train_examples),
        "test_sessions": len(test_examples),
        "items": len(vocab),
        "avg_length": round((train_clicks + test_clicks) / n_unaugmented, 4),
        "dropped_test_examples": dropped,
        "skipped_rows": skipped_rows,
    }
    return PreprocessResult(train_sessions, train_examples, test_examples, vocab, stats)


def write_dataset(directory, result: PreprocessResult) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / VOCAB_FILE, "w", encoding="utf-8") as fh:
        json.dump(result.vocab.to_dict(), fh, indent=2)
        fh.write("\n")
    _write_examples(directory / TRAIN_FILE, result.train_examples)
    _write_examples(directory / TEST_FILE, result.test_examples)
    with open(directory / TRAIN_SESSIONS_FILE, "w", encoding="utf-8") as fh:
        for session in result.train_sessions:
            fh.write(" ".join(str(i) for i in session.items) + "\n")
    with open(directory / STATS_FILE, "w", encoding="utf-8") as fh:
        json.dump(result.stats, fh, indent=2)
        fh.write("\n")


def _write_examples(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(str(i) for i in ex.items) + "\t" + str(ex.label) + "\n")


def load_examples(path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                left, right = line.split("\t")
                items = tuple(int(t) for t in left.split())
                label = int(right)
            except ValueError:
                raise MalformedInputError(f"bad example line in {path}: {line!r}")
            examples.append(Example(items=items, label=label))
    return examples


def load_sessions(path) -> list[list[int]]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sessions.append([int(t) for t in line.split()])
    return sessions


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return Vocabulary.from_dict(json.load(fh))
