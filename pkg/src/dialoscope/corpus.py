"""Rated dialogue datasets: loading, validation, splitting, and binarization.

Datasets are JSONL files, one object per line:

    {"id": str, "source": str,
     "turns": [{"speaker": "user"|"system", "text": str}, ...],
     "rating": int 1..5 (optional)}

All corpus types are immutable after construction.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import ConfigError, DataError

LIKERT_MIN = 1
LIKERT_MAX = 5
DEFAULT_DEFECT_THRESHOLD = 3


class Speaker(str, Enum):
    USER = "user"
    SYSTEM = "system"


class BinaryLabel(str, Enum):
    DEFECT = "defect"
    NON_DEFECT = "non_defect"


def check_likert(value: int) -> int:
    """Validate a 1-5 satisfaction rating and return it."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"rating must be an integer, got {value!r}")
    if not LIKERT_MIN <= value <= LIKERT_MAX:
        raise DataError(f"rating must be in {LIKERT_MIN}..{LIKERT_MAX}, got {value}")
    return value


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.speaker, Speaker):
            object.__setattr__(self, "speaker", Speaker(self.speaker))
        if not self.text.strip():
            raise DataError("turn text must be non-empty after trimming")


@dataclass(frozen=True)
class Dialogue:
    """One evaluation unit: speaker-tagged turns plus an optional gold rating."""

    id: str
    turns: tuple[Turn, ...]
    gold: int | None = None
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.id:
            raise DataError("dialogue id must be non-empty")
        if not self.turns:
            raise DataError(f"dialogue {self.id!r} has no turns")
        if self.gold is not None:
            check_likert(self.gold)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Dialogue, ...]
    test: tuple[Dialogue, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))


def _parse_record(record: object, line_no: int, seen_ids: set[str]) -> Dialogue:
    def fail(msg: str) -> DataError:
        return DataError(f"line {line_no}: {msg}")

    if not isinstance(record, dict):
        raise fail("record must be a JSON object")
    dialogue_id = record.get("id")
    if not isinstance(dialogue_id, str) or not dialogue_id:
        raise fail("field 'id' must be a non-empty string")
    if dialogue_id in seen_ids:
        raise fail(f"duplicate dialogue id {dialogue_id!r}")
    source = record.get("source", "")
    if not isinstance(source, str):
        raise fail("field 'source' must be a string")
    raw_turns = record.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise fail("field 'turns' must be a non-empty list")
    turns = []
    for i, raw in enumerate(raw_turns):
        if not isinstance(raw, dict):
            raise fail(f"field 'turns[{i}]' must be an object")
        speaker = raw.get("speaker")
        if speaker not in (Speaker.USER.value, Speaker.SYSTEM.value):
            raise fail(f"field 'turns[{i}].speaker' must be 'user' or 'system', got {speaker!r}")
        text = raw.get("text")
        if not isinstance(text, str) or not text.strip():
            raise fail(f"field 'turns[{i}].text' must be a non-empty string")
        turns.append(Turn(Speaker(speaker), text))
    gold = record.get("rating")
    if gold is not None:
        try:
            check_likert(gold)
        except DataError as exc:
            raise fail(f"field 'rating': {exc}") from exc
    return Dialogue(id=dialogue_id, turns=tuple(turns), gold=gold, source=source)


def load_dataset(path: str | Path, format: str = "jsonl") -> list[Dialogue]:
    """Load a rated dialogue dataset, preserving file order.

    Raises DataError naming the offending line and field for malformed
    records and for duplicate ids.
    """
    if format != "jsonl":
        raise ConfigError(f"unsupported dataset format {format!r} (only 'jsonl')")
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    dialogues: list[Dialogue] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            dialogue = _parse_record(record, line_no, seen_ids)
            seen_ids.add(dialogue.id)
            dialogues.append(dialogue)
    return dialogues


def dialogue_to_record(dialogue: Dialogue) -> dict:
    record: dict = {
        "id": dialogue.id,
        "source": dialogue.source,
        "turns": [{"speaker": t.speaker.value, "text": t.text} for t in dialogue.turns],
    }
    if dialogue.gold is not None:
        record["rating"] = dialogue.gold
    return record


def save_dataset(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    """Write dialogues as JSONL in the ingestion schema (UTF-8, LF)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for dialogue in dialogues:
            handle.write(json.dumps(dialogue_to_record(dialogue), ensure_ascii=False) + "\n")


def split_dataset(
    dialogues: Sequence[Dialogue], test_fraction: float, seed: int
) -> DatasetSplit:
    """Deterministically partition dialogues into train and test by id.

    The test set holds round(test_fraction * N) items (at least one); both
    halves keep the original dataset order.
    """
    if len(dialogues) < 2:
        raise DataError(f"need at least 2 dialogues to split, got {len(dialogues)}")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dialogues)
    n_test = max(1, int(test_fraction * n + 0.5))
    rng = random.Random(seed)
    test_indices = set(rng.sample(range(n), n_test))
    train = tuple(d for i, d in enumerate(dialogues) if i not in test_indices)
    test = tuple(d for i, d in enumerate(dialogues) if i in test_indices)
    return DatasetSplit(train=train, test=test)


def binarize(rating: int, threshold: int = DEFAULT_DEFECT_THRESHOLD) -> BinaryLabel:
    """Map a 1-5 rating to defect (rating <= threshold) or non-defect."""
    if threshold not in (1, 2, 3, 4):
        raise ConfigError(f"binarize threshold must be in 1..4, got {threshold}")
    check_likert(rating)
    return BinaryLabel.DEFECT if rating <= threshold else BinaryLabel.NON_DEFECT


def serialize_dialogue(dialogue: Dialogue) -> str:
    """Render turns as 'User: ...' / 'System: ...' lines joined by newlines."""
    return "\n".join(
        f"{'User' if turn.speaker is Speaker.USER else 'System'}: {turn.text}"
        for turn in dialogue.turns
    )


def defect_rate(labels: Sequence[BinaryLabel]) -> float:
    """Fraction of defect labels."""
    if not labels:
        raise DataError("defect_rate of an empty label list is undefined")
    return sum(1 for label in labels if label is BinaryLabel.DEFECT) / len(labels)
