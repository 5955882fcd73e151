"""Question-pair corpora: record types, loaders, splits, and token statistics."""
from __future__ import annotations

import csv
import errno
import json
import logging
import random
import statistics
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised when a record or file violates a corpus contract."""


class PairKind(str, Enum):
    QQ = "QQ"
    QA = "QA"
    AA = "AA"
    QC = "QC"


@dataclass(frozen=True)
class Question:
    """A single question with optional category and provenance metadata."""

    id: str
    text: str
    category: str | None = None
    labeler_id: str | None = None
    seed_id: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError(f"question {self.id!r}: text is empty")


@dataclass(frozen=True)
class Answer:
    """An answer linked to a question by id."""

    id: str
    question_id: str
    text: str
    category: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError(f"answer {self.id!r}: text is empty")


@dataclass(frozen=True)
class LabeledPair:
    """Two text segments with a binary label; the universal training/eval record.

    label=1 means the segments go together (similar questions, correct answer,
    matching category, completing answer-end) and 0 means they do not.
    """

    text_a: str
    text_b: str
    label: int
    kind: PairKind
    labeler_id: str | None = None
    seed_id: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise CorpusError(f"label must be 0 or 1, got {self.label!r}")
        if not isinstance(self.kind, PairKind):
            object.__setattr__(self, "kind", PairKind(self.kind))
        if self.kind is PairKind.QQ and self.label == 0 and self.text_a == self.text_b:
            raise CorpusError("negative QQ pair with identical texts")


@dataclass(frozen=True)
class SplitAssignment:
    """Which labelers feed train, dev, and test; the three sets must be disjoint."""

    train_labelers: frozenset[str]
    dev_labelers: frozenset[str] = frozenset()
    test_labelers: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_labelers", frozenset(self.train_labelers))
        object.__setattr__(self, "dev_labelers", frozenset(self.dev_labelers))
        object.__setattr__(self, "test_labelers", frozenset(self.test_labelers))
        overlap = (
            (self.train_labelers & self.dev_labelers)
            | (self.train_labelers & self.test_labelers)
            | (self.dev_labelers & self.test_labelers)
        )
        if overlap:
            raise CorpusError(f"labeler sets overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class CorpusStats:
    pair_count: int
    unique_question_count: int
    token_min: int
    token_max: int
    token_median: float
    token_mean: float


_PAIR_FIELDS = ("text_a", "text_b", "label", "kind")
_QA_FIELDS = ("id", "question", "answer")


def _pair_from_record(record: dict, where: str) -> LabeledPair:
    for name in _PAIR_FIELDS:
        if name not in record:
            raise CorpusError(f"{where}: missing field {name!r}")
    label = record["label"]
    if isinstance(label, str):
        if label not in ("0", "1"):
            raise CorpusError(f"{where}: field 'label' must be 0 or 1, got {label!r}")
        label = int(label)
    if label not in (0, 1):
        raise CorpusError(f"{where}: field 'label' must be 0 or 1, got {label!r}")
    try:
        kind = PairKind(record["kind"])
    except ValueError:
        raise CorpusError(f"{where}: field 'kind' must be one of QQ/QA/AA/QC, got {record['kind']!r}") from None
    try:
        return LabeledPair(
            text_a=record["text_a"],
            text_b=record["text_b"],
            label=label,
            kind=kind,
            labeler_id=record.get("labeler_id") or None,
            seed_id=record.get("seed_id") or None,
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_pairs(path: str | Path, fmt: str = "jsonl") -> list[LabeledPair]:
    """Load LabeledPair records from a JSONL or CSV file, preserving row order.

    The CSV variant expects a header row with the canonical field names.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "no such file", str(path))
    if fmt not in ("jsonl", "csv"):
        raise CorpusError(f"unknown pair format {fmt!r}")

    pairs: list[LabeledPair] = []
    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                if not isinstance(record, dict):
                    raise CorpusError(f"{path}:{lineno}: expected an object per line")
                pairs.append(_pair_from_record(record, f"{path}:{lineno}"))
    else:
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for rowno, row in enumerate(reader, start=2):  # row 1 is the header
                pairs.append(_pair_from_record(row, f"{path}:{rowno}"))
    return pairs


def write_pairs(path: str | Path, pairs: Iterable[LabeledPair]) -> None:
    """Write pairs as canonical JSONL (UTF-8, LF, one object per line)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            record = {
                "text_a": pair.text_a,
                "text_b": pair.text_b,
                "label": pair.label,
                "kind": pair.kind.value,
            }
            if pair.labeler_id is not None:
                record["labeler_id"] = pair.labeler_id
            if pair.seed_id is not None:
                record["seed_id"] = pair.seed_id
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_qa_corpus(path: str | Path) -> list[tuple[Question, Answer]]:
    """Load a QA corpus JSONL file: {"id", "question", "answer", "category"?}.

    Duplicate ids are an error; categories propagate to both sides of a record.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "no such file", str(path))
    records: list[tuple[Question, Answer]] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for name in _QA_FIELDS:
                if name not in raw:
                    raise CorpusError(f"{path}:{lineno}: missing field {name!r}")
            rid = str(raw["id"])
            if rid in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen_ids.add(rid)
            category = raw.get("category") or None
            try:
                question = Question(id=rid, text=raw["question"], category=category)
                answer = Answer(id=f"{rid}#a", question_id=rid, text=raw["answer"], category=category)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            records.append((question, answer))
    return records


def convert_released_csv(in_path: str | Path, out_path: str | Path) -> int:
    """Convert the released question-pair CSV into canonical pair JSONL.

    Stub converter: assumes headerless rows of (seed id, question 1, question 2,
    label). Adjust here if the published file layout differs. Returns the number
    of converted rows.
    """
    in_path = Path(in_path)
    pairs: list[LabeledPair] = []
    with in_path.open(encoding="utf-8", newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise CorpusError(f"{in_path}:{rowno}: expected 4 columns, got {len(row)}")
            seed, text_a, text_b, label = row
            if label not in ("0", "1"):
                raise CorpusError(f"{in_path}:{rowno}: field 'label' must be 0 or 1, got {label!r}")
            pairs.append(
                LabeledPair(text_a=text_a, text_b=text_b, label=int(label), kind=PairKind.QQ, seed_id=seed)
            )
    write_pairs(out_path, pairs)
    return len(pairs)


def split_by_labeler(
    pairs: Sequence[LabeledPair], assignment: SplitAssignment
) -> tuple[list[LabeledPair], list[LabeledPair], list[LabeledPair]]:
    """Partition pairs by who labeled them.

    Every pair must carry a labeler_id covered by the assignment. Seed questions
    may not appear in both train and test; that would leak rewrites of the same
    original question across the boundary.
    """
    train: list[LabeledPair] = []
    dev: list[LabeledPair] = []
    test: list[LabeledPair] = []
    for i, pair in enumerate(pairs):
        if pair.labeler_id is None:
            raise CorpusError(f"pair {i}: missing labeler_id")
        if pair.labeler_id in assignment.train_labelers:
            train.append(pair)
        elif pair.labeler_id in assignment.dev_labelers:
            dev.append(pair)
        elif pair.labeler_id in assignment.test_labelers:
            test.append(pair)
        else:
            raise CorpusError(f"pair {i}: labeler {pair.labeler_id!r} not in any split")

    train_seeds = {p.seed_id for p in train if p.seed_id is not None}
    test_seeds = {p.seed_id for p in test if p.seed_id is not None}
    shared = train_seeds & test_seeds
    if shared:
        raise CorpusError(f"seed questions shared between train and test: {sorted(shared)}")
    return train, dev, test


def split_random_by_seed(
    pairs: Sequence[LabeledPair],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    rng_seed: int = 0,
) -> tuple[list[LabeledPair], list[LabeledPair], list[LabeledPair]]:
    """Random split that keeps all pairs sharing a seed question together.

    Fallback for corpora without labeler ids; emits a warning because the
    labeler-disjointness guarantee of split_by_labeler is lost. Pairs without a
    seed_id each form their own group.
    """
    logger.warning("splitting without labeler ids: labeler disjointness is not enforced")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must sum to 1, got {fractions}")
    groups: dict[str, list[LabeledPair]] = defaultdict(list)
    for i, pair in enumerate(pairs):
        groups[pair.seed_id if pair.seed_id is not None else f"__pair_{i}"].append(pair)
    keys = sorted(groups)
    random.Random(rng_seed).shuffle(keys)
    n = len(keys)
    n_train = round(n * fractions[0])
    n_dev = round(n * fractions[1])
    out: tuple[list[LabeledPair], ...] = ([], [], [])
    for pos, key in enumerate(keys):
        bucket = 0 if pos < n_train else (1 if pos < n_train + n_dev else 2)
        out[bucket].extend(groups[key])
    return out


def questions_from_pairs(pairs: Sequence[LabeledPair]) -> list[Question]:
    """Flatten pairs into one Question per side, ids synthesized from position."""
    questions = []
    for i, pair in enumerate(pairs):
        questions.append(Question(id=f"{i}a", text=pair.text_a, seed_id=pair.seed_id))
        questions.append(Question(id=f"{i}b", text=pair.text_b, seed_id=pair.seed_id))
    return questions


def compute_stats(
    questions: Sequence[Question],
    tokenizer: Callable[[str], list[str]] | None = None,
    pair_count: int = 0,
) -> CorpusStats:
    """Token-count statistics over unique question texts.

    Texts are deduplicated exactly (after trimming); the default tokenizer is
    whitespace splitting. Median of an even count is the midpoint average.
    """
    if not questions:
        raise CorpusError("compute_stats: empty question list")
    tokenize = tokenizer if tokenizer is not None else str.split
    unique_texts = {q.text.strip() for q in questions}
    counts = sorted(len(tokenize(text)) for text in unique_texts)
    return CorpusStats(
        pair_count=pair_count,
        unique_question_count=len(unique_texts),
        token_min=counts[0],
        token_max=counts[-1],
        token_median=float(statistics.median(counts)),
        token_mean=sum(counts) / len(counts),
    )


def pair_stats(pairs: Sequence[LabeledPair], tokenizer: Callable[[str], list[str]] | None = None) -> CorpusStats:
    """Stats over the unique question texts appearing in a pair corpus."""
    if not pairs:
        raise CorpusError("pair_stats: empty pair list")
    return compute_stats(questions_from_pairs(pairs), tokenizer, pair_count=len(pairs))
