"""Intermediate-task dataset construction from a question-answer corpus.

Four binary tasks share one recipe: every true association becomes a positive
pair, and each positive gets sampled negatives from the same main category so
that label balance is exact. All constructors are deterministic functions of
(input, rng_seed): sampling uses per-category random streams derived from the
seed and the category name.
"""
from __future__ import annotations

import hashlib
import logging
import random
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .corpus import Answer, CorpusError, LabeledPair, PairKind, Question

logger = logging.getLogger(__name__)

_SENTENCE_RE = re.compile(r".+?(?:[.!?](?=\s|$)|$)", re.DOTALL)


@dataclass(frozen=True)
class TaskGenConfig:
    rng_seed: int
    negatives_per_positive: int = 1
    min_sentences_for_aa: int = 3

    def __post_init__(self) -> None:
        if self.negatives_per_positive < 1:
            raise CorpusError("negatives_per_positive must be >= 1")


def split_sentences(text: str) -> list[str]:
    """Split on '.', '!', '?' followed by whitespace or end, keeping delimiters."""
    return [m.group(0).strip() for m in _SENTENCE_RE.finditer(text) if m.group(0).strip()]


def _category_rng(rng_seed: int, category: str) -> random.Random:
    digest = hashlib.sha256(f"{rng_seed}|{category}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class _NegativePool:
    """Draws category negatives without replacement while unused candidates
    last, then falls back to with-replacement draws; fallbacks are counted."""

    def __init__(self, candidates: Sequence[int], copies: int, rng: random.Random):
        self.candidates = list(candidates)
        self._rng = rng
        self._remaining = list(candidates) * copies
        rng.shuffle(self._remaining)
        self.fallback_count = 0

    def draw(self, forbidden: Callable[[int], bool]) -> int | None:
        for pos, item in enumerate(self._remaining):
            if not forbidden(item):
                return self._remaining.pop(pos)
        valid = [item for item in self.candidates if not forbidden(item)]
        if not valid:
            return None
        self.fallback_count += 1
        return self._rng.choice(valid)


def _is_excluded(question: Question, excluded_ids: frozenset[str]) -> bool:
    return question.id in excluded_ids or (question.seed_id is not None and question.seed_id in excluded_ids)


def build_qa_pairs(
    corpus: Sequence[tuple[Question, Answer]],
    cfg: TaskGenConfig,
    excluded_ids: frozenset[str] = frozenset(),
) -> list[LabeledPair]:
    """Question-answer matching task: does this answer answer this question?

    One positive per record; negatives pair the question with another answer
    from the same main category. Categories holding a single distinct answer
    cannot supply negatives and are an error.
    """
    records = [(q, a) for q, a in corpus if not _is_excluded(q, excluded_ids)]
    for q, _ in records:
        if not q.category:
            raise CorpusError(f"question {q.id!r}: category required for the question-answer task")

    by_category: dict[str, list[int]] = defaultdict(list)
    for i, (q, _) in enumerate(records):
        by_category[q.category].append(i)

    for category, indices in by_category.items():
        if len({records[i][1].text for i in indices}) < 2:
            raise CorpusError(f"category {category!r} has a single distinct answer; cannot sample negatives")

    pools = {
        category: _NegativePool(indices, cfg.negatives_per_positive, _category_rng(cfg.rng_seed, category))
        for category, indices in by_category.items()
    }

    pairs: list[LabeledPair] = []
    for i, (question, answer) in enumerate(records):
        pairs.append(LabeledPair(text_a=question.text, text_b=answer.text, label=1, kind=PairKind.QA))
        pool = pools[question.category]
        for _ in range(cfg.negatives_per_positive):
            j = pool.draw(lambda j: j == i or records[j][1].text == answer.text)
            if j is None:
                raise CorpusError(
                    f"category {question.category!r}: no valid negative answer for question {question.id!r}"
                )
            pairs.append(LabeledPair(text_a=question.text, text_b=records[j][1].text, label=0, kind=PairKind.QA))

    fallbacks = sum(pool.fallback_count for pool in pools.values())
    if fallbacks:
        logger.info("question-answer negatives: %d with-replacement fallback draws", fallbacks)
    return pairs


def build_aa_pairs(
    answers: Sequence[Answer],
    cfg: TaskGenConfig,
    splitter: Callable[[str], list[str]] | None = None,
    excluded_ids: frozenset[str] = frozenset(),
) -> list[LabeledPair]:
    """Answer-completion task: does this answer end complete this answer start?

    Each answer with enough sentences is split into a start (first two
    sentences) and an end (the rest); its own end is the positive, and a
    different end from the same category is the negative. Short answers and
    answers alone in their category are skipped; the skip counts are logged.
    """
    split = splitter if splitter is not None else split_sentences
    for answer in answers:
        if not answer.category:
            raise CorpusError(f"answer {answer.id!r}: category required for the answer-completion task")

    kept: list[tuple[Answer, str, str]] = []  # (answer, start, end)
    skipped_short = 0
    for answer in answers:
        if answer.question_id in excluded_ids:
            continue
        sentences = split(answer.text)
        if len(sentences) < cfg.min_sentences_for_aa:
            skipped_short += 1
            continue
        start = " ".join(sentences[:2])
        end = " ".join(sentences[2:])
        if not end.strip():
            skipped_short += 1
            continue
        kept.append((answer, start, end))

    by_category: dict[str, list[int]] = defaultdict(list)
    for i, (answer, _, _) in enumerate(kept):
        by_category[answer.category].append(i)

    skipped_lonely = 0
    usable: set[int] = set()
    for indices in by_category.values():
        if len({kept[i][2] for i in indices}) < 2:
            skipped_lonely += len(indices)
        else:
            usable.update(indices)

    pools = {
        category: _NegativePool(
            [i for i in indices if i in usable],
            cfg.negatives_per_positive,
            _category_rng(cfg.rng_seed, category),
        )
        for category, indices in by_category.items()
    }

    pairs: list[LabeledPair] = []
    for i in sorted(usable):
        answer, start, end = kept[i]
        pairs.append(LabeledPair(text_a=start, text_b=end, label=1, kind=PairKind.AA))
        pool = pools[answer.category]
        for _ in range(cfg.negatives_per_positive):
            j = pool.draw(lambda j: j == i or kept[j][2] == end)
            if j is None:
                raise CorpusError(f"category {answer.category!r}: no valid negative end for answer {answer.id!r}")
            pairs.append(LabeledPair(text_a=start, text_b=kept[j][2], label=0, kind=PairKind.AA))

    if skipped_short or skipped_lonely:
        logger.info(
            "answer-completion skips: %d too short, %d without a category partner",
            skipped_short,
            skipped_lonely,
        )
    return pairs


def build_qc_pairs(
    questions: Sequence[Question],
    cfg: TaskGenConfig,
    excluded_ids: frozenset[str] = frozenset(),
) -> list[LabeledPair]:
    """Question-category task: does this category label fit this question?

    The positive pairs a question with its own main-category string; each
    negative swaps in a different category sampled from the ones present.
    """
    kept = [q for q in questions if not _is_excluded(q, excluded_ids)]
    for q in kept:
        if not q.category:
            raise CorpusError(f"question {q.id!r}: category required for the question-category task")
    categories = sorted({q.category for q in kept})
    if len(categories) < 2:
        raise CorpusError(f"need at least 2 distinct categories, got {len(categories)}")

    rngs = {category: _category_rng(cfg.rng_seed, category) for category in categories}
    pairs: list[LabeledPair] = []
    for question in kept:
        pairs.append(LabeledPair(text_a=question.text, text_b=question.category, label=1, kind=PairKind.QC))
        rng = rngs[question.category]
        others = [c for c in categories if c != question.category]
        for _ in range(cfg.negatives_per_positive):
            pairs.append(
                LabeledPair(text_a=question.text, text_b=rng.choice(others), label=0, kind=PairKind.QC)
            )
    return pairs


def passthrough_qq(pairs: Iterable[LabeledPair]) -> list[LabeledPair]:
    """Adopt an already-labeled question-pair set, normalizing the kind tag."""
    out = []
    for pair in pairs:
        if pair.kind is PairKind.QQ:
            out.append(pair)
        else:
            out.append(
                LabeledPair(
                    text_a=pair.text_a,
                    text_b=pair.text_b,
                    label=pair.label,
                    kind=PairKind.QQ,
                    labeler_id=pair.labeler_id,
                    seed_id=pair.seed_id,
                )
            )
    return out
