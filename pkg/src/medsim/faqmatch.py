"""FAQ matching pipeline: placeholder preprocessing, idf-weighted token-overlap
filtering, exhaustive pair scoring, and precision-biased thresholding."""
from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass
from datetime import date, datetime
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

DEFAULT_FILTER_THRESHOLD = 0.2
DEFAULT_DECISION_THRESHOLD = 0.5

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class FAQError(ValueError):
    """Raised for invalid FAQ entries, stores, or match inputs."""


class ReplacementMap:
    """Ordered case-insensitive term rewrites, applied longest-pattern-first.

    Patterns match only as whole tokens: "covid" fires in "covid?" and
    "COVID-19" is consumed as one unit before "covid" can split it, but
    neither touches "covidiom". Surrounding spacing and punctuation survive.
    """

    def __init__(self, rules: Sequence[tuple[str, str]]):
        by_pattern: dict[str, str] = {}
        for pattern, replacement in rules:
            if not pattern.strip():
                raise FAQError("replacement pattern must be non-empty")
            by_pattern.setdefault(pattern.lower(), replacement)
        self.rules: tuple[tuple[str, str], ...] = tuple(
            sorted(by_pattern.items(), key=lambda r: (-len(r[0]), r[0]))
        )
        if self.rules:
            alternation = "|".join(re.escape(p) for p, _ in self.rules)
            self._regex = re.compile(
                rf"(?<![A-Za-z0-9])(?:{alternation})(?![A-Za-z0-9])", re.IGNORECASE
            )
        else:
            self._regex = None
        self._lookup = dict(self.rules)

    def apply(self, text: str) -> str:
        if self._regex is None:
            return text
        return self._regex.sub(lambda m: self._lookup[m.group(0).lower()], text)


def default_replacement_map() -> ReplacementMap:
    """Collapses common names for the target disease into one placeholder so a
    model trained before the outbreak never sees an out-of-vocabulary name."""
    return ReplacementMap(
        [
            ("covid-19", "the disease"),
            ("covid", "the disease"),
            ("coronavirus", "the disease"),
        ]
    )


def preprocess(text: str, rmap: ReplacementMap) -> str:
    return rmap.apply(text)


def load_replacement_map(path: str) -> ReplacementMap:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise FAQError(f"{path}: replacement map must be a JSON list")
    rules = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "pattern" not in item or "replacement" not in item:
            raise FAQError(f"{path}: entry {i}: need 'pattern' and 'replacement'")
        rules.append((str(item["pattern"]), str(item["replacement"])))
    return ReplacementMap(rules)


@lru_cache(maxsize=1)
def load_stopwords() -> frozenset[str]:
    text = resources.files("medsim").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(text.split())


@dataclass(frozen=True)
class FAQEntry:
    id: str
    question: str
    answer: str
    source: str
    last_updated: str  # ISO-8601 date or datetime
    preprocessed_question: str

    def __post_init__(self) -> None:
        for name in ("id", "question", "answer", "source"):
            if not str(getattr(self, name)).strip():
                raise FAQError(f"FAQ entry: empty field {name!r}")
        try:
            datetime.fromisoformat(self.last_updated)
        except ValueError:
            try:
                date.fromisoformat(self.last_updated)
            except ValueError:
                raise FAQError(
                    f"FAQ entry {self.id!r}: last_updated {self.last_updated!r} is not an ISO-8601 date"
                ) from None


def make_entry(
    id: str, question: str, answer: str, source: str, last_updated: str, rmap: ReplacementMap
) -> FAQEntry:
    """Builds an entry with the derived preprocessed question cached."""
    return FAQEntry(
        id=str(id),
        question=question,
        answer=answer,
        source=source,
        last_updated=last_updated,
        preprocessed_question=preprocess(question, rmap),
    )


@dataclass(frozen=True)
class IdfIndex:
    n_docs: int
    df: Mapping[str, int]
    stopwords: frozenset[str]

    def idf(self, token: str) -> float:
        # unseen tokens take df=0, the maximal weight under the smoothed form
        return math.log((1 + self.n_docs) / (1 + self.df.get(token, 0))) + 1.0


@dataclass(frozen=True)
class MatchResult:
    faq_id: str
    p_positive: float
    passed_filter: bool
    rank: int


def content_tokens(text: str, stopwords: frozenset[str]) -> set[str]:
    """Distinct lowercased alphanumeric tokens, stopwords removed."""
    return {t for t in _TOKEN_RE.findall(text.lower()) if t not in stopwords}


def build_idf(faq_questions: Sequence[str], stopwords: frozenset[str] | None = None) -> IdfIndex:
    """Smoothed idf over the FAQ questions: idf = ln((1+N)/(1+df)) + 1."""
    if not faq_questions:
        raise FAQError("cannot build an idf index over an empty FAQ set")
    if stopwords is None:
        stopwords = load_stopwords()
    df: dict[str, int] = {}
    for q in faq_questions:
        for token in content_tokens(q, stopwords):
            df[token] = df.get(token, 0) + 1
    return IdfIndex(n_docs=len(faq_questions), df=df, stopwords=stopwords)


def overlap_score(user_q: str, faq_q: str, idx: IdfIndex) -> float:
    """Idf-weighted recall of the user question's content tokens.

    score = sum idf(shared tokens) / sum idf(user tokens), both over distinct
    tokens. 0 when the user question has no content tokens at all.
    """
    user_tokens = content_tokens(user_q, idx.stopwords)
    if not user_tokens:
        return 0.0
    shared = user_tokens & content_tokens(faq_q, idx.stopwords)
    num = sum(idx.idf(t) for t in sorted(shared))
    den = sum(idx.idf(t) for t in sorted(user_tokens))
    return num / den


def match(
    user_q: str,
    faqs: Sequence[FAQEntry],
    model,
    filter_threshold: float = DEFAULT_FILTER_THRESHOLD,
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD,
    idx: IdfIndex | None = None,
    rmap: ReplacementMap | None = None,
    max_tokens: int = 200,
) -> list[MatchResult]:
    """Scores a user question against an FAQ set and returns ranked hits.

    Pipeline: preprocess the user question, drop FAQs below the overlap
    filter, score survivors with the pair classifier in one batch, keep
    p_positive >= decision_threshold, sort by (p_positive desc, faq_id asc).
    An empty result list is a valid outcome. A model failure propagates with
    no partial results (survivors are scored in a single call).
    """
    if not user_q.strip():
        raise FAQError("empty user question")
    if rmap is None:
        rmap = default_replacement_map()
    if idx is None:
        idx = build_idf([e.preprocessed_question for e in faqs]) if faqs else None
    if not faqs or idx is None:
        return []
    user_p = preprocess(user_q, rmap)
    survivors = [
        e for e in faqs if overlap_score(user_p, e.preprocessed_question, idx) >= filter_threshold
    ]
    if not survivors:
        return []
    scored = model.predict_batch(
        [(user_p, e.preprocessed_question) for e in survivors], max_tokens
    )
    kept = [
        (e.id, p) for e, (_, p) in zip(survivors, scored) if p >= decision_threshold
    ]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return [
        MatchResult(faq_id=faq_id, p_positive=p, passed_filter=True, rank=r)
        for r, (faq_id, p) in enumerate(kept, start=1)
    ]


def load_faq_store(path: str, rmap: ReplacementMap | None = None) -> list[FAQEntry]:
    """Reads the JSONL store. The preprocessed question is derived under the
    active replacement map rather than trusted from disk."""
    if rmap is None:
        rmap = default_replacement_map()
    entries: list[FAQEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FAQError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            for name in ("id", "question", "answer", "source", "last_updated"):
                if name not in row:
                    raise FAQError(f"{path}:{lineno}: missing field {name!r}")
            entry = make_entry(
                row["id"], row["question"], row["answer"], row["source"],
                row["last_updated"], rmap,
            )
            if entry.id in seen:
                raise FAQError(f"{path}:{lineno}: duplicate FAQ id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def save_faq_store(path: str, entries: Sequence[FAQEntry]) -> None:
    """Writes the JSONL store atomically (temp file in place, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".faqs-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for e in entries:
                fh.write(
                    json.dumps(
                        {
                            "id": e.id,
                            "question": e.question,
                            "answer": e.answer,
                            "source": e.source,
                            "last_updated": e.last_updated,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
