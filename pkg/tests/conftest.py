import sys

import numpy as np
import pytest

from medsim.corpus import Answer, LabeledPair, PairKind, Question


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per release gate, printed after the normal test summary."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "CRITERIA", None):
        return
    seen = dict(mod.RESULTS)
    terminalreporter.section("acceptance gates")
    for name in mod.CRITERIA:
        terminalreporter.write_line(f"{seen.get(name, 'SKIP'):4s} {name}")

# deterministic nonsense lexicon; small enough that vocabularies stay tiny
SYLLABLES = ["ka", "lo", "mi", "tu", "ren", "vos", "pel", "dar", "sil", "nor"]


def make_word(rng: np.random.Generator) -> str:
    return "".join(rng.choice(SYLLABLES) for _ in range(rng.integers(2, 4)))


def make_sentence(rng: np.random.Generator, n_words: int, punct: str = ".") -> str:
    return " ".join(make_word(rng) for _ in range(n_words)) + punct


def synth_qa_corpus(rng: np.random.Generator, n_categories: int = 20, n_records: int = 500):
    """Random QA records: every answer has 3+ sentences and categories repeat."""
    categories = [f"cat{c}" for c in range(n_categories)]
    records = []
    for i in range(n_records):
        category = categories[int(rng.integers(n_categories))]
        question = Question(
            id=f"q{i}", text=make_sentence(rng, int(rng.integers(3, 9)), "?"), category=category
        )
        n_sentences = int(rng.integers(3, 6))
        answer_text = " ".join(make_sentence(rng, int(rng.integers(3, 8))) for _ in range(n_sentences))
        answer = Answer(id=f"q{i}#a", question_id=f"q{i}", text=answer_text, category=category)
        records.append((question, answer))
    return records


def separable_pairs(rng: np.random.Generator, n: int = 50) -> list[LabeledPair]:
    """Cleanly separable pairs: positives repeat the first text, negatives pull
    the second text from a disjoint word pool."""
    left = ["fever", "cough", "rash", "ache", "chill", "sneeze", "burn", "itch"]
    right = ["ledger", "quartz", "violin", "meadow", "copper", "anchor", "breeze", "saddle"]
    pairs = []
    for i in range(n):
        a = " ".join(rng.choice(left, size=3))
        if i % 2 == 0:
            pairs.append(LabeledPair(text_a=a, text_b=a, label=1, kind=PairKind.QQ))
        else:
            b = " ".join(rng.choice(right, size=3))
            pairs.append(LabeledPair(text_a=a, text_b=b, label=0, kind=PairKind.QQ))
    return pairs


class OverlapStubScorer:
    """Deterministic classifier stand-in: p_positive is Jaccard token overlap."""

    version = "stub-overlap-1"

    def predict_batch(self, pairs, max_tokens: int = 200):
        out = []
        for a, b in pairs:
            ta, tb = set(a.lower().split()), set(b.lower().split())
            union = ta | tb
            p = len(ta & tb) / len(union) if union else 0.0
            out.append((int(p >= 0.5), p))
        return out

    def predict(self, pair, max_tokens: int = 200):
        return self.predict_batch([pair], max_tokens)[0]


@pytest.fixture
def stub_scorer():
    return OverlapStubScorer()
