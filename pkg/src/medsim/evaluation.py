"""Measurement protocol: accuracy, multi-split runs, paired significance,
and the consistent-error / probing analysis over committees of split models."""
from __future__ import annotations

import logging
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc

from .corpus import LabeledPair

logger = logging.getLogger(__name__)

# trainer closure: (train, dev, test, rng_seed) -> test accuracy in [0, 1]
Trainer = Callable[[Sequence[LabeledPair], Sequence[LabeledPair], Sequence[LabeledPair], int], float]


class EvalError(ValueError):
    """Raised when evaluation inputs or a split run are invalid."""


@dataclass(frozen=True)
class SplitRun:
    split_index: int
    rng_seed: int
    accuracy: float
    model_tag: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise EvalError(f"accuracy out of range: {self.accuracy}")


@dataclass(frozen=True)
class Comparison:
    tag_a: str
    tag_b: str
    t_statistic: float
    p_value: float


@dataclass
class EvalReport:
    runs: list[SplitRun]
    mean: float
    std: float
    comparisons: list[Comparison] = field(default_factory=list)


class Verdict(str, Enum):
    CONSISTENTLY_CORRECT = "consistently_correct"
    CONSISTENTLY_WRONG = "consistently_wrong"
    MIXED = "mixed"


@dataclass(frozen=True)
class ConsistencyVerdict:
    pair_id: str
    verdict: Verdict
    votes: int  # correct votes out of the committee size


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of positions where prediction equals label."""
    if len(preds) != len(labels):
        raise EvalError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(preds) == 0:
        raise EvalError("empty input")
    p = np.asarray(preds)
    y = np.asarray(labels)
    return int(np.count_nonzero(p == y)) / len(preds)


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized
    incomplete beta function: p = I_{df/(df+t^2)}(df/2, 1/2)."""
    if df < 1:
        raise EvalError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(
    acc_a: Sequence[float], acc_b: Sequence[float], one_sided: bool = False
) -> tuple[float, float]:
    """Paired t-test over per-split metric differences d = a - b.

    t = mean(d) / (sd(d)/sqrt(n)) with the sample (n-1) standard deviation and
    df = n-1. Two-sided p by default; one_sided=True halves the tail in the
    direction of positive mean difference. Zero-variance differences follow
    the degenerate conventions: all-equal gives (0, 1), a constant nonzero
    difference gives (signed inf, 0) with a warning.
    """
    if len(acc_a) != len(acc_b):
        raise EvalError(f"length mismatch: {len(acc_a)} vs {len(acc_b)}")
    n = len(acc_a)
    if n < 2:
        raise EvalError("paired t-test needs at least 2 paired observations")
    d = np.asarray(acc_a, dtype=np.float64) - np.asarray(acc_b, dtype=np.float64)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        logger.warning("paired_t_test: zero variance with nonzero mean; reporting p -> 0")
        t = math.inf if mean > 0 else -math.inf
        return t, 0.0
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_sided_p(t, n - 1)
    if one_sided:
        p = p / 2.0 if t > 0 else 1.0 - p / 2.0
    return t, p


def _seed_groups(pairs: Sequence[LabeledPair]) -> dict[str, list[LabeledPair]]:
    groups: dict[str, list[LabeledPair]] = defaultdict(list)
    for i, pair in enumerate(pairs):
        groups[pair.seed_id if pair.seed_id is not None else f"__pair_{i}"].append(pair)
    return groups


def run_splits(
    trainer: Trainer,
    dataset: Sequence[LabeledPair],
    k: int = 5,
    seeds: Sequence[int] | None = None,
    model_tag: str = "model",
    test_fraction: float = 0.2,
    dev_fraction: float = 0.1,
    split_seed: int = 0,
) -> EvalReport:
    """Train k models on k random train/dev shuffles against one fixed test set.

    The test set is carved once from seed-question groups (pairs derived from
    one original question never straddle the test boundary) using split_seed;
    each run then reshuffles the remaining groups into train and dev with its
    own seed. dev_fraction applies to the non-test pool.
    """
    if seeds is None:
        seeds = list(range(k))
    if len(seeds) != k:
        raise EvalError(f"need {k} seeds, got {len(seeds)}")
    if not dataset:
        raise EvalError("empty dataset")

    groups = _seed_groups(dataset)
    keys = sorted(groups)
    random.Random(split_seed).shuffle(keys)
    n_test = round(len(keys) * test_fraction)
    test_keys, pool_keys = keys[:n_test], keys[n_test:]
    test = [p for key in test_keys for p in groups[key]]
    if not test or not pool_keys:
        raise EvalError("dataset too small to carve test and train/dev pools")

    runs: list[SplitRun] = []
    for index, seed in enumerate(seeds):
        pool = list(pool_keys)
        random.Random(seed).shuffle(pool)
        n_dev = round(len(pool) * dev_fraction)
        dev = [p for key in pool[:n_dev] for p in groups[key]]
        train = [p for key in pool[n_dev:] for p in groups[key]]
        try:
            acc = trainer(train, dev, test, seed)
        except Exception as exc:
            raise EvalError(f"trainer failed on split {index} (seed {seed}): {exc}") from exc
        runs.append(SplitRun(split_index=index, rng_seed=seed, accuracy=acc, model_tag=model_tag))

    accs = [r.accuracy for r in runs]
    mean = sum(accs) / len(accs)
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return EvalReport(runs=runs, mean=mean, std=std)


def compare(report_a: EvalReport, report_b: EvalReport, one_sided: bool = False) -> Comparison:
    """Paired t-test between two reports produced with the same seeds."""
    a = [r.rng_seed for r in report_a.runs]
    b = [r.rng_seed for r in report_b.runs]
    if a != b:
        raise EvalError("reports were produced with different seeds; pairs are not aligned")
    t, p = paired_t_test([r.accuracy for r in report_a.runs], [r.accuracy for r in report_b.runs], one_sided)
    tag_a = report_a.runs[0].model_tag if report_a.runs else "a"
    tag_b = report_b.runs[0].model_tag if report_b.runs else "b"
    return Comparison(tag_a=tag_a, tag_b=tag_b, t_statistic=t, p_value=p)


def report_to_dict(report: EvalReport) -> dict:
    """JSON-ready dict with stable field ordering."""
    return {
        "runs": [
            {
                "split_index": r.split_index,
                "rng_seed": r.rng_seed,
                "accuracy": r.accuracy,
                "model_tag": r.model_tag,
            }
            for r in report.runs
        ],
        "mean": report.mean,
        "std": report.std,
        "comparisons": [
            {"tag_a": c.tag_a, "tag_b": c.tag_b, "t_statistic": c.t_statistic, "p_value": c.p_value}
            for c in report.comparisons
        ],
    }


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text regime table: one row per model tag, mean +/- std."""
    width = max([len("regime")] + [len(r.runs[0].model_tag) for r in reports if r.runs])
    lines = [f"{'regime'.ljust(width)}  accuracy"]
    for report in reports:
        tag = report.runs[0].model_tag if report.runs else "?"
        lines.append(f"{tag.ljust(width)}  {report.mean * 100:.1f}% +/- {report.std * 100:.1f}%")
    return "\n".join(lines)


def consistency_analysis(
    models: Sequence, pairs: Sequence[LabeledPair], max_tokens: int = 200
) -> list[ConsistencyVerdict]:
    """Committee vote per pair: a pair is consistently correct (or wrong) when
    at least four committee members agree that way, mixed otherwise.

    Pair ids are input positions. A model failure on a pair skips that pair
    with a diagnostic rather than aborting the sweep.
    """
    k = len(models)
    if k < 4:
        raise EvalError(f"consistency analysis needs at least 4 models, got {k}")
    verdicts: list[ConsistencyVerdict] = []
    skipped = 0
    for i, pair in enumerate(pairs):
        votes = 0
        failed = False
        for model in models:
            try:
                label, _ = model.predict((pair.text_a, pair.text_b), max_tokens)
            except Exception as exc:
                logger.warning("skipping pair %d: prediction failed (%s)", i, exc)
                failed = True
                break
            votes += int(label == pair.label)
        if failed:
            skipped += 1
            continue
        if votes >= 4:
            verdict = Verdict.CONSISTENTLY_CORRECT
        elif k - votes >= 4:
            verdict = Verdict.CONSISTENTLY_WRONG
        else:
            verdict = Verdict.MIXED
        verdicts.append(ConsistencyVerdict(pair_id=str(i), verdict=verdict, votes=votes))
    if skipped:
        logger.warning("consistency analysis skipped %d of %d pairs", skipped, len(pairs))
    return verdicts


def probe_with_edits(
    models: Sequence,
    base_pair: LabeledPair,
    edits: Sequence[str],
    max_tokens: int = 200,
) -> list[ConsistencyVerdict]:
    """Re-run the committee on analyst rewrites of the second question.

    The first question and the label stay fixed; verdicts come back in edit
    order. Probe pairs are diagnostics only and are never merged into a test
    set or a quantitative metric.
    """
    if not edits:
        raise EvalError("probe_with_edits: empty edit list")
    probes = [replace(base_pair, text_b=edit) for edit in edits]
    return consistency_analysis(models, probes, max_tokens)
