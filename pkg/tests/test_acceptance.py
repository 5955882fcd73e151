"""Release gates for the whole pipeline, one test per gate.

Each gate re-derives its expected values from scratch (counting loops,
arbitrary-precision integration, structural audits) instead of trusting the
library's own arithmetic, and pins a wall-clock budget where the contract
names one. The summary hook in conftest prints one PASS/FAIL/SKIP line per
gate at the end of the run.
"""

import functools
import itertools
import logging
import os
import statistics
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from medsim.corpus import (
    CorpusError,
    LabeledPair,
    PairKind,
    SplitAssignment,
    convert_released_csv,
    load_pairs,
    pair_stats,
    split_by_labeler,
    write_pairs,
)
from medsim.encoder import EncoderConfig, TinyTransformerEncoder, Vocab
from medsim.evaluation import accuracy, paired_t_test
from medsim.faqmatch import (
    build_idf,
    default_replacement_map,
    make_entry,
    match,
    overlap_score,
    preprocess,
)
from medsim.model import (
    PairClassifier,
    TrainConfig,
    _loss_and_grads,
    double_finetune,
    finetune,
)
from medsim.service import ServiceConfig, create_app
from medsim.taskgen import (
    TaskGenConfig,
    build_aa_pairs,
    build_qa_pairs,
    build_qc_pairs,
    split_sentences,
)

from conftest import OverlapStubScorer, separable_pairs, synth_qa_corpus
from test_evaluation import t_two_sided_oracle

# gate names in declaration order; conftest's terminal-summary hook reads both
CRITERIA: list[str] = []
RESULTS: list[tuple[str, str]] = []


def gate(name: str):
    def deco(fn):
        CRITERIA.append(name)

        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                RESULTS.append((name, "FAIL"))
                raise
            RESULTS.append((name, "PASS"))

        return wrapper

    return deco


@gate("accuracy-counting-oracle")
def test_accuracy_matches_brute_force_counts():
    """1000 random vectors, lengths 1..10^4, checked against a bare loop."""
    rng = np.random.default_rng(90)
    t0 = time.perf_counter()
    lengths = np.clip((10 ** rng.uniform(0, 4, size=1000)).astype(int), 1, 10_000)
    lengths[0], lengths[1] = 1, 10_000
    for n in lengths:
        preds = rng.integers(0, 2, size=int(n)).tolist()
        labels = rng.integers(0, 2, size=int(n)).tolist()
        hits = 0
        for p, l in zip(preds, labels):
            if p == l:
                hits += 1
        assert accuracy(preds, labels) == hits / int(n)
    assert time.perf_counter() - t0 < 5.0


@gate("paired-t-oracle")
def test_paired_t_matches_high_precision_integration():
    rng = np.random.default_rng(91)
    t0 = time.perf_counter()
    checked = 0
    while checked < 50:
        a = rng.uniform(0.4, 0.95, size=5)
        b = np.clip(a - rng.normal(0.02, 0.03, size=5), 0.0, 1.0)
        d = a - b
        sd = d.std(ddof=1)
        if sd == 0.0:
            continue
        t_stat, p = paired_t_test(a.tolist(), b.tolist())
        t_expected = d.mean() / (sd / np.sqrt(5))
        assert abs(t_stat - t_expected) < 1e-9
        assert abs(p - float(t_two_sided_oracle(t_expected, 4))) < 1e-9
        checked += 1

    # worked case: a steady ~2 point gain over five paired runs
    t_stat, p = paired_t_test(
        [0.80, 0.81, 0.79, 0.82, 0.80], [0.78, 0.79, 0.78, 0.80, 0.79]
    )
    assert abs(t_stat - 6.5320) < 1e-3
    assert abs(p - float(t_two_sided_oracle(t_stat, 4))) < 1e-9
    assert time.perf_counter() - t0 < 5.0


@gate("task-builder-properties")
def test_builders_balanced_same_category_and_reproducible(tmp_path):
    """Balance, negative placement, and byte-identical reruns at corpus scale."""
    t0 = time.perf_counter()
    records = synth_qa_corpus(np.random.default_rng(92), n_categories=24, n_records=600)
    questions = [q for q, _ in records]
    answers = [a for _, a in records]
    q_cat = {q.text: q.category for q in questions}
    a_cat = {a.text: a.category for a in answers}
    own_answer = {q.text: a.text for q, a in records}
    assert len(q_cat) == len(records) and len(a_cat) == len(records)

    cfg = TaskGenConfig(rng_seed=17)
    qa = build_qa_pairs(records, cfg)
    aa = build_aa_pairs(answers, cfg)
    qc = build_qc_pairs(questions, cfg)

    for pairs in (qa, aa, qc):
        assert pairs
        assert 2 * sum(p.label for p in pairs) == len(pairs)

    for p in qa:
        if p.label == 0:
            assert a_cat[p.text_b] == q_cat[p.text_a]
            assert p.text_b != own_answer[p.text_a]

    # reconstruct the start/end split to place each completion in a category
    end_cat: dict[str, str] = {}
    own_end: dict[str, str] = {}
    for ans in answers:
        sentences = split_sentences(ans.text)
        if len(sentences) >= 3:
            start = " ".join(sentences[:2])
            end = " ".join(sentences[2:])
            end_cat[end] = ans.category
            own_end[start] = end
    for p in aa:
        if p.label == 0:
            assert end_cat[p.text_b] == end_cat[own_end[p.text_a]]
            assert p.text_b != own_end[p.text_a]

    categories = {q.category for q in questions}
    for p in qc:
        assert p.text_b in categories
        if p.label == 1:
            assert p.text_b == q_cat[p.text_a]
        else:
            assert p.text_b != q_cat[p.text_a]

    # reruns under the same seed must serialize to the same bytes
    for tag, builder in (
        ("qa", lambda: build_qa_pairs(records, cfg)),
        ("aa", lambda: build_aa_pairs(answers, cfg)),
        ("qc", lambda: build_qc_pairs(questions, cfg)),
    ):
        first, second = tmp_path / f"{tag}1.jsonl", tmp_path / f"{tag}2.jsonl"
        write_pairs(first, builder())
        write_pairs(second, builder())
        assert first.read_bytes() == second.read_bytes()
    assert time.perf_counter() - t0 < 30.0


@gate("split-leak-detection")
def test_labeler_splits_disjoint_or_rejected():
    """200 random assignments: every split either comes back leak-free or the
    splitter raises. A leak that neither trips is a silent violation."""
    rng = np.random.default_rng(93)
    labelers = [f"doc{i}" for i in range(10)]
    silent = 0
    returned = 0
    rejected = 0
    for trial in range(200):
        n = int(rng.integers(60, 140))
        pairs = []
        for i in range(n):
            who = int(rng.integers(10))
            # half the trials tie seed questions to their labeler, so a clean
            # partition exists; the other half scatter seeds across labelers
            seed = f"s{who}_{int(rng.integers(6))}" if trial % 2 == 0 else f"s{int(rng.integers(30))}"
            pairs.append(
                LabeledPair(
                    text_a=f"t{i} left",
                    text_b=f"t{i} right",
                    label=int(rng.integers(2)),
                    kind=PairKind.QQ,
                    labeler_id=labelers[who],
                    seed_id=seed,
                )
            )
        order = [labelers[i] for i in rng.permutation(10)]
        cut1, cut2 = sorted(int(c) for c in rng.integers(0, 11, size=2))
        groups = [set(order[:cut1]), set(order[cut1:cut2]), set(order[cut2:])]
        roll = rng.random()
        if roll < 0.1 and groups[0]:
            groups[2].add(next(iter(groups[0])))  # overlapping sets must be rejected
        elif roll < 0.2:
            for g in groups:
                g.discard(labelers[0])  # uncovered labeler must be rejected
        try:
            assignment = SplitAssignment(
                train_labelers=frozenset(groups[0]),
                dev_labelers=frozenset(groups[1]),
                test_labelers=frozenset(groups[2]),
            )
            train, dev, test = split_by_labeler(pairs, assignment)
        except CorpusError:
            rejected += 1
            continue
        returned += 1
        lt = {p.labeler_id for p in train}
        ld = {p.labeler_id for p in dev}
        le = {p.labeler_id for p in test}
        if (lt & ld) or (lt & le) or (ld & le):
            silent += 1
        if {p.seed_id for p in train} & {p.seed_id for p in test}:
            silent += 1
    assert silent == 0
    assert returned > 0 and rejected > 0


@gate("separable-overfit")
def test_tiny_encoder_memorizes_separable_pairs_all_seeds():
    t0 = time.perf_counter()
    for seed in range(5):
        pairs = separable_pairs(np.random.default_rng(200 + seed), 50)
        texts = [p.text_a for p in pairs] + [p.text_b for p in pairs]
        enc_cfg = EncoderConfig(
            width=16, layers=2, heads=2, ffn_width=32, max_len=32, pooling="mean"
        )
        clf = PairClassifier(
            TinyTransformerEncoder(Vocab.build(texts), enc_cfg, rng_seed=seed),
            rng_seed=seed,
        )
        cfg = TrainConfig(
            rng_seed=seed, max_tokens=16, learning_rate=0.1, batch_size=4, epochs=30
        )
        trained, _ = finetune(clf, pairs, None, cfg)
        preds = [
            label
            for label, _ in trained.predict_batch(
                [(p.text_a, p.text_b) for p in pairs], 16
            )
        ]
        acc = accuracy(preds, [p.label for p in pairs])
        assert acc >= 0.95, f"seed {seed}: train accuracy {acc:.2f}"
    assert time.perf_counter() - t0 < 120.0


# ---------------------------------------------------------------------------
# A tiny ailment world for the transfer experiment: four conditions, three
# interchangeable names each, one remedy per condition. The target task pairs
# questions and asks "same condition?"; its training split never shows the
# third name of any condition, so success requires knowledge imported from
# somewhere else. The related answer-matching task supplies it: answers
# restate the condition under another of its names, and the hard negatives
# keep the right remedy while swapping in a name of a different condition, so
# remedy tokens alone cannot separate the classes.

_CONDITIONS = 4
_EXP_TOKENS = 10
_ANSWER_TAILS = ["take r{c}x", "r{c}x", "use r{c}x now"]


def _name(c: int, j: int) -> str:
    return f"c{c}s{j}"


def _question_pair(c_a: int, j_a: int, c_b: int, j_b: int) -> LabeledPair:
    return LabeledPair(
        f"about {_name(c_a, j_a)}",
        f"about {_name(c_b, j_b)}",
        int(c_a == c_b),
        PairKind.QQ,
    )


def _related_qa_pairs() -> list[LabeledPair]:
    pairs = []
    k = 0
    for c in range(_CONDITIONS):
        for i, (j, j2) in enumerate(itertools.permutations(range(3), 2)):
            question = f"about {_name(c, j)}"
            tail = _ANSWER_TAILS[i % 3].format(c=c)
            pairs.append(
                LabeledPair(question, f"about {_name(c, j2)} {tail}", 1, PairKind.QA)
            )
            other = (c + 1 + k % (_CONDITIONS - 1)) % _CONDITIONS
            tail2 = _ANSWER_TAILS[(i + 1) % 3].format(c=c)
            pairs.append(
                LabeledPair(question, f"about {_name(other, j2)} {tail2}", 0, PairKind.QA)
            )
            k += 1
    return pairs


def _similarity_train() -> list[LabeledPair]:
    pairs = []
    for c in range(_CONDITIONS):
        pairs.append(_question_pair(c, 0, c, 1))
        pairs.append(_question_pair(c, 1, c, 0))
        pairs.append(_question_pair(c, 0, (c + 1) % _CONDITIONS, 1))
        pairs.append(_question_pair(c, 1, (c + 2) % _CONDITIONS, 0))
    return pairs


def _similarity_dev() -> list[LabeledPair]:
    pairs = []
    for c in range(_CONDITIONS):
        pairs.append(_question_pair(c, 1, c, 1))
        pairs.append(_question_pair(c, 0, (c + 3) % _CONDITIONS, 0))
    return pairs


def _similarity_test() -> list[LabeledPair]:
    """Every pair involves the held-out third name of some condition."""
    pairs = []
    for c in range(_CONDITIONS):
        pairs.append(_question_pair(c, 2, c, 0))
        pairs.append(_question_pair(c, 2, c, 1))
        pairs.append(_question_pair(c, 0, c, 2))
        pairs.append(_question_pair(c, 1, c, 2))
        pairs.append(_question_pair(c, 2, (c + 1) % _CONDITIONS, 0))
        pairs.append(_question_pair(c, 2, (c + 2) % _CONDITIONS, 1))
        pairs.append(_question_pair((c + 1) % _CONDITIONS, 0, c, 2))
        pairs.append(_question_pair((c + 2) % _CONDITIONS, 1, c, 2))
    return pairs


def _held_out_accuracy(model: PairClassifier, pairs: list[LabeledPair]) -> float:
    preds = [
        label
        for label, _ in model.predict_batch(
            [(p.text_a, p.text_b) for p in pairs], _EXP_TOKENS
        )
    ]
    return accuracy(preds, [p.label for p in pairs])


@gate("related-task-advantage")
def test_intermediate_task_beats_direct_training():
    """Training through the related answer-matching task first must beat
    training on the 16 target pairs alone: >= 4 of 5 seeds, positive mean
    gain, one-sided paired t below 0.1."""
    t0 = time.perf_counter()
    related = _related_qa_pairs()
    train = _similarity_train()
    dev = _similarity_dev()
    test = _similarity_test()
    texts = [
        t
        for pairs in (related, train, dev, test)
        for p in pairs
        for t in (p.text_a, p.text_b)
    ]
    vocab = Vocab.build(texts)
    enc_cfg = EncoderConfig(
        width=16, layers=2, heads=2, ffn_width=32, max_len=_EXP_TOKENS, pooling="mean"
    )

    baseline_accs = []
    staged_accs = []
    for seed in range(5):
        def fresh() -> PairClassifier:
            return PairClassifier(
                TinyTransformerEncoder(vocab, enc_cfg, rng_seed=seed), rng_seed=seed
            )

        cfg_mid = TrainConfig(
            rng_seed=seed, max_tokens=_EXP_TOKENS, learning_rate=0.1, batch_size=4, epochs=400
        )
        # gentle final stage: a hot learning rate here wipes out what the
        # first stage learned before the dev set can stop it
        cfg_final = TrainConfig(
            rng_seed=seed,
            max_tokens=_EXP_TOKENS,
            learning_rate=0.02,
            batch_size=4,
            early_stop_patience=30,
        )
        baseline, _ = finetune(fresh(), train, dev, cfg_final)
        staged, _ = double_finetune(fresh(), related, train, cfg_mid, cfg_final, final_dev=dev)
        baseline_accs.append(_held_out_accuracy(baseline, test))
        staged_accs.append(_held_out_accuracy(staged, test))

    wins = sum(s > b for s, b in zip(staged_accs, baseline_accs))
    gain = float(np.mean(staged_accs) - np.mean(baseline_accs))
    _, p = paired_t_test(staged_accs, baseline_accs, one_sided=True)
    detail = (
        f"baseline {['%.2f' % a for a in baseline_accs]}"
        f" staged {['%.2f' % a for a in staged_accs]}"
    )
    assert wins >= 4, detail
    assert gain > 0, detail
    assert p < 0.1, f"p={p:.4f} {detail}"
    assert time.perf_counter() - t0 < 600.0


@gate("gradient-finite-difference")
def test_loss_gradients_match_central_differences():
    """Full cross-entropy loss through encoder and head on 20 random setups."""
    rng = np.random.default_rng(94)
    words = [f"w{i}" for i in range(8)]
    for trial in range(20):
        width = int(rng.choice([4, 8]))
        heads = int(rng.choice([1, 2]))
        layers = int(rng.integers(1, 3))
        texts = [" ".join(rng.choice(words, size=3)) for _ in range(4)]
        vocab = Vocab.build(texts)
        cfg = EncoderConfig(
            width=width, layers=layers, heads=heads, ffn_width=6, max_len=16
        )
        model = PairClassifier(
            TinyTransformerEncoder(vocab, cfg, rng_seed=trial), rng_seed=trial
        )
        pairs = [(texts[0], texts[1]), (texts[2], texts[3])]
        ids, segs, mask = model.encoder.prepare_batch(pairs, 12)
        labels = np.array([0, 1])

        _, enc_grads, dhead_w, dhead_b = _loss_and_grads(model, ids, segs, mask, labels)
        analytic = {f"encoder.{k}": v for k, v in enc_grads.items()}
        analytic["head_w"] = dhead_w
        analytic["head_b"] = dhead_b

        tensors = {f"encoder.{k}": v for k, v in model.encoder.params.items()}
        tensors["head_w"] = model.head_w
        tensors["head_b"] = model.head_b
        eps = 1e-6
        for name, param in tensors.items():
            flat = param.ravel()
            picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                up, *_ = _loss_and_grads(model, ids, segs, mask, labels)
                flat[i] = orig - eps
                down, *_ = _loss_and_grads(model, ids, segs, mask, labels)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                np.testing.assert_allclose(
                    analytic[name].ravel()[i],
                    numeric,
                    rtol=1e-4,
                    atol=1e-7,
                    err_msg=f"trial {trial}, param {name}, index {i}",
                )


@gate("rewrite-bit-exact")
def test_disease_rewrite_worked_example_and_idempotence():
    rmap = default_replacement_map()
    assert (
        preprocess("How can I protect myself from COVID-19?", rmap)
        == "How can I protect myself from the disease?"
    )

    # a second pass over already-rewritten text must change nothing
    rng = np.random.default_rng(95)
    pieces = [
        "covid", "COVID-19", "coronavirus", "Covid", "covidiom", "fever",
        "mask", "the", "disease", "spread?", "vaccine,", "19", "anti-covid",
        "Coronavirus.", "covid19", "sars", "virus",
    ]
    for _ in range(1000):
        k = int(rng.integers(1, 12))
        text = " ".join(pieces[int(i)] for i in rng.integers(0, len(pieces), size=k))
        once = preprocess(text, rmap)
        assert preprocess(once, rmap) == once


@gate("overlap-filter-properties")
def test_overlap_extremes_and_threshold_monotonicity():
    rng = np.random.default_rng(96)
    rmap = default_replacement_map()
    scorer = OverlapStubScorer()
    pool = [
        "fever", "rash", "cough", "sleep", "diet", "sugar", "joint", "nausea",
        "fatigue", "injury", "pill", "dose", "child", "winter", "travel",
    ]
    for trial in range(200):
        n_faq = int(rng.integers(4, 12))
        faqs = [
            make_entry(
                id=f"f{trial}-{i}",
                question=" ".join(rng.choice(pool, size=int(rng.integers(3, 8)))),
                answer="see a professional",
                source="survey",
                last_updated="2020-04-01",
                rmap=rmap,
            )
            for i in range(n_faq)
        ]
        idx = build_idf([f.preprocessed_question for f in faqs])
        probe = faqs[0].preprocessed_question
        assert overlap_score(probe, probe, idx) == 1.0
        assert overlap_score("zxqv bnmk", probe, idx) == 0.0

        user_q = " ".join(rng.choice(pool, size=4))
        f_lo, f_hi = sorted(float(x) for x in rng.uniform(0.0, 1.0, size=2))
        d_lo, d_hi = sorted(float(x) for x in rng.uniform(0.0, 1.0, size=2))
        generous = match(
            user_q, faqs, scorer, filter_threshold=f_lo, decision_threshold=d_lo
        )
        strict = match(
            user_q, faqs, scorer, filter_threshold=f_hi, decision_threshold=d_hi
        )
        assert {r.faq_id for r in strict} <= {r.faq_id for r in generous}


@gate("service-round-trip")
def test_service_bulk_ingest_rank_latency_and_snapshot_isolation(tmp_path):
    rows = [
        {
            "id": f"f{i}",
            "question": f"how do i treat condition{i} with remedy{i}",
            "answer": f"use remedy{i} twice daily",
            "source": "handbook",
            "last_updated": "2020-04-01",
        }
        for i in range(1000)
    ]
    config = ServiceConfig(faq_path=str(tmp_path / "faqs.jsonl"))
    app = create_app(config, scorer=OverlapStubScorer())
    client = TestClient(app)

    resp = client.post("/v1/faqs", json=rows)
    assert resp.status_code == 200
    assert resp.json()["ingested"] == 1000
    assert client.get("/v1/healthz").json()["faq_count"] == 1000

    target = rows[500]["question"]
    body = client.post("/v1/match", json={"question": target}).json()
    assert body["matches"]
    assert body["matches"][0]["question"] == target
    assert body["matches"][0]["score"] == 1.0

    resp = client.post("/v1/match", json={"question": "zxqv bnmk wrtp"})
    assert resp.status_code == 200
    assert resp.json()["matches"] == []

    timings = []
    for i in range(50):
        question = rows[(i * 17) % 1000]["question"]
        start = time.perf_counter()
        assert client.post("/v1/match", json={"question": question}).status_code == 200
        timings.append(time.perf_counter() - start)
    assert statistics.median(timings) < 1.0

    # snapshot isolation: five FAQs share a question; every write rewrites all
    # five answers with a generation tag, so a response mixing tags means a
    # reader saw a half-published store
    stress_config = ServiceConfig(faq_path=str(tmp_path / "stress.jsonl"))
    stress_app = create_app(stress_config, scorer=OverlapStubScorer())
    writer_client = TestClient(stress_app)
    question = "generation marker fever rash?"

    def generation(n: int):
        return [
            {
                "id": f"g{i}",
                "question": question,
                "answer": f"gen {n}",
                "source": "handbook",
                "last_updated": "2020-04-01",
            }
            for i in range(5)
        ]

    assert writer_client.post("/v1/faqs", json=generation(0)).status_code == 200

    reads_per_thread = 2500
    violations: list[str] = []
    totals = [0] * 4
    stop = threading.Event()

    def writer():
        n = 1
        while not stop.is_set():
            writer_client.post("/v1/faqs", json=generation(n))
            n += 1

    def reader(slot: int):
        local = TestClient(stress_app)
        for _ in range(reads_per_thread):
            body = local.post("/v1/match", json={"question": question}).json()
            tags = {m["answer"] for m in body["matches"]}
            if len(body["matches"]) != 5 or len(tags) != 1:
                violations.append(f"slot {slot}: {sorted(tags)}")
            totals[slot] += 1

    writer_thread = threading.Thread(target=writer)
    readers = [threading.Thread(target=reader, args=(i,)) for i in range(4)]
    writer_thread.start()
    for t in readers:
        t.start()
    for t in readers:
        t.join()
    stop.set()
    writer_thread.join()

    assert sum(totals) == 10_000
    assert violations == []


RELEASED_PAIRS_PATH = os.environ.get("MEDSIM_MQP_PATH", "")


@pytest.mark.skipif(
    not RELEASED_PAIRS_PATH,
    reason="released pair file not supplied (set MEDSIM_MQP_PATH)",
)
@gate("released-pairs-shape")
def test_released_pair_file_count_and_token_stats(tmp_path):
    """3048 pairs is a hard requirement; token stats under the whitespace
    tokenizer may drift from the published figures, which is logged as a
    tokenizer discrepancy rather than failed."""
    out = tmp_path / "released.jsonl"
    convert_released_csv(RELEASED_PAIRS_PATH, out)
    pairs = load_pairs(out)
    assert len(pairs) == 3048

    stats = pair_stats(pairs)
    drift = []
    if stats.token_min != 4:
        drift.append(f"min {stats.token_min} != 4")
    if stats.token_max != 81:
        drift.append(f"max {stats.token_max} != 81")
    if stats.token_median != 20:
        drift.append(f"median {stats.token_median} != 20")
    if abs(stats.token_mean - 22.675) > 0.5:
        drift.append(f"mean {stats.token_mean:.3f} not within 22.675 +/- 0.5")
    if drift:
        logging.getLogger("medsim.acceptance").warning(
            "tokenizer discrepancy: %s", "; ".join(drift)
        )
