"""Acceptance suite: one test per primary criterion.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary) and fails if any of its checks fail.
"""

import json
import math
import time

import numpy as np
import pytest

from ehrstream import cli
from ehrstream._io import sha256_file
from ehrstream.evaluation import (
    TaskData,
    auroc,
    bootstrap_compare,
    context_window,
    featurize,
    few_shot,
    objective,
    sample_k_shot,
    stratified_brier,
    train_head,
    zero_shot_prob,
)
from ehrstream.evaluation.metrics import brier
from ehrstream.evaluation.protocols import FEW_SHOT_KS
from ehrstream.events import Event, PatientTimeline, slice_before, split
from ehrstream.ngram import NGramModel
from ehrstream.perplexity import ema, median_by_position, per_token_ppl, perplexity, strided_scores
from ehrstream.properties import irregularity, quartiles_by_task, repetition_rate
from ehrstream.synth import LabelModel, SynthConfig, generate_corpus, generate_labels, markov_sequences
from ehrstream.tokenizer import (
    build_vocabulary,
    decile_of,
    encode,
    encode_corpus,
    encode_with_att,
    strip_att,
)

from conftest import random_timeline
from oracles import chi2_binomial_pvalue, enumerate_hit_prob, irregularity_oracle, pairwise_auroc, rr_sorted_oracle

RESULTS: list[str] = []
DAY = 86400


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.failed: list[str] = []
        self.notes: list[str] = []

    def check(self, ok, what: str):
        if not ok:
            self.failed.append(what)
        return bool(ok)

    def note(self, text: str):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.failed.append(f"error: {exc!r}")
        status = "FAIL" if self.failed else "PASS"
        detail = "; ".join(self.failed or self.notes)
        line = f"criterion {self.number:2d} {status}  {self.title}" + (f"  [{detail}]" if detail else "")
        RESULTS.append(line)
        print(line)
        if exc is None:
            assert not self.failed, line
        return False


# ---------------------------------------------------------------------------


def test_c01_property_metrics_exact():
    with Criterion(1, "RR_n and irregularity vs brute force") as c:
        rng = np.random.default_rng(101)
        seqs, times = [], []
        for _ in range(1000):
            m = int(rng.integers(0, 501))
            seqs.append(rng.integers(0, int(rng.integers(1, 51)), m).tolist())
            times.append(np.cumsum(rng.integers(0, 10**6, m) * (rng.random(m) < 0.8)).tolist())
        t0 = time.perf_counter()
        got_rr = [[repetition_rate(s, n) for n in (1, 2, 3, 4)] for s in seqs]
        got_irr = [irregularity(t) if len(t) >= 2 else None for t in times]
        elapsed = time.perf_counter() - t0
        bad_rr = sum(got_rr[i][n - 1] != rr_sorted_oracle(s, n) for i, s in enumerate(seqs) for n in (1, 2, 3, 4))
        worst = 0.0
        for t, st in zip(times, got_irr):
            if st is None:
                continue
            for a, b in zip((st.mean_s, st.std_s, st.iqr_s), irregularity_oracle(t)):
                worst = max(worst, abs(a - b) / max(abs(b), 1e-300) if b else abs(a))
        c.check(bad_rr == 0, f"{bad_rr} RR mismatches")
        c.check(worst <= 1e-9, f"irregularity rel err {worst:.2e}")
        c.check(elapsed < 10.0, f"runtime {elapsed:.2f}s")
        c.note(f"4000 RR values exact, irr rel err {worst:.1e}, {elapsed:.2f}s")


def test_c02_tokenizer_vocabulary():
    with Criterion(2, "decile balance, vocab determinism, size identity") as c:
        rng = np.random.default_rng(202)
        worst = 0
        for trial in range(200):
            n = int(rng.integers(10, 1000))
            vals = rng.standard_normal(n) * rng.uniform(0.01, 1000) + rng.uniform(-50, 50)
            tl = PatientTimeline("p", tuple(Event(i, "LAB", float(v)) for i, v in enumerate(vals)))
            vocab = build_vocabulary([tl], top_k=20)
            bins = np.bincount([decile_of(vocab, "LAB", float(v)) for v in vals], minlength=10)
            worst = max(worst, int(bins.max() - bins.min()))
        c.check(worst <= 1, f"decile bin spread {worst}")

        corpus = [random_timeline(rng, f"p{i:03d}", int(rng.integers(1, 120))) for i in range(200)]
        a = build_vocabulary(corpus, top_k=60, with_att=True).dumps()
        perm = [corpus[i] for i in rng.permutation(len(corpus))]
        b = build_vocabulary(perm, top_k=60, with_att=True).dumps()
        c.check(a == b, "vocab bytes depend on corpus order")

        top_k = 39811
        evs = [Event(i, f"K{i:06d}") for i in range(top_k + 200)]
        size = len(build_vocabulary([PatientTimeline("p", tuple(evs))], top_k=top_k))
        c.check(size == 39818, f"vocab size {size}")
        c.note(f"max bin spread {worst}, |V|={size}")


def test_c03_att_encoding():
    with Criterion(3, "ATT fixture table and strip(ATT) == plain") as c:
        evs = [
            Event(0, "A", None, "v1"),
            Event(3600, "B", None, "v1"),
            Event(3600 + 3 * DAY, "A", None, "v2"),
            Event(3600 + 13 * DAY, "B", None, "v3"),
            Event(3600 + 43 * DAY, "A", None, "v4"),
            Event(3600 + 443 * DAY, "B", None, "v5"),
            Event(3600 + 443 * DAY + 60, "A", None, "v6"),
        ]
        tl = PatientTimeline("p", tuple(evs))
        vocab = build_vocabulary([tl], top_k=10, with_att=True)
        labels = [vocab.tokens[i].label() for i in encode_with_att(tl, vocab).token_ids]
        want = ["VS", "A", "B", "VE", "D_3", "VS", "A", "VE", "W_1", "VS", "B", "VE",
                "M_1", "VS", "A", "VE", "LT", "VS", "B", "VE", "VS", "A", "VE"]
        c.check(labels == want, f"fixture encoded as {labels}")

        rng = np.random.default_rng(303)
        tls = [random_timeline(rng, f"p{i}", int(rng.integers(1, 100))) for i in range(1000)]
        vocab = build_vocabulary(tls[:500], top_k=40, with_att=True)
        bad = sum(strip_att(encode_with_att(t, vocab).token_ids, vocab) != list(encode(t, vocab).token_ids)
                  for t in tls)
        c.check(bad == 0, f"{bad}/1000 timelines differ after stripping")
        c.note("fixture matches, 1000/1000 strip == plain")


def test_c04_lm_validity():
    with Criterion(4, "LM normalisation, uniform PPL, strided == unstrided") as c:
        rng = np.random.default_rng(404)
        seqs = [rng.integers(0, 30, int(rng.integers(1, 300))).tolist() for _ in range(60)]
        worst = 0.0
        models = {o: NGramModel.fit(seqs, order=o, vocab_size=30, kappa=0.3) for o in range(1, 6)}
        for _ in range(1000):
            m = models[int(rng.integers(1, 6))]
            ctx = rng.integers(0, 30, int(rng.integers(0, 8))).tolist()
            worst = max(worst, abs(math.fsum(m.prob(ctx, t) for t in range(30)) - 1.0))
        c.check(worst <= 1e-9, f"normalisation error {worst:.2e}")

        uni = NGramModel.fit([rng.integers(0, 16, 80).tolist()], order=4, vocab_size=16, kappa=1e300)
        lp = uni.sequence_log_probs(rng.integers(0, 16, 700).tolist())
        ppl = perplexity(lp)
        c.check(ppl == 16.0 and np.all(per_token_ppl(lp) == 16.0), f"uniform PPL {ppl!r}")

        mism = 0
        for order in (1, 2, 3, 5, 8, 16, 32):
            m = NGramModel.fit([rng.integers(0, 12, 2000).tolist()], order=order, vocab_size=12, kappa=0.2)
            for L in (64, 128, 512):
                seq = rng.integers(0, 12, int(rng.integers(1, 1500))).tolist()
                mism += not np.array_equal(strided_scores(m, seq, L, 32), m.sequence_log_probs(seq))
        c.check(mism == 0, f"{mism} strided mismatches")
        c.note(f"max |sum-1| {worst:.1e}, PPL {ppl!r}, strided exact for orders 1..32")


def test_c05_metrics_and_head():
    with Criterion(5, "AUROC oracle, Brier, gradient, separable head") as c:
        rng = np.random.default_rng(505)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 300))
            s = rng.integers(0, int(rng.integers(1, 15)), n) / 3.0
            y = rng.random(n) < rng.uniform(0.1, 0.9)
            if y.all() or not y.any():
                continue
            worst = max(worst, abs(auroc(s, y) - pairwise_auroc(s, y)))
        c.check(worst <= 1e-12, f"AUROC err {worst:.2e}")
        b = brier(np.full(101, 0.5), rng.random(101) < 0.3)
        c.check(b == 0.25, f"Brier of 0.5 predictions {b}")

        X = rng.normal(size=(80, 7))
        yy = (rng.random(80) < 0.4).astype(float)
        w, b0, lam, h = rng.normal(size=7), -0.2, 0.03, 1e-6
        _, gw, gb = objective(w, b0, X, yy, lam)
        rel = 0.0
        for j in range(7):
            e = np.zeros(7)
            e[j] = h
            fd = (objective(w + e, b0, X, yy, lam)[0] - objective(w - e, b0, X, yy, lam)[0]) / (2 * h)
            rel = max(rel, abs(fd - gw[j]) / abs(gw[j]))
        fd = (objective(w, b0 + h, X, yy, lam)[0] - objective(w, b0 - h, X, yy, lam)[0]) / (2 * h)
        rel = max(rel, abs(fd - gb) / abs(gb))
        c.check(rel < 1e-4, f"gradient rel err {rel:.2e}")

        Xs = rng.normal(size=(400, 2))
        ys = Xs @ np.array([1.5, -1.0]) > 0.2
        head = train_head(Xs[:200], ys[:200], Xs[200:], ys[200:])
        va = auroc(head.decision(Xs[200:]), ys[200:])
        c.check(va >= 0.99, f"separable val AUROC {va}")
        c.note(f"AUROC err {worst:.1e}, grad rel err {rel:.1e}, separable AUROC {va:.4f}")


def test_c06_bootstrap_calibration():
    with Criterion(6, "bootstrap: identical, null win rate, determinism") as c:
        rng = np.random.default_rng(606)
        y = rng.random(150) < 0.5
        p = rng.random(150)
        for metric in ("auroc", "brier"):
            r = bootstrap_compare(p, p, y, metric, 1000, seed=3)
            c.check(r.diff_ci == (0.0, 0.0), f"identical {metric} diff CI {r.diff_ci}")
        wins = []
        for trial in range(200):
            yt = rng.random(200) < 0.5
            a, b = rng.random(200), rng.random(200)
            wins.append(bootstrap_compare(a, b, yt, "auroc", 1000, seed=trial).win_rate)
        mw = float(np.mean(wins))
        c.check(abs(mw - 0.5) <= 0.05, f"mean null win rate {mw:.3f}")
        a, b = rng.random(120), rng.random(120)
        yt = rng.random(120) < 0.4
        r1 = json.dumps(bootstrap_compare(a, b, yt, "brier", 1000, seed=9).to_json())
        r2 = json.dumps(bootstrap_compare(a, b, yt, "brier", 1000, seed=9).to_json())
        c.check(r1 == r2, "reports differ for one seed")
        c.note(f"diff CI [0,0], mean null win rate {mw:.3f}")


def test_c07_zero_shot():
    with Criterion(7, "zero-shot estimate vs enumeration, binomial hit counts") as c:
        rng = np.random.default_rng(707)
        lm = NGramModel.fit([rng.integers(0, 4, 60).tolist()], order=2, vocab_size=4, kappa=0.5)
        window, pos, horizon = [2], {1}, 3
        exact = enumerate_hit_prob(lm, window, pos, horizon)
        est = zero_shot_prob(lm, window, pos, horizon_tokens=horizon, n_timelines=100_000, seed=1)
        c.check(abs(est - exact) <= 0.01, f"estimate {est:.4f} vs exact {exact:.4f}")
        counts = [0] * 21
        for s in range(2000):
            k = round(20 * zero_shot_prob(lm, window, pos, horizon_tokens=horizon, n_timelines=20, seed=10_000 + s))
            counts[k] += 1
        pval = chi2_binomial_pvalue(counts, 20, exact)
        c.check(pval > 0.01, f"chi-square p={pval:.4f}")
        c.note(f"|est-exact|={abs(est - exact):.4f}, chi-square p={pval:.3f}")


# ---------------------------------------------------------------------------
# stratified trend


def _bag_rows(labels, seqs, n_vocab, L=512):
    X = np.array([featurize(context_window(seqs[l.patient_id], l.prediction_time, L), n_vocab).values
                  for l in labels])
    return X, np.array([l.label for l in labels], dtype=bool)


def _trend_run(metric: str, seed: int) -> dict[str, float]:
    cfg = SynthConfig(n_patients=500, events_median=40, events_mean=120, vocab_size=300)
    corpus = generate_corpus(cfg, seed)
    model = LabelModel(task_name="t", noise_metric=metric, noise_sd=0.2, noise_slope=4.0, coef_risk=4.0,
                       intercept=-2.0, risk_feature="any", n_risk_codes=5, risk_rank_range=(20, 300),
                       mode="threshold")
    labels = generate_labels(corpus, model, seed, cfg).labels
    sp = split([t.patient_id for t in corpus], (0.5, 0.2, 0.3), seed)
    vocab = build_vocabulary([t for t in corpus if t.patient_id in sp.train], top_k=1000)
    seqs = {s.patient_id: s for s in encode_corpus(corpus, vocab)}
    parts = {name: [l for l in labels if l.patient_id in ids]
             for name, ids in (("train", sp.train), ("val", sp.val), ("test", sp.test))}
    head = train_head(*_bag_rows(parts["train"], seqs, len(vocab)), *_bag_rows(parts["val"], seqs, len(vocab)))
    Xte, _ = _bag_rows(parts["test"], seqs, len(vocab))
    probs = head.predict_proba(Xte)
    by_id = {t.patient_id: t for t in corpus}
    vals = {}
    for l in parts["test"]:
        prefix = slice_before(by_id[l.patient_id], l.prediction_time)
        vals[l.patient_id] = repetition_rate(prefix.codes, 1) if metric == "rr1" else irregularity(prefix).std_s
    q = quartiles_by_task({"t": vals})
    rows = [("t", l.patient_id, float(p), l.label) for l, p in zip(parts["test"], probs)]
    return stratified_brier(rows, q).cells


@pytest.mark.parametrize("metric", ["rr1", "irregularity_std"])
def test_c08_stratified_trend(metric):
    with Criterion(8, f"Brier Q4 > Q1 with noise scaled by {metric}") as c:
        cells = [_trend_run(metric, seed) for seed in range(20)]
        hits = sum(t["Q4"] > t["Q1"] for t in cells)
        c.check(hits >= 19, f"Q4 > Q1 in {hits}/20 runs")
        q1, q4 = np.mean([t["Q1"] for t in cells]), np.mean([t["Q4"] for t in cells])
        c.note(f"Q4 > Q1 in {hits}/20 runs (mean Q1 {q1:.3f}, Q4 {q4:.3f})")


# ---------------------------------------------------------------------------
# perplexity trend


def _ema_curve(drift: float, seed: int, order: int = 3, span: int = 250):
    cfg = SynthConfig(n_patients=1400, events_median=1100, events_mean=1100, vocab_size=300, drift_rate=drift)
    corpus = generate_corpus(cfg, seed)
    sp = split([t.patient_id for t in corpus], (0.5, 0.0, 0.5), seed)
    vocab = build_vocabulary([t for t in corpus if t.patient_id in sp.train], top_k=10**6)
    seqs = encode_corpus(corpus, vocab)
    lm = NGramModel.fit([s.token_ids for s in seqs if s.patient_id in sp.train], order=order,
                        vocab_size=len(vocab), bos_id=vocab.special("[BOS]"))
    vecs = [per_token_ppl(strided_scores(lm, s.token_ids, 512)) for s in seqs if s.patient_id in sp.test]
    med = median_by_position(vecs).median
    # positions before order - 1 condition on a truncated context
    return np.concatenate([np.full(order - 1, np.nan), ema(med[order - 1:], span)])


def test_c09_perplexity_trend():
    with Criterion(9, "PPL rises with drift, flat without, order-3 beats order-1") as c:
        order, span = 3, 250
        up = _ema_curve(0.05, seed=1)
        c.check(up[1000] > up[100], f"drift: EMA at 1000 {up[1000]:.1f} <= at 100 {up[100]:.1f}")
        flat = _ema_curve(0.0, seed=1)
        burn = order - 1 + span
        seg = flat[burn:1001]
        spread = float((seg.max() - seg.min()) / seg.min())
        c.check(spread <= 0.05, f"drift off: spread {spread:.3f} beyond position {burn}")
        worse = 0
        for seed in range(3):
            seqs = markov_sequences(8, 3, 250, 200, seed=seed)
            nll = {}
            for o in (1, 3):
                m = NGramModel.fit(seqs[:200], order=o, vocab_size=8, kappa=0.1)
                nll[o] = -np.mean(np.concatenate([m.sequence_log_probs(s) for s in seqs[200:]]))
            worse += nll[3] > nll[1]
        c.check(worse == 0, f"order-3 NLL above order-1 on {worse}/3 corpora")
        c.note(f"drift {up[100]:.0f}->{up[1000]:.0f}; flat spread {spread:.3f} beyond {burn}; order-3 NLL lower 3/3")


# ---------------------------------------------------------------------------
# few-shot


def _fewshot_task():
    cfg = SynthConfig(n_patients=2000, events_median=40, events_mean=120, vocab_size=300)
    corpus = generate_corpus(cfg, 7)
    model = LabelModel(task_name="t", noise_sd=0.5, coef_risk=1.5, risk_rank_range=(5, 60))
    labels = generate_labels(corpus, model, 7, cfg).labels
    sp = split([t.patient_id for t in corpus], (0.5, 0.2, 0.3), 7)
    vocab = build_vocabulary([t for t in corpus if t.patient_id in sp.train], top_k=60)
    seqs = {s.patient_id: s for s in encode_corpus(corpus, vocab)}
    parts = [_bag_rows([l for l in labels if l.patient_id in ids], seqs, len(vocab))
             for ids in (sp.train, sp.val, sp.test)]
    return TaskData("t", *parts[0], *parts[1], *parts[2])


def test_c10_few_shot():
    with Criterion(10, "few-shot AUROC nondecreasing in k, scarce positives") as c:
        task = _fewshot_task()
        means = [float(np.mean([few_shot(task, k, s).auroc for s in range(50)])) for k in FEW_SHOT_KS]
        drops = [(k, a - b) for k, a, b in zip(FEW_SHOT_KS[1:], means, means[1:]) if b < a - 0.005]
        c.check(not drops, f"AUROC drops {drops}")

        keep = np.flatnonzero(~task.y_train)
        pos = np.flatnonzero(task.y_train)[:3]
        idx = np.sort(np.concatenate([keep, pos]))
        scarce = TaskData("scarce", task.X_train[idx], task.y_train[idx], task.X_val, task.y_val,
                          task.X_test, task.y_test)
        picked = sample_k_shot(scarce.y_train, 8, np.random.default_rng(0))
        chosen_pos = scarce.y_train[picked].sum()
        distinct_pos = len(set(picked[scarce.y_train[picked]].tolist()))
        c.check(chosen_pos == 8 and distinct_pos == 3, f"{chosen_pos} positives from {distinct_pos} distinct")
        rep = few_shot(scarce, 8, 0)
        c.check(rep.auroc is not None and 0.0 <= rep.auroc <= 1.0, f"scarce task AUROC {rep.auroc}")
        c.note("mean AUROC " + ", ".join(f"k={k}:{m:.3f}" for k, m in zip(FEW_SHOT_KS, means))
               + f"; 3-positive task AUROC {rep.auroc:.3f}")


# ---------------------------------------------------------------------------
# end to end


E2E_STAGES = ("synth", "vocab", "encode", "metrics", "fit-lm", "ppl", "eval", "strat")


def _e2e_argv(o: str):
    synth = {"n_patients": 5000, "events_mean": 200}
    labels = [{"task_name": "outcome"}, {"task_name": "noisy", "noise_metric": "rr1", "noise_slope": 2.0}]
    return {
        "synth": ["--seed", "11", "--set", "synth=" + json.dumps(synth), "--set", "labels=" + json.dumps(labels)],
        "vocab": ["--events", f"{o}/events.jsonl", "--split-file", f"{o}/split.json"],
        "encode": ["--events", f"{o}/events.jsonl", "--vocab", f"{o}/vocab.json"],
        "metrics": ["--events", f"{o}/events.jsonl", "--labels", f"{o}/labels.csv"],
        "fit-lm": ["--tokens", f"{o}/tokens.jsonl", "--vocab", f"{o}/vocab.json", "--split-file", f"{o}/split.json"],
        "ppl": ["--tokens", f"{o}/tokens.jsonl", "--model", f"{o}/model.json", "--split-file", f"{o}/split.json"],
        "eval": ["--tokens", f"{o}/tokens.jsonl", "--labels", f"{o}/labels.csv", "--split-file", f"{o}/split.json",
                 "--vocab", f"{o}/vocab.json", "--seed", "3"],
        "strat": ["--predictions", f"{o}/predictions.csv", "--events", f"{o}/events.jsonl",
                  "--labels", f"{o}/labels.csv"],
    }


def test_c11_end_to_end(tmp_path):
    with Criterion(11, "5,000-patient pipeline under 120 s, replayable from manifests") as c:
        a, b = tmp_path / "run", tmp_path / "replay"
        argv = _e2e_argv(str(a))
        t0 = time.perf_counter()
        codes = [cli.main([stage, *argv[stage], "--out", str(a)]) for stage in E2E_STAGES]
        elapsed = time.perf_counter() - t0
        c.check(codes == [0] * len(E2E_STAGES), f"exit codes {codes}")
        n_events = sum(1 for _ in open(a / "events.jsonl"))
        c.check(900_000 <= n_events <= 1_100_000, f"{n_events} events")
        c.check(elapsed < 120.0, f"pipeline took {elapsed:.1f}s")

        for stage in E2E_STAGES:
            c.check(cli.main([stage, "--config", str(a / f"{stage}.manifest.json"), "--out", str(b)]) == 0,
                    f"replay of {stage} failed")
        differ = []
        for stage in E2E_STAGES:
            recorded = json.loads((a / f"{stage}.manifest.json").read_text())
            for name, h in recorded["outputs"].items():
                if sha256_file(b / name) != h or (a / name).read_bytes() != (b / name).read_bytes():
                    differ.append(name)
        c.check(not differ, f"replayed outputs differ: {differ}")
        c.note(f"{n_events} events in {elapsed:.1f}s; {sum(1 for p in b.iterdir())} files replayed byte-identical")
