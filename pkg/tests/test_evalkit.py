import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asl.evalkit import (MetricReport, PilotResult, PilotTrainConfig, ScoredPixels, aupr, auroc, default_deltas,
                         evaluate_anomaly, fpr_at_tpr, metric_report, pilot_study, score_scenes, threshold_sweep)
from asl.scenes import CorpusConfig, UNKNOWN, generate_corpus, partition_classes
from asl.segmodel import SegModel


# brute-force oracles, deliberately naive

def oracle_auroc(scores, truth):
    pos, neg = scores[truth], scores[~truth]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _enumerate(scores, truth):
    """(threshold, tp, fp) for every distinct score, highest threshold first."""
    out = []
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        out.append((t, int((pred & truth).sum()), int((pred & ~truth).sum())))
    return out


def oracle_aupr(scores, truth):
    total, prev_recall = 0.0, 0.0
    for _, tp, fp in _enumerate(scores, truth):
        recall = tp / truth.sum()
        total += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return total


def oracle_fpr(scores, truth, target=0.95):
    for _, tp, fp in _enumerate(scores, truth):
        if tp / truth.sum() >= target:
            return fp / (~truth).sum()
    raise AssertionError("unreachable")


def _instance(rng):
    n = int(rng.integers(2, 201))
    truth = rng.random(n) < rng.uniform(0.05, 0.95)
    truth[0], truth[1] = True, False
    levels = int(rng.integers(2, 40))
    scores = rng.integers(0, levels, n) / levels if rng.random() < 0.6 else rng.random(n)
    return scores, truth


def test_metrics_match_oracles_on_1000_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        scores, truth = _instance(rng)
        sp = ScoredPixels(scores, truth)
        assert abs(auroc(sp) - oracle_auroc(scores, truth)) <= 1e-9
        assert abs(aupr(sp) - oracle_aupr(scores, truth)) <= 1e-9
        assert abs(fpr_at_tpr(sp) - oracle_fpr(scores, truth)) <= 1e-9


def test_auroc_examples():
    assert auroc(ScoredPixels([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0])) == 0.75
    assert auroc(ScoredPixels([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0
    assert auroc(ScoredPixels([0.3] * 5, [1, 0, 1, 0, 0])) == 0.5


def test_aupr_examples():
    assert aupr(ScoredPixels([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0
    assert aupr(ScoredPixels([0.3] * 5, [1, 0, 1, 0, 0])) == pytest.approx(0.4)
    assert aupr(ScoredPixels([0.5, 0.1], [1, 1])) == 1.0


def test_fpr_examples():
    assert fpr_at_tpr(ScoredPixels([0.9, 0.8, 0.1], [1, 1, 0])) == 0.0
    assert fpr_at_tpr(ScoredPixels([0.3] * 5, [1, 0, 1, 0, 0])) == 1.0
    with pytest.raises(ValueError):
        fpr_at_tpr(ScoredPixels([0.1, 0.2], [1, 0]), 0.0)


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        auroc(ScoredPixels([0.1, 0.2], [0, 0]))
    with pytest.raises(ValueError):
        auroc(ScoredPixels([0.1, 0.2], [1, 1]))
    with pytest.raises(ValueError):
        aupr(ScoredPixels([0.1], [0]))
    with pytest.raises(ValueError):
        ScoredPixels([0.1, 0.2], [1])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metric_invariances(seed):
    rng = np.random.default_rng(seed)
    scores, truth = _instance(rng)
    sp = ScoredPixels(scores, truth)
    perm = rng.permutation(len(scores))
    shuffled = ScoredPixels(scores[perm], truth[perm])
    for fn in (auroc, aupr, fpr_at_tpr):
        assert fn(shuffled) == pytest.approx(fn(sp), abs=1e-12)
    transformed = ScoredPixels(np.exp(3 * scores) - 7, truth)
    assert auroc(transformed) == pytest.approx(auroc(sp), abs=1e-12)
    rep = metric_report(sp)
    assert all(0 <= v <= 1 for v in rep.as_dict().values())
    assert rep.aupr_random_guess == truth.sum() / len(truth)


def test_metric_report_csv(tmp_path):
    rep = MetricReport(0.5, 0.75, 0.25, 0.02)
    rep.write_csv(tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["metric", "value"], ["aupr", "0.5"], ["auroc", "0.75"], ["fpr95", "0.25"],
                    ["aupr_random_guess", "0.02"]]


# model-level evaluation

@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig(num_train=20, num_val=0, num_test=8, seed=1))


def test_uniform_model_gives_chance_auroc(small_corpus):
    rep = evaluate_anomaly(SegModel(3, 12, 1, (4,)), small_corpus.test)
    assert rep.auroc == 0.5
    frac = np.mean(np.concatenate([(s.role == UNKNOWN).ravel() for s in small_corpus.test]))
    assert rep.aupr_random_guess == pytest.approx(frac, abs=1e-15)


def test_ground_truth_scores_are_perfect(small_corpus):
    truth = np.concatenate([(s.role == UNKNOWN).ravel() for s in small_corpus.test])
    rep = metric_report(ScoredPixels(truth.astype(float), truth))
    assert (rep.aupr, rep.auroc, rep.fpr95) == (1.0, 1.0, 0.0)


def test_evaluation_needs_unknowns(small_corpus):
    with pytest.raises(ValueError, match="no unknown"):
        evaluate_anomaly(SegModel(3, 12, 1, (4,)), small_corpus.train[:2])


def test_score_scenes_include_mask(small_corpus):
    sp = score_scenes(SegModel(3, 12, 1, (4,)), small_corpus.test[:2], include=lambda s: s.labels == 0)
    assert len(sp.scores) == sum(int((s.labels == 0).sum()) for s in small_corpus.test[:2])


def test_sweep_boundaries_and_monotonicity(default_corpus, pretrained, tmp_path):
    curve = threshold_sweep(pretrained, default_corpus.test[:10], default_deltas(0.05))
    assert curve.anomaly_acc[0] == 0.0
    assert curve.anomaly_acc[-1] == 1.0 and curve.semantic_acc[-1] == 0.0
    assert all(b >= a for a, b in zip(curve.anomaly_acc, curve.anomaly_acc[1:]))
    assert all(b <= a for a, b in zip(curve.semantic_acc, curve.semantic_acc[1:]))
    curve.write_csv(tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["delta", "semantic_acc", "anomaly_acc"] and len(rows) == 22


def test_sweep_rejects_bad_grids(small_corpus):
    m = SegModel(3, 12, 1, (4,))
    for grid in ([], [0.5, 0.4], [0.1, 1.2], [0.2, 0.2]):
        with pytest.raises(ValueError):
            threshold_sweep(m, small_corpus.test, grid)


def test_default_deltas():
    d = default_deltas(0.25)
    assert d == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert len(default_deltas()) == 101


# pilot harness

def test_pilot_result_summary_rows(tmp_path):
    reps = [MetricReport(0.2, 0.9, 0.3, 0.01), MetricReport(0.4, 0.8, 0.5, 0.03), None]
    res = PilotResult([[0, 1], [2, 3], [4, 5]], reps, [None] * 3, [None, None, "diverged"])
    avg, spread = res.average(), res.spread()
    assert avg["aupr"] == pytest.approx(0.3) and avg["auroc"] == pytest.approx(0.85)
    assert spread["auroc"] == pytest.approx(0.1) and spread["fpr95"] == pytest.approx(0.2)
    res.write_csv(tmp_path / "p.csv")
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["subset", "aupr", "auroc", "fpr95", "aupr_random_guess"]
    assert rows[3] == ["2:4-5", "failed", "failed", "failed", "failed"]
    assert [r[0] for r in rows[4:]] == ["average", "spread"]
    assert float(rows[4][1]) == pytest.approx(np.mean([0.2, 0.4]))


def test_pilot_study_runs_on_small_corpus():
    corpus = generate_corpus(CorpusConfig(num_classes=4, num_train=30, num_val=0, num_test=6, seed=2))
    part = partition_classes(4, 2, seed=0)
    res = pilot_study(corpus, part, PilotTrainConfig(layer_dims=(8,), pretrain_epochs=3, epochs=3, lr=0.2))
    assert len(res.reports) == 2
    for rep, fail, subset in zip(res.reports, res.failures, part):
        if fail is None:
            rate = np.mean(np.concatenate([np.isin(s.labels, subset)[s.role != UNKNOWN] for s in corpus.test]))
            assert rep.aupr_random_guess == pytest.approx(rate, abs=1e-15)


def test_pilot_rejects_bad_partition(small_corpus):
    with pytest.raises(ValueError):
        pilot_study(small_corpus, [[0, 1], [2]], PilotTrainConfig())
