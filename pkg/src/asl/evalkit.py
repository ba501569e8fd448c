"""Anomaly-segmentation metrics, threshold sweeps and the known-unknown pilot.

Unknown pixels are the positive class and scores are oriented so that a
higher score means "more anomalous". Equal scores always form a single
threshold group.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .scenes import KNOWN, UNKNOWN, relabel_as_known_unknown, pixel_set
from .segmodel import (ANOMALY, PixelSet, SegModel, classify_with_threshold, init_model, predict_softmax,
                       train_on_pixels)

log = logging.getLogger(__name__)


@dataclass
class ScoredPixels:
    scores: np.ndarray
    truth: np.ndarray  # True for unknown (positive) pixels

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.truth = np.asarray(self.truth, dtype=bool).ravel()
        if self.scores.shape != self.truth.shape:
            raise ValueError("scores and truth must have equal length")

    @property
    def positives(self) -> int:
        return int(self.truth.sum())

    @property
    def negatives(self) -> int:
        return int(self.truth.size - self.truth.sum())


def _require(sp: ScoredPixels, negatives: bool):
    if sp.positives == 0:
        raise ValueError("metric needs at least one positive (unknown) pixel")
    if negatives and sp.negatives == 0:
        raise ValueError("metric needs at least one negative (known) pixel")


def _threshold_groups(sp: ScoredPixels):
    """Cumulative (tp, fp) at each distinct score, thresholds descending."""
    order = np.argsort(-sp.scores, kind="mergesort")
    s = sp.scores[order]
    t = sp.truth[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(t)[last]
    fp = np.cumsum(~t)[last]
    return s[last], tp, fp


def auroc(sp: ScoredPixels) -> float:
    """Probability that a positive outscores a negative; ties count one half."""
    _require(sp, negatives=True)
    _, tp, fp = _threshold_groups(sp)
    dtp = np.diff(np.r_[0, tp])
    fp_before = np.r_[0, fp[:-1]]
    dfp = np.diff(np.r_[0, fp])
    # each positive beats the negatives strictly below its group, ties half
    wins = (dtp * (sp.negatives - fp_before - dfp)).sum() + 0.5 * (dtp * dfp).sum()
    return float(wins / (sp.positives * sp.negatives))


def aupr(sp: ScoredPixels) -> float:
    """Average precision with step integration over threshold groups."""
    _require(sp, negatives=False)
    _, tp, fp = _threshold_groups(sp)
    precision = tp / (tp + fp)
    dtp = np.diff(np.r_[0, tp])
    return float((precision * dtp).sum() / sp.positives)


def fpr_at_tpr(sp: ScoredPixels, target_tpr: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR reaches ``target_tpr``."""
    if not 0 < target_tpr <= 1:
        raise ValueError("target_tpr must lie in (0, 1]")
    _require(sp, negatives=True)
    _, tp, fp = _threshold_groups(sp)
    k = int(np.argmax(tp / sp.positives >= target_tpr))
    return float(fp[k] / sp.negatives)


@dataclass
class MetricReport:
    aupr: float
    auroc: float
    fpr95: float
    aupr_random_guess: float

    FIELDS = ("aupr", "auroc", "fpr95", "aupr_random_guess")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "value"])
            for k in self.FIELDS:
                writer.writerow([k, repr(float(getattr(self, k)))])


def metric_report(sp: ScoredPixels, target_tpr: float = 0.95) -> MetricReport:
    return MetricReport(aupr(sp), auroc(sp), fpr_at_tpr(sp, target_tpr), sp.positives / sp.truth.size)


def score_scenes(model: SegModel, scenes, positive=None, include=None):
    """Pool ``1 - MSP`` over scenes.

    ``positive`` / ``include`` are optional per-scene callables returning H x W
    masks; by default positives are UNKNOWN pixels and every pixel counts.
    """
    scores, truth = [], []
    for s in scenes:
        msp = predict_softmax(model, s.features).max(axis=0)
        pos = (s.role == UNKNOWN) if positive is None else positive(s)
        keep = np.ones(pos.shape, bool) if include is None else include(s)
        scores.append((1.0 - msp)[keep])
        truth.append(pos[keep])
    return ScoredPixels(np.concatenate(scores), np.concatenate(truth))


def evaluate_anomaly(model: SegModel, test_scenes, target_tpr: float = 0.95) -> MetricReport:
    test_scenes = list(test_scenes)
    if not any(np.any(s.role == UNKNOWN) for s in test_scenes):
        raise ValueError("test scenes contain no unknown pixels")
    return metric_report(score_scenes(model, test_scenes), target_tpr)


# ----------------------------------------------------------------------------
# threshold sweep

@dataclass
class SweepCurve:
    deltas: list[float] = field(default_factory=list)
    semantic_acc: list[float] = field(default_factory=list)
    anomaly_acc: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.deltas, self.semantic_acc, self.anomaly_acc))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["delta", "semantic_acc", "anomaly_acc"])
            for row in self.rows():
                writer.writerow([repr(float(v)) for v in row])


def threshold_sweep(model: SegModel, test_scenes, deltas) -> SweepCurve:
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValueError("empty delta grid")
    if any(not 0 <= d <= 1 for d in deltas) or any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly increasing within [0, 1]")
    softmaxes = [predict_softmax(model, s.features) for s in test_scenes]
    n_known = sum(int((s.role == KNOWN).sum()) for s in test_scenes)
    n_unknown = sum(int((s.role == UNKNOWN).sum()) for s in test_scenes)
    curve = SweepCurve()
    for d in deltas:
        correct = flagged = 0
        for s, sm in zip(test_scenes, softmaxes):
            decision = classify_with_threshold(sm, d)
            known = s.role == KNOWN
            correct += int((decision[known] == s.labels[known]).sum())
            flagged += int((decision[s.role == UNKNOWN] == ANOMALY).sum())
        curve.deltas.append(d)
        curve.semantic_acc.append(correct / n_known if n_known else float("nan"))
        curve.anomaly_acc.append(flagged / n_unknown if n_unknown else float("nan"))
    return curve


def default_deltas(step: float = 0.01) -> list[float]:
    n = int(round(1.0 / step))
    return [k / n for k in range(n + 1)]


# ----------------------------------------------------------------------------
# known-unknown selection-bias pilot

@dataclass
class PilotTrainConfig:
    layer_dims: tuple[int, ...] = (32, 32)
    patch_radius: int = 1
    pretrain_epochs: int = 5
    epochs: int = 5
    lr: float = 0.1
    batch: int = 256
    alpha: float = 0.05
    target_tpr: float = 0.95
    seed: int = 0


@dataclass
class PilotResult:
    subsets: list[list[int]]
    reports: list[MetricReport | None]          # known-unknown subset pixels as positives
    anomaly_reports: list[MetricReport | None]  # true anomaly regions as positives
    failures: list[str | None]

    def _summary(self, reports, fn):
        ok = [r for r in reports if r is not None]
        if not ok:
            return {k: float("nan") for k in MetricReport.FIELDS}
        return {k: fn([getattr(r, k) for r in ok]) for k in MetricReport.FIELDS}

    def spread(self, anomaly: bool = False) -> dict[str, float]:
        return self._summary(self.anomaly_reports if anomaly else self.reports, lambda v: max(v) - min(v))

    def average(self, anomaly: bool = False) -> dict[str, float]:
        return self._summary(self.anomaly_reports if anomaly else self.reports, lambda v: float(np.mean(v)))

    def write_csv(self, path, anomaly: bool = False) -> None:
        reports = self.anomaly_reports if anomaly else self.reports
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subset", *MetricReport.FIELDS])
            for k, (subset, rep) in enumerate(zip(self.subsets, reports)):
                name = f"{k}:" + "-".join(str(c) for c in subset)
                if rep is None:
                    writer.writerow([name] + ["failed"] * 4)
                else:
                    writer.writerow([name] + [repr(float(getattr(rep, f))) for f in MetricReport.FIELDS])
            for label, summary in (("average", self.average(anomaly)), ("spread", self.spread(anomaly))):
                writer.writerow([label] + [repr(float(summary[f])) for f in MetricReport.FIELDS])


def pilot_study(corpus, partition, train_cfg: PilotTrainConfig | None = None) -> PilotResult:
    """Train one known-unknown model per class subset and score it twice.

    For each subset the training scenes are relabelled so the subset's
    classes become unknown; a fresh model is pre-trained with cross-entropy
    on the remaining classes, then fine-tuned with cross-entropy plus
    ``alpha`` times the KL-to-uniform loss on the relabelled pixels. It is
    evaluated on test pixels of the subset classes (true anomaly regions
    excluded) and on the true anomaly regions (subset pixels excluded).
    """
    from .aaft import KL, LossConfig, finetune_pixels

    cfg = train_cfg or PilotTrainConfig()
    n = corpus.class_means.shape[0]
    channels = corpus.class_means.shape[1]
    covered = sorted(c for s in partition for c in s)
    if covered != list(range(n)):
        raise ValueError("partition must cover every class exactly once")

    result = PilotResult([list(s) for s in partition], [], [], [])
    for k, subset in enumerate(partition):
        try:
            train, _ = relabel_as_known_unknown(corpus.train, subset, n)
            model = init_model(channels, n - len(subset), cfg.patch_radius, cfg.layer_dims,
                               seed=cfg.seed * 1009 + k)
            pixels = pixel_set(train, model)
            known = pixels.roles == KNOWN
            pre = train_on_pixels(model, PixelSet(pixels.patches[known], pixels.labels[known], pixels.roles[known]),
                                  cfg.pretrain_epochs, cfg.lr, cfg.batch, seed=cfg.seed + k)
            model, _ = finetune_pixels(pre.model, pixels, LossConfig(alpha=cfg.alpha, unknown_loss=KL),
                                       cfg.epochs, cfg.lr, cfg.batch, seed=cfg.seed + k, outlier_role=UNKNOWN)
            in_subset = lambda s: np.isin(s.labels, subset)
            true_anom = lambda s: s.role == UNKNOWN
            subset_sp = score_scenes(model, corpus.test, positive=in_subset,
                                     include=lambda s: ~true_anom(s))
            result.reports.append(metric_report(subset_sp, cfg.target_tpr))
            if any(np.any(true_anom(s)) for s in corpus.test):
                anom_sp = score_scenes(model, corpus.test, positive=true_anom, include=lambda s: ~in_subset(s))
                result.anomaly_reports.append(metric_report(anom_sp, cfg.target_tpr))
            else:
                result.anomaly_reports.append(None)
            result.failures.append(None)
        except (ValueError, RuntimeError, ArithmeticError) as exc:
            log.error("pilot subset %d failed: %s", k, exc)
            result.reports.append(None)
            result.anomaly_reports.append(None)
            result.failures.append(str(exc))
    return result
