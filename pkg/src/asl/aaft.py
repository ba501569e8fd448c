"""Anomaly-aware fine-tuning: KL-to-uniform and entropy-ratio unknown losses.

The fine-tuning objective is mean cross-entropy over known pixels plus
``alpha`` times the mean unknown loss over synthetic-unknown pixels.
All logarithms are natural and every probability is floored at 1e-12
before a log is taken.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .scenes import SYNTH_UNKNOWN, KNOWN, pixel_set
from .segmodel import PixelSet, SegModel, batch_order, build_graph, patch_logits, sgd_step

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
KL, ER = "KL", "ER"


def _floored(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < PROB_FLOOR):
        log.debug("probability below %g floored", PROB_FLOOR)
    return np.maximum(p, PROB_FLOOR)


def _check_row(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] < 2:
        raise ValueError("need a distribution over at least two classes")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("rows must be non-negative and sum to 1")
    return p


def uniform_entropy(n: int) -> float:
    return float(np.log(n))


def kl_uniform_loss(p) -> float | np.ndarray:
    """KL(U || p) = -sum_i (1/N) log(N p_i), over the last axis."""
    p = _check_row(p)
    n = p.shape[-1]
    return -np.log(_floored(p) * n).sum(axis=-1) / n


def entropy(p) -> float | np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(_floored(p))).sum(axis=-1)


def entropy_ratio_loss(p, r: float) -> float | np.ndarray:
    """(H_uniform + r) / (H(p) + r) - 1, over the last axis."""
    if r <= 0:
        raise ValueError("regularizer r must be positive")
    p = _check_row(p)
    return (uniform_entropy(p.shape[-1]) + r) / (entropy(p) + r) - 1.0


def default_regularizer(n: int) -> float:
    """One percent of the uniform entropy over ``n`` classes."""
    if n < 2:
        raise ValueError("need at least two classes")
    return uniform_entropy(n) * 0.01


@dataclass
class LossConfig:
    alpha: float = 0.05
    unknown_loss: str = ER
    regularizer: float | None = None  # defaults to default_regularizer(N)

    def validate(self, num_classes: int) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.unknown_loss not in (KL, ER):
            raise ValueError("unknown_loss must be KL or ER")
        if self.regularizer is not None and self.regularizer <= 0:
            raise ValueError("regularizer r must be positive")

    def r(self, num_classes: int) -> float:
        return default_regularizer(num_classes) if self.regularizer is None else self.regularizer


# ----------------------------------------------------------------------------
# objective graph

def _unknown_term(g, logits, num_classes, cfg: LossConfig):
    probs = g.softmax(logits)
    logp = g.log(probs, floor=PROB_FLOOR)
    if cfg.unknown_loss == KL:
        # -(1/N) sum log p_i - log N
        return g.add_scalar(g.scale(g.sum(logp, axis=1), -1.0 / num_classes), -np.log(num_classes))
    ent = g.neg(g.sum(g.mul(probs, logp), axis=1))
    r = cfg.r(num_classes)
    return g.add_scalar(g.div(g.const(uniform_entropy(num_classes) + r), g.add_scalar(ent, r)), -1.0)


def objective_graph(model: SegModel, labels, known, unknown, cfg: LossConfig):
    """Returns (model graph, total, known term, unknown term) node ids."""
    mg = build_graph(model, "patches")
    g = mg.graph
    safe = np.where(known, labels, 0)
    nll = g.neg(g.pick(g.log_softmax(mg.logits), safe))
    known_term = g.masked_mean(nll, known)
    unknown_term = g.masked_mean(_unknown_term(g, mg.logits, model.num_classes, cfg), unknown)
    total = g.add(known_term, g.scale(unknown_term, cfg.alpha))
    return mg, total, known_term, unknown_term


def combined_objective(model: SegModel, patches, labels, roles, cfg: LossConfig,
                       outlier_role: int = SYNTH_UNKNOWN):
    """Objective value and flat parameter gradient for one pixel batch."""
    roles = np.asarray(roles)
    known = roles == KNOWN
    unknown = roles == outlier_role
    if not known.any() and not unknown.any():
        raise ValueError("batch has neither known nor outlier pixels")
    mg, total, _, _ = objective_graph(model, np.asarray(labels), known, unknown, cfg)
    value, grads = gradcore.value_and_grad(mg.graph, mg.bindings(model, patches), total)
    return value, mg.flat_grad(grads)


def corpus_losses(model: SegModel, pixels: PixelSet, cfg: LossConfig, outlier_role: int = SYNTH_UNKNOWN,
                  chunk: int = 65536) -> tuple[float, float]:
    """(mean known cross-entropy, mean unknown loss) over a whole pixel set."""
    ce_sum = unk_sum = 0.0
    n_known = n_unk = 0
    r = cfg.r(model.num_classes)
    for start in range(0, len(pixels), chunk):
        sl = slice(start, start + chunk)
        logits = patch_logits(model, pixels.patches[sl])
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        roles = pixels.roles[sl]
        known = roles == KNOWN
        unk = roles == outlier_role
        if known.any():
            ce_sum -= logp[known, pixels.labels[sl][known]].sum()
            n_known += int(known.sum())
        if unk.any():
            p = np.exp(logp[unk])
            p /= p.sum(axis=1, keepdims=True)
            if cfg.unknown_loss == KL:
                unk_sum += kl_uniform_loss(p).sum()
            else:
                unk_sum += entropy_ratio_loss(p, r).sum()
            n_unk += int(unk.sum())
    return ce_sum / max(n_known, 1), unk_sum / max(n_unk, 1)


# ----------------------------------------------------------------------------
# fine-tuning loop

@dataclass
class FinetuneReport:
    mean_known_loss: list[float] = field(default_factory=list)
    mean_unknown_loss: list[float] = field(default_factory=list)
    initial_known_loss: float = float("nan")
    initial_unknown_loss: float = float("nan")

    @property
    def epochs(self) -> int:
        return len(self.mean_known_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_Lk", "mean_unknown_loss"])
            for k, (lk, lu) in enumerate(zip(self.mean_known_loss, self.mean_unknown_loss), start=1):
                writer.writerow([k, repr(float(lk)), repr(float(lu))])


def finetune_pixels(model: SegModel, pixels: PixelSet, cfg: LossConfig, epochs: int, lr: float,
                    batch: int, seed: int, outlier_role: int = SYNTH_UNKNOWN,
                    check: bool = True) -> tuple[SegModel, FinetuneReport]:
    cfg.validate(model.num_classes)
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not np.any(pixels.roles == outlier_role):
        raise ValueError("no outlier pixels to fine-tune on")
    model = model.copy()
    rng = np.random.default_rng(seed)
    report = FinetuneReport()
    report.initial_known_loss, report.initial_unknown_loss = corpus_losses(model, pixels, cfg, outlier_role)
    for _ in range(epochs):
        for idx in batch_order(len(pixels), batch, rng):
            _, grad = combined_objective(model, pixels.patches[idx], pixels.labels[idx], pixels.roles[idx],
                                         cfg, outlier_role)
            sgd_step(model, grad, lr)
        lk, lu = corpus_losses(model, pixels, cfg, outlier_role)
        report.mean_known_loss.append(lk)
        report.mean_unknown_loss.append(lu)
    if check and epochs > 0 and cfg.alpha > 0 and not report.mean_unknown_loss[-1] < report.initial_unknown_loss:
        raise RuntimeError("fine-tuning did not reduce the unknown loss "
                           f"({report.initial_unknown_loss:.6f} -> {report.mean_unknown_loss[-1]:.6f})")
    return model, report


def finetune(model: SegModel, train_scenes, auxiliary_scenes, cfg: LossConfig, epochs: int = 10,
             lr: float = 0.1, batch: int = 256, seed: int = 0) -> tuple[SegModel, FinetuneReport]:
    """Fine-tune on training scenes plus MGU auxiliary scenes.

    Batches are uniform draws over the pooled pixels, so known and
    synthetic-unknown pixels appear in proportion to their corpus frequency.
    """
    aux = [getattr(a, "scene", a) for a in auxiliary_scenes]
    if not aux:
        raise ValueError("auxiliary set is empty")
    pixels = pixel_set(list(train_scenes) + aux, model)
    return finetune_pixels(model, pixels, cfg, epochs, lr, batch, seed)
