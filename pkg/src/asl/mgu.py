"""Masked Gradient Update: turn one class's pixels into synthetic unknowns.

With the model frozen, the pixels of an adversarial class that the model
still predicts as that class are moved down the gradient of their mean
softmax probability for it. A pixel stops moving, permanently, the first
time its prediction flips. Every other pixel is left untouched.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore
from .parallel import parallel_map
from .scenes import SYNTH_UNKNOWN, Scene
from .segmodel import ANOMALY_SENTINEL, SegModel, build_graph

log = logging.getLogger(__name__)

PERMANENT_REMOVAL = "PERMANENT_REMOVAL"
EMPTY_SET = "EMPTY_SET"
ITER_CAP = "ITER_CAP"


class MguError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class MguConfig:
    # The loss is a mean over active pixels, so each pixel's gradient shrinks
    # with |P|; 20 was picked with eta_sweep on the default corpus.
    step_size: float = 20.0
    max_iters: int = 200
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    per_class_budget: int = 10
    reinclusion_policy: str = PERMANENT_REMOVAL
    seed: int = 0

    def validate(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        if self.per_class_budget < 1:
            raise ValueError("per_class_budget must be at least 1")
        if self.reinclusion_policy != PERMANENT_REMOVAL:
            raise ValueError(f"unsupported reinclusion policy {self.reinclusion_policy!r}")


@dataclass
class MguTrace:
    active_counts: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    termination: str = EMPTY_SET
    # pixels of I still predicted as the adversarial class at termination; frozen
    # pixels can drift back when a moving neighbour shares their patch
    residual: int = 0

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "active_count", "loss"])
            for it, (n, loss) in enumerate(zip(self.active_counts, self.losses)):
                writer.writerow([it, n, repr(float(loss))])


def pixel_index_set(mask: np.ndarray) -> np.ndarray:
    """Sorted (h, w) pairs of the true entries of a boolean H x W mask."""
    return np.argwhere(np.asarray(mask, dtype=bool))


def _as_mask(active, shape) -> np.ndarray:
    arr = np.asarray(active)
    if arr.dtype == bool and arr.shape == shape:
        return arr
    mask = np.zeros(shape, bool)
    if arr.size:
        arr = arr.reshape(-1, 2)
        if np.any(arr < 0) or np.any(arr >= np.array(shape)):
            raise ValueError("pixel index out of range")
        mask[arr[:, 0], arr[:, 1]] = True
    return mask


class _MguGraph:
    """Image -> softmax graph, forked per iteration to attach the masked loss."""

    def __init__(self, model: SegModel):
        self.model = model
        self.mg = build_graph(model, "image")
        self.softmax = self.mg.graph.softmax(self.mg.logits)

    def probabilities(self, image):
        values = gradcore.forward(self.mg.graph, self.mg.bindings(self.model, image))
        return values, values[self.softmax]

    def loss_and_grad(self, image, values, active_mask, y_adv):
        g = self.mg.graph.fork()
        target = g.pick(self.softmax, np.full(active_mask.size, y_adv))
        loss = g.masked_mean(target, active_mask.ravel())
        values = gradcore.forward(g, self.mg.bindings(self.model, image), prefix=values)
        grads = gradcore.backward(g, values, loss)
        return float(values[loss]), grads.input_grads[self.mg.source]


def mgu_loss(model: SegModel, image: np.ndarray, active, y_adv: int) -> float:
    """Mean softmax probability of ``y_adv`` over the active pixels."""
    if not 0 <= y_adv < model.num_classes:
        raise ValueError(f"adversarial class {y_adv} out of range")
    mask = _as_mask(active, np.shape(image)[1:])
    if not mask.any():
        raise ValueError("active pixel set is empty")
    mgg = _MguGraph(model)
    values, _ = mgg.probabilities(image)
    return mgg.loss_and_grad(image, values, mask, y_adv)[0]


def mgu_loss_grad(model: SegModel, image: np.ndarray, active, y_adv: int) -> tuple[float, np.ndarray]:
    mask = _as_mask(active, np.shape(image)[1:])
    if not mask.any():
        raise ValueError("active pixel set is empty")
    mgg = _MguGraph(model)
    values, _ = mgg.probabilities(image)
    return mgg.loss_and_grad(image, values, mask, y_adv)


def masked_gradient_update(model: SegModel, scene: Scene, y_adv: int, cfg: MguConfig) -> tuple[Scene, MguTrace]:
    """Run MGU on one scene. Returns the auxiliary scene and its trace."""
    cfg.validate()
    if not 0 <= y_adv < model.num_classes:
        raise ValueError(f"adversarial class {y_adv} out of range")
    target = scene.labels == y_adv
    trace = MguTrace()
    if not target.any():
        return scene.copy(), trace

    h, w = target.shape
    image = scene.features.copy()
    mgg = _MguGraph(model)
    active = target.copy()
    while True:
        values, probs = mgg.probabilities(image)
        predicted = probs.argmax(axis=1).reshape(h, w) == y_adv
        active &= predicted
        if not active.any() or trace.iterations >= cfg.max_iters:
            trace.termination = ITER_CAP if active.any() else EMPTY_SET
            trace.residual = int((predicted & target).sum())
            break
        loss, grad = mgg.loss_and_grad(image, values, active, y_adv)
        trace.active_counts.append(int(active.sum()))
        trace.losses.append(loss)
        step = grad[:, active]
        if not np.all(np.isfinite(step)):
            raise MguError("non-finite input gradient", trace)
        image[:, active] = np.clip(image[:, active] - cfg.step_size * step, cfg.clip_lo, cfg.clip_hi)

    labels = scene.labels.copy()
    labels[target] = ANOMALY_SENTINEL
    role = scene.role.copy()
    role[target] = SYNTH_UNKNOWN
    return Scene(image, labels, role), trace


@dataclass
class AuxiliaryScene:
    scene: Scene
    adv_class: int
    source_index: int
    trace: MguTrace

    @property
    def empty(self) -> bool:
        return not np.any(self.scene.role == SYNTH_UNKNOWN)


def select_scenes(train_scenes, num_classes: int, budget: int, seed: int) -> dict[int, list[int]]:
    """Per class, ``budget`` scene indices containing it, taken round-robin from a seeded start."""
    rng = np.random.default_rng(seed)
    picks = {}
    for c in range(num_classes):
        holders = [i for i, s in enumerate(train_scenes) if np.any(s.labels == c)]
        start = int(rng.integers(len(holders))) if holders else 0
        if not holders:
            log.warning("class %d absent from the corpus; skipped", c)
            picks[c] = []
            continue
        if len(holders) < budget:
            log.warning("class %d appears in only %d scenes (budget %d)", c, len(holders), budget)
        picks[c] = [holders[(start + k) % len(holders)] for k in range(min(budget, len(holders)))]
    return picks


def build_auxiliary_set(model: SegModel, train_scenes, cfg: MguConfig, workers: int = 1) -> list[AuxiliaryScene]:
    cfg.validate()
    picks = select_scenes(train_scenes, model.num_classes, cfg.per_class_budget, cfg.seed)
    jobs = [(c, i) for c in range(model.num_classes) for i in picks[c]]

    def run(job):
        c, i = job
        scene, trace = masked_gradient_update(model, train_scenes[i], c, cfg)
        return AuxiliaryScene(scene, c, i, trace)

    return parallel_map(run, jobs, workers)


def save_auxiliary_set(aux, out_dir, num_classes: int) -> list[Path]:
    from .scenes import write_manifest, write_scene

    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    written, entries = [], []
    for k, item in enumerate(aux):
        rel = Path("scenes") / f"{k:05d}_c{item.adv_class:02d}.aseg"
        write_scene(out_dir / rel, item.scene, num_classes)
        trace_path = out_dir / "traces" / f"{k:05d}_c{item.adv_class:02d}.csv"
        item.trace.write_csv(trace_path)
        entries.append(("aux", rel.as_posix(), item.adv_class))
        written += [out_dir / rel, trace_path]
    write_manifest(out_dir / "manifest.txt", entries)
    written.append(out_dir / "manifest.txt")
    return written


@dataclass
class EtaSweepRow:
    step_size: float
    empty_fraction: float
    median_iterations: float
    max_iterations: int


def eta_sweep(model: SegModel, train_scenes, step_sizes, base: MguConfig | None = None,
              workers: int = 1) -> list[EtaSweepRow]:
    """Run the auxiliary-set builder once per step size and summarise termination."""
    from dataclasses import replace

    base = base or MguConfig()
    rows = []
    for eta in step_sizes:
        aux = build_auxiliary_set(model, train_scenes, replace(base, step_size=float(eta)), workers)
        runs = [a.trace for a in aux]
        if not runs:
            raise ValueError("no auxiliary scenes were produced")
        its = [t.iterations for t in runs]
        rows.append(EtaSweepRow(float(eta), float(np.mean([t.termination == EMPTY_SET for t in runs])),
                                float(np.median(its)), int(max(its))))
    return rows
