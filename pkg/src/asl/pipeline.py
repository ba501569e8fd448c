"""Run configuration, run directories and the pipeline stages behind the CLI.

A run directory holds every artifact of one experiment::

    config.ini            snapshot of the validated configuration
    run_manifest.json     version, stage timestamps, sha256 of every file
    corpus/               manifest.txt plus train/ val/ test/ scene files
    model/                pretrained.aslm, finetuned.aslm, per-epoch CSV logs
    aux/                  MGU scenes, traces and manifest
    eval/<checkpoint>/    metrics.csv and one PGM heatmap per test scene
    sweep/curves.csv
    pilot/pilot.csv, pilot/pilot_anomaly.csv
"""

from __future__ import annotations

import configparser
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .aaft import ER, KL, LossConfig, finetune
from .evalkit import PilotTrainConfig, default_deltas, evaluate_anomaly, pilot_study, threshold_sweep
from .mgu import AuxiliaryScene, MguConfig, MguTrace, build_auxiliary_set, save_auxiliary_set
from .parallel import worker_count
from .scenes import (LAYOUTS, CorpusConfig, generate_corpus, load_split, partition_classes, read_manifest,
                     read_scene, save_corpus, validate_config)
from .segmodel import init_model, load_checkpoint, predict_softmax, save_checkpoint, train_supervised

log = logging.getLogger(__name__)

MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    def __init__(self, path, stage):
        super().__init__(f"{stage}: missing prerequisite {path}")
        self.path = Path(path)


class RunLocked(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# configuration

def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt_floats(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else _floats(text)


def _opt_float(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else float(text)


@dataclass
class CorpusBlock:
    num_classes: int = 12
    channels: int = 3
    height: int = 32
    width: int = 32
    layout: str = "random"
    sigma: float = 0.08
    separation: float = 4.0
    feature_range: tuple = (-1.0, 1.0)
    shapes_per_scene: tuple = (2, 6)
    shape_size: tuple = (2, 7)
    class_sigma_scale: tuple | None = None
    class_size_scale: tuple | None = None
    num_train: int = 200
    num_val: int = 20
    num_test: int = 50
    anomaly_components: int = 4
    anomaly_shapes: int = 1
    anomaly_fraction: float = 0.02

    _parsers = {"feature_range": _floats, "shapes_per_scene": _ints, "shape_size": _ints,
                "class_sigma_scale": _opt_floats, "class_size_scale": _opt_floats}

    def to_corpus_config(self, seed: int) -> CorpusConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("feature_range", "shapes_per_scene", "shape_size"):
            kw[key] = tuple(kw[key])
        return CorpusConfig(seed=seed, **kw)

    def validate(self):
        for key, n in (("feature_range", 2), ("shapes_per_scene", 2), ("shape_size", 2)):
            if len(getattr(self, key)) != n:
                raise ValueError(f"{key} needs {n} values")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {', '.join(LAYOUTS)}")
        validate_config(self.to_corpus_config(0))


@dataclass
class ModelBlock:
    patch_radius: int = 1
    layer_dims: tuple = (32, 32)

    _parsers = {"layer_dims": _ints}

    def validate(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be non-negative")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer widths must be positive")


@dataclass
class PretrainBlock:
    epochs: int = 10
    lr: float = 0.1
    batch: int = 256

    def validate(self):
        _check_schedule(self)


@dataclass
class MguBlock:
    step_size: float = MguConfig.step_size
    max_iters: int = 200
    per_class_budget: int = 10
    clip_lo: float = -1.0
    clip_hi: float = 1.0

    def to_mgu_config(self, seed: int) -> MguConfig:
        return MguConfig(self.step_size, self.max_iters, self.clip_lo, self.clip_hi, self.per_class_budget, seed=seed)

    def validate(self):
        self.to_mgu_config(0).validate()


@dataclass
class AaftBlock:
    alpha: float = 0.05
    loss: str = ER
    regularizer: float | None = None
    epochs: int = 10
    lr: float = 0.1
    batch: int = 256

    _parsers = {"loss": lambda t: t.strip().upper(), "regularizer": _opt_float}

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.loss, self.regularizer)

    def validate(self):
        if self.loss not in (KL, ER):
            raise ValueError("loss must be KL or ER")
        self.loss_config().validate(2)
        _check_schedule(self)


@dataclass
class EvalBlock:
    delta_step: float = 0.01
    target_tpr: float = 0.95

    def deltas(self):
        return default_deltas(self.delta_step)

    def validate(self):
        if not 0 < self.delta_step <= 1:
            raise ValueError("delta_step must lie in (0, 1]")
        if abs(round(1 / self.delta_step) * self.delta_step - 1) > 1e-9:
            raise ValueError("delta_step must divide 1")
        if not 0 < self.target_tpr <= 1:
            raise ValueError("target_tpr must lie in (0, 1]")


@dataclass
class PilotBlock:
    subsets: int = 4
    pretrain_epochs: int = 5
    epochs: int = 5
    lr: float = 0.1
    batch: int = 256
    alpha: float = 0.05

    def validate(self):
        if self.subsets < 2:
            raise ValueError("subsets must be at least 2")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        _check_schedule(self)


@dataclass
class RunBlock:
    seed: int = 0
    workers: int = 0  # 0: one per CPU; ASL_THREADS caps either way

    def validate(self):
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.workers < 0:
            raise ValueError("workers must be non-negative")


def _check_schedule(block):
    if block.epochs < 0:
        raise ValueError("epochs must be non-negative")
    if block.lr <= 0:
        raise ValueError("lr must be positive")
    if block.batch < 1:
        raise ValueError("batch must be at least 1")


SECTIONS = {"run": RunBlock, "corpus": CorpusBlock, "model": ModelBlock, "pretrain": PretrainBlock,
            "mgu": MguBlock, "aaft": AaftBlock, "eval": EvalBlock, "pilot": PilotBlock}


@dataclass
class RunConfig:
    run: RunBlock = field(default_factory=RunBlock)
    corpus: CorpusBlock = field(default_factory=CorpusBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    pretrain: PretrainBlock = field(default_factory=PretrainBlock)
    mgu: MguBlock = field(default_factory=MguBlock)
    aaft: AaftBlock = field(default_factory=AaftBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    pilot: PilotBlock = field(default_factory=PilotBlock)

    @property
    def seed(self) -> int:
        return self.run.seed

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        if self.pilot.subsets > self.corpus.num_classes:
            raise ConfigError("[pilot] more subsets than classes")

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            block = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(block):
                value = getattr(block, f.name)
                if value is None:
                    value = "none"
                elif isinstance(value, (tuple, list)):
                    value = " ".join(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)) for v in value)
                else:
                    value = repr(value) if isinstance(value, float) else str(value)
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``[section]`` / ``key = value`` text; unknown names are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        block = getattr(cfg, section)
        known = {f.name: f for f in fields(block)}
        parsers = getattr(type(block), "_parsers", {})
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            default = getattr(type(block)(), key)
            try:
                if key in parsers:
                    value = parsers[key](raw)
                elif isinstance(default, bool):
                    value = parser.getboolean(section, key)
                elif isinstance(default, int):
                    value = int(raw)
                elif isinstance(default, float):
                    value = float(raw)
                else:
                    value = raw.strip()
            except ValueError:
                raise ConfigError(f"{source}: bad value {raw!r} for {key} in [{section}]") from None
            setattr(block, key, value)
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    cfg = parse_config(text, str(path))
    if seed is not None:
        cfg.run.seed = seed
    cfg.validate()
    return cfg


# ----------------------------------------------------------------------------
# run directory

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    LOCK = ".lock"
    MANIFEST = "run_manifest.json"

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def __truediv__(self, rel) -> Path:
        return self.root / rel

    def require(self, rel, stage) -> Path:
        path = self.root / rel
        if not path.exists():
            raise MissingPrerequisite(path, stage)
        return path

    @contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / self.LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run directory {self.root} is locked by another writer (remove {lock} if stale)")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def _manifest(self) -> dict:
        path = self.root / self.MANIFEST
        if path.exists():
            try:
                return json.loads(path.read_text())
            except json.JSONDecodeError:
                log.warning("unreadable %s rewritten", path)
        return {"tool": "asl", "stages": {}}

    def inventory(self) -> dict[str, str]:
        skip = {self.LOCK, self.MANIFEST}
        files = sorted(p for p in self.root.rglob("*") if p.is_file() and p.name not in skip)
        return {p.relative_to(self.root).as_posix(): sha256_file(p) for p in files}

    def record(self, stage: str, started: str) -> None:
        man = self._manifest()
        man["version"] = __version__
        man["seed"] = self.cfg.seed
        man["config"] = self.cfg.to_text()
        man.setdefault("stages", {})[stage] = {"started": started, "finished": _now()}
        man["files"] = self.inventory()
        (self.root / self.MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# stages

CORPUS_MANIFEST = "corpus/manifest.txt"
PRETRAINED = "model/pretrained.aslm"
FINETUNED = "model/finetuned.aslm"
AUX_MANIFEST = "aux/manifest.txt"


def _workers(cfg: RunConfig) -> int:
    return worker_count(cfg.run.workers or os.cpu_count() or 1)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) of an H x W array in [0, 1]."""
    img = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    pixels = parts[4]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def _load_corpus_split(run: RunDir, split: str, stage: str):
    manifest = run.require(CORPUS_MANIFEST, stage)
    return load_split(manifest, split)


def stage_gen_data(run: RunDir) -> None:
    cfg = run.cfg
    corpus = generate_corpus(cfg.corpus.to_corpus_config(cfg.seed), workers=_workers(cfg))
    save_corpus(corpus, run / "corpus", cfg.corpus.num_classes)
    _write_rows(run / "corpus/class_means.csv", ["class"] + [f"c{k}" for k in range(cfg.corpus.channels)],
                [[k] + [repr(float(v)) for v in row] for k, row in enumerate(corpus.class_means)])


def _fresh_model(cfg: RunConfig):
    return init_model(cfg.corpus.channels, cfg.corpus.num_classes, cfg.model.patch_radius,
                      tuple(cfg.model.layer_dims), seed=cfg.seed)


def stage_train(run: RunDir) -> None:
    cfg = run.cfg
    train = _load_corpus_split(run, "train", "train")
    if not train:
        raise ValueError("corpus has no training scenes")
    result = train_supervised(_fresh_model(cfg), train, cfg.pretrain.epochs, cfg.pretrain.lr,
                              cfg.pretrain.batch, seed=cfg.seed)
    (run / "model").mkdir(exist_ok=True)
    save_checkpoint(run / PRETRAINED, result.model)
    _write_rows(run / "model/pretrain.csv", ["epoch", "mean_ce"],
                [[0, repr(result.initial_loss)]] + [[k, repr(v)] for k, v in enumerate(result.loss_trace, 1)])


def stage_mgu(run: RunDir) -> None:
    cfg = run.cfg
    model = load_checkpoint(run.require(PRETRAINED, "mgu"))
    train = _load_corpus_split(run, "train", "mgu")
    _check_model(model, cfg, PRETRAINED)
    aux = build_auxiliary_set(model, train, cfg.mgu.to_mgu_config(cfg.seed), workers=_workers(cfg))
    save_auxiliary_set(aux, run / "aux", cfg.corpus.num_classes)
    done = sum(a.trace.termination == "EMPTY_SET" for a in aux)
    log.info("mgu: %d auxiliary scenes, %d ended with an empty active set", len(aux), done)


def _load_aux(run: RunDir, stage: str) -> list[AuxiliaryScene]:
    manifest = run.require(AUX_MANIFEST, stage)
    root = manifest.parent
    return [AuxiliaryScene(read_scene(root / e[1]), int(e[2]), -1, MguTrace()) for e in read_manifest(manifest)]


def stage_finetune(run: RunDir) -> None:
    cfg = run.cfg
    aux = _load_aux(run, "finetune")
    model = load_checkpoint(run.require(PRETRAINED, "finetune"))
    _check_model(model, cfg, PRETRAINED)
    train = _load_corpus_split(run, "train", "finetune")
    tuned, report = finetune(model, train, aux, cfg.aaft.loss_config(), cfg.aaft.epochs, cfg.aaft.lr,
                             cfg.aaft.batch, seed=cfg.seed)
    save_checkpoint(run / FINETUNED, tuned)
    report.write_csv(run / "model/finetune.csv")


def _check_model(model, cfg: RunConfig, name: str) -> None:
    if (model.channels, model.num_classes) != (cfg.corpus.channels, cfg.corpus.num_classes):
        raise ValueError(f"{name}: checkpoint is C={model.channels}, N={model.num_classes}; "
                         f"config says C={cfg.corpus.channels}, N={cfg.corpus.num_classes}")


def _test_scenes(run: RunDir, stage: str):
    test = _load_corpus_split(run, "test", stage)
    if not test:
        raise ValueError(f"{stage}: the corpus has no test scenes (corpus.num_test = 0)")
    return test


def stage_eval(run: RunDir) -> None:
    cfg = run.cfg
    pretrained = run.require(PRETRAINED, "eval")
    test = _test_scenes(run, "eval")
    checkpoints = [("pretrained", pretrained)]
    if (run / FINETUNED).exists():
        checkpoints.append(("finetuned", run / FINETUNED))
    else:
        log.warning("eval: %s not found; evaluating the pre-trained model only", run / FINETUNED)
    for name, path in checkpoints:
        model = load_checkpoint(path)
        _check_model(model, cfg, path.name)
        out = run / "eval" / name
        (out / "heatmaps").mkdir(parents=True, exist_ok=True)
        evaluate_anomaly(model, test, cfg.eval.target_tpr).write_csv(out / "metrics.csv")
        for k, scene in enumerate(test):
            score = 1.0 - predict_softmax(model, scene.features).max(axis=0)
            write_pgm(out / "heatmaps" / f"{k:05d}.pgm", score)


def stage_sweep(run: RunDir) -> None:
    cfg = run.cfg
    model = load_checkpoint(run.require(FINETUNED, "sweep"))
    _check_model(model, cfg, FINETUNED)
    test = _test_scenes(run, "sweep")
    (run / "sweep").mkdir(exist_ok=True)
    threshold_sweep(model, test, cfg.eval.deltas()).write_csv(run / "sweep/curves.csv")


def stage_pilot(run: RunDir) -> None:
    from .scenes import Corpus

    cfg = run.cfg
    manifest = run.require(CORPUS_MANIFEST, "pilot")
    train, test = load_split(manifest, "train"), load_split(manifest, "test")
    if not test:
        raise ValueError("pilot: the corpus has no test scenes (corpus.num_test = 0)")
    means = _read_class_means(run.require("corpus/class_means.csv", "pilot"))
    corpus = Corpus(train, [], test, means, np.zeros((0, means.shape[1])))
    partition = partition_classes(cfg.corpus.num_classes, cfg.pilot.subsets, cfg.seed)
    p = cfg.pilot
    result = pilot_study(corpus, partition, PilotTrainConfig(tuple(cfg.model.layer_dims), cfg.model.patch_radius,
                                                             p.pretrain_epochs, p.epochs, p.lr, p.batch, p.alpha,
                                                             cfg.eval.target_tpr, cfg.seed))
    (run / "pilot").mkdir(exist_ok=True)
    result.write_csv(run / "pilot/pilot.csv")
    result.write_csv(run / "pilot/pilot_anomaly.csv", anomaly=True)
    if all(f is not None for f in result.failures):
        raise RuntimeError("pilot: every subset failed")


def _read_class_means(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in row[1:]] for row in rows])


STAGES = {"gen-data": stage_gen_data, "train": stage_train, "mgu": stage_mgu, "finetune": stage_finetune,
          "eval": stage_eval, "sweep": stage_sweep, "pilot": stage_pilot}
PIPELINE = ("gen-data", "train", "mgu", "finetune", "eval", "sweep", "pilot")
PREREQUISITES = {"gen-data": (), "train": (CORPUS_MANIFEST,), "mgu": (PRETRAINED, CORPUS_MANIFEST),
                 "finetune": (PRETRAINED, AUX_MANIFEST, CORPUS_MANIFEST), "eval": (PRETRAINED, CORPUS_MANIFEST),
                 "sweep": (FINETUNED, CORPUS_MANIFEST), "pilot": (CORPUS_MANIFEST,)}


def run_stage(name: str, root, cfg: RunConfig) -> RunDir:
    """Validate, lock the run directory, run one stage and refresh the manifest."""
    cfg.validate()
    run = RunDir(root, cfg)
    for rel in PREREQUISITES[name]:
        run.require(rel, name)
    with run.locked():
        started = _now()
        snapshot = run / "config.ini"
        text = cfg.to_text()
        if snapshot.exists() and snapshot.read_text() != text:
            log.warning("config differs from the snapshot in %s; snapshot replaced", snapshot)
        snapshot.write_text(text)
        STAGES[name](run)
        run.record(name, started)
    return run
