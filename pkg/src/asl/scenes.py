"""Procedural scene corpus, class partitioning and the ASEG scene file format.

Scenes are piecewise-constant-plus-noise feature images: a background class
overlaid with a few rectangles and ellipses of other classes. Test scenes
additionally carry anomaly blobs whose features come from a mixture placed
in the gaps between class means.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segmodel import ANOMALY_SENTINEL, FormatError, PixelSet, SegModel, extract_patches

log = logging.getLogger(__name__)

KNOWN, UNKNOWN, SYNTH_UNKNOWN = 0, 1, 2

SCENE_MAGIC = b"ASEG"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4i")
MAX_ELEMENTS = 1 << 28

LAYOUTS = ("random", "heterogeneous", "exchangeable")


@dataclass
class Scene:
    features: np.ndarray  # (C, H, W) float64
    labels: np.ndarray    # (H, W) uint16, ANOMALY_SENTINEL for unknown pixels
    role: np.ndarray      # (H, W) uint8 in {KNOWN, UNKNOWN, SYNTH_UNKNOWN}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        self.role = np.asarray(self.role, dtype=np.uint8)
        if self.features.ndim != 3 or self.labels.shape != self.features.shape[1:] \
                or self.role.shape != self.labels.shape:
            raise ValueError("scene arrays have inconsistent shapes")

    @property
    def shape(self):
        return self.features.shape

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.role, other.role))

    def copy(self) -> "Scene":
        return Scene(self.features.copy(), self.labels.copy(), self.role.copy())


@dataclass
class CorpusConfig:
    num_classes: int = 12
    channels: int = 3
    height: int = 32
    width: int = 32
    layout: str = "random"
    class_means: np.ndarray | None = None
    sigma: float = 0.08
    separation: float = 4.0          # min class/anomaly mean distance, in units of sigma
    feature_range: tuple[float, float] = (-1.0, 1.0)
    shapes_per_scene: tuple[int, int] = (2, 6)
    shape_size: tuple[int, int] = (2, 7)   # half-extent range in pixels
    class_sigma_scale: np.ndarray | None = None
    class_size_scale: np.ndarray | None = None
    num_train: int = 200
    num_val: int = 20
    num_test: int = 50
    anomaly_components: int = 4
    anomaly_shapes: int = 1
    anomaly_fraction: float = 0.02   # mean unknown-pixel fraction in test scenes
    seed: int = 0

    def sigmas(self) -> np.ndarray:
        if self.class_sigma_scale is None:
            return self.sigma * np.ones(self.num_classes)
        scale = np.asarray(self.class_sigma_scale, dtype=float)
        return self.sigma * scale

    def size_scales(self) -> np.ndarray:
        if self.class_size_scale is None:
            return np.ones(self.num_classes)
        return np.asarray(self.class_size_scale, dtype=float)


@dataclass
class Corpus:
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    class_means: np.ndarray
    anomaly_centers: np.ndarray
    config: CorpusConfig = field(repr=False, default=None)

    def __getitem__(self, split: str) -> list[Scene]:
        return {"train": self.train, "val": self.val, "test": self.test}[split]

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _min_pairwise(points):
    if len(points) < 2:
        return np.inf
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    return d[np.triu_indices(len(points), 1)].min()


def _layout_means(cfg: CorpusConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = cfg.feature_range
    gap = cfg.separation * cfg.sigmas().max()
    margin = 3 * cfg.sigmas().max()
    n, c = cfg.num_classes, cfg.channels

    if cfg.layout == "exchangeable":
        if c < n:
            raise ValueError("exchangeable layout needs channels >= num_classes")
        # scaled one-hot means; anomaly centre on the diagonal, equidistant from all
        amp = 0.5 * (hi - lo) - margin
        means = np.full((n, c), lo + margin)
        means[np.arange(n), np.arange(n)] += amp
        anomalies = np.full((1, c), lo + margin)
        anomalies[0, :n] += amp * 0.5
        return means, anomalies

    if cfg.class_means is not None:
        means = np.asarray(cfg.class_means, dtype=float)
    else:
        means = _rejection_points(rng, n, c, lo + margin, hi - margin, gap, np.empty((0, c)))
    if cfg.layout == "heterogeneous":
        anomalies = _peripheral_points(rng, cfg.anomaly_components, means, lo + margin, hi - margin, gap)
    else:
        anomalies = _rejection_points(rng, cfg.anomaly_components, c, lo + margin, hi - margin, gap, means,
                                      max_dist=2.0 * gap)
    return means, anomalies


def _rejection_points(rng, count, dim, lo, hi, min_dist, avoid, max_dist=None, tries=200000):
    points = []
    for _ in range(tries):
        if len(points) == count:
            break
        p = rng.uniform(lo, hi, size=dim)
        ref = np.vstack([avoid, *points]) if points else avoid
        if len(ref):
            d = np.linalg.norm(ref - p, axis=1)
            if d.min() < min_dist:
                continue
            if max_dist is not None and np.linalg.norm(avoid - p, axis=1).min() > max_dist:
                continue
        points.append(p)
    if len(points) < count:
        raise ValueError("could not place well-separated means; widen feature_range or lower separation")
    return np.array(points).reshape(count, dim)


def _peripheral_points(rng, count, means, lo, hi, gap, candidates=400):
    """Anomaly centres just outside a few host classes, facing away from the rest.

    Hosts are distinct classes picked at random; each centre sits between one
    and 1.3 separations from its host, at least one separation from every
    class, and as far from the class centroid as the candidates allow.
    """
    hosts = rng.permutation(len(means))[:count]
    centroid = means.mean(axis=0)
    out = []
    for host in hosts:
        best, best_d = None, -np.inf
        for _ in range(candidates):
            direction = rng.normal(size=means.shape[1])
            p = means[host] + rng.uniform(1.0, 1.3) * gap * direction / np.linalg.norm(direction)
            if np.any(p < lo) or np.any(p > hi):
                continue
            if np.linalg.norm(means - p, axis=1).min() < gap:
                continue
            d = np.linalg.norm(p - centroid)
            if d > best_d:
                best, best_d = p, d
        if best is None:
            raise ValueError("could not place a peripheral anomaly centre; widen feature_range")
        out.append(best)
    return np.array(out).reshape(count, means.shape[1])


def validate_config(cfg: CorpusConfig) -> None:
    if cfg.layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    if cfg.num_classes < 2 or cfg.channels < 1 or cfg.height < 1 or cfg.width < 1:
        raise ValueError("num_classes >= 2 and positive channels/height/width required")
    if cfg.sigma <= 0 or cfg.separation <= 0:
        raise ValueError("sigma and separation must be positive")
    if min(cfg.num_train, cfg.num_val, cfg.num_test) < 0:
        raise ValueError("scene counts must be non-negative")
    lo, hi = cfg.feature_range
    if not lo < hi:
        raise ValueError("feature_range must be increasing")
    a, b = cfg.shapes_per_scene
    if not 0 <= a <= b:
        raise ValueError("shapes_per_scene must be a non-decreasing non-negative range")
    if not 0 <= cfg.anomaly_fraction < 1 or cfg.anomaly_shapes < 0 or cfg.anomaly_components < 1:
        raise ValueError("invalid anomaly settings")
    for name, arr in (("class_sigma_scale", cfg.class_sigma_scale), ("class_size_scale", cfg.class_size_scale)):
        if arr is not None and (len(arr) != cfg.num_classes or np.any(np.asarray(arr) <= 0)):
            raise ValueError(f"{name} needs one positive entry per class")
    if cfg.class_means is not None and np.shape(cfg.class_means) != (cfg.num_classes, cfg.channels):
        raise ValueError("class_means must be num_classes x channels")


def check_separation(cfg: CorpusConfig, means: np.ndarray, anomalies: np.ndarray) -> None:
    need = cfg.separation * cfg.sigmas().max()
    if _min_pairwise(means) < need - 1e-12:
        raise ValueError(f"class means closer than {cfg.separation} sigma")
    if len(anomalies) and np.linalg.norm(anomalies[:, None] - means[None], axis=-1).min() < need - 1e-12:
        raise ValueError(f"anomaly centres closer than {cfg.separation} sigma to a class mean")


def _paint_shape(mask_shape, rng, half_lo, half_hi, scale):
    h, w = mask_shape
    ry = max(1.0, rng.uniform(half_lo, half_hi) * scale)
    rx = max(1.0, rng.uniform(half_lo, half_hi) * scale)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _grow_blob(shape, area, rng):
    """Random 4-connected region of exactly ``area`` pixels."""
    h, w = shape
    area = int(min(max(area, 1), h * w))
    blob = np.zeros(shape, bool)
    y, x = int(rng.integers(h)), int(rng.integers(w))
    blob[y, x] = True
    frontier = [(y, x)]
    size = 1
    while size < area:
        cands = []
        for fy, fx in frontier:
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = fy + dy, fx + dx
                if 0 <= ny < h and 0 <= nx < w and not blob[ny, nx]:
                    cands.append((ny, nx))
        if not cands:
            break
        ny, nx = cands[int(rng.integers(len(cands)))]
        if not blob[ny, nx]:
            blob[ny, nx] = True
            frontier.append((ny, nx))
            size += 1
    return blob


def _make_scene(cfg, means, anomalies, rng, with_anomalies):
    n, h, w = cfg.num_classes, cfg.height, cfg.width
    sigmas, sizes = cfg.sigmas(), cfg.size_scales()
    labels = np.full((h, w), int(rng.integers(n)), dtype=np.int64)
    for _ in range(int(rng.integers(cfg.shapes_per_scene[0], cfg.shapes_per_scene[1] + 1))):
        cls = int(rng.integers(n))
        labels[_paint_shape((h, w), rng, *cfg.shape_size, sizes[cls])] = cls
    noise = rng.normal(size=(cfg.channels, h, w))
    features = means[labels].transpose(2, 0, 1) + sigmas[labels][None] * noise

    role = np.zeros((h, w), np.uint8)
    if with_anomalies and cfg.anomaly_shapes > 0 and cfg.anomaly_fraction > 0:
        per_shape = cfg.anomaly_fraction * h * w / cfg.anomaly_shapes
        for _ in range(cfg.anomaly_shapes):
            blob = _grow_blob((h, w), round(rng.uniform(0.5, 1.5) * per_shape), rng)
            centre = anomalies[int(rng.integers(len(anomalies)))]
            blob_noise = rng.normal(size=(cfg.channels, int(blob.sum())))
            features[:, blob] = centre[:, None] + cfg.sigma * blob_noise
            labels[blob] = ANOMALY_SENTINEL
            role[blob] = UNKNOWN
    lo, hi = cfg.feature_range
    return Scene(np.clip(features, lo, hi), labels.astype(np.uint16), role)


def generate_corpus(cfg: CorpusConfig, workers: int = 1) -> Corpus:
    """Deterministic train/val/test corpus for the given config and seed."""
    validate_config(cfg)
    means, anomalies = _layout_means(cfg, np.random.default_rng([cfg.seed, 0]))
    check_separation(cfg, means, anomalies)

    jobs = []
    for split_id, (split, count) in enumerate((("train", cfg.num_train), ("val", cfg.num_val),
                                                ("test", cfg.num_test)), start=1):
        jobs += [(split, split_id, i) for i in range(count)]

    def build(job):
        split, split_id, i = job
        rng = np.random.default_rng([cfg.seed, split_id, i])
        return _make_scene(cfg, means, anomalies, rng, with_anomalies=split == "test")

    from .parallel import parallel_map
    scenes = parallel_map(build, jobs, workers)
    out = {"train": [], "val": [], "test": []}
    for (split, _, _), scene in zip(jobs, scenes):
        out[split].append(scene)
    return Corpus(out["train"], out["val"], out["test"], means, anomalies, cfg)


def unknown_fraction(scenes) -> float:
    total = sum(s.role.size for s in scenes)
    return sum(int((s.role == UNKNOWN).sum()) for s in scenes) / max(total, 1)


# ----------------------------------------------------------------------------
# class subsets for the known-unknown pilot

def partition_classes(num_classes: int, k: int, seed: int = 0) -> list[list[int]]:
    """Split {0..N-1} into k disjoint subsets whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > num_classes:
        raise ValueError(f"cannot split {num_classes} classes into {k} subsets")
    perm = np.random.default_rng(seed).permutation(num_classes)
    return [sorted(int(c) for c in chunk) for chunk in np.array_split(perm, k)]


@dataclass
class IndexMap:
    """Dense re-indexing of the retained classes."""
    old_to_new: dict[int, int]

    @property
    def new_to_old(self) -> dict[int, int]:
        return {v: k for k, v in self.old_to_new.items()}

    def restore(self, labels: np.ndarray) -> np.ndarray:
        out = np.array(labels, dtype=np.uint16, copy=True)
        for new, old in self.new_to_old.items():
            out[labels == new] = old
        return out


def relabel_as_known_unknown(scenes, anomaly_subset, num_classes: int):
    """Mark subset classes as unknown and re-index the rest densely.

    Returns ``(new_scenes, index_map)``.
    """
    subset = sorted(set(int(c) for c in anomaly_subset))
    if any(not 0 <= c < num_classes for c in subset):
        raise ValueError("anomaly subset contains out-of-range classes")
    if len(subset) >= num_classes:
        raise ValueError("anomaly subset covers every class; no known classes remain")
    kept = [c for c in range(num_classes) if c not in subset]
    mapping = IndexMap({old: new for new, old in enumerate(kept)})
    lut = np.full(ANOMALY_SENTINEL + 1, ANOMALY_SENTINEL, dtype=np.uint16)
    for old, new in mapping.old_to_new.items():
        lut[old] = new
    out = []
    for s in scenes:
        labels = lut[s.labels]
        role = s.role.copy()
        role[np.isin(s.labels, subset)] = UNKNOWN
        out.append(Scene(s.features, labels, role))
    return out, mapping


# ----------------------------------------------------------------------------
# flattening scenes into training pixels

def pixel_set(scenes, model: SegModel, require_known: bool = False) -> PixelSet:
    patches, labels, roles = [], [], []
    for s in scenes:
        if s.features.shape[0] != model.channels:
            raise ValueError(f"scene has {s.features.shape[0]} channels, model expects {model.channels}")
        if require_known and np.any(s.labels == ANOMALY_SENTINEL):
            raise ValueError("training scenes must not contain anomaly labels")
        lab = s.labels.ravel().astype(np.int64)
        if np.any((lab >= model.num_classes) & (lab != ANOMALY_SENTINEL)):
            raise ValueError("scene labels exceed the model's class count")
        patches.append(extract_patches(model, s.features))
        labels.append(lab)
        roles.append(s.role.ravel())
    if not patches:
        raise ValueError("no scenes given")
    return PixelSet(np.concatenate(patches), np.concatenate(labels), np.concatenate(roles))


# ----------------------------------------------------------------------------
# scene files

def encode_scene(scene: Scene, num_classes: int) -> bytes:
    c, h, w = scene.features.shape
    return b"".join([
        SCENE_MAGIC, bytes([SCENE_VERSION]), _HEADER.pack(c, h, w, num_classes),
        scene.features.astype("<f8").tobytes(),
        scene.labels.astype("<u2").tobytes(),
        scene.role.astype(np.uint8).tobytes(),
    ])


def decode_scene(data: bytes) -> tuple[Scene, int]:
    """Parse an ASEG payload; returns ``(scene, num_classes)``."""
    if len(data) < 4 or data[:4] != SCENE_MAGIC:
        raise FormatError(0, "bad magic, not an ASEG scene file")
    if len(data) < 5:
        raise FormatError(len(data), "truncated before version byte")
    if data[4] != SCENE_VERSION:
        raise FormatError(4, f"unsupported scene version {data[4]}")
    pos = 5
    if len(data) < pos + _HEADER.size:
        raise FormatError(len(data), "truncated header")
    c, h, w, n = _HEADER.unpack_from(data, pos)
    if min(c, h, w, n) < 1:
        raise FormatError(pos, f"non-positive dimension C={c} H={h} W={w} N={n}")
    if c * h * w > MAX_ELEMENTS:
        raise FormatError(pos, f"shape overflow: {c}x{h}x{w} exceeds {MAX_ELEMENTS} elements")
    pos += _HEADER.size
    sections = [("features", c * h * w * 8), ("labels", h * w * 2), ("roles", h * w)]
    offsets = {}
    for name, size in sections:
        if len(data) < pos + size:
            raise FormatError(len(data), f"truncated {name} section (starts at byte {pos}, needs {size} bytes)")
        offsets[name] = pos
        pos += size
    if len(data) != pos:
        raise FormatError(pos, "trailing bytes after role map")
    features = np.frombuffer(data, "<f8", c * h * w, offsets["features"]).reshape(c, h, w).astype(np.float64)
    labels = np.frombuffer(data, "<u2", h * w, offsets["labels"]).reshape(h, w).astype(np.uint16)
    role = np.frombuffer(data, np.uint8, h * w, offsets["roles"]).reshape(h, w).copy()
    bad = np.flatnonzero((labels.ravel() >= n) & (labels.ravel() != ANOMALY_SENTINEL))
    if bad.size:
        raise FormatError(offsets["labels"] + 2 * int(bad[0]), "label out of range")
    bad = np.flatnonzero(role.ravel() > SYNTH_UNKNOWN)
    if bad.size:
        raise FormatError(offsets["roles"] + int(bad[0]), "invalid role byte")
    if not np.all(np.isfinite(features)):
        bad = int(np.flatnonzero(~np.isfinite(features.ravel()))[0])
        raise FormatError(offsets["features"] + 8 * bad, "non-finite feature")
    return Scene(features, labels, role), n


def write_scene(path, scene: Scene, num_classes: int) -> None:
    Path(path).write_bytes(encode_scene(scene, num_classes))


def read_scene(path) -> Scene:
    return decode_scene(Path(path).read_bytes())[0]


def write_manifest(path, entries) -> None:
    """``entries``: iterable of (split, relative path[, adversarial class])."""
    lines = [" ".join(str(f) for f in entry) for entry in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> list[tuple]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'split path [class]'")
        if len(parts) == 3:
            parts[2] = int(parts[2])
        entries.append(tuple(parts))
    return entries


def save_corpus(corpus: Corpus, out_dir, num_classes: int) -> list[Path]:
    out_dir = Path(out_dir)
    written, entries = [], []
    for split, scenes in corpus.splits().items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for i, scene in enumerate(scenes):
            rel = Path(split) / f"{i:05d}.aseg"
            write_scene(out_dir / rel, scene, num_classes)
            written.append(out_dir / rel)
            entries.append((split, rel.as_posix()))
    write_manifest(out_dir / "manifest.txt", entries)
    written.append(out_dir / "manifest.txt")
    return written


def load_split(manifest_path, split: str) -> list[Scene]:
    root = Path(manifest_path).parent
    return [read_scene(root / e[1]) for e in read_manifest(manifest_path) if e[0] == split]
