"""Few-shot data: synthetic glyph pools, PGM directory pools, episode sampling."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SPLITS = ("meta_train", "meta_validation", "meta_test")
_SPLIT_ALIASES = {"train": "meta_train", "val": "meta_validation", "validation": "meta_validation", "test": "meta_test"}


@dataclass
class ClassRecord:
    class_id: int
    name: str
    examples: np.ndarray  # (n, C, H, W) in [0, 1]


@dataclass
class ClassPool:
    split: str
    classes: list[ClassRecord]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids in pool")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def image_shape(self) -> tuple:
        return self.classes[0].examples.shape[1:]


@dataclass
class TaskSpec:
    way: int = 5
    shot: int = 1
    targets_per_class: int = 5
    variable_shot: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.targets_per_class < 1:
            raise ValueError(f"invalid task spec {self}")
        if self.variable_shot is not None:
            lo, hi = self.variable_shot
            if not 1 <= lo <= hi:
                raise ValueError(f"invalid variable_shot range {self.variable_shot}")
            self.variable_shot = (int(lo), int(hi))

    @property
    def max_shot(self) -> int:
        return self.variable_shot[1] if self.variable_shot else self.shot


@dataclass
class Episode:
    context_inputs: np.ndarray
    context_labels: np.ndarray
    target_inputs: np.ndarray
    target_labels: np.ndarray
    way: int
    shot: int
    class_ids: tuple = field(default=())

    def __post_init__(self):
        if len(self.context_inputs) != len(self.context_labels) or len(self.target_inputs) != len(self.target_labels):
            raise ValueError("inputs and labels disagree in length")


# synthetic glyphs ----------------------------------------------------------------

def _class_skeleton(rng: np.random.Generator) -> np.ndarray:
    """Random polyline strokes in the unit square as an (M, 2, 2) segment array."""
    segments = []
    for _ in range(rng.integers(2, 4)):
        pts = rng.uniform(0.15, 0.85, size=(rng.integers(2, 5), 2))
        segments.extend(zip(pts[:-1], pts[1:]))
    return np.array(segments)


def _rasterize(segments: np.ndarray, size: int, width: float) -> np.ndarray:
    coords = (np.arange(size) + 0.5)
    py, px = np.meshgrid(coords, coords, indexing="ij")
    p = np.stack([px.ravel(), py.ravel()], axis=1)[:, None, :]
    a, b = segments[None, :, 0, :], segments[None, :, 1, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    dist = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1).min(axis=1)
    return np.clip(1.0 - (dist - width) / 1.0, 0.0, 1.0).reshape(size, size)


def _render(skeleton: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(-15.0, 15.0))
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    shift = rng.uniform(-2.0, 2.0, size=2)
    pts = (skeleton * size - size / 2.0) @ rot.T + size / 2.0 + shift
    img = _rasterize(pts, size, width=max(0.6, size / 28.0))
    img = img * rng.uniform(0.7, 1.0) + rng.normal(0.0, 0.05, img.shape) * (img > 0)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_pool(seed: int, n_classes: int, examples_per_class: int, image_size: int,
                            split: str = "meta_train", stat_shift: float = 0.0,
                            first_class: int = 0) -> ClassPool:
    """Procedural glyph classes; class ``k`` depends only on ``(seed, k)``.

    ``stat_shift`` in [0, 1) gives each class its own background level and
    stroke contrast, so per-task input statistics differ across tasks.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= stat_shift < 1.0:
        raise ValueError("stat_shift must lie in [0, 1)")
    classes = []
    for k in range(first_class, first_class + n_classes):
        rng = np.random.default_rng([seed, k])
        skeleton = _class_skeleton(rng)
        background = stat_shift * rng.uniform()
        contrast = (1.0 - background) * (1.0 - 0.75 * stat_shift * rng.uniform())
        imgs = np.stack([_render(skeleton, image_size, rng) for _ in range(examples_per_class)])
        imgs = np.clip(background + contrast * imgs, 0.0, 1.0)
        classes.append(ClassRecord(k, f"glyph{k:04d}", imgs[:, None, :, :].astype(np.float32)))
    return ClassPool(split, classes)


def make_synthetic_splits(seed: int, n_train: int, n_val: int, n_test: int, examples_per_class: int,
                          image_size: int, stat_shift: float = 0.0) -> dict[str, ClassPool]:
    """Three class-disjoint synthetic pools."""
    out = {}
    start = 0
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        out[split] = generate_synthetic_pool(seed, n, examples_per_class, image_size, split, stat_shift, start)
        start += n
    return out


# episodes -------------------------------------------------------------------------

def sample_episode(pool: ClassPool, spec: TaskSpec, rng: np.random.Generator) -> Episode:
    if spec.way > len(pool):
        raise ValueError(f"way {spec.way} exceeds the {len(pool)} classes in the {pool.split} pool")
    shot = spec.shot
    if spec.variable_shot is not None:
        shot = int(rng.integers(spec.variable_shot[0], spec.variable_shot[1] + 1))
    chosen = rng.choice(len(pool), size=spec.way, replace=False)
    ctx_x, ctx_y, tgt_x, tgt_y = [], [], [], []
    for label, idx in enumerate(chosen):
        record = pool.classes[idx]
        need = shot + spec.targets_per_class
        if len(record.examples) < need:
            raise ValueError(f"class {record.name} has {len(record.examples)} examples, episode needs {need}")
        order = rng.permutation(len(record.examples))
        ctx_x.append(record.examples[order[:shot]])
        tgt_x.append(record.examples[order[shot:need]])
        ctx_y += [label] * shot
        tgt_y += [label] * spec.targets_per_class
    return Episode(np.concatenate(ctx_x), np.array(ctx_y), np.concatenate(tgt_x), np.array(tgt_y),
                   spec.way, shot, tuple(pool.classes[i].class_id for i in chosen))


# PGM ingestion ----------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path) -> np.ndarray:
    """Decode a binary (P5) PGM into a float array in [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5" or pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ValueError(f"{path}: malformed PGM header")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: malformed PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    payload = buf[pos + 1 :]
    need = width * height * dtype.itemsize
    if len(payload) < need:
        raise ValueError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(payload[:need], dtype=dtype).reshape(height, width)
    return pixels.astype(np.float32) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Encode a [0, 1] array as an 8-bit P5 PGM."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows][:, cols]


def load_image_dataset(root, split: str = "meta_train", image_size: Optional[int] = None) -> ClassPool:
    """Load ``root/<split>/<class>/*.pgm`` as a pool.

    Class ids enumerate every split's classes lexicographically, so pools
    loaded from the same root are class-disjoint.
    """
    root = Path(root)
    split_dirs = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        split_dirs[_SPLIT_ALIASES.get(d.name, d.name)] = d
    split = _SPLIT_ALIASES.get(split, split)
    if split not in split_dirs:
        raise ValueError(f"{root}: no directory for split {split!r}")
    next_id = 0
    for name in sorted(split_dirs, key=lambda s: (SPLITS.index(s) if s in SPLITS else len(SPLITS), s)):
        class_dirs = sorted(p for p in split_dirs[name].iterdir() if p.is_dir())
        if name == split:
            classes = []
            for offset, cdir in enumerate(class_dirs):
                files = sorted(cdir.glob("*.pgm"))
                if not files:
                    raise ValueError(f"{cdir}: empty class directory")
                imgs = [read_pgm(f) for f in files]
                if image_size is not None:
                    imgs = [_resize_nearest(im, image_size) for im in imgs]
                shapes = {im.shape for im in imgs}
                if len(shapes) != 1:
                    raise ValueError(f"{cdir}: images differ in size {sorted(shapes)}; set image_size")
                classes.append(ClassRecord(next_id + offset, cdir.name, np.stack(imgs)[:, None].astype(np.float32)))
            return ClassPool(split, classes)
        next_id += len(class_dirs)
    raise AssertionError("unreachable")
