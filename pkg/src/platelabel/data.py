"""Datasets: label vocabularies, CSV manifests, synthetic plates, augmentation and batching."""

from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DataError,
    DuplicateAcrossSplits,
    EmptyDataset,
    InvalidSpec,
    MissingImage,
    UnknownLabel,
)
from .tensor import Tensor

SHAPES = ("disk", "square", "triangle", "ring")
MANIFEST_HEADER = ["path", "split", "labels"]


# ---------------------------------------------------------------------------
# vocabulary and examples
# ---------------------------------------------------------------------------


class LabelVocabulary:
    """Ordered, duplicate-free list of label names; position is the label index."""

    def __init__(self, labels: Sequence[str]):
        labels = [str(l) for l in labels]
        if not labels:
            raise DataError("vocabulary is empty")
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise DataError(f"duplicate labels in vocabulary: {dupes}")
        self.labels = labels
        self.index = {l: i for i, l in enumerate(labels)}

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelVocabulary) and self.labels == other.labels

    def __repr__(self):
        return f"LabelVocabulary({self.labels!r})"

    def encode(self, names: Sequence[str]) -> np.ndarray:
        target = np.zeros(len(self.labels), dtype=np.int8)
        for name in names:
            try:
                target[self.index[name]] = 1
            except KeyError:
                raise UnknownLabel(f"label {name!r} is not in the vocabulary") from None
        return target

    def decode(self, target) -> list[str]:
        """Names of the set entries, in vocabulary order."""
        return [self.labels[i] for i in np.flatnonzero(np.asarray(target))]

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([l.strip() for l in lines if l.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.labels) + "\n", encoding="utf-8")


@dataclass
class LabeledExample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    target: np.ndarray  # (K,) multi-hot
    source_id: str


def examples_to_arrays(examples: Sequence[LabeledExample], dtype=np.float32):
    if not examples:
        raise EmptyDataset("no examples")
    X = np.stack([e.image for e in examples]).astype(dtype, copy=False)
    Y = np.stack([e.target for e in examples]).astype(np.int8, copy=False)
    return X, Y


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise MissingImage(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    h, w = image.shape[:2]
    oh, ow = size
    if (oh, ow) == (h, w):
        return image

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(image.dtype)

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _split_labels(field_value: str) -> list[str]:
    return [p.strip() for p in field_value.split(";") if p.strip()]


def read_manifest_rows(path) -> list[dict]:
    """Parse a manifest into rows of ``path``, ``split``, ``labels`` and ``source_id``.

    An optional fourth column ``source_id`` groups rows that must share a
    split (e.g. several scans of one dish); it defaults to the image path.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != MANIFEST_HEADER:
            raise DataError(f"{path}: header must start with {','.join(MANIFEST_HEADER)}")
        has_source = len(header) > 3 and header[3].strip() == "source_id"
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields")
            split = rec[1].strip()
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            source = rec[3].strip() if has_source and len(rec) > 3 and rec[3].strip() else rec[0].strip()
            rows.append({"path": rec[0].strip(), "split": split, "labels": _split_labels(rec[2]), "source_id": source})
    return rows


def check_split_leakage(rows: Sequence[dict]) -> None:
    seen: dict[str, str] = {}
    for row in rows:
        prev = seen.setdefault(row["source_id"], row["split"])
        if prev != row["split"]:
            raise DuplicateAcrossSplits(f"source {row['source_id']!r} appears in both train and test")


def load_manifest(path, vocab_path=None, input_size: tuple[int, int] | None = (64, 64), vocab: LabelVocabulary | None = None):
    """Load the train and test examples listed in a manifest.

    Images are resolved relative to the manifest's directory and resized to
    ``input_size`` (``None`` keeps their native size).
    """
    if vocab is None:
        if vocab_path is None:
            raise DataError("a vocabulary file or object is required")
        vocab = LabelVocabulary.load(vocab_path)
    rows = read_manifest_rows(path)
    check_split_leakage(rows)
    root = Path(path).parent
    train, test = [], []
    for row in rows:
        target = vocab.encode(row["labels"])
        image = read_png(root / row["path"])
        if input_size is not None:
            image = np.clip(resize_bilinear(image, tuple(input_size)), 0.0, 1.0)
        ex = LabeledExample(image.astype(np.float32), target, row["source_id"])
        (train if row["split"] == "train" else test).append(ex)
    return train, test, vocab


def write_manifest(directory, train: Sequence[LabeledExample], test: Sequence[LabeledExample], vocab: LabelVocabulary):
    """Write PNGs, ``manifest.csv`` and ``vocab.txt`` into ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    vocab.save(directory / "vocab.txt")
    with (directory / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        for split, examples in (("train", train), ("test", test)):
            for ex in examples:
                rel = f"images/{ex.source_id}.png"
                write_png(directory / rel, ex.image)
                labels = ";".join(vocab.decode(ex.target)).replace('"', '""')
                fh.write(f'{rel},{split},"{labels}"\n')
    return directory / "manifest.csv", directory / "vocab.txt"


# ---------------------------------------------------------------------------
# synthetic plates
# ---------------------------------------------------------------------------


def default_glyph_table(num_labels: int) -> list[tuple[str, tuple[int, int, int]]]:
    """One (shape, 8-bit colour) per label: shapes cycle, hues are spread evenly."""
    table = []
    for k in range(num_labels):
        r, g, b = colorsys.hsv_to_rgb(k / num_labels, 0.85, 0.9)
        table.append((SHAPES[k % len(SHAPES)], (round(r * 255), round(g * 255), round(b * 255))))
    return table


@dataclass
class SyntheticSpec:
    canvas: tuple[int, int] = (64, 64)
    num_labels: int = 8
    glyph_table: list | None = None
    objects_per_image: tuple[int, int] = (1, 4)
    num_train: int = 256
    num_test: int = 64
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        if self.glyph_table is None:
            self.glyph_table = default_glyph_table(self.num_labels)
        else:
            self.glyph_table = [(str(s), tuple(int(c) for c in col)) for s, col in self.glyph_table]
        lo, hi = self.objects_per_image
        if self.num_labels < 1:
            raise InvalidSpec("num_labels must be positive")
        if not 1 <= lo <= hi <= self.num_labels:
            raise InvalidSpec(f"need 1 <= min <= max <= K, got {self.objects_per_image} with K={self.num_labels}")
        if len(self.glyph_table) != self.num_labels:
            raise InvalidSpec(f"glyph table has {len(self.glyph_table)} entries for {self.num_labels} labels")
        for shape, color in self.glyph_table:
            if shape not in SHAPES:
                raise InvalidSpec(f"unknown glyph shape {shape!r}")
            if len(color) != 3 or min(color) < 0 or max(color) > 255:
                raise InvalidSpec(f"bad glyph colour {color}")
            if color[0] == color[1] == color[2]:
                raise InvalidSpec(f"glyph colour {color} is grey and would blend with the plate")
        if len({c for _, c in self.glyph_table}) != self.num_labels:
            raise InvalidSpec("glyph colours must be distinct")
        if self.num_train < 0 or self.num_test < 0:
            raise InvalidSpec("example counts must be non-negative")
        if min(self._cell_size) < 8:
            raise InvalidSpec(f"canvas {self.canvas} too small for {hi} glyphs per image")

    @property
    def _grid_side(self) -> int:
        return math.ceil(math.sqrt(self.objects_per_image[1]))

    @property
    def _cell_size(self) -> tuple[int, int]:
        side = self._grid_side
        return self.canvas[0] // side, self.canvas[1] // side

    @property
    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary([f"{shape}_{k:02d}" for k, (shape, _) in enumerate(self.glyph_table)])


def _glyph_mask(shape: str, size: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    dy, dx = yy - c, xx - c
    dist = np.hypot(dy, dx)
    if shape == "disk":
        return dist <= radius
    if shape == "square":
        return (np.abs(dx) <= 0.8 * radius) & (np.abs(dy) <= 0.8 * radius)
    if shape == "ring":
        return (dist <= radius) & (dist >= 0.55 * radius)
    # upward triangle inscribed in the circle of the given radius
    top, base = -radius, 0.5 * radius
    inside_y = (dy >= top) & (dy <= base)
    half_width = (dy - top) / (base - top) * radius * math.sqrt(3) / 2
    return inside_y & (np.abs(dx) <= half_width)


def render_plate(labels: Sequence[int], spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw the given labels' glyphs in distinct grid cells of a flat grey plate."""
    h, w = spec.canvas
    side = spec._grid_side
    ch, cw = spec._cell_size
    grey = rng.integers(170, 236)
    img = np.full((h, w, 3), grey, dtype=np.uint8)
    cells = rng.choice(side * side, size=len(labels), replace=False)
    cell = min(ch, cw)
    for label, cell_index in zip(labels, cells):
        shape, color = spec.glyph_table[label]
        radius = rng.uniform(0.28, 0.42) * cell
        box = min(int(2 * math.ceil(radius) + 1), min(ch, cw))
        radius = min(radius, (box - 1) / 2)
        mask = _glyph_mask(shape, box, radius)
        cy0 = (cell_index // side) * ch
        cx0 = (cell_index % side) * cw
        oy = cy0 + int(rng.integers(0, ch - box + 1))
        ox = cx0 + int(rng.integers(0, cw - box + 1))
        region = img[oy : oy + box, ox : ox + box]
        region[mask] = color
    return img.astype(np.float32) / 255.0


def _generate_split(spec: SyntheticSpec, count: int, rng: np.random.Generator, prefix: str) -> list[LabeledExample]:
    lo, hi = spec.objects_per_image
    out = []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        labels = sorted(int(v) for v in rng.choice(spec.num_labels, size=n, replace=False))
        image = render_plate(labels, spec, rng)
        target = np.zeros(spec.num_labels, dtype=np.int8)
        target[labels] = 1
        out.append(LabeledExample(image, target, f"{prefix}-{i:05d}"))
    return out


def generate_synthetic(spec: SyntheticSpec):
    """Seeded (train, test, vocab); the splits come from independent random streams."""
    train = _generate_split(spec, spec.num_train, np.random.default_rng([spec.seed, 0]), "synth-train")
    test = _generate_split(spec, spec.num_test, np.random.default_rng([spec.seed, 1]), "synth-test")
    return train, test, spec.vocabulary


def detect_glyph_labels(image: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Multi-hot vector of glyph colours present in a rendered (un-augmented) image."""
    pixels = np.rint(np.asarray(image) * 255).astype(np.int64).reshape(-1, 3)
    codes = set((pixels[:, 0] << 16 | pixels[:, 1] << 8 | pixels[:, 2]).tolist())
    return np.array([(r << 16 | g << 8 | b) in codes for _, (r, g, b) in spec.glyph_table], dtype=np.int8)


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    max_translate: float = 0.1  # fraction of each side
    crop_area: float = 0.875
    crop_mode: str = "random"  # or "center"


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = image.shape[:2]
    out = np.zeros_like(image)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Flip H, flip V, translate with zero fill, then crop and zero-pad back to size.

    The crop keeps ``crop_area`` of the image at a random (or centred) offset
    and is pasted back centred, so the output always has the input's shape.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if rng.random() < cfg.hflip_prob:
        img = img[:, ::-1]
    if rng.random() < cfg.vflip_prob:
        img = img[::-1, :]
    ty, tx = round(cfg.max_translate * h), round(cfg.max_translate * w)
    dy = int(rng.integers(-ty, ty + 1)) if ty else 0
    dx = int(rng.integers(-tx, tx + 1)) if tx else 0
    img = _shift(img, dy, dx) if (dy or dx) else np.array(img)

    side = math.sqrt(cfg.crop_area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    py, px = (h - ch) // 2, (w - cw) // 2
    if cfg.crop_mode == "center":
        oy, ox = py, px
    else:
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
    out = np.zeros_like(img)
    out[py : py + ch, px : px + cw] = img[oy : oy + ch, ox : ox + cw]
    return out


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def iter_array_batches(
    X: np.ndarray,
    Y: np.ndarray,
    batch_size: int,
    shuffle_seed: int,
    epoch: int,
    augmentation: AugmentConfig | None = None,
    shuffle: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Array-level batching shared by :func:`batch_iter` and the estimator."""
    n = len(X)
    if n == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(n, shuffle_seed, epoch) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([shuffle_seed, epoch, 1]) if augmentation is not None else None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb = X[idx]
        if aug_rng is not None:
            xb = np.stack([augment(img, aug_rng, augmentation) for img in xb])
        yield xb, Y[idx]


def batch_iter(
    examples: Sequence[LabeledExample],
    batch_size: int,
    shuffle_seed: int,
    epoch: int,
    augmentation: AugmentConfig | None = None,
    dtype=np.float32,
) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (images (B, H, W, 3), targets (B, K)) tensors for one epoch.

    Pass ``augmentation`` for training batches only; evaluation batches should
    leave it ``None``.
    """
    if not examples:
        raise EmptyDataset("cannot batch an empty dataset")
    X, Y = examples_to_arrays(examples, dtype=dtype)
    for xb, yb in iter_array_batches(X, Y, batch_size, shuffle_seed, epoch, augmentation):
        yield Tensor(xb), Tensor(yb.astype(dtype))
