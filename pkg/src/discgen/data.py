"""Synthetic captioned shapes, a word-level tokenizer, and dataset I/O.

A class is a (shape, color, background) triple. Within a class, images vary
by size and grid position, and the caption names all five attributes, e.g.
``"a large red circle on a white background at the top left"``.

On-disk layout::

    <root>/captions.tsv        id, caption, class_label, split (tab separated)
    <root>/images/<id>.png     8-bit RGB at the generative resolution
"""

from __future__ import annotations

import csv
import itertools
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "purple": (150, 50, 190),
    "orange": (245, 140, 30),
}
BACKGROUNDS = {
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
    "cyan": (120, 210, 215),
}
SIZES = {"small": 0.14, "medium": 0.19, "large": 0.25}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")

IMAGE_SIZE = 64
MAX_LEN = 16


@dataclass
class CaptionedImage:
    id: str
    image: np.ndarray  # (H, W, 3) uint8
    caption: str
    class_label: str
    split: str = "train"


def taxonomy() -> list[tuple[str, str, str]]:
    """All (shape, color, background) classes in a fixed, seed-independent order.

    The order is shuffled once with a constant seed so that the first few
    classes differ in several attributes at once.
    """
    triples = [
        (s, c, b) for s, c, b in itertools.product(SHAPES, COLORS, BACKGROUNDS)
    ]
    random.Random(1234).shuffle(triples)
    return triples


def class_label(triple: tuple[str, str, str]) -> str:
    return "_".join(triple)


def variants() -> list[tuple[str, str]]:
    """(size, position) pairs; ``position`` is e.g. ``"top left"``."""
    return [(size, f"{r} {c}") for size in SIZES for r in ROWS for c in COLS]


def make_caption(shape: str, color: str, background: str, size: str, position: str) -> str:
    return f"a {size} {color} {shape} on a {background} background at the {position}"


# -- vocabulary -------------------------------------------------------------

class Vocabulary:
    """Word-level vocabulary with reserved PAD/BOS/EOS ids 0, 1, 2."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for w in sorted(set(words)):
            if w in SPECIAL_TOKENS:
                raise ValueError(f"{w!r} is reserved")
            self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words = set("a on background at the".split())
        words.update(SHAPES, COLORS, BACKGROUNDS, SIZES, ROWS, COLS)
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, caption: str, max_len: int = MAX_LEN) -> list[int]:
        words = caption.split()
        if len(words) + 2 > max_len:
            raise ValueError(f"caption has {len(words)} words; at most {max_len - 2} fit")
        ids = [BOS_ID]
        for w in words:
            if w not in self.stoi or self.stoi[w] < len(SPECIAL_TOKENS):
                raise KeyError(f"out-of-vocabulary word {w!r}")
            ids.append(self.stoi[w])
        ids.append(EOS_ID)
        return ids + [PAD_ID] * (max_len - len(ids))

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == BOS_ID:
                continue
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self.itos[i])
        return " ".join(words)


def tokenize(caption: str, vocab: Vocabulary | None = None, max_len: int = MAX_LEN) -> list[int]:
    return (vocab or Vocabulary.default()).tokenize(caption, max_len)


# -- rendering --------------------------------------------------------------

def render(
    shape: str,
    color: str,
    background: str,
    size: str,
    position: str,
    jitter: tuple[int, int] = (0, 0),
    image_size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Rasterize one shape without anti-aliasing; returns (H, W, 3) uint8."""
    n = image_size
    img = np.empty((n, n, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[background]
    row, col = position.split()
    cy = (ROWS.index(row) * 2 + 1) * n // 6 + jitter[0]
    cx = (COLS.index(col) * 2 + 1) * n // 6 + jitter[1]
    r = SIZES[size] * n / 2
    yy, xx = np.mgrid[0:n, 0:n]
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        mask = dy * dy + dx * dx <= r * r
    elif shape == "square":
        h = r * 0.85
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h)
    elif shape == "triangle":
        # apex up; base at cy + r
        top, bottom = cy - r, cy + r
        frac = (yy - top) / (2 * r)
        mask = (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img[mask] = COLORS[color]
    return img


def downsample(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Area (box) downsampling of an (H, W, 3) uint8 image."""
    h, w, ch = image.shape
    if h % factor or w % factor:
        raise ValueError("image size not divisible by factor")
    blocks = image.reshape(h // factor, factor, w // factor, factor, ch).astype(np.float64)
    return np.rint(blocks.mean(axis=(1, 3))).astype(np.uint8)


def generate_synthetic(
    n_classes: int,
    per_class: int,
    seed: int = 0,
    test_per_class: int | None = None,
) -> list[CaptionedImage]:
    """Class-balanced train and test splits, deterministic per ``seed``.

    ``test_per_class`` defaults to ``per_class // 4`` (at least 1). Within each
    class, test items take distinct (size, position) variants.
    """
    classes = taxonomy()
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_classes > len(classes):
        raise ValueError(f"taxonomy has only {len(classes)} classes, asked for {n_classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)

    rng = np.random.default_rng(seed)
    vs = variants()
    items: list[CaptionedImage] = []
    for ci, triple in enumerate(classes[:n_classes]):
        shape, color, bg = triple
        order = rng.permutation(len(vs))
        for split, count, offset in (("test", test_per_class, 0), ("train", per_class, test_per_class)):
            for k in range(count):
                size, pos = vs[order[(offset + k) % len(vs)]]
                jit = tuple(int(j) for j in rng.integers(-2, 3, size=2))
                items.append(
                    CaptionedImage(
                        id=f"{split}_{ci:03d}_{k:04d}",
                        image=render(shape, color, bg, size, pos, jitter=jit),
                        caption=make_caption(shape, color, bg, size, pos),
                        class_label=class_label(triple),
                        split=split,
                    )
                )
    items.sort(key=lambda it: it.id)
    return items


def split(items: list[CaptionedImage], name: str) -> list[CaptionedImage]:
    return [it for it in items if it.split == name]


def save_dataset(items: list[CaptionedImage], root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "captions.tsv", "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "caption", "class_label", "split"])
        for it in sorted(items, key=lambda it: it.id):
            w.writerow([it.id, it.caption, it.class_label, it.split])
            Image.fromarray(it.image, mode="RGB").save(root / "images" / f"{it.id}.png", optimize=False)
    return root


def load_dataset(root: str | Path, image_size: int = IMAGE_SIZE) -> list[CaptionedImage]:
    root = Path(root)
    tsv = root / "captions.tsv"
    if not tsv.exists():
        raise FileNotFoundError(f"{tsv} not found")
    items = []
    with open(tsv, newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header != ["id", "caption", "class_label", "split"]:
            raise ValueError(f"{tsv}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 or not all(row):
                raise ValueError(f"{tsv}:{lineno}: malformed row {row!r}")
            id_, caption, label, split_name = row
            if split_name not in ("train", "test"):
                raise ValueError(f"{tsv}:{lineno}: unknown split {split_name!r}")
            path = root / "images" / f"{id_}.png"
            if not path.exists():
                raise FileNotFoundError(f"image for id {id_!r} missing: {path}")
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
            if arr.shape != (image_size, image_size, 3):
                raise ValueError(f"image {id_!r} has shape {arr.shape}, expected {image_size}x{image_size}x3")
            items.append(CaptionedImage(id_, arr, caption, label, split_name))
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{tsv}: duplicate ids")
    items.sort(key=lambda it: it.id)
    return items


def to_tensors(items: list[CaptionedImage], vocab: Vocabulary | None = None, max_len: int = MAX_LEN):
    """Stack items into (gen, disc, tokens) tensors.

    ``gen`` is (N, 3, 64, 64) and ``disc`` the 2x area-downsampled copy, both
    scaled to [-1, 1]; ``tokens`` is (N, max_len) int64.
    """
    import torch

    vocab = vocab or Vocabulary.default()
    gen = np.stack([it.image for it in items]) if items else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.uint8)
    disc = np.stack([downsample(im) for im in gen]) if items else np.zeros((0, IMAGE_SIZE // 2, IMAGE_SIZE // 2, 3), np.uint8)
    tokens = np.array([vocab.tokenize(it.caption, max_len) for it in items], dtype=np.int64).reshape(-1, max_len)

    def _scale(a):
        return torch.from_numpy(a).permute(0, 3, 1, 2).float().div(127.5).sub(1.0)

    return _scale(gen), _scale(disc), torch.from_numpy(tokens)
