"""Seeded two-domain synthetic glyph datasets and dataset file IO.

Ten 8x8 digit glyphs with per-sample jitter (integer translation, intensity
scaling, pixel noise) form the source domain; the target domain is the same
generator composed with a fixed affine intensity transform, a fixed extra
translation, and additional noise. A zero shift makes the two domains
identically distributed.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

N_CLASSES = 10
IMAGE_SHAPE = (1, 8, 8)

_GLYPH_ART = [
    # 0
    ["........", "..###...", ".#...#..", ".#...#..",
     ".#...#..", ".#...#..", "..###...", "........"],
    # 1
    ["........", "...#....", "..##....", "...#....",
     "...#....", "...#....", "..###...", "........"],
    # 2
    ["........", "..###...", ".#...#..", "....#...",
     "...#....", "..#.....", ".#####..", "........"],
    # 3
    ["........", ".####...", ".....#..", "..###...",
     ".....#..", ".....#..", ".####...", "........"],
    # 4
    ["........", ".#..#...", ".#..#...", ".#..#...",
     ".#####..", "....#...", "....#...", "........"],
    # 5
    ["........", ".#####..", ".#......", ".####...",
     ".....#..", ".....#..", ".####...", "........"],
    # 6
    ["........", "..###...", ".#......", ".####...",
     ".#...#..", ".#...#..", "..###...", "........"],
    # 7
    ["........", ".#####..", ".....#..", "....#...",
     "...#....", "..#.....", "..#.....", "........"],
    # 8
    ["........", "..###...", ".#...#..", "..###...",
     ".#...#..", ".#...#..", "..###...", "........"],
    # 9
    ["........", "..###...", ".#...#..", ".#...#..",
     "..####..", ".....#..", "..###...", "........"],
]

GLYPHS = np.array([[[1.0 if ch == "#" else 0.0 for ch in row] for row in art]
                   for art in _GLYPH_ART])


@dataclass(frozen=True)
class DomainShiftConfig:
    """Fixed source-to-target transform: x -> gain * translate(x) + offset + noise."""

    gain: float = 0.55
    offset: float = 0.35
    dx: int = 1
    dy: int = 0
    noise_std_extra: float = 0.05

    def is_zero(self):
        return (self.gain == 1.0 and self.offset == 0.0 and self.dx == 0
                and self.dy == 0 and self.noise_std_extra == 0.0)


@dataclass(frozen=True)
class DomainDataset:
    """One split of one domain: features (n, 1, 8, 8) and integer class labels."""

    domain: str
    split: str
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if len(self.features) != len(self.labels):
            raise ValueError("feature/label counts disagree")
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise ValueError("label exceeds class count")

    def __len__(self):
        return len(self.labels)

    def subset(self, n, rng=None):
        """First n samples, or a seeded random subset when rng is given."""
        if n >= len(self):
            return self
        idx = np.arange(n) if rng is None else rng.choice(len(self), size=n, replace=False)
        return DomainDataset(self.domain, self.split, self.features[idx],
                             self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class DomainSplits:
    """Train and test splits of one domain."""

    train: DomainDataset
    test: DomainDataset


def shift_image(img, dy, dx):
    """Integer translation with zero fill (content may clip at the border)."""
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _draw_samples(rng, n, shift=None, base_noise_std=0.05):
    """Balanced, shuffled glyph samples; optionally composed with a domain shift."""
    classes = rng.permutation(np.arange(n) % N_CLASSES)
    jitter = rng.integers(-1, 2, size=(n, 2))
    intensity = rng.uniform(0.8, 1.2, size=n)
    noise = rng.normal(0.0, base_noise_std, size=(n, 8, 8))
    imgs = np.empty((n, 8, 8))
    for i in range(n):
        img = shift_image(GLYPHS[classes[i]] * intensity[i], jitter[i, 0], jitter[i, 1])
        imgs[i] = img + noise[i]
    if shift is not None and not shift.is_zero():
        extra = rng.normal(0.0, shift.noise_std_extra, size=(n, 8, 8)) \
            if shift.noise_std_extra > 0 else 0.0
        for i in range(n):
            imgs[i] = shift_image(imgs[i], shift.dy, shift.dx)
        imgs = shift.gain * imgs + shift.offset + extra
    return imgs[:, None, :, :], classes


def make_two_domain(seed, n_per_split, shift=DomainShiftConfig()):
    """Generate (source, target) DomainSplits, deterministic in the seed."""
    if n_per_split < 100:
        raise ValueError("n_per_split must be at least 100")
    streams = np.random.SeedSequence(seed).spawn(4)
    out = []
    for domain, use_shift, (ss_train, ss_test) in (
        ("source", None, streams[:2]),
        ("target", shift, streams[2:]),
    ):
        splits = {}
        for split, ss in (("train", ss_train), ("test", ss_test)):
            rng = np.random.default_rng(ss)
            feats, labels = _draw_samples(rng, n_per_split, shift=use_shift)
            splits[split] = DomainDataset(domain, split, feats, labels)
        out.append(DomainSplits(**splits))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# dataset file format: JSON manifest + f32 feature blob + u16 label blob
# ---------------------------------------------------------------------------

DATASET_VERSION = 1


def save_dataset(ds, path):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "kind": "dataset",
        "version": DATASET_VERSION,
        "count": len(ds),
        "shape": list(ds.features.shape[1:]),
        "classes": ds.n_classes,
        "domain": ds.domain,
        "split": ds.split,
    }
    with open(os.path.join(path, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "features.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
    with open(os.path.join(path, "labels.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def load_dataset(path):
    try:
        with open(os.path.join(path, "dataset.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable dataset manifest: {exc}") from exc
    if manifest.get("kind") != "dataset" or manifest.get("version") != DATASET_VERSION:
        raise FormatError("not a supported dataset directory")
    count = int(manifest["count"])
    shape = tuple(manifest["shape"])
    with open(os.path.join(path, "features.bin"), "rb") as fh:
        feat_blob = fh.read()
    with open(os.path.join(path, "labels.bin"), "rb") as fh:
        label_blob = fh.read()
    n_feat = count * int(np.prod(shape))
    if len(feat_blob) != 4 * n_feat or len(label_blob) != 2 * count:
        raise FormatError("blob sizes disagree with the manifest")
    feats = np.frombuffer(feat_blob, dtype="<f4").reshape((count,) + shape).astype(np.float64)
    labels = np.frombuffer(label_blob, dtype="<u2").astype(np.int64)
    return DomainDataset(manifest["domain"], manifest["split"], feats, labels,
                         n_classes=int(manifest["classes"]))
