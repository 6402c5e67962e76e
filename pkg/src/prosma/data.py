"""Synthetic cluttered segmentation corpus and binary PGM image I/O.

Each sample is a smoothed-noise background containing a large, faint
"organ" ellipse.  The foreground mask is 1-3 bright ellipses lying inside
the organ.  Distractor ellipses and strokes with the same absolute intensity
and similar size are scattered outside it and kept out of the mask, then
Gaussian pixel noise is added.  Locally a distractor looks exactly like a
lesion; only the surrounding context tells them apart, which is what makes
ungated skip connections leak false positives.

On-disk layout::

    DIR/images/<id>.pgm   DIR/masks/<id>.pgm   DIR/{train,val,test}.txt
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, FormatError

CLUTTER_LEVELS = ("none", "low", "high")
SPLITS = ("train", "val", "test")

_DISTRACTOR_RANGE = {"none": (0, 0), "low": (0, 2), "high": (0, 6)}
_BG_LEVEL = 0.3
_BG_AMPLITUDE = 0.08
_OFFSET_RANGE = (0.25, 0.45)
_ORGAN_OFFSET = 0.08
_FG_FRACTION = (0.02, 0.40)


@dataclass
class SynthConfig:
    size: int = 64
    count: int = 200
    seed: int = 0
    clutter_level: str = "high"
    noise_sigma: float = 0.08
    blob_range: tuple[int, int] = (1, 3)
    train_fraction: float = 0.70
    val_fraction: float = 0.15

    def validate(self) -> None:
        if self.size < 16 or self.size % 16:
            raise ContractError(f"image size must be a positive multiple of 16, got {self.size}")
        if self.count < 20:
            raise ContractError(f"need at least 20 samples, got {self.count}")
        if self.clutter_level not in CLUTTER_LEVELS:
            raise ContractError(f"clutter level must be one of {CLUTTER_LEVELS}, got {self.clutter_level!r}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if not (0 < self.train_fraction < 1 and 0 < self.val_fraction < 1
                and self.train_fraction + self.val_fraction < 1):
            raise ContractError("split fractions must leave a non-empty test split")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [1, H, W] in [0, 1]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    distractors: np.ndarray | None = None  # [H, W] bool, generator bookkeeping only


@dataclass
class Dataset:
    samples: dict[str, Sample]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.splits.get(name, [])]

    def arrays(self, name: str) -> tuple[list[str], np.ndarray, np.ndarray]:
        items = self.split(name)
        if not items:
            return [], np.zeros((0, 1, 1, 1)), np.zeros((0, 1, 1, 1))
        return (
            [s.id for s in items],
            np.stack([s.image for s in items]),
            np.stack([s.mask for s in items]),
        )

    def save(self, out_dir: str | os.PathLike) -> None:
        root = Path(out_dir)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for sid, s in self.samples.items():
            write_pgm(root / "images" / f"{sid}.pgm", s.image[0])
            write_pgm(root / "masks" / f"{sid}.pgm", s.mask[0])
        for name in SPLITS:
            (root / f"{name}.txt").write_text("".join(f"{i}\n" for i in self.splits.get(name, [])))

    @classmethod
    def load(cls, root: str | os.PathLike) -> Dataset:
        root = Path(root)
        splits: dict[str, list[str]] = {}
        for name in SPLITS:
            path = root / f"{name}.txt"
            if not path.exists():
                raise ContractError(f"missing split list {path}")
            splits[name] = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        samples = {}
        for sid in (i for name in SPLITS for i in splits[name]):
            image = read_pgm(root / "images" / f"{sid}.pgm")
            mask = (read_pgm(root / "masks" / f"{sid}.pgm") > 0.5).astype(np.float64)
            samples[sid] = Sample(sid, image[None], mask[None])
        return cls(samples, splits)


# -- drawing ---------------------------------------------------------------


def _ellipse(shape, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    a = (dx * ca + dy * sa) / rx
    b = (-dx * sa + dy * ca) / ry
    return a * a + b * b <= 1.0


def _stroke(shape, y0, x0, y1, x1, half_width) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    py, px = yy - y0, xx - x0
    vy, vx = y1 - y0, x1 - x0
    t = np.clip((py * vy + px * vx) / max(vy * vy + vx * vx, 1e-12), 0.0, 1.0)
    dist2 = (py - t * vy) ** 2 + (px - t * vx) ** 2
    return dist2 <= half_width * half_width


def _background(rng, size) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    tex /= max(np.abs(tex).max(), 1e-12)
    return _BG_LEVEL + _BG_AMPLITUDE * tex


def _draw_organ(rng, size) -> np.ndarray:
    ry, rx = rng.uniform(size * 0.24, size * 0.36, size=2)
    cy, cx = rng.uniform(size * 0.38, size * 0.62, size=2)
    return _ellipse((size, size), cy, cx, ry, rx, rng.uniform(0, np.pi))


def _draw_foreground(rng, size, n_blobs, organ):
    mask = np.zeros((size, size), dtype=bool)
    offset = np.zeros((size, size))
    inside = np.argwhere(organ)
    placed, attempts = 0, 0
    while placed < n_blobs and attempts < 200:
        attempts += 1
        ry, rx = rng.uniform(size / 16, size / 8, size=2)
        cy, cx = inside[rng.integers(len(inside))] + rng.uniform(-0.5, 0.5, size=2)
        blob = _ellipse((size, size), cy, cx, ry, rx, rng.uniform(0, np.pi))
        if not blob.any() or (blob & ~organ).any():
            continue
        offset = np.where(blob, np.maximum(offset, rng.uniform(*_OFFSET_RANGE)), offset)
        mask |= blob
        placed += 1
    return mask, offset


def _draw_distractors(rng, size, count, forbidden):
    clutter = np.zeros((size, size), dtype=bool)
    offset = np.zeros((size, size))
    lo, hi = _OFFSET_RANGE
    placed, attempts = 0, 0
    while placed < count and attempts < 50 * max(count, 1):
        attempts += 1
        if rng.random() < 0.7:
            ry, rx = rng.uniform(size / 20, size / 8, size=2)
            cy, cx = rng.uniform(0, size, size=2)
            shape = _ellipse((size, size), cy, cx, ry, rx, rng.uniform(0, np.pi))
        else:
            y0, x0 = rng.uniform(0, size, size=2)
            ang, length = rng.uniform(0, 2 * np.pi), rng.uniform(size / 8, size / 3)
            shape = _stroke((size, size), y0, x0, y0 + length * np.sin(ang), x0 + length * np.cos(ang),
                            rng.uniform(0.7, 1.8))
        if not shape.any() or (shape & forbidden).any():
            continue
        # outside the organ, so lift by the organ offset to match lesion brightness
        level = rng.uniform(lo + _ORGAN_OFFSET, hi + _ORGAN_OFFSET)
        offset = np.where(shape, np.maximum(offset, level), offset)
        clutter |= shape
        placed += 1
    return clutter, offset


def _halo(mask: np.ndarray) -> np.ndarray:
    """Mask grown by one pixel (4-neighbourhood) so distractors never touch it."""
    grown = mask.copy()
    grown[1:] |= mask[:-1]
    grown[:-1] |= mask[1:]
    grown[:, 1:] |= mask[:, :-1]
    grown[:, :-1] |= mask[:, 1:]
    return grown


def make_sample(config: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([int(config.seed), int(index)])
    size = config.size
    lo_d, hi_d = _DISTRACTOR_RANGE[config.clutter_level]
    while True:
        bg = _background(rng, size)
        organ = _draw_organ(rng, size)
        n_blobs = int(rng.integers(config.blob_range[0], config.blob_range[1] + 1))
        mask, fg_offset = _draw_foreground(rng, size, n_blobs, organ)
        if _FG_FRACTION[0] <= mask.mean() <= _FG_FRACTION[1]:
            break
    n_clutter = int(rng.integers(lo_d, hi_d + 1))
    clutter, cl_offset = _draw_distractors(rng, size, n_clutter, _halo(mask | organ))
    image = bg + _ORGAN_OFFSET * organ + np.maximum(fg_offset, cl_offset)
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(f"s{index:05d}", image[None], mask.astype(np.float64)[None], clutter)


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    samples = {}
    for i in range(config.count):
        s = make_sample(config, i)
        samples[s.id] = s
    ids = list(samples)
    order = np.random.default_rng([int(config.seed), 0x5EED]).permutation(len(ids))
    n_train = int(round(config.count * config.train_fraction))
    n_val = int(round(config.count * config.val_fraction))
    shuffled = [ids[k] for k in order]
    splits = {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }
    return Dataset(samples, splits)


# -- PGM -------------------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up of ``v * 255``."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 2-D array with values in [0, 1] as binary P5 PGM (maxval 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ContractError(f"PGM needs a 2-D image, got shape {image.shape}")
    if np.isnan(image).any() or image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("PGM values must lie in [0, 1]")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(image).tobytes())


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated PGM header at byte offset {start}")
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if len(buf) < 2:
        raise FormatError("truncated PGM header at byte offset 0")
    magic = buf[:2]
    if magic != b"P5":
        if magic[:1] == b"P" and magic[1:2].isdigit():
            raise FormatError(f"unsupported PGM format {magic.decode('ascii')!r} at byte offset 0 (only P5)")
        raise FormatError("bad PGM magic at byte offset 0")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _token(buf, pos)
        if not tok.isdigit() or int(tok) < 1:
            raise FormatError(f"malformed PGM {what} {tok!r} at byte offset {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after PGM header at byte offset {pos}")
    pos += 1
    payload = buf[pos:pos + w * h]
    if len(payload) < w * h:
        raise FormatError(
            f"truncated PGM payload at byte offset {pos + len(payload)}: expected {w * h} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5 PGM into an ``[H, W]`` float array in [0, 1]."""
    return parse_pgm(Path(path).read_bytes())
