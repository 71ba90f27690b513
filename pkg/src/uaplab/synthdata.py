"""Procedural image-caption pairs and the five image augmentations.

Scenes are one or two colored shapes placed on a 2x2 grid of 8x8 cells in
a 16x16 RGB image; captions are fixed-template 8-token sentences over an
18-token vocabulary. Everything is generated from SplitMix64 streams:
sample i draws from stream `seed XOR i`, so datasets are bit-identical
for a given (seed, n_train, n_test) and may be generated in any order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

# vocabulary
PAD, BOS, EOS = 0, 1, 2
COLOR_BASE = 3   # red, green, blue, yellow
SHAPE_BASE = 7   # square, cross, stripes
POS_BASE = 10    # tl, tr, bl, br
TOK_A, TOK_THE, TOK_AT, TOK_AND = 14, 15, 16, 17
VOCAB_SIZE = 18

N_COLORS, N_SHAPES, N_POSITIONS = 4, 3, 4
COLOR_RGB = np.array(
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]
)
COLOR_NAMES = ("red", "green", "blue", "yellow")
SHAPE_NAMES = ("square", "cross", "stripes")
POSITION_NAMES = ("tl", "tr", "bl", "br")

IMAGE_H = IMAGE_W = 16
IMAGE_C = 3
SEQ_LEN = 8
BACKGROUND = 0.2
MAX_TEST_KEYS = 96  # 48 single-object + 48 sampled two-object scenes

_POOL_SALT = 0xA5A55A5AA5A55A5A

_MAGIC = b"DOUP"
_DATASET_VERSION = 1


class DatasetError(ValueError):
    """Invalid generation request or malformed dataset file."""


# --------------------------------------------------------------------------
# semantic keys, rendering, captions
# --------------------------------------------------------------------------

def valid_key(key) -> bool:
    """A key is a tuple of 1 or 2 (color, shape, position) triples with
    distinct positions."""
    if not isinstance(key, tuple) or not 1 <= len(key) <= 2:
        return False
    for obj in key:
        if len(obj) != 3:
            return False
        c, s, p = obj
        if not (0 <= c < N_COLORS and 0 <= s < N_SHAPES and 0 <= p < N_POSITIONS):
            return False
    if len(key) == 2 and key[0][2] == key[1][2]:
        return False
    return True


def _shape_pixels(shape: int):
    """Cell-local (row, col) pixels covered by a shape in its 8x8 cell."""
    if shape == 0:  # square: centered 6x6 fill
        return [(r, c) for r in range(1, 7) for c in range(1, 7)]
    if shape == 1:  # cross: arm width 2 spanning the cell
        px = {(r, c) for r in (3, 4) for c in range(8)}
        px |= {(r, c) for r in range(8) for c in (3, 4)}
        return sorted(px)
    if shape == 2:  # stripes: alternating full rows of height 1
        return [(r, c) for r in (0, 2, 4, 6) for c in range(8)]
    raise DatasetError(f"unknown shape id {shape}")


def render(key) -> np.ndarray:
    """Draw a valid key onto a 16x16x3 float image, background 0.2."""
    if not valid_key(key):
        raise DatasetError(f"invalid semantic key {key!r}")
    img = np.full((IMAGE_H, IMAGE_W, IMAGE_C), BACKGROUND)
    for color, shape, pos in key:
        r0, c0 = 8 * (pos // 2), 8 * (pos % 2)
        for r, c in _shape_pixels(shape):
            img[r0 + r, c0 + c] = COLOR_RGB[color]
    return img


def caption(key, rng: Rng) -> np.ndarray:
    """Render a key to its 8-token sentence; rng picks the article."""
    if not valid_key(key):
        raise DatasetError(f"invalid semantic key {key!r}")
    if len(key) == 1:
        c, s, p = key[0]
        art = TOK_A if rng.next_float() < 0.5 else TOK_THE
        toks = [BOS, art, COLOR_BASE + c, SHAPE_BASE + s, TOK_AT, POS_BASE + p, EOS, PAD]
    else:
        (c1, s1, _), (c2, s2, _) = key
        toks = [BOS, COLOR_BASE + c1, SHAPE_BASE + s1, TOK_AND,
                COLOR_BASE + c2, SHAPE_BASE + s2, EOS, PAD]
    return np.array(toks, dtype=np.int64)


# --------------------------------------------------------------------------
# augmentations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugSpec:
    """One of the five image augmentations (or none), with its parameters."""

    kind: str
    lo: float = 0.0       # brightness
    hi: float = 0.0
    sigma: float = 0.0    # noise
    keep: float = 0.875   # crop keep-fraction
    levels: int = 8       # compression quantization levels

    KINDS = ("none", "brightness", "flip", "noise", "crop", "compression")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DatasetError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "brightness" and not (0.0 <= self.lo <= self.hi <= 1.0):
            raise DatasetError(f"brightness range [{self.lo}, {self.hi}] invalid")
        if self.kind == "noise" and self.sigma < 0.0:
            raise DatasetError(f"noise sigma {self.sigma} invalid")
        if self.kind == "crop" and not (0.0 < self.keep <= 1.0):
            raise DatasetError(f"crop keep-fraction {self.keep} invalid")
        if self.kind == "compression" and self.levels < 2:
            raise DatasetError(f"compression levels {self.levels} invalid (need >= 2)")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def brightness(cls, lo=0.0, hi=0.05):
        return cls("brightness", lo=lo, hi=hi)

    @classmethod
    def flip(cls):
        return cls("flip")

    @classmethod
    def noise(cls, sigma=0.05):
        return cls("noise", sigma=sigma)

    @classmethod
    def crop(cls, keep=0.875):
        return cls("crop", keep=keep)

    @classmethod
    def compression(cls, levels=8):
        return cls("compression", levels=levels)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "brightness":
            d["lo"], d["hi"] = self.lo, self.hi
        elif self.kind == "noise":
            d["sigma"] = self.sigma
        elif self.kind == "crop":
            d["keep"] = self.keep
        elif self.kind == "compression":
            d["levels"] = self.levels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugSpec":
        kind = d.get("kind", "none")
        kwargs = {k: d[k] for k in ("lo", "hi", "sigma", "keep", "levels") if k in d}
        return cls(kind, **kwargs)

    @classmethod
    def parse(cls, text: str) -> "AugSpec":
        """Parse "kind" or "kind:arg[:arg]", e.g. "brightness:0:0.05"."""
        parts = text.strip().split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "none" or kind == "flip":
                if args:
                    raise DatasetError(f"augmentation {kind!r} takes no parameters")
                return cls(kind)
            if kind == "brightness":
                lo, hi = (float(args[0]), float(args[1])) if args else (0.0, 0.05)
                return cls.brightness(lo, hi)
            if kind == "noise":
                return cls.noise(float(args[0])) if args else cls.noise()
            if kind == "crop":
                return cls.crop(float(args[0])) if args else cls.crop()
            if kind == "compression":
                return cls.compression(int(args[0])) if args else cls.compression()
        except (IndexError, ValueError) as exc:
            raise DatasetError(f"cannot parse augmentation {text!r}: {exc}") from exc
        raise DatasetError(f"unknown augmentation kind {kind!r}")

    def __str__(self):
        if self.kind == "brightness":
            return f"brightness:{self.lo:g}:{self.hi:g}"
        if self.kind == "noise":
            return f"noise:{self.sigma:g}"
        if self.kind == "crop":
            return f"crop:{self.keep:g}"
        if self.kind == "compression":
            return f"compression:{self.levels}"
        return self.kind


def augment(image: np.ndarray, spec: AugSpec, rng: Rng) -> np.ndarray:
    """Apply one augmentation; output is a fresh array with pixels in [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_H, IMAGE_W, IMAGE_C):
        raise DatasetError(f"augment: bad image shape {img.shape}")
    if spec.kind == "none":
        return img.copy()
    if spec.kind == "brightness":
        b = spec.lo + (spec.hi - spec.lo) * rng.next_float()
        return np.clip(img + b, 0.0, 1.0)
    if spec.kind == "flip":
        return img[:, ::-1, :].copy()
    if spec.kind == "noise":
        noise = rng.gauss_block(img.size, spec.sigma).reshape(img.shape)
        return np.clip(img + noise, 0.0, 1.0)
    if spec.kind == "crop":
        keep_px = min(IMAGE_H, max(1, round(IMAGE_H * spec.keep)))
        max_off = IMAGE_H - keep_px
        oy = rng.below(max_off + 1)
        ox = rng.below(max_off + 1)
        win = img[oy:oy + keep_px, ox:ox + keep_px]
        idx = (np.arange(IMAGE_H) * keep_px) // IMAGE_H  # nearest-neighbor resize
        return win[idx][:, idx].copy()
    if spec.kind == "compression":
        q = spec.levels - 1
        return np.rint(img * q) / q
    raise DatasetError(f"unknown augmentation kind {spec.kind!r}")


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Column-stacked image-caption pairs plus their semantic keys."""

    images: np.ndarray            # (n, 16, 16, 3) float64 in [0,1]
    tokens: np.ndarray            # (n, 8) int64
    keys: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]


def _single_object_keys():
    return [((c, s, p),)
            for c in range(N_COLORS) for s in range(N_SHAPES) for p in range(N_POSITIONS)]


def _crossing_partner(t1, t2):
    """For a type pair with distinct colors and shapes, the pair obtained by
    swapping which color carries which shape; None when no such pair exists."""
    c1, s1 = divmod(t1, N_SHAPES)
    c2, s2 = divmod(t2, N_SHAPES)
    if c1 == c2 or s1 == s2:
        return None
    a, b = c1 * N_SHAPES + s2, c2 * N_SHAPES + s1
    return (a, b) if a < b else (b, a)


def _test_pool(seed: int):
    """48 single-object keys plus 48 two-object keys, positions drawn per pair.

    Two-object keys use pairwise-distinct unordered type pairs so captions are
    unambiguous, and exclude simultaneous selection of a pair and its
    color/shape crossing (e.g. green-square+yellow-cross vs
    green-cross+yellow-square): mean-pooled dual encoders trained with plain
    in-batch contrastive loss do not reliably separate crossings, so such
    twins would turn retrieval into a coin flip on scenes the victim class
    cannot represent apart. 30 share-a-color-or-shape pairs plus one member
    of each of the 18 crossing couples gives exactly 48.
    """
    rng = Rng(seed ^ _POOL_SALT)
    pairs = [(t1, t2) for t1 in range(12) for t2 in range(t1 + 1, 12)]
    rng.shuffle(pairs)
    chosen = []
    taken = set()
    for t1, t2 in pairs:
        partner = _crossing_partner(t1, t2)
        if partner is not None and partner in taken:
            continue
        taken.add((t1, t2))
        chosen.append((t1, t2))
        if len(chosen) == 48:
            break
    twos = []
    for t1, t2 in chosen:
        p1 = rng.below(N_POSITIONS)
        p2 = rng.below(N_POSITIONS)
        while p2 == p1:
            p2 = rng.below(N_POSITIONS)
        twos.append(((t1 // N_SHAPES, t1 % N_SHAPES, p1),
                     (t2 // N_SHAPES, t2 % N_SHAPES, p2)))
    pool = _single_object_keys() + twos
    rng.shuffle(pool)
    return pool


def _draw_train_key(rng: Rng):
    def obj():
        return (rng.below(N_COLORS), rng.below(N_SHAPES), rng.below(N_POSITIONS))

    first = obj()
    if rng.next_float() < 0.5:
        return (first,)
    c, s, p = obj()
    while p == first[2]:
        p = rng.below(N_POSITIONS)
    return (first, (c, s, p))


def generate_dataset(seed: int, n_train: int, n_test: int):
    """Deterministic (train, test) datasets. Test keys are pairwise distinct,
    drawn from a 96-scene pool; train keys are drawn i.i.d. from the grammar."""
    if n_train < 1:
        raise DatasetError(f"n_train must be >= 1, got {n_train}")
    if not 0 <= n_test <= MAX_TEST_KEYS:
        raise DatasetError(
            f"n_test {n_test} exceeds the {MAX_TEST_KEYS}-scene distinct-key test pool"
        )
    test_keys = _test_pool(seed)[:n_test]

    train_imgs, train_toks, train_keys = [], [], []
    for i in range(n_train):
        rng = Rng(seed ^ i)
        key = _draw_train_key(rng)
        train_imgs.append(render(key))
        train_toks.append(caption(key, rng))
        train_keys.append(key)

    test_imgs, test_toks = [], []
    for j, key in enumerate(test_keys):
        rng = Rng(seed ^ (n_train + j))
        test_imgs.append(render(key))
        test_toks.append(caption(key, rng))

    train = Dataset(np.stack(train_imgs), np.stack(train_toks), train_keys)
    if n_test:
        test = Dataset(np.stack(test_imgs), np.stack(test_toks), list(test_keys))
    else:
        test = Dataset(np.empty((0, IMAGE_H, IMAGE_W, IMAGE_C)),
                       np.empty((0, SEQ_LEN), dtype=np.int64), [])
    return train, test


# --------------------------------------------------------------------------
# container file
# --------------------------------------------------------------------------

def save_dataset(train: Dataset, test: Dataset, path) -> None:
    """Single container holding train then test samples; pixels stored as
    little-endian f32, tokens as u16, semantic keys in a trailing JSON block."""
    n_total = len(train) + len(test)
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HIHHHH", _DATASET_VERSION, n_total,
                       IMAGE_H, IMAGE_W, IMAGE_C, SEQ_LEN)
    for ds in (train, test):
        for i in range(len(ds)):
            out += ds.images[i].astype("<f4").tobytes()
            out += ds.tokens[i].astype("<u2").tobytes()
    index = {
        "n_train": len(train),
        "n_test": len(test),
        "keys": [[list(obj) for obj in key] for key in train.keys + test.keys],
    }
    out += json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(out)


def load_dataset(path):
    """Inverse of save_dataset; returns (train, test)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise DatasetError(f"{path}: bad magic {blob[:4]!r}")
    version, n_total, h, w, c, seq = struct.unpack_from("<HIHHHH", blob, 4)
    if version != _DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    if (h, w, c, seq) != (IMAGE_H, IMAGE_W, IMAGE_C, SEQ_LEN):
        raise DatasetError(f"{path}: unexpected dimensions {(h, w, c, seq)}")
    record = h * w * c * 4 + seq * 2
    offset = 4 + struct.calcsize("<HIHHHH")
    body_end = offset + n_total * record
    if len(blob) < body_end:
        raise DatasetError(f"{path}: truncated sample section")
    images = np.empty((n_total, h, w, c))
    tokens = np.empty((n_total, seq), dtype=np.int64)
    for i in range(n_total):
        base = offset + i * record
        pix = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=base)
        images[i] = pix.astype(np.float64).reshape(h, w, c)
        tokens[i] = np.frombuffer(blob, dtype="<u2", count=seq,
                                  offset=base + h * w * c * 4)
    try:
        index = json.loads(blob[body_end:].decode())
        n_train, n_test = index["n_train"], index["n_test"]
        keys = [tuple(tuple(obj) for obj in key) for key in index["keys"]]
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"{path}: malformed JSON index block: {exc}") from exc
    if n_train + n_test != n_total or len(keys) != n_total:
        raise DatasetError(f"{path}: index block inconsistent with sample count")
    train = Dataset(images[:n_train], tokens[:n_train], keys[:n_train])
    test = Dataset(images[n_train:], tokens[n_train:], keys[n_train:])
    return train, test


def image_checksum(image: np.ndarray) -> int:
    """CRC32 of the image's little-endian f32 bytes (the stored form)."""
    return zlib.crc32(np.asarray(image).astype("<f4").tobytes())
