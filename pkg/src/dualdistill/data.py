"""Deterministic synthetic image-text pairs.

Images are grids of patch-aligned glyphs, one fixed orthogonal pattern per
symbol. Texts are sequences of symbol tokens. Randomness comes from numpy's
PCG64 bit generator seeded through ``SeedSequence([seed, stream, index])``,
which is specified bit-for-bit and therefore identical across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .models import MASK_ID, PAD_ID, ModelConfig

FIRST_SYMBOL_ID = 2
TASKS = ("match_multiset", "itm", "vlu_k_way")

# stream tags keep the draws of different operations independent
_STREAM_PAIRS, _STREAM_MASK, _STREAM_ITM, _STREAM_GLYPH, _STREAM_NOISE = 11, 12, 13, 14, 15


@dataclass
class SyntheticSpec:
    num_symbols: int = 16
    grid: int = 4
    patch_size: int = 16
    channels: int = 1
    text_len: int = 8
    image_distinct: int = 8
    text_distinct: int = 8
    task: str = "vlu_k_way"
    num_classes: int = 3
    # lower edge of each intersection-count bucket; the last bucket is open-ended
    bucket_edges: tuple = (0, 2, 4)
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.image_distinct > self.num_symbols or self.text_distinct > self.num_symbols:
            raise ValueError("distinct symbol counts cannot exceed the alphabet size")
        if self.image_distinct > self.grid**2:
            raise ValueError("more distinct image symbols than grid cells")
        if self.text_distinct > self.text_len:
            raise ValueError("text_distinct cannot exceed text_len")
        if len(self.bucket_edges) != self.num_classes:
            raise ValueError("need one bucket edge per class")
        self.bucket_edges = tuple(self.bucket_edges)

    @property
    def image_size(self) -> int:
        return self.grid * self.patch_size

    def check_model(self, cfg: ModelConfig) -> None:
        problems = []
        if self.num_symbols + FIRST_SYMBOL_ID > cfg.vocab_size:
            problems.append(f"{self.num_symbols} symbols do not fit vocabulary {cfg.vocab_size}")
        if self.grid**2 != cfg.num_patches:
            problems.append(f"grid {self.grid}x{self.grid} != model patch count {cfg.num_patches}")
        if self.patch_size != cfg.patch_size or self.channels != cfg.channels:
            problems.append("patch size / channels differ from model")
        if self.text_len > cfg.max_text_len:
            problems.append(f"text length {self.text_len} > model max {cfg.max_text_len}")
        if self.task == "vlu_k_way" and self.num_classes != cfg.num_classes:
            problems.append(f"{self.num_classes} label classes != model's {cfg.num_classes}")
        if problems:
            raise ValueError("synthetic spec incompatible with model: " + "; ".join(problems))

    def intersection_range(self) -> tuple:
        lo = max(0, self.image_distinct + self.text_distinct - self.num_symbols)
        return lo, min(self.image_distinct, self.text_distinct)

    def bucket_counts(self, k: int) -> list:
        """Intersection counts that fall in class ``k`` (restricted to feasible ones)."""
        lo, hi = self.intersection_range()
        edges = list(self.bucket_edges) + [hi + 1]
        return [c for c in range(edges[k], edges[k + 1]) if lo <= c <= hi]


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, C) float32
    ids: np.ndarray  # (B, M) int64
    text_mask: np.ndarray  # (B, M) bool
    labels: np.ndarray  # (B,) int64
    image_symbols: np.ndarray  # (B, G*G) symbol index per patch
    text_symbols: np.ndarray  # (B, M) symbol index per token, -1 for pads
    pair_ids: np.ndarray  # (B,) int64
    mlm_labels: Optional[np.ndarray] = None  # (B, M), -1 where not masked
    itm_flags: Optional[np.ndarray] = None  # (B,) 1 = matched

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]
        return Batch(**{k: pick(v) for k, v in self.__dict__.items()})


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def glyphs(spec: SyntheticSpec) -> np.ndarray:
    """(S, P, P, C) orthogonal glyph patterns with unit per-pixel RMS."""
    dim = spec.patch_size**2 * spec.channels
    if spec.num_symbols > dim:
        raise ValueError("cannot build more orthogonal glyphs than patch dimensions")
    g = _rng(0, _STREAM_GLYPH).normal(size=(dim, spec.num_symbols))
    q, _ = np.linalg.qr(g)
    pats = q.T * np.sqrt(dim)
    return pats.reshape(spec.num_symbols, spec.patch_size, spec.patch_size, spec.channels).astype(np.float32)


def render(spec: SyntheticSpec, cells: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Render (B, G*G) symbol grids into (B, H, W, C) images."""
    b = cells.shape[0]
    g, p = spec.grid, spec.patch_size
    pats = glyphs(spec)[cells]  # (B, G*G, P, P, C)
    img = pats.reshape(b, g, g, p, p, spec.channels).transpose(0, 1, 3, 2, 4, 5)
    img = img.reshape(b, g * p, g * p, spec.channels)
    if spec.noise > 0 and rng is not None:
        img = img + rng.normal(0.0, spec.noise, size=img.shape).astype(np.float32)
    return img.astype(np.float32)


def _image_cells(rng, spec: SyntheticSpec, symbols: np.ndarray) -> np.ndarray:
    n = spec.grid**2
    extra = rng.choice(symbols, size=n - symbols.size, replace=True)
    cells = np.concatenate([symbols, extra])
    return rng.permutation(cells)


def gen_pairs(spec: SyntheticSpec, batch_size: int, batch_index: int = 0) -> Batch:
    """Generate batch number ``batch_index`` of the stream defined by ``spec``.

    vlu_k_way: the label is the bucket of |image symbols ∩ text symbols|. The
    class is drawn uniformly, then an intersection count inside the bucket,
    then both symbol sets; each set on its own is a uniform random subset, so
    neither modality carries label information.
    match_multiset / itm: the text lists the image's distinct symbols.
    """
    rng = _rng(spec.seed, _STREAM_PAIRS, batch_index)
    s, m = spec.num_symbols, spec.text_len
    cells = np.empty((batch_size, spec.grid**2), dtype=np.int64)
    tsym = np.full((batch_size, m), -1, dtype=np.int64)
    labels = np.zeros(batch_size, dtype=np.int64)
    for i in range(batch_size):
        if spec.task == "vlu_k_way":
            k = int(rng.integers(spec.num_classes))
            c = int(rng.choice(spec.bucket_counts(k)))
            perm = rng.permutation(s)
            img_set = perm[: spec.image_distinct]
            rest = perm[spec.image_distinct :]
            txt_set = np.concatenate(
                [rng.choice(img_set, size=c, replace=False), rng.choice(rest, size=spec.text_distinct - c, replace=False)]
            )
            labels[i] = k
        else:
            img_set = rng.choice(s, size=spec.image_distinct, replace=False)
            txt_set = img_set[: spec.text_distinct]
            labels[i] = batch_index * batch_size + i
        cells[i] = _image_cells(rng, spec, img_set)
        words = np.concatenate([txt_set, rng.choice(txt_set, size=m - txt_set.size, replace=True)])
        tsym[i] = rng.permutation(words)
    images = render(spec, cells, _rng(spec.seed, _STREAM_NOISE, batch_index))
    ids = np.where(tsym >= 0, tsym + FIRST_SYMBOL_ID, PAD_ID).astype(np.int64)
    return Batch(
        images=images,
        ids=ids,
        text_mask=tsym >= 0,
        labels=labels,
        image_symbols=cells,
        text_symbols=tsym,
        pair_ids=np.arange(batch_index * batch_size, (batch_index + 1) * batch_size, dtype=np.int64),
    )


def intersection_counts(batch: Batch) -> np.ndarray:
    out = np.empty(len(batch), dtype=np.int64)
    for i in range(len(batch)):
        t = batch.text_symbols[i]
        out[i] = np.intersect1d(batch.image_symbols[i], t[t >= 0]).size
    return out


def mask_tokens(batch: Batch, seed: int, num_symbols: int, prob: float = 0.15) -> Batch:
    """BERT-style masking of real (non-pad) tokens: 80% [MASK], 10% random, 10% kept.

    CLS is not part of ``ids`` so it is never a candidate. Guarantees at least
    one masked token per batch.
    """
    rng = _rng(seed, _STREAM_MASK)
    ids = batch.ids.copy()
    chosen = (rng.random(ids.shape) < prob) & batch.text_mask
    if not chosen.any():
        valid = np.argwhere(batch.text_mask)
        r, c = valid[rng.integers(len(valid))]
        chosen[r, c] = True
    roll = rng.random(ids.shape)
    random_ids = rng.integers(FIRST_SYMBOL_ID, FIRST_SYMBOL_ID + num_symbols, size=ids.shape)
    labels = np.where(chosen, batch.ids, -1)
    ids = np.where(chosen & (roll < 0.8), MASK_ID, ids)
    ids = np.where(chosen & (roll >= 0.8) & (roll < 0.9), random_ids, ids)
    out = replace(batch, ids=ids, mlm_labels=labels)
    return out


def sample_itm_negatives(batch: Batch, seed: int, prob: float = 0.5) -> Batch:
    """With probability ``prob`` per example, swap in a different in-batch image."""
    b = len(batch)
    if b < 2:
        raise ValueError("ITM negatives need a batch of at least 2 examples")
    rng = _rng(seed, _STREAM_ITM)
    neg = rng.random(b) < prob
    src = np.arange(b)
    offsets = rng.integers(1, b, size=b)
    src = np.where(neg, (src + offsets) % b, src)
    return replace(
        batch,
        images=batch.images[src],
        image_symbols=batch.image_symbols[src],
        itm_flags=(~neg).astype(np.int64),
    )


# -- binary record format --------------------------------------------------------
_REC_MAGIC = b"DDSYNTH1"


def save_records(path, batch: Batch) -> None:
    """Write a batch as: magic, u64 record count, u64 H, W, C, M, G*G, then per record
    image float32[H*W*C], ids int64[M], mask u8[M], label int64, cells int64[G*G]."""
    b, h, w, c = batch.images.shape
    m = batch.ids.shape[1]
    n = batch.image_symbols.shape[1]
    with open(path, "wb") as f:
        f.write(_REC_MAGIC)
        f.write(struct.pack("<6Q", b, h, w, c, m, n))
        for i in range(b):
            f.write(batch.images[i].astype("<f4").tobytes())
            f.write(batch.ids[i].astype("<i8").tobytes())
            f.write(batch.text_mask[i].astype(np.uint8).tobytes())
            f.write(struct.pack("<q", int(batch.labels[i])))
            f.write(batch.image_symbols[i].astype("<i8").tobytes())


def load_records(path) -> Batch:
    blob = Path(path).read_bytes()
    if blob[:8] != _REC_MAGIC:
        raise ValueError("not a synthetic record file")
    b, h, w, c, m, n = struct.unpack("<6Q", blob[8:56])
    rec = np.dtype([("img", "<f4", (h, w, c)), ("ids", "<i8", (m,)), ("mask", "u1", (m,)), ("label", "<i8"), ("cells", "<i8", (n,))])
    arr = np.frombuffer(blob, dtype=rec, count=b, offset=56)
    ids = arr["ids"].astype(np.int64)
    mask = arr["mask"].astype(bool)
    return Batch(
        images=arr["img"].astype(np.float32),
        ids=ids,
        text_mask=mask,
        labels=arr["label"].astype(np.int64),
        image_symbols=arr["cells"].astype(np.int64),
        text_symbols=np.where(mask, ids - FIRST_SYMBOL_ID, -1),
        pair_ids=np.arange(b, dtype=np.int64),
    )
