"""Offline visual-feature caching for the dual encoder and a latency benchmark
against fusion-encoder inference."""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, container, no_grad
from .models import DualStudent, FusionTeacher, ModelConfig, ModelOutput
from .pipeline import checkpoint_digest


class CacheError(ValueError):
    pass


class StaleCacheError(CacheError):
    """The cache was built by a different checkpoint than the serving model."""


class MissingEntryError(CacheError, KeyError):
    pass


def image_key(image: np.ndarray) -> str:
    """Content hash of a raw image tensor (shape and float32 bytes)."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:32]


@dataclass
class FeatureCache:
    """Final visual hidden states ((N+1) x D) per image id, tied to one checkpoint."""

    checkpoint_hash: str
    num_tokens: int
    width: int
    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    lookups: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def add(self, key: str, states: np.ndarray) -> None:
        if key in self.entries:
            raise CacheError(f"entry '{key}' already written")
        states = np.array(states, dtype=np.float32)
        if states.shape != (self.num_tokens + 1, self.width):
            raise CacheError(f"entry shape {states.shape} != ({self.num_tokens + 1}, {self.width})")
        states.flags.writeable = False
        self.entries[key] = states

    def get(self, key: str) -> np.ndarray:
        self.lookups += 1
        try:
            return self.entries[key]
        except KeyError:
            raise MissingEntryError(f"image id '{key}' not in cache") from None

    def check(self, model: DualStudent, digest: Optional[str] = None) -> None:
        digest = digest or checkpoint_digest(model)
        if digest != self.checkpoint_hash:
            raise StaleCacheError(f"cache built for checkpoint {self.checkpoint_hash}, serving {digest}")

    def header(self) -> dict:
        return {"kind": "feature_cache", "checkpoint_hash": self.checkpoint_hash, "N": self.num_tokens, "D": self.width}

    def encode(self) -> bytes:
        return container.encode(self.entries, self.header())

    def save(self, path) -> None:
        container.save(path, self.entries, self.header())

    @classmethod
    def load(cls, path) -> "FeatureCache":
        entries, header = container.load(path)
        if header.get("kind") != "feature_cache":
            raise CacheError(f"{path} is not a feature cache")
        cache = cls(header["checkpoint_hash"], int(header["N"]), int(header["D"]))
        for k, v in entries.items():
            cache.add(k, v)
        return cache


def build_cache(
    student: DualStudent,
    images: np.ndarray,
    ids: Optional[Sequence[str]] = None,
    chunk: int = 64,
    digest: Optional[str] = None,
) -> FeatureCache:
    """Encode every unique image once with the visual stack.

    ``ids`` default to content hashes; explicit ids that repeat must refer to
    identical image content.
    """
    images = np.asarray(images, dtype=np.float32)
    keys = [image_key(im) for im in images]
    if ids is None:
        ids = keys
    elif len(ids) != len(images):
        raise ValueError(f"{len(ids)} ids for {len(images)} images")
    first: Dict[str, int] = {}
    for i, (name, key) in enumerate(zip(ids, keys)):
        j = first.setdefault(name, i)
        if keys[j] != key:
            raise CacheError(f"id '{name}' used for two different images")
    order = sorted(first.items(), key=lambda kv: kv[1])
    cfg = student.cfg
    cache = FeatureCache(digest or checkpoint_digest(student), cfg.num_patches, cfg.hidden)
    with no_grad():
        for s in range(0, len(order), chunk):
            part = order[s : s + chunk]
            h_v = student.visual.embed(images[[i for _, i in part]])
            states, _ = student.encode_visual(h_v)
            for (name, _), st in zip(part, states.data):
                cache.add(name, st)
    return cache


def infer_with_cache(
    student: DualStudent,
    cache: FeatureCache,
    image_ids: Sequence[str],
    ids: np.ndarray,
    text_mask: np.ndarray,
    head: str = "task",
    digest: Optional[str] = None,
) -> ModelOutput:
    """Text stack + fusion head online, visual states read from ``cache``."""
    cache.check(student, digest)
    if len(image_ids) != len(ids):
        raise ValueError(f"{len(image_ids)} image ids for {len(ids)} texts")
    states = np.stack([cache.get(k) for k in image_ids])
    with no_grad():
        return student.forward_cached(Tensor(states), ids, text_mask, head=head)


# -- latency ------------------------------------------------------------------------------
def bench_model_config(num_visual_tokens: int = 240, num_text_tokens: int = 40, **kw) -> ModelConfig:
    """Desk-width config whose patch grid yields ``num_visual_tokens`` tokens."""
    patch = kw.pop("patch_size", 8)
    rows = int(np.sqrt(num_visual_tokens))
    while num_visual_tokens % rows:
        rows -= 1
    cols = num_visual_tokens // rows
    return ModelConfig(image_height=rows * patch, image_width=cols * patch, patch_size=patch,
                       max_text_len=num_text_tokens, **kw)


@dataclass
class LatencyScenario:
    num_visual_tokens: int = 240
    num_text_tokens: int = 40
    num_images: int = 8
    texts_per_image: int = 5
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    repetitions: int = 5
    warmup: int = 1
    use_cache: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 5:
            raise ValueError("latency needs at least 5 repetitions")
        if self.warmup < 1:
            raise ValueError("latency needs at least 1 warmup repetition")
        if self.num_images < 1 or self.texts_per_image < 1:
            raise ValueError("need at least one image and one text per image")

    def model_config(self) -> ModelConfig:
        return bench_model_config(self.num_visual_tokens, self.num_text_tokens, layers=self.layers,
                                  hidden=self.hidden, heads=self.heads, ffn=self.ffn)


@dataclass
class LatencyReport:
    batch_size: int
    num_visual_tokens: int
    num_text_tokens: int
    repetitions: int
    use_cache: bool
    fusion_online: float
    dual_online: float
    offline_cache: float
    speedup: float
    total_speedup: float
    samples: Dict[str, List[float]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _timed(fn, reps: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def measure_latency(
    scenario: LatencyScenario,
    teacher: Optional[FusionTeacher] = None,
    student: Optional[DualStudent] = None,
) -> LatencyReport:
    """Median wall-clock of fusion vs dual inference on identical inputs.

    Offline time covers encoding the unique images into a cache; online time
    covers scoring every (image, text) pair. With ``use_cache=False`` the dual
    encoder runs both stacks online and the offline phase is empty.
    """
    cfg = scenario.model_config()
    teacher = teacher or FusionTeacher(cfg, seed=scenario.seed)
    student = student or DualStudent(cfg, seed=scenario.seed + 1)
    tc, sc = teacher.cfg, student.cfg
    for k in ("layers", "hidden", "heads", "ffn", "image_height", "image_width", "patch_size", "max_text_len"):
        if getattr(tc, k) != getattr(sc, k):
            raise ValueError(f"mismatched configs: teacher {k}={getattr(tc, k)}, student {k}={getattr(sc, k)}")

    rng = np.random.default_rng(scenario.seed)
    images = rng.normal(size=(scenario.num_images, tc.image_height, tc.image_width, tc.channels)).astype(np.float32)
    n_pairs = scenario.num_images * scenario.texts_per_image
    m = scenario.num_text_tokens
    ids = rng.integers(2, tc.vocab_size, size=(n_pairs, m))
    text_mask = np.ones((n_pairs, m), dtype=bool)
    pair_image = np.repeat(np.arange(scenario.num_images), scenario.texts_per_image)
    pair_images = images[pair_image]
    names = [f"img{i}" for i in range(scenario.num_images)]
    pair_names = [names[i] for i in pair_image]
    digest = checkpoint_digest(student)

    def fusion():
        with no_grad():
            teacher(pair_images, ids, text_mask, head="task")

    cache_box = {}

    def offline():
        cache_box["cache"] = build_cache(student, images, names, digest=digest)

    def dual():
        if scenario.use_cache:
            infer_with_cache(student, cache_box["cache"], pair_names, ids, text_mask, digest=digest)
        else:
            with no_grad():
                student(pair_images, ids, text_mask, head="task")

    reps, warm = scenario.repetitions, scenario.warmup
    samples = {"fusion_online": _timed(fusion, reps, warm)}
    if scenario.use_cache:
        samples["offline_cache"] = _timed(offline, reps, warm)
    else:
        samples["offline_cache"] = [0.0] * reps
    samples["dual_online"] = _timed(dual, reps, warm)
    med = {k: statistics.median(v) for k, v in samples.items()}
    return LatencyReport(
        batch_size=n_pairs,
        num_visual_tokens=scenario.num_visual_tokens,
        num_text_tokens=m,
        repetitions=reps,
        use_cache=scenario.use_cache,
        fusion_online=med["fusion_online"],
        dual_online=med["dual_online"],
        offline_cache=med["offline_cache"],
        speedup=med["fusion_online"] / med["dual_online"],
        total_speedup=med["fusion_online"] / (med["dual_online"] + med["offline_cache"]),
        samples=samples,
    )
