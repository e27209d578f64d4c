"""Input embedders, the fusion-encoder teacher, the dual-encoder student and
their attention captures.

All forward passes are batched: images are ``(B, H, W, C)`` float arrays,
token ids are ``(B, M)`` integer arrays padded with ``PAD_ID`` and paired
with a boolean ``text_mask`` (True = real token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    parameter,
    softmax_rows,
)

PAD_ID = 0
MASK_ID = 1


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    channels: int = 1
    patch_size: int = 16
    vocab_size: int = 64
    max_text_len: int = 16
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    ffn: int = 128
    num_classes: int = 3
    include_cls: bool = False
    dedicated_cross_proj: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        p = self.patch_size
        if self.image_height % p or self.image_width % p:
            raise ValueError(f"patch size {p} must divide image {self.image_height}x{self.image_width}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_text_len < 1:
            raise ValueError("max_text_len must be >= 1")

    @property
    def num_patches(self) -> int:
        return self.image_height * self.image_width // self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


def full_scale_config() -> ModelConfig:
    """ViLT-base sized configuration (384x640 images, 32px patches)."""
    return ModelConfig(
        image_height=384, image_width=640, channels=3, patch_size=32, vocab_size=30522,
        max_text_len=40, hidden=768, layers=12, heads=12, ffn=3072,
    )


class Module:
    """Minimal parameter container: attributes that are trainable tensors,
    modules, or lists of modules are discovered recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}/")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{name}{i}/")

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return dict(self.named_parameters(prefix))

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        params = self.parameters(prefix)
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"checkpoint is missing {missing[:5]}")
        for k, p in params.items():
            if k in state:
                if state[k].shape != p.shape:
                    raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != parameter shape {p.shape}")
                p.data = np.array(state[k], dtype=np.float32)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape).astype(np.float32))


def _zeros(shape) -> Tensor:
    return parameter(np.zeros(shape, dtype=np.float32))


def _ones(shape) -> Tensor:
    return parameter(np.ones(shape, dtype=np.float32))


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, std: float):
        self.weight = _normal(rng, (n_in, n_out), std)
        self.bias = _zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _ones((dim,))
        self.bias = _zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer GELU network."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int, std: float):
        self.fc1 = Linear(rng, n_in, n_hidden, std)
        self.fc2 = Linear(rng, n_hidden, n_out, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


# -- embedders -------------------------------------------------------------------
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C), patches in row-major grid order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisualEmbedder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.hidden
        self.cfg = cfg
        self.patch_proj = _normal(rng, (cfg.patch_dim, d), cfg.init_std)
        self.pos = _normal(rng, (cfg.num_patches + 1, d), cfg.init_std)
        self.type = _normal(rng, (d,), cfg.init_std)
        self.cls = _normal(rng, (d,), cfg.init_std)

    def __call__(self, images) -> Tensor:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float32)
        expected = (cfg.image_height, cfg.image_width, cfg.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"image batch shape {images.shape} does not match (B, {expected[0]}, {expected[1]}, {expected[2]})")
        patches = Tensor(patchify(images, cfg.patch_size))
        b = images.shape[0]
        proj = matmul(patches, self.patch_proj)
        cls = Tensor(np.zeros((b, 1, cfg.hidden), dtype=np.float32)) + self.cls
        return concat([cls, proj], axis=1) + self.pos + self.type


class TextEmbedder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.hidden
        self.cfg = cfg
        self.words = _normal(rng, (cfg.vocab_size, d), cfg.init_std)
        self.pos = _normal(rng, (cfg.max_text_len + 1, d), cfg.init_std)
        self.type = _normal(rng, (d,), cfg.init_std)
        self.cls = _normal(rng, (d,), cfg.init_std)

    def __call__(self, ids) -> Tensor:
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be (B, M), got {ids.shape}")
        b, m = ids.shape
        if m > cfg.max_text_len:
            raise ValueError(f"text length {m} exceeds maximum {cfg.max_text_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary [0, {cfg.vocab_size})")
        cls = Tensor(np.zeros((b, 1, cfg.hidden), dtype=np.float32)) + self.cls
        parts = [cls]
        if m:
            parts.append(embedding_lookup(self.words, ids))
        x = concat(parts, axis=1) if len(parts) > 1 else cls
        return x + self.pos[: m + 1] + self.type


def text_key_mask(text_mask: np.ndarray) -> np.ndarray:
    """Prepend the always-valid CLS position to a (B, M) token mask."""
    text_mask = np.asarray(text_mask, dtype=bool)
    return np.concatenate([np.ones((text_mask.shape[0], 1), dtype=bool), text_mask], axis=1)


# -- transformer blocks ------------------------------------------------------------
@dataclass
class LayerCapture:
    """Per-layer tensors recorded during a forward pass (heads split)."""

    q: Tensor  # (B, A, S, dk)
    k: Tensor
    probs: Tensor  # (B, A, S, S)
    key_mask: Optional[np.ndarray]  # (B, S) bool
    normed: Tensor  # layer-norm'd input, (B, S, D)
    output: Tensor  # hidden state after the block, (B, S, D)


class EncoderLayer(Module):
    """Pre-LN transformer block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: ModelConfig, rng):
        d, s = cfg.hidden, cfg.init_std
        self.heads = cfg.heads
        self.ln1 = LayerNorm(d)
        self.wq = Linear(rng, d, d, s)
        self.wk = Linear(rng, d, d, s)
        self.wv = Linear(rng, d, d, s)
        self.wo = Linear(rng, d, d, s)
        self.ln2 = LayerNorm(d)
        self.ffn = MLP(rng, d, cfg.ffn, d, s)

    def split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray], capture: bool = False):
        b, n, d = x.shape
        dk = d // self.heads
        h = self.ln1(x)
        q = self.split_heads(self.wq(h))
        k = self.split_heads(self.wk(h))
        v = self.split_heads(self.wv(h))
        scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(dk))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        probs = softmax_rows(scores, mask)
        ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + self.wo(ctx)
        x = x + self.ffn(self.ln2(x))
        cap = LayerCapture(q, k, probs, key_mask, h, x) if capture else None
        return x, cap


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.layer = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.hidden)

    def __call__(self, x: Tensor, key_mask, capture: Iterable[int] = ()):
        capture = set(capture)
        bad = [l for l in capture if not 0 <= l < len(self.layer)]
        if bad:
            raise IndexError(f"capture layers {bad} out of range for {len(self.layer)} layers")
        caps: Dict[int, LayerCapture] = {}
        for i, layer in enumerate(self.layer):
            x, cap = layer(x, key_mask, capture=i in capture)
            if cap is not None:
                caps[i] = cap
        return self.final_ln(x), caps


# -- attention bundles --------------------------------------------------------------
def _fresh_softmax(q: Tensor, k: Tensor, key_mask: Optional[np.ndarray]) -> Tensor:
    dk = q.shape[-1]
    scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(dk))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    return softmax_rows(scores, mask)


@dataclass
class AttentionBundle:
    """Captured attention of a teacher (``joint``) or a student (``visual`` + ``textual``).

    Block methods return ``(B, A, rows, cols)`` tensors; ``query_mask``
    methods give the ``(B, rows)`` validity of each query row.
    """

    num_patches: int
    include_cls: bool
    text_mask: np.ndarray  # (B, M) bool, CLS excluded
    joint: Dict[int, LayerCapture] = field(default_factory=dict)
    visual: Dict[int, LayerCapture] = field(default_factory=dict)
    textual: Dict[int, LayerCapture] = field(default_factory=dict)
    cross_proj: Optional[Dict[int, Tuple["Linear", "Linear"]]] = None

    @property
    def is_teacher(self) -> bool:
        return bool(self.joint)

    @property
    def layers(self) -> List[int]:
        return sorted(self.joint or self.visual)

    def _check(self, layer: int) -> None:
        caps = self.joint if self.is_teacher else self.visual
        if layer not in caps or (not self.is_teacher and layer not in self.textual):
            raise KeyError(f"layer {layer} was not captured")

    # index helpers: rows/cols of each modality inside the joint sequence
    def _vis_range(self) -> slice:
        return slice(0 if self.include_cls else 1, self.num_patches + 1)

    def _txt_range(self, joint: bool) -> slice:
        off = self.num_patches + 1 if joint else 0
        return slice(off + (0 if self.include_cls else 1), None)

    def _txt_keys(self) -> np.ndarray:
        m = self.text_mask
        if self.include_cls:
            m = text_key_mask(m)
        return m

    def text_query_mask(self) -> np.ndarray:
        return self._txt_keys()

    def visual_query_mask(self) -> np.ndarray:
        n = self.num_patches + (1 if self.include_cls else 0)
        return np.ones((self.text_mask.shape[0], n), dtype=bool)

    def queries_keys(self, layer: int):
        """(q_v, k_v, q_t, k_t) restricted to the distilled positions."""
        self._check(layer)
        vr, tr = self._vis_range(), self._txt_range(self.is_teacher)
        if self.is_teacher:
            cap = self.joint[layer]
            return cap.q[:, :, vr], cap.k[:, :, vr], cap.q[:, :, tr], cap.k[:, :, tr]
        cv, ct = self.visual[layer], self.textual[layer]
        if self.cross_proj is not None:
            pq, pk = self.cross_proj[layer]
            qv, kv = _split(pq(cv.normed), cv.q.shape[1]), _split(pk(cv.normed), cv.q.shape[1])
            qt, kt = _split(pq(ct.normed), ct.q.shape[1]), _split(pk(ct.normed), ct.q.shape[1])
            return qv[:, :, vr], kv[:, :, vr], qt[:, :, tr], kt[:, :, tr]
        return cv.q[:, :, vr], cv.k[:, :, vr], ct.q[:, :, tr], ct.k[:, :, tr]

    def cross(self, layer: int) -> Tuple[Tensor, Tensor]:
        """Freshly softmaxed (v2t, t2v) attention at ``layer``."""
        qv, kv, qt, kt = self.queries_keys(layer)
        v2t = _fresh_softmax(qv, kt, self._txt_keys())
        t2v = _fresh_softmax(qt, kv, None)
        return v2t, t2v

    def uni(self, layer: int) -> Tuple[Tensor, Tensor]:
        """Freshly softmaxed (v2v, t2t) attention restricted to the distilled positions."""
        qv, kv, qt, kt = self.queries_keys(layer)
        return _fresh_softmax(qv, kv, None), _fresh_softmax(qt, kt, self._txt_keys())

    def whole(self, layer: int) -> Tensor:
        """The full captured joint attention (teacher only), (B, A, N+M+2, N+M+2)."""
        if not self.is_teacher:
            raise TypeError("whole attention exists only for the fusion encoder")
        self._check(layer)
        return self.joint[layer].probs

    def cls_states(self, layer: int) -> Tuple[Tensor, Tensor]:
        """(visual CLS, textual CLS) hidden states after ``layer``, (B, D) each."""
        self._check(layer)
        if self.is_teacher:
            out = self.joint[layer].output
            return out[:, 0], out[:, self.num_patches + 1]
        return self.visual[layer].output[:, 0], self.textual[layer].output[:, 0]


def _split(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


@dataclass
class ModelOutput:
    visual: Tensor  # final visual hidden states (B, N+1, D)
    textual: Tensor  # final textual hidden states (B, M+1, D)
    cls_v: Tensor
    cls_t: Tensor
    bundle: AttentionBundle
    logits: Optional[Tensor] = None


# -- models ----------------------------------------------------------------------------
class FusionTeacher(Module):
    """Single transformer over the concatenation [H0_v; H0_t]."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.hidden
        self.cfg = cfg
        self.visual_embed = VisualEmbedder(cfg, rng)
        self.text_embed = TextEmbedder(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.task_head = Linear(rng, 2 * d, cfg.num_classes, cfg.init_std)
        self.itm_head = Linear(rng, 2 * d, 2, cfg.init_std)
        self.mlm_head = Linear(rng, d, cfg.vocab_size, cfg.init_std)

    def parameters(self, prefix: str = "teacher/") -> Dict[str, Tensor]:
        return super().parameters(prefix)

    def state_dict(self, prefix: str = "teacher/"):
        return super().state_dict(prefix)

    def load_state_dict(self, state, prefix: str = "teacher/", strict: bool = True):
        super().load_state_dict(state, prefix, strict)

    def encode(self, h_v: Tensor, h_t: Tensor, text_mask, capture: Iterable[int] = ()) -> ModelOutput:
        if h_v.shape[-1] != h_t.shape[-1]:
            raise ShapeError(f"visual width {h_v.shape[-1]} != textual width {h_t.shape[-1]}")
        text_mask = np.asarray(text_mask, dtype=bool)
        n1 = h_v.shape[1]
        key_mask = np.concatenate([np.ones((h_v.shape[0], n1), dtype=bool), text_key_mask(text_mask)], axis=1)
        x, caps = self.encoder(concat([h_v, h_t], axis=1), key_mask, capture)
        bundle = AttentionBundle(n1 - 1, self.cfg.include_cls, text_mask, joint=caps)
        return ModelOutput(x[:, :n1], x[:, n1:], x[:, 0], x[:, n1], bundle)

    def __call__(self, images, ids, text_mask, capture: Iterable[int] = (), head: Optional[str] = "task") -> ModelOutput:
        out = self.encode(self.visual_embed(images), self.text_embed(ids), text_mask, capture)
        if head is not None:
            out.logits = self.head_logits(out, head)
        return out

    def head_logits(self, out: ModelOutput, head: str) -> Tensor:
        if head == "mlm":
            return self.mlm_head(out.textual)
        pair = concat([out.cls_v, out.cls_t], axis=-1)
        if head == "task":
            return self.task_head(pair)
        if head == "itm":
            return self.itm_head(pair)
        raise ValueError(f"unknown head '{head}'")


class DualStudent(Module):
    """Separate visual and textual transformer stacks plus shallow fusion heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.hidden
        self.cfg = cfg
        self.visual = _Stack(cfg, rng, VisualEmbedder(cfg, rng))
        self.textual = _Stack(cfg, rng, TextEmbedder(cfg, rng))
        self.task_head = MLP(rng, 2 * d, d, cfg.num_classes, cfg.init_std)
        self.itm_head = MLP(rng, 2 * d, d, 2, cfg.init_std)
        self.mlm_head = Linear(rng, d, cfg.vocab_size, cfg.init_std)
        self.log_tau = parameter(np.array(math.log(0.07), dtype=np.float32))
        if cfg.dedicated_cross_proj:
            self.cross_q = [Linear(rng, d, d, cfg.init_std) for _ in range(cfg.layers)]
            self.cross_k = [Linear(rng, d, d, cfg.init_std) for _ in range(cfg.layers)]

    def parameters(self, prefix: str = "student/") -> Dict[str, Tensor]:
        return super().parameters(prefix)

    def state_dict(self, prefix: str = "student/"):
        return super().state_dict(prefix)

    def load_state_dict(self, state, prefix: str = "student/", strict: bool = True):
        super().load_state_dict(state, prefix, strict)

    def encode_visual(self, h_v: Tensor, capture: Iterable[int] = ()):
        return self.visual(h_v, None, capture)

    def encode_text(self, h_t: Tensor, text_mask, capture: Iterable[int] = ()):
        return self.textual(h_t, text_key_mask(text_mask), capture)

    def encode(self, h_v: Tensor, h_t: Tensor, text_mask, capture: Iterable[int] = ()) -> ModelOutput:
        if h_v.shape[-1] != h_t.shape[-1]:
            raise ShapeError(f"visual width {h_v.shape[-1]} != textual width {h_t.shape[-1]}")
        text_mask = np.asarray(text_mask, dtype=bool)
        xv, cv = self.encode_visual(h_v, capture)
        xt, ct = self.encode_text(h_t, text_mask, capture)
        return self._output(xv, xt, text_mask, cv, ct)

    def _output(self, xv, xt, text_mask, cv=None, ct=None) -> ModelOutput:
        proj = None
        if self.cfg.dedicated_cross_proj:
            proj = {l: (self.cross_q[l], self.cross_k[l]) for l in (cv or {})}
        bundle = AttentionBundle(xv.shape[1] - 1, self.cfg.include_cls, text_mask, visual=cv or {}, textual=ct or {}, cross_proj=proj)
        return ModelOutput(xv, xt, xv[:, 0], xt[:, 0], bundle)

    def __call__(self, images, ids, text_mask, capture: Iterable[int] = (), head: Optional[str] = "task") -> ModelOutput:
        out = self.encode(self.visual.embed(images), self.textual.embed(ids), text_mask, capture)
        if head is not None:
            out.logits = self.head_logits(out, head)
        return out

    def forward_cached(self, visual_states: Tensor, ids, text_mask, head: str = "task") -> ModelOutput:
        """Online path: precomputed final visual states + the textual stack only."""
        text_mask = np.asarray(text_mask, dtype=bool)
        xt, _ = self.encode_text(self.textual.embed(ids), text_mask)
        out = self._output(visual_states, xt, text_mask)
        out.logits = self.head_logits(out, head)
        return out

    def head_logits(self, out: ModelOutput, head: str) -> Tensor:
        if head == "mlm":
            return self.mlm_head(out.textual)
        if head == "dot":
            return fuse(out.cls_v, out.cls_t, "dot")
        if head == "task":
            return fuse(out.cls_v, out.cls_t, "mlp", self.task_head)
        if head == "itm":
            return fuse(out.cls_v, out.cls_t, "mlp", self.itm_head)
        raise ValueError(f"unknown head '{head}'")


class _Stack(Encoder):
    """One student tower: its own embedder followed by a transformer encoder."""

    def __init__(self, cfg: ModelConfig, rng, embed: Module):
        self.embed = embed
        super().__init__(cfg, rng)


def fuse(cls_v: Tensor, cls_t: Tensor, mode: str, mlp: Optional[MLP] = None) -> Tensor:
    """Shallow fusion of CLS vectors: ``mlp`` on their concatenation, or ``dot`` product.

    For batched (B, D) inputs ``dot`` returns the row-wise scores (B,).
    """
    if mode == "dot":
        if mlp is not None:
            raise ValueError("dot fusion takes no MLP")
        return (cls_v * cls_t).sum(axis=-1)
    if mode == "mlp":
        if mlp is None:
            raise ValueError("mlp fusion requires a head")
        return mlp(concat([cls_v, cls_t], axis=-1))
    raise ValueError(f"unknown fusion mode '{mode}'")


def init_student_from_teacher(student: DualStudent, teacher: FusionTeacher) -> None:
    """Copy the teacher's embedders and encoder into both student stacks."""
    t = teacher.parameters("")
    for side, emb in (("visual", "visual_embed"), ("textual", "text_embed")):
        for name, p in student.parameters("").items():
            if name.startswith(f"{side}/embed/"):
                p.data = t[emb + name[len(f"{side}/embed") :]].data.copy()
            elif name.startswith(f"{side}/"):
                p.data = t["encoder/" + name[len(f"{side}/") :]].data.copy()
