"""Distillation objectives: cross-modal attention KL, soft labels, InfoNCE,
their per-task composition, and student/teacher layer mappings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clamp,
    cross_entropy,
    exp,
    kl_rows,
    log_softmax,
    matmul,
    mean,
    mul,
    scale,
    softmax_rows,
    sum_,
)
from .models import AttentionBundle

TAU_MIN, TAU_MAX = 1e-3, 100.0
LOG_TAU_MIN, LOG_TAU_MAX = math.log(TAU_MIN), math.log(TAU_MAX)
MAPPINGS = ("last", "top_k", "bottom_k", "all_layerwise")
ATTENTION_TERMS = ("cross", "uni", "whole")


@dataclass
class DistillConfig:
    ca: bool = True
    sl: bool = True
    nce: bool = True
    gold_ce: bool = False
    hidden_states: bool = False
    ca_weight: float = 1.0
    sl_weight: float = 1.0
    nce_weight: float = 1.0
    gold_weight: float = 1.0
    hidden_weight: float = 1.0
    kl_direction: str = "student_first"
    layer_mapping: str = "last"
    mapping_k: int = 2
    # which attention blocks are distilled: cross (v2t, t2v), uni (v2v, t2t) or whole (both)
    attention_terms: str = "cross"
    sl_temperature: float = 1.0

    def __post_init__(self):
        if not (self.ca or self.sl or self.nce or self.gold_ce or self.hidden_states):
            raise ValueError("at least one loss must be enabled")
        for k in ("ca_weight", "sl_weight", "nce_weight", "gold_weight", "hidden_weight"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.kl_direction not in ("student_first", "teacher_first"):
            raise ValueError(f"unknown kl_direction '{self.kl_direction}'")
        if self.layer_mapping not in MAPPINGS:
            raise ValueError(f"unknown layer_mapping '{self.layer_mapping}'")
        if self.attention_terms not in ATTENTION_TERMS:
            raise ValueError(f"unknown attention_terms '{self.attention_terms}'")
        if self.sl_temperature <= 0:
            raise ValueError("sl_temperature must be positive")


def layer_mapping(strategy: str, teacher_layers: int, student_layers: int, k: int = 2) -> List[Tuple[int, int]]:
    """(student layer, teacher layer) pairs, 0-indexed."""
    if teacher_layers < 1 or student_layers < 1:
        raise ValueError("depths must be >= 1")
    if strategy == "last":
        return [(student_layers - 1, teacher_layers - 1)]
    if strategy == "all_layerwise":
        # uniform stride when depths differ
        return [(i, max(0, (i + 1) * teacher_layers // student_layers - 1)) for i in range(student_layers)]
    if strategy in ("top_k", "bottom_k"):
        if not 1 <= k <= min(teacher_layers, student_layers):
            raise ValueError(f"k={k} invalid for depths {student_layers}/{teacher_layers}")
        if strategy == "top_k":
            return [(student_layers - k + j, teacher_layers - k + j) for j in range(k)]
        return [(j, j) for j in range(k)]
    raise ValueError(f"unknown mapping strategy '{strategy}'")


def _kl(student: Tensor, teacher: Tensor, row_mask, direction: str) -> Tensor:
    if direction == "student_first":
        return kl_rows(student, teacher, row_mask)
    return kl_rows(teacher, student, row_mask)


def _query_rows(mask: np.ndarray, heads: int) -> np.ndarray:
    return np.broadcast_to(mask[:, None, :], (mask.shape[0], heads, mask.shape[1]))


def loss_cross_attention(
    student: AttentionBundle,
    teacher: AttentionBundle,
    mapping: Sequence[Tuple[int, int]],
    direction: str = "student_first",
    terms: str = "cross",
) -> Tensor:
    """KL(A_S^v2t || A_T^v2t) + KL(A_S^t2v || A_T^t2v), averaged over heads,
    valid query rows and mapped layer pairs. Teacher blocks are detached."""
    if not mapping:
        raise ValueError("empty layer mapping")
    total = None
    for ls, lt in mapping:
        blocks_s, blocks_t, masks = [], [], []
        if terms in ("cross", "whole"):
            blocks_s += list(student.cross(ls))
            blocks_t += list(teacher.cross(lt))
            masks += [student.visual_query_mask(), student.text_query_mask()]
        if terms in ("uni", "whole"):
            blocks_s += list(student.uni(ls))
            blocks_t += list(teacher.uni(lt))
            masks += [student.visual_query_mask(), student.text_query_mask()]
        if blocks_s[0].shape[1] != blocks_t[0].shape[1]:
            raise ValueError(f"head count mismatch: student {blocks_s[0].shape[1]} vs teacher {blocks_t[0].shape[1]}")
        for s, t, m in zip(blocks_s, blocks_t, masks):
            term = _kl(s, t.detach(), _query_rows(m, s.shape[1]), direction)
            total = term if total is None else total + term
    return scale(total, 1.0 / len(mapping))


def loss_soft_label(
    z_student: Tensor,
    z_teacher: Tensor,
    direction: str = "student_first",
    temperature: float = 1.0,
    row_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """KL between softmax(z_S) and softmax(z_T), mean over rows; teacher detached."""
    if z_student.shape != z_teacher.shape:
        raise ValueError(f"logit shape mismatch {z_student.shape} vs {z_teacher.shape}")
    zs = z_student if temperature == 1.0 else scale(z_student, 1.0 / temperature)
    zt = z_teacher.detach() if temperature == 1.0 else scale(z_teacher.detach(), 1.0 / temperature)
    return _kl(softmax_rows(zs), softmax_rows(zt), row_mask, direction)


def temperature(log_tau: Tensor) -> Tensor:
    return exp(clamp(log_tau, LOG_TAU_MIN, LOG_TAU_MAX))


def loss_infonce(image_reps: Tensor, text_reps: Tensor, log_tau: Tensor) -> Tuple[Tensor, Tensor]:
    """(L_i2t, L_t2i), each summed over the batch, with dot-product similarity."""
    n = image_reps.shape[0]
    if n == 0:
        raise ValueError("InfoNCE needs at least one pair")
    sims = matmul(image_reps, text_reps.transpose())
    inv_tau = exp(scale(clamp(log_tau, LOG_TAU_MIN, LOG_TAU_MAX), -1.0))
    logits = mul(sims, inv_tau)
    return _nce_from_logits(logits)


def _nce_from_logits(logits: Tensor) -> Tuple[Tensor, Tensor]:
    n = logits.shape[0]
    eye = Tensor(np.eye(n))
    i2t = scale(sum_(mul(log_softmax(logits), eye)), -1.0)
    t2i = scale(sum_(mul(log_softmax(logits.transpose()), eye)), -1.0)
    return i2t, t2i


def loss_hidden_states(student: AttentionBundle, teacher: AttentionBundle, mapping) -> Tensor:
    """MSE between mapped CLS hidden states (ablation baseline)."""
    total = None
    for ls, lt in mapping:
        for s, t in zip(student.cls_states(ls), teacher.cls_states(lt)):
            diff = s - t.detach()
            term = mean(mul(diff, diff))
            total = term if total is None else total + term
    return scale(total, 1.0 / len(mapping))


# -- composition ----------------------------------------------------------------------
TASK_COMPONENTS = {
    "CMC": {"i2t", "t2i", "ca", "gold", "hidden"},
    "RETRIEVAL": {"i2t", "t2i", "ca", "gold", "hidden"},
    "ITM": {"ca", "sl", "gold", "hidden"},
    "MLM": {"ca", "sl", "gold", "hidden"},
    "VLU": {"ca", "sl", "gold", "hidden"},
}

Number = Union[float, Tensor]


def compose_task_loss(task: str, components: Mapping[str, Number], weights: Optional[Mapping[str, float]] = None) -> Number:
    """Weighted sum of loss components (unit weights by default).

    CMC/RETRIEVAL require both InfoNCE directions and reject soft labels;
    the other tasks need at least one supervision component.
    """
    task = task.upper()
    if task not in TASK_COMPONENTS:
        raise ValueError(f"unknown task '{task}'")
    allowed = TASK_COMPONENTS[task]
    unknown = set(components) - allowed
    if unknown:
        if task in ("CMC", "RETRIEVAL") and "sl" in unknown:
            raise ValueError(f"{task} does not take a soft-label term")
        raise ValueError(f"{task} does not take components {sorted(unknown)}")
    if task in ("CMC", "RETRIEVAL"):
        missing = {"i2t", "t2i"} - set(components)
        if missing:
            raise ValueError(f"{task} requires components {sorted(missing)}")
    elif not components:
        raise ValueError(f"{task} requires at least one of {sorted(allowed)}")
    weights = dict(weights or {})
    total = None
    for name in sorted(components):
        w = float(weights.get(name, 1.0))
        val = components[name]
        if isinstance(val, Tensor):
            term = val if w == 1.0 else scale(val, w)
        else:
            term = w * float(val)
        total = term if total is None else total + term
    return total
