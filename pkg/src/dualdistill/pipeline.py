"""Teacher training, pre-training distillation, fine-tuning distillation and
evaluation on synthetic tasks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    AdamConfig,
    AdamState,
    NonFiniteError,
    Tensor,
    adam_step,
    container,
    cross_entropy,
    no_grad,
    take_rows,
)
from .data import Batch, SyntheticSpec, gen_pairs, mask_tokens, sample_itm_negatives
from .losses import (
    DistillConfig,
    compose_task_loss,
    layer_mapping,
    loss_cross_attention,
    loss_hidden_states,
    loss_infonce,
    loss_soft_label,
)
from .models import DualStudent, FusionTeacher, ModelConfig, init_student_from_teacher

log = logging.getLogger(__name__)

STAGES = ("teacher", "distill_pretrain", "distill_finetune")
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class TrainConfig:
    stage: str = "distill_finetune"
    # fine-tuning target: "vlu" or "retrieval"; teacher/pre-training use task_mix
    task: str = "vlu"
    task_mix: Tuple[str, ...] = ("cmc", "itm", "mlm")
    # False = standard training on gold labels / InfoNCE only (the "STD" rows)
    kd: bool = True
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    eval_every: int = 0
    eval_size: int = 1536
    retrieval_candidates: int = 256
    mlm_prob: float = 0.15
    itm_neg_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.task_mix = tuple(self.task_mix)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")
        if self.task not in ("vlu", "retrieval"):
            raise ValueError(f"unknown fine-tuning task '{self.task}'")
        allowed = {"teacher": {"vlu", "itm", "mlm"}, "distill_pretrain": {"cmc", "itm", "mlm"}}.get(self.stage)
        if allowed is not None:
            bad = set(self.task_mix) - allowed
            if bad or not self.task_mix:
                raise ValueError(f"stage '{self.stage}' cannot mix tasks {sorted(bad) or '(none)'}")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, 1e-8, self.weight_decay, self.warmup_ratio)


@dataclass
class RunReport:
    config_hash: str
    seed: int
    records: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def log_step(self, step: int, task: str, losses: Dict[str, float]) -> None:
        for k, v in losses.items():
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite {k} loss at step {step} ({task})")
        self.records.append({"kind": "step", "step": step, "task": task, "losses": losses})

    def log_eval(self, step: int, metrics: Dict[str, float]) -> None:
        self.records.append({"kind": "eval", "step": step, **metrics})

    def losses(self, component: str = "total") -> List[float]:
        return [r["losses"][component] for r in self.records if r["kind"] == "step" and component in r["losses"]]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "report.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        with open(d / "summary.json", "w") as f:
            json.dump({"config_hash": self.config_hash, "seed": self.seed, **self.summary}, f, indent=2, sort_keys=True)


def config_hash(obj) -> str:
    """Stable hash of a (nested) dataclass / dict via canonical JSON."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- checkpoints ------------------------------------------------------------------------
def save_checkpoint(path, *models, header: Optional[dict] = None) -> None:
    entries = {}
    for m in models:
        entries.update(m.state_dict())
    container.save(path, entries, {"kind": "checkpoint", **(header or {})})


def load_checkpoint(path, model) -> dict:
    entries, header = container.load(path)
    model.load_state_dict(entries)
    return header


def checkpoint_digest(model) -> str:
    return hashlib.sha256(container.encode(model.state_dict())).hexdigest()[:16]


# -- data streams -----------------------------------------------------------------------
def task_spec(base: SyntheticSpec, task: str, seed: int) -> SyntheticSpec:
    kind = {"vlu": "vlu_k_way", "itm": "itm", "mlm": "match_multiset", "cmc": "match_multiset", "retrieval": "match_multiset"}[task]
    d = asdict(base)
    d.update(task=kind, seed=seed)
    return SyntheticSpec(**d)


def make_batch(base: SyntheticSpec, task: str, seed: int, index: int, size: int, cfg: TrainConfig) -> Batch:
    batch = gen_pairs(task_spec(base, task, seed), size, index)
    if task == "itm":
        batch = sample_itm_negatives(batch, seed=seed * 7919 + index, prob=cfg.itm_neg_prob)
    elif task == "mlm":
        batch = mask_tokens(batch, seed=seed * 7919 + index, num_symbols=base.num_symbols, prob=cfg.mlm_prob)
    return batch


# -- per-task losses ----------------------------------------------------------------------
@dataclass
class StepCounters:
    teacher_examples: int = 0
    teacher_calls: int = 0
    ca_layer_pairs: int = 0


def _mlm_rows(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """Flat row indices (into (B*(M+1), V)) of masked positions, and their targets."""
    b, m = batch.ids.shape
    r, c = np.nonzero(batch.mlm_labels >= 0)
    return r * (m + 1) + (c + 1), batch.mlm_labels[r, c]


def _head_for(task: str) -> str:
    return {"vlu": "task", "itm": "itm", "mlm": "mlm", "cmc": "dot", "retrieval": "dot"}[task]


def _gold_targets(batch: Batch, task: str) -> np.ndarray:
    return batch.itm_flags if task == "itm" else batch.labels


def teacher_loss(teacher: FusionTeacher, batch: Batch, task: str) -> Tuple[Tensor, Dict[str, float]]:
    out = teacher(batch.images, batch.ids, batch.text_mask, head=_head_for(task))
    if task == "mlm":
        rows, targets = _mlm_rows(batch)
        logits = take_rows(out.logits.reshape(-1, out.logits.shape[-1]), rows)
        loss = cross_entropy(logits, targets)
    else:
        loss = cross_entropy(out.logits, _gold_targets(batch, task))
    return loss, {"gold": loss.item(), "total": loss.item()}


def student_loss(
    student: DualStudent,
    teacher: Optional[FusionTeacher],
    batch: Batch,
    task: str,
    distill: DistillConfig,
    kd: bool,
    counters: StepCounters,
) -> Tuple[Tensor, Dict[str, float]]:
    """Loss of one student step for ``task`` in {vlu, itm, mlm, cmc, retrieval}."""
    s_layers = t_layers = ()
    mapping = []
    contrastive = task in ("cmc", "retrieval")
    use_ca = kd and distill.ca and distill.ca_weight > 0
    use_hidden = kd and distill.hidden_states
    use_sl = kd and distill.sl and distill.sl_weight > 0 and not contrastive
    need_teacher = use_ca or use_sl or use_hidden
    if need_teacher and teacher is None:
        raise ValueError("distillation requires a teacher")
    if use_ca or use_hidden:
        mapping = layer_mapping(distill.layer_mapping, teacher.cfg.layers, student.cfg.layers, distill.mapping_k)
        s_layers = sorted({a for a, _ in mapping})
        t_layers = sorted({b for _, b in mapping})
    head = _head_for(task)
    t_out = None
    if need_teacher:
        if teacher.cfg.heads != student.cfg.heads:
            raise ValueError(f"teacher has {teacher.cfg.heads} heads, student {student.cfg.heads}")
        with no_grad():
            t_out = teacher(batch.images, batch.ids, batch.text_mask, capture=t_layers, head=None if contrastive else head)
        counters.teacher_calls += 1
        counters.teacher_examples += len(batch)

    s_out = student(batch.images, batch.ids, batch.text_mask, capture=s_layers, head=None if contrastive else head)
    comps: Dict[str, Tensor] = {}
    if contrastive:
        i2t, t2i = loss_infonce(s_out.cls_v, s_out.cls_t, student.log_tau)
        comps["i2t"], comps["t2i"] = i2t, t2i
    if use_ca:
        comps["ca"] = loss_cross_attention(s_out.bundle, t_out.bundle, mapping, distill.kl_direction, distill.attention_terms)
        counters.ca_layer_pairs += len(mapping)
    if use_hidden:
        comps["hidden"] = loss_hidden_states(s_out.bundle, t_out.bundle, mapping)

    rows = targets = None
    if task == "mlm":
        rows, targets = _mlm_rows(batch)
    if use_sl:
        zs, zt = s_out.logits, t_out.logits
        if task == "mlm":
            zs = take_rows(zs.reshape(-1, zs.shape[-1]), rows)
            zt = take_rows(zt.reshape(-1, zt.shape[-1]), rows)
        comps["sl"] = loss_soft_label(zs, zt, distill.kl_direction, distill.sl_temperature)
    gold_on = (not kd and not contrastive) or (kd and distill.gold_ce and distill.gold_weight > 0 and not contrastive)
    if gold_on:
        if task == "mlm":
            comps["gold"] = cross_entropy(take_rows(s_out.logits.reshape(-1, s_out.logits.shape[-1]), rows), targets)
        else:
            comps["gold"] = cross_entropy(s_out.logits, _gold_targets(batch, task))

    weights = {"ca": distill.ca_weight, "sl": distill.sl_weight, "hidden": distill.hidden_weight,
               "i2t": distill.nce_weight, "t2i": distill.nce_weight}
    if kd:
        weights["gold"] = distill.gold_weight
    composite = {"vlu": "VLU", "itm": "ITM", "mlm": "MLM", "cmc": "CMC", "retrieval": "RETRIEVAL"}[task]
    loss = compose_task_loss(composite, comps, weights)
    parts = {k: v.item() for k, v in comps.items()}
    parts["total"] = loss.item()
    return loss, parts


# -- evaluation ----------------------------------------------------------------------------
def recall_at_k(scores: np.ndarray, ks=(1, 5, 10)) -> Dict[str, float]:
    """Row i of ``scores`` ranks candidates for query i; the match is candidate i."""
    n = scores.shape[0]
    diag = scores[np.arange(n), np.arange(n)]
    # rank = number of candidates scoring strictly higher than the match
    rank = (scores > diag[:, None]).sum(axis=1)
    return {f"R@{k}": float((rank < k).mean()) for k in ks}


def evaluate(model, base: SyntheticSpec, task: str, cfg: TrainConfig, split_seed: Optional[int] = None, chunk: int = 256) -> Dict[str, float]:
    """Accuracy for classification tasks, R@1/5/10 (both directions) for retrieval."""
    seed = cfg.seed + EVAL_SEED_OFFSET if split_seed is None else split_seed
    with no_grad():
        if task == "retrieval":
            if not isinstance(model, DualStudent):
                raise ValueError("retrieval evaluation needs a dual encoder")
            batch = make_batch(base, "retrieval", seed, 0, cfg.retrieval_candidates, cfg)
            out = model(batch.images, batch.ids, batch.text_mask, head=None)
            scores = out.cls_t.data @ out.cls_v.data.T  # text queries x image candidates
            img = recall_at_k(scores)
            txt = recall_at_k(scores.T)
            return {**{f"image_{k}": v for k, v in img.items()}, **{f"text_{k}": v for k, v in txt.items()}}
        head = _head_for(task)
        if head is None or (head == "task" and not hasattr(model, "task_head")):
            raise ValueError(f"model has no head for task '{task}'")
        correct = total = 0
        for i in range(math.ceil(cfg.eval_size / chunk)):
            n = min(chunk, cfg.eval_size - i * chunk)
            batch = make_batch(base, task, seed, i, n, cfg)
            out = model(batch.images, batch.ids, batch.text_mask, head=head)
            if task == "mlm":
                rows, targets = _mlm_rows(batch)
                pred = out.logits.data.reshape(-1, out.logits.shape[-1])[rows].argmax(-1)
                correct += int((pred == targets).sum())
                total += len(targets)
            else:
                pred = out.logits.data.argmax(-1)
                correct += int((pred == _gold_targets(batch, task)).sum())
                total += n
        return {"accuracy": correct / total}


# -- training loops -----------------------------------------------------------------------------
def _train_loop(
    params: Dict[str, Tensor],
    step_fn: Callable[[int], Tuple[Tensor, Dict[str, float], str]],
    cfg: TrainConfig,
    report: RunReport,
    eval_fn: Optional[Callable[[], Dict[str, float]]] = None,
) -> None:
    state = AdamState(cfg.adam(), total_steps=cfg.steps)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        for p in params.values():
            p.grad = None
        loss, parts, task = step_fn(step)
        report.log_step(step, task, parts)
        loss.backward()
        adam_step(state, params)
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
            report.log_eval(step + 1, eval_fn())
    report.summary["train_seconds"] = time.perf_counter() - t0


def train_teacher(model_cfg: ModelConfig, data: SyntheticSpec, cfg: TrainConfig, report: Optional[RunReport] = None) -> Tuple[FusionTeacher, RunReport]:
    """Train the fusion encoder with gold ITM / MLM / task cross-entropy (round robin)."""
    data.check_model(model_cfg)
    report = report or RunReport(config_hash(cfg), cfg.seed)
    teacher = FusionTeacher(model_cfg, seed=cfg.seed)
    mix = cfg.task_mix

    def step_fn(step):
        task = mix[step % len(mix)]
        batch = make_batch(data, task, cfg.seed, step, cfg.batch_size, cfg)
        loss, parts = teacher_loss(teacher, batch, task)
        return loss, parts, task

    eval_fn = (lambda: evaluate(teacher, data, "vlu", cfg)) if "vlu" in mix else None
    _train_loop(teacher.parameters(), step_fn, cfg, report, eval_fn)
    if "vlu" in mix:
        report.summary["final"] = evaluate(teacher, data, "vlu", cfg)
    return teacher, report


def new_student(model_cfg: ModelConfig, teacher: Optional[FusionTeacher], seed: int) -> DualStudent:
    student = DualStudent(model_cfg, seed=seed)
    if teacher is not None:
        init_student_from_teacher(student, teacher)
    return student


def distill_pretrain(
    student: DualStudent,
    teacher: FusionTeacher,
    data: SyntheticSpec,
    cfg: TrainConfig,
    distill: DistillConfig,
    report: Optional[RunReport] = None,
) -> Tuple[DualStudent, RunReport, StepCounters]:
    """Round-robin CMC / ITM / MLM training of the student (teacher frozen)."""
    report = report or RunReport(config_hash({"train": asdict(cfg), "distill": asdict(distill)}), cfg.seed)
    counters = StepCounters()
    mix = cfg.task_mix

    def step_fn(step):
        task = mix[step % len(mix)]
        batch = make_batch(data, task, cfg.seed, step, cfg.batch_size, cfg)
        loss, parts = student_loss(student, teacher, batch, task, distill, cfg.kd, counters)
        return loss, parts, task

    _train_loop(student.parameters(), step_fn, cfg, report)
    report.summary["teacher_examples"] = counters.teacher_examples
    return student, report, counters


def distill_finetune(
    student: DualStudent,
    teacher: Optional[FusionTeacher],
    data: SyntheticSpec,
    cfg: TrainConfig,
    distill: DistillConfig,
    report: Optional[RunReport] = None,
) -> Tuple[DualStudent, RunReport, StepCounters]:
    """Fine-tune the student on ``cfg.task`` (VLU: CA + SL; retrieval: InfoNCE + CA)."""
    report = report or RunReport(config_hash({"train": asdict(cfg), "distill": asdict(distill)}), cfg.seed)
    counters = StepCounters()
    task = cfg.task

    def step_fn(step):
        batch = make_batch(data, task, cfg.seed, step, cfg.batch_size, cfg)
        loss, parts = student_loss(student, teacher, batch, task, distill, cfg.kd, counters)
        return loss, parts, task

    eval_fn = lambda: evaluate(student, data, task, cfg)
    _train_loop(student.parameters(), step_fn, cfg, report, eval_fn)
    report.summary["final"] = evaluate(student, data, task, cfg)
    report.summary["ca_layer_pairs"] = counters.ca_layer_pairs
    return student, report, counters
