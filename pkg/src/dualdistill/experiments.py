"""Desk-scale experiment protocol shared by the acceptance suite and scripts/.

One teacher is trained per protocol and reused by every student run; each
student configuration is repeated over several seeds and summarized by the
median.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import config as configmod
from .data import SyntheticSpec
from .losses import DistillConfig
from .models import DualStudent, FusionTeacher, ModelConfig
from .pipeline import (
    RunReport,
    TrainConfig,
    distill_finetune,
    distill_pretrain,
    evaluate,
    new_student,
    train_teacher,
)

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


@dataclass
class Protocol:
    model: ModelConfig
    data: SyntheticSpec
    distill: DistillConfig
    teacher: TrainConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    retrieval: TrainConfig
    seeds: Tuple[int, ...] = (0, 1, 2)

    @classmethod
    def from_presets(cls, directory=CONFIG_DIR, seeds: Sequence[int] = (0, 1, 2)) -> "Protocol":
        d = Path(directory)
        runs = {name: configmod.load(d / f"{name}.json") for name in ("teacher", "pretrain", "finetune", "retrieval")}
        base = runs["finetune"]
        for name, run in runs.items():
            if run.model != base.model or run.data != base.data:
                raise ValueError(f"preset '{name}' disagrees with finetune.json on model/data sections")
        return cls(base.model, base.data, base.distill, runs["teacher"].train, runs["pretrain"].train,
                   base.train, runs["retrieval"].train, tuple(seeds))


@dataclass
class RunResult:
    name: str
    seed: int
    metrics: Dict[str, float]
    report: RunReport
    ca_layer_pairs: int = 0


@dataclass
class Grid:
    """Results keyed by configuration name, one entry per seed."""

    runs: Dict[str, List[RunResult]] = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, result: RunResult) -> None:
        self.runs.setdefault(result.name, []).append(result)

    def values(self, name: str, metric: str = "accuracy") -> List[float]:
        return [r.metrics[metric] for r in self.runs[name]]

    def median(self, name: str, metric: str = "accuracy") -> float:
        return statistics.median(self.values(name, metric))

    def compute(self, name: str) -> float:
        """Mean number of distillation (student, teacher) layer-pair evaluations per run."""
        return statistics.mean(r.ca_layer_pairs for r in self.runs[name])

    def table(self, metric: str = "accuracy") -> str:
        lines = []
        for name in self.runs:
            vals = ", ".join(f"{v:.3f}" for v in self.values(name, metric))
            lines.append(f"{name:28s} median {self.median(name, metric):.3f}  [{vals}]")
        return "\n".join(lines)


def shared_teacher(p: Protocol) -> Tuple[FusionTeacher, RunReport]:
    log.info("training shared teacher (%d steps)", p.teacher.steps)
    return train_teacher(p.model, p.data, p.teacher)


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def finetune(p: Protocol, teacher: FusionTeacher, seed: int, name: str, kd: bool = True,
             distill: Optional[DistillConfig] = None, task: str = "vlu",
             init: Optional[DualStudent] = None) -> RunResult:
    """Fine-tune a student (teacher-initialized unless ``init`` is given)."""
    cfg = _seeded(p.finetune if task == "vlu" else p.retrieval, seed)
    cfg = replace(cfg, kd=kd)
    if init is not None:
        student = DualStudent(p.model)
        student.load_state_dict(init.state_dict())
    else:
        student = new_student(p.model, teacher, seed)
    _, report, counters = distill_finetune(student, teacher if kd else None, p.data, cfg, distill or p.distill)
    log.info("%s seed %d: %s", name, seed, report.summary["final"])
    return RunResult(name, seed, report.summary["final"], report, counters.ca_layer_pairs)


def pretrain(p: Protocol, teacher: FusionTeacher, seed: int, kd: bool) -> Tuple[DualStudent, RunReport]:
    cfg = replace(_seeded(p.pretrain, seed), kd=kd)
    student = new_student(p.model, teacher, seed)
    student, report, _ = distill_pretrain(student, teacher if kd else None, p.data, cfg, p.distill)
    return student, report


# -- named experiment families -----------------------------------------------------------------
def knowledge_ablation(p: Protocol, teacher: FusionTeacher, grid: Grid) -> Grid:
    """CA+SL vs SL-only fine-tuning from the teacher initialization."""
    for seed in p.seeds:
        grid.add(finetune(p, teacher, seed, "ca+sl"))
        grid.add(finetune(p, teacher, seed, "sl_only", distill=replace(p.distill, ca=False)))
    return grid


def layer_mapping_ablation(p: Protocol, teacher: FusionTeacher, grid: Grid) -> Grid:
    """Bottom-k and all-layer mappings (the last-layer runs come from ``knowledge_ablation``)."""
    for seed in p.seeds:
        for mapping in ("bottom_k", "all_layerwise"):
            grid.add(finetune(p, teacher, seed, f"map_{mapping}", distill=replace(p.distill, layer_mapping=mapping)))
    return grid


def stage_grid(p: Protocol, teacher: FusionTeacher, grid: Grid) -> Grid:
    """STD/KD pre-training x STD/KD fine-tuning."""
    for seed in p.seeds:
        for pre_kd in (False, True):
            student, _ = pretrain(p, teacher, seed, pre_kd)
            for ft_kd in (False, True):
                name = f"{'KD' if pre_kd else 'STD'}/{'KD' if ft_kd else 'STD'}"
                grid.add(finetune(p, teacher, seed, name, kd=ft_kd, init=student))
    return grid


def retrieval_ablation(p: Protocol, teacher: FusionTeacher, grid: Grid) -> Grid:
    for seed in p.seeds:
        grid.add(finetune(p, teacher, seed, "retrieval_ca", task="retrieval"))
        grid.add(finetune(p, teacher, seed, "retrieval_no_ca", task="retrieval", distill=replace(p.distill, ca=False)))
    return grid
