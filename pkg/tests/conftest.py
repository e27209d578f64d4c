"""Session fixtures for the desk-scale runs shared by several test modules.

The shared teacher is the most expensive artifact, so it is stored in the
pytest cache under a key made of the preset hash and the source of every
module it depends on; any change to either retrains it.
"""

import hashlib
import time
from pathlib import Path

import pytest

import dualdistill
from dualdistill import config as configmod
from dualdistill import experiments as ex
from dualdistill.models import FusionTeacher
from dualdistill.pipeline import load_checkpoint, save_checkpoint


TEACHER_SOURCES = ("autodiff/*.py", "data.py", "losses.py", "models.py", "pipeline.py")


def _source_digest() -> str:
    root = Path(dualdistill.__file__).parent
    h = hashlib.sha256()
    for pattern in TEACHER_SOURCES:
        for p in sorted(root.glob(pattern)):
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def protocol():
    return ex.Protocol.from_presets()


@pytest.fixture(scope="session")
def desk_teacher(protocol, request):
    """(teacher, summary) where summary holds final metrics, train_seconds and the loss trace."""
    key = configmod.load(ex.CONFIG_DIR / "teacher.json").hash() + "-" + _source_digest()
    path = Path(request.config.cache.mkdir("dualdistill")) / f"teacher-{key}.ckpt"
    if path.exists():
        teacher = FusionTeacher(protocol.model)
        header = load_checkpoint(path, teacher)
        return teacher, header.get("summary")
    teacher, report = ex.shared_teacher(protocol)
    summary = {"final": report.summary["final"], "train_seconds": report.summary["train_seconds"], "losses": report.losses()}
    save_checkpoint(path, teacher, header={"summary": summary})
    return teacher, summary


@pytest.fixture(scope="session")
def knowledge_grid(protocol, desk_teacher):
    start = time.perf_counter()
    grid = ex.knowledge_ablation(protocol, desk_teacher[0], ex.Grid())
    grid.seconds = time.perf_counter() - start
    return grid


@pytest.fixture(scope="session")
def mapping_grid(protocol, desk_teacher, knowledge_grid):
    grid = ex.layer_mapping_ablation(protocol, desk_teacher[0], ex.Grid())
    grid.runs["map_last"] = knowledge_grid.runs["ca+sl"]
    return grid


@pytest.fixture(scope="session")
def stage_grid(protocol, desk_teacher):
    return ex.stage_grid(protocol, desk_teacher[0], ex.Grid())


@pytest.fixture(scope="session")
def retrieval_grid(protocol, desk_teacher):
    return ex.retrieval_ablation(protocol, desk_teacher[0], ex.Grid())
