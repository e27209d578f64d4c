"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line before asserting."""

import math
import time

import numpy as np
import pytest

from dualdistill import experiments as ex
from dualdistill.autodiff import Tensor, gradcheck, kl_rows, no_grad, precision
from dualdistill.data import gen_pairs
from dualdistill.losses import DistillConfig, loss_cross_attention, loss_infonce, loss_soft_label
from dualdistill.models import DualStudent, FusionTeacher, ModelConfig
from dualdistill.pipeline import (
    StepCounters,
    TrainConfig,
    checkpoint_digest,
    load_checkpoint,
    make_batch,
    new_student,
    save_checkpoint,
    student_loss,
    train_teacher,
)
from dualdistill.serve import FeatureCache, LatencyScenario, build_cache, image_key, infer_with_cache, measure_latency

CHANCE = 1 / 3


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


# -- 1. renormalization identity ----------------------------------------------------------
def test_c1_renormalization_identity(verdict):
    start = time.perf_counter()
    cfg = ModelConfig()
    teacher = FusionTeacher(cfg, seed=7)
    rng = np.random.default_rng(7)
    images = rng.normal(size=(4, cfg.image_height, cfg.image_width, cfg.channels)).astype(np.float32)
    ids = rng.integers(2, cfg.vocab_size, size=(4, cfg.max_text_len))
    mask = np.arange(cfg.max_text_len)[None, :] < np.array([[16], [11], [5], [1]])
    ids = np.where(mask, ids, 0)
    with no_grad():
        out = teacher(images, ids, mask, capture=range(cfg.layers))
    n, worst = cfg.num_patches, 0.0
    rows = np.repeat(mask[:, None, :], cfg.heads, axis=1)
    for layer in range(cfg.layers):
        whole = out.bundle.whole(layer).data.astype(np.float64)
        v2t, t2v = out.bundle.cross(layer)
        block = whole[:, :, 1 : n + 1, n + 2 :]
        worst = max(worst, np.abs(v2t.data - block / block.sum(-1, keepdims=True)).max())
        block = whole[:, :, n + 2 :, 1 : n + 1]
        ref = block / block.sum(-1, keepdims=True)
        worst = max(worst, np.abs(t2v.data[rows] - ref[rows]).max())
    seconds = time.perf_counter() - start
    ok = worst < 1e-5 and seconds < 10
    verdict(1, ok, f"max abs err {worst:.2e} over {cfg.layers} layers x {cfg.heads} heads, {seconds:.1f}s")
    assert ok


# -- 2. gradient suite ----------------------------------------------------------------------
def _grad_case(task, distill, component=None):
    cfg = ModelConfig()
    teacher = FusionTeacher(cfg, seed=1)
    student = DualStudent(cfg, seed=2)
    batch = make_batch(ex.Protocol.from_presets().data, task, 3, 0, 4, TrainConfig())
    params = student.parameters()
    names = [n for n in params if any(s in n for s in ("layer3/attn", "layer0/ffn", "embed/", "fusion", "head", "log_tau"))]

    def loss_fn():
        return student_loss(student, teacher, batch, task, distill, True, StepCounters())[0]

    if component is not None:

        def loss_fn():
            s = student(batch.images, batch.ids, batch.text_mask, capture=(3,), head=None if task == "cmc" else "task")
            if component in ("i2t", "t2i"):
                i2t, t2i = loss_infonce(s.cls_v, s.cls_t, student.log_tau)
                return i2t if component == "i2t" else t2i
            with no_grad():
                t = teacher(batch.images, batch.ids, batch.text_mask, capture=(3,))
            if component == "ca":
                return loss_cross_attention(s.bundle, t.bundle, [(3, 3)])
            return loss_soft_label(s.logits, Tensor(t.logits.data))

    used = [n for n in names if params[n].data.size]
    return gradcheck(loss_fn, params, names=used, max_coords=12, seed=0)


GRAD_CASES = {
    "L_CA": ("vlu", DistillConfig(), "ca"),
    "L_SL": ("vlu", DistillConfig(), "sl"),
    "L_NCE i2t": ("cmc", DistillConfig(), "i2t"),
    "L_NCE t2i": ("cmc", DistillConfig(), "t2i"),
    "L^CMC": ("cmc", DistillConfig(), None),
    "L^ITM": ("itm", DistillConfig(), None),
    "L^MLM": ("mlm", DistillConfig(), None),
    "L^VLU": ("vlu", DistillConfig(), None),
}


def test_c2_gradient_suite(verdict):
    start = time.perf_counter()
    results = {name: _grad_case(*case) for name, case in GRAD_CASES.items()}
    seconds = time.perf_counter() - start
    tau_checked = all("student/log_tau" in results[n].per_param for n in ("L_NCE i2t", "L_NCE t2i"))
    ok = all(r.ok(0.95) for r in results.values()) and tau_checked and seconds < 300
    detail = ", ".join(f"{k} {r.pass_fraction:.0%}/{r.checked}" for k, r in results.items())
    verdict(2, ok, f"{detail}; {seconds:.0f}s")
    assert ok


# -- 3. analytic values ----------------------------------------------------------------------
class _Blocks:
    def __init__(self, v2t, t2v):
        self._cross = Tensor(v2t), Tensor(t2v)
        self.text_mask = np.ones((1, v2t.shape[-1]), bool)
        self.n = v2t.shape[2]

    def cross(self, layer):
        return self._cross

    def visual_query_mask(self):
        return np.ones((1, self.n), bool)

    def text_query_mask(self):
        return self.text_mask


def test_c3_analytic_values(verdict):
    with precision(np.float64):
        kl = kl_rows(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item()
        t2v = np.ones((1, 1, 2, 1))
        ca = loss_cross_attention(_Blocks(np.array([[[[0.5, 0.5]]]]), t2v), _Blocks(np.array([[[[0.9, 0.1]]]]), t2v), [(0, 0)]).item()
        sl = loss_soft_label(Tensor([[0.0, 0.0]]), Tensor([[0.0, math.log(3.0)]])).item()
        a = math.sqrt(math.log(3.0))
        reps = Tensor([[a, 0.0], [0.0, a]])
        i2t, t2i = loss_infonce(reps, reps, Tensor(np.array(0.0)))
        nce = (i2t + t2i).item()
    got = {"KL": (kl, math.log(2)), "L_CA": (ca, 0.5108), "L_SL": (sl, 0.1438), "InfoNCE": (nce, 1.1507)}
    ok = all(abs(v - ref) < 1e-4 for v, ref in got.values())
    verdict(3, ok, ", ".join(f"{k} {v:.4f} (ref {ref:.4f})" for k, (v, ref) in got.items()))
    assert ok


# -- 4. ablation ordering -------------------------------------------------------------------
def _multi_hot(symbols, k):
    out = np.zeros((len(symbols), k))
    for i, row in enumerate(symbols):
        out[i, row[row >= 0]] = 1
    return out


def _marginal_probe_gap(protocol):
    from sklearn.linear_model import LogisticRegression

    train, test = gen_pairs(protocol.data, 4000, 0), gen_pairs(protocol.data, 2000, 1)
    k = protocol.data.num_symbols
    accs = []
    for field in ("image_symbols", "text_symbols"):
        probe = LogisticRegression(max_iter=500).fit(_multi_hot(getattr(train, field), k), train.labels)
        accs.append(probe.score(_multi_hot(getattr(test, field), k), test.labels))
    return max(accs)


def test_c4_ablation_ordering(verdict, protocol, desk_teacher, knowledge_grid):
    probe = _marginal_probe_gap(protocol)
    both, sl = knowledge_grid.median("ca+sl"), knowledge_grid.median("sl_only")
    seconds = desk_teacher[1]["train_seconds"] + knowledge_grid.seconds
    checks = {
        "marginal chance": probe <= CHANCE + 0.05,
        "CA+SL >= SL-only + 0.15": both >= sl + 0.15,
        "SL-only <= chance + 0.10": sl <= CHANCE + 0.10,
        "runtime < 30 min": seconds < 1800,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(4, ok, f"CA+SL {both:.3f}, SL-only {sl:.3f}, single-modality probe {probe:.3f}, {seconds / 60:.1f} min"
            + (f"; failed: {'; '.join(failed)}" if failed else "") + "\n" + knowledge_grid.table())
    assert ok


# -- 5. two-stage benefit ------------------------------------------------------------------
def test_c5_two_stage_benefit(verdict, stage_grid):
    m = {name: stage_grid.median(name) for name in ("STD/STD", "STD/KD", "KD/STD", "KD/KD")}
    single = (m["STD/KD"], m["KD/STD"])
    checks = {
        "KD/KD >= single-stage KD": all(m["KD/KD"] >= s for s in single),
        "single-stage KD >= STD/STD": all(s >= m["STD/STD"] for s in single),
        "best - worst >= 0.02": max(m.values()) - min(m.values()) >= 0.02,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(5, ok, ", ".join(f"{k} {v:.3f}" for k, v in m.items()) + (f"; failed: {'; '.join(failed)}" if failed else "")
            + "\n" + stage_grid.table())
    assert ok


# -- 6. layer mapping -----------------------------------------------------------------------
def test_c6_layer_mapping(verdict, mapping_grid):
    last, bottom, every = (mapping_grid.median(n) for n in ("map_last", "map_bottom_k", "map_all_layerwise"))
    cost = {n: mapping_grid.compute(n) for n in ("map_last", "map_all_layerwise")}
    checks = {
        "last >= bottom-k": last >= bottom,
        "|last - all| <= 0.03": abs(last - every) <= 0.03,
        "compute(last) <= compute(all)": cost["map_last"] <= cost["map_all_layerwise"],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(6, ok, f"last {last:.3f}, bottom-k {bottom:.3f}, all {every:.3f}; layer-pair evals "
            f"{cost['map_last']:.0f} vs {cost['map_all_layerwise']:.0f}" + (f"; failed: {'; '.join(failed)}" if failed else "")
            + "\n" + mapping_grid.table())
    assert ok


# -- 7. caching --------------------------------------------------------------------------------
def test_c7_cache_correctness_and_speedup(verdict, protocol):
    start = time.perf_counter()
    student = DualStudent(protocol.model, seed=5)
    batch = gen_pairs(protocol.data, 1000, 9)
    cache = build_cache(student, batch.images)
    keys = [image_key(im) for im in batch.images]
    cached = infer_with_cache(student, cache, keys, batch.ids, batch.text_mask).logits.data
    with no_grad():
        full = student(batch.images, batch.ids, batch.text_mask).logits.data
    err = float(np.abs(cached - full).max())

    scenario = LatencyScenario()
    rep = measure_latency(scenario)
    seconds = time.perf_counter() - start
    ok = (err < 1e-6 and rep.speedup >= 2.0 and scenario.texts_per_image >= 5
          and rep.total_speedup >= 1.2 and seconds < 300)
    verdict(7, ok, f"cached vs uncached max err {err:.1e}; N={scenario.num_visual_tokens}, M={scenario.num_text_tokens}, "
            f"{scenario.texts_per_image} texts/image: online {rep.speedup:.2f}x, total {rep.total_speedup:.2f}x; {seconds:.0f}s")
    assert ok


# -- 8. retrieval ------------------------------------------------------------------------------
def test_c8_retrieval(verdict, retrieval_grid):
    ca, no_ca = retrieval_grid.median("retrieval_ca", "image_R@1"), retrieval_grid.median("retrieval_no_ca", "image_R@1")
    ok = ca >= no_ca
    verdict(8, ok, f"image R@1 with CA {ca:.3f}, without {no_ca:.3f}\n" + retrieval_grid.table("image_R@1"))
    assert ok


# -- 9. determinism and persistence --------------------------------------------------------
def test_c9_determinism_and_persistence(verdict, protocol, tmp_path):
    cfg = TrainConfig(stage="teacher", task_mix=("vlu", "itm", "mlm"), steps=1, lr=1e-3)
    first = [train_teacher(protocol.model, protocol.data, cfg)[1].losses()[0] for _ in range(2)]
    teacher = train_teacher(protocol.model, protocol.data, cfg)[0]
    s_first = []
    for _ in range(2):
        batch = make_batch(protocol.data, "vlu", 0, 0, 8, protocol.finetune)
        s = new_student(protocol.model, teacher, 0)
        s_first.append(student_loss(s, teacher, batch, "vlu", protocol.distill, True, StepCounters())[1]["total"])

    save_checkpoint(tmp_path / "a.ckpt", teacher)
    again = FusionTeacher(protocol.model, seed=99)
    load_checkpoint(tmp_path / "a.ckpt", again)
    save_checkpoint(tmp_path / "b.ckpt", again)
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    student = new_student(protocol.model, teacher, 0)
    cache = build_cache(student, gen_pairs(protocol.data, 6).images)
    cache.save(tmp_path / "a.ddt")
    FeatureCache.load(tmp_path / "a.ddt").save(tmp_path / "b.ddt")
    cache_ok = (tmp_path / "a.ddt").read_bytes() == (tmp_path / "b.ddt").read_bytes()
    cache_ok = cache_ok and FeatureCache.load(tmp_path / "a.ddt").checkpoint_hash == checkpoint_digest(student)

    ok = first[0] == first[1] and s_first[0] == s_first[1] and ckpt_ok and cache_ok
    verdict(9, ok, f"teacher first loss {first[0]!r} x2, student first loss {s_first[0]!r} x2, "
            f"checkpoint round-trip {'bit-exact' if ckpt_ok else 'differs'}, cache round-trip {'bit-exact' if cache_ok else 'differs'}")
    assert ok
