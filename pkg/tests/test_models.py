import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdistill.autodiff import ShapeError, Tensor, no_grad
from dualdistill.models import (
    DualStudent,
    FusionTeacher,
    ModelConfig,
    TextEmbedder,
    VisualEmbedder,
    fuse,
    init_student_from_teacher,
    full_scale_config,
)


def tiny(**kw):
    base = dict(image_height=32, image_width=32, patch_size=16, hidden=16, heads=2, layers=2, ffn=32, vocab_size=20, max_text_len=6)
    base.update(kw)
    return ModelConfig(**base)


def inputs(cfg, b=3, m=5, seed=0, pad=True):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(b, cfg.image_height, cfg.image_width, cfg.channels)).astype(np.float32)
    ids = rng.integers(2, cfg.vocab_size, size=(b, m))
    mask = np.ones((b, m), dtype=bool)
    if pad:
        for i in range(b):
            mask[i, m - i :] = False
    ids = np.where(mask, ids, 0)
    return images, ids, mask


# -- config ---------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_height=60, patch_size=16)
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(max_text_len=0)
    cfg = ModelConfig()
    assert (cfg.num_patches, cfg.head_dim, cfg.patch_dim) == (16, 16, 256)


def test_full_scale_patch_count():
    cfg = full_scale_config()
    assert cfg.num_patches == 240
    assert cfg.head_dim == 64


# -- embedders ------------------------------------------------------------------------
def test_visual_embed_shapes():
    rng = np.random.default_rng(0)
    emb = VisualEmbedder(ModelConfig(), rng)
    assert emb(np.zeros((2, 64, 64, 1))).shape == (2, 17, 64)
    big = full_scale_config()
    big = ModelConfig(**{**big.__dict__, "hidden": 12, "heads": 12, "ffn": 8, "vocab_size": 10})
    out = VisualEmbedder(big, rng)(np.zeros((1, 384, 640, 3)))
    assert out.shape == (1, 241, 12)


def test_visual_embed_zero_weights_gives_position_plus_type():
    cfg = tiny()
    emb = VisualEmbedder(cfg, np.random.default_rng(0))
    emb.patch_proj.data[:] = 0
    emb.cls.data[:] = 0
    out = emb(np.zeros((1, 32, 32, 1))).data[0]
    np.testing.assert_array_equal(out, emb.pos.data + emb.type.data)


def test_visual_embed_rows():
    cfg = tiny()
    emb = VisualEmbedder(cfg, np.random.default_rng(1))
    img = np.random.default_rng(2).normal(size=(1, 32, 32, 1)).astype(np.float32)
    out = emb(img).data[0]
    np.testing.assert_allclose(out[0], emb.cls.data + emb.pos.data[0] + emb.type.data, atol=1e-6)
    patch1 = img[0, :16, 16:32, :].reshape(-1)  # row-major: second patch is top-right
    np.testing.assert_allclose(out[2], patch1 @ emb.patch_proj.data + emb.pos.data[2] + emb.type.data, atol=1e-5)


def test_visual_embed_dimension_mismatch():
    emb = VisualEmbedder(tiny(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        emb(np.zeros((1, 32, 48, 1)))


def test_text_embed_shapes_and_errors():
    cfg = tiny()
    emb = TextEmbedder(cfg, np.random.default_rng(0))
    assert emb(np.full((2, 4), 3)).shape == (2, 5, 16)
    empty = emb(np.zeros((1, 0), dtype=np.int64))
    assert empty.shape == (1, 1, 16)
    np.testing.assert_allclose(empty.data[0, 0], emb.cls.data + emb.pos.data[0] + emb.type.data, atol=1e-7)
    with pytest.raises(ValueError, match="exceeds"):
        emb(np.zeros((1, 7), dtype=np.int64))
    with pytest.raises(ValueError, match="vocabulary"):
        emb(np.array([[20]]))


def test_text_over_length_at_full_scale_limit():
    cfg = ModelConfig(max_text_len=40)
    emb = TextEmbedder(cfg, np.random.default_rng(0))
    assert emb(np.zeros((1, 40), dtype=np.int64)).shape == (1, 41, 64)
    with pytest.raises(ValueError):
        emb(np.zeros((1, 41), dtype=np.int64))


# -- teacher ----------------------------------------------------------------------------
def test_teacher_shapes_and_stochastic_rows():
    cfg = tiny()
    t = FusionTeacher(cfg, seed=1)
    images, ids, mask = inputs(cfg)
    out = t(images, ids, mask, capture=range(cfg.layers))
    n, m = cfg.num_patches, ids.shape[1]
    assert out.logits.shape == (3, cfg.num_classes)
    assert out.visual.shape == (3, n + 1, 16) and out.textual.shape == (3, m + 1, 16)
    for l in range(cfg.layers):
        whole = out.bundle.whole(l).data
        assert whole.shape == (3, cfg.heads, n + m + 2, n + m + 2)
        np.testing.assert_allclose(whole.sum(-1), 1.0, atol=1e-5)
        # pad keys get no mass
        for i in range(3):
            pads = np.nonzero(~mask[i])[0] + n + 2
            assert np.all(whole[i][..., pads] < 1e-6)


def test_teacher_capture_out_of_range():
    cfg = tiny()
    t = FusionTeacher(cfg)
    images, ids, mask = inputs(cfg)
    with pytest.raises(IndexError):
        t(images, ids, mask, capture=[cfg.layers])
    out = t(images, ids, mask, capture=[0])
    with pytest.raises(KeyError):
        out.bundle.cross(1)


def _zero_queries(model_layers):
    for layer in model_layers:
        layer.wq.weight.data[:] = 0
        layer.wq.bias.data[:] = 0


def test_zero_queries_give_uniform_attention():
    cfg = tiny()
    t = FusionTeacher(cfg)
    _zero_queries(t.encoder.layer)
    images, ids, mask = inputs(cfg, pad=False)
    out = t(images, ids, mask, capture=[0, 1])
    whole = out.bundle.whole(1).data
    np.testing.assert_allclose(whole, 1.0 / whole.shape[-1], atol=1e-6)
    v2t, t2v = out.bundle.cross(0)
    np.testing.assert_allclose(v2t.data, 1.0 / ids.shape[1], atol=1e-6)
    np.testing.assert_allclose(t2v.data, 1.0 / cfg.num_patches, atol=1e-6)


def test_cross_attention_renormalization_identity():
    cfg = tiny(init_std=0.5)
    t = FusionTeacher(cfg, seed=3)
    images, ids, mask = inputs(cfg)
    out = t(images, ids, mask, capture=range(cfg.layers))
    n = cfg.num_patches
    for l in range(cfg.layers):
        whole = out.bundle.whole(l).data.astype(np.float64)
        v2t, t2v = out.bundle.cross(l)
        assert v2t.shape == (3, cfg.heads, n, ids.shape[1]) and t2v.shape == (3, cfg.heads, ids.shape[1], n)
        block = whole[:, :, 1 : n + 1, n + 2 :]
        np.testing.assert_allclose(v2t.data, block / block.sum(-1, keepdims=True), atol=1e-5)
        block = whole[:, :, n + 2 :, 1 : n + 1]
        ref = block / block.sum(-1, keepdims=True)
        rows = mask[:, None, :].repeat(cfg.heads, 1)
        np.testing.assert_allclose(t2v.data[rows], ref[rows], atol=1e-5)


def test_teacher_cls_selection():
    cfg = tiny()
    t = FusionTeacher(cfg)
    images, ids, mask = inputs(cfg)
    out = t(images, ids, mask, head=None)
    np.testing.assert_array_equal(out.cls_v.data, out.visual.data[:, 0])
    np.testing.assert_array_equal(out.cls_t.data, out.textual.data[:, 0])
    assert out.logits is None


# -- student ------------------------------------------------------------------------------
def test_student_modality_independence():
    cfg = tiny()
    s = DualStudent(cfg, seed=2)
    images, ids, mask = inputs(cfg)
    a = s(images, ids, mask)
    ids2 = ids.copy()
    ids2[:, 0] = (ids2[:, 0] + 1) % cfg.vocab_size
    b = s(images, ids2, mask)
    np.testing.assert_array_equal(a.visual.data, b.visual.data)
    c = s(images + 1.0, ids, mask)
    np.testing.assert_array_equal(a.textual.data, c.textual.data)
    assert a.cls_v.shape == (3, 16) and a.cls_t.shape == (3, 16)


def test_student_cross_attention_matches_direct_formula():
    cfg = tiny(init_std=0.3)
    s = DualStudent(cfg, seed=4)
    images, ids, mask = inputs(cfg)
    out = s(images, ids, mask, capture=[1])
    v2t, t2v = out.bundle.cross(1)
    np.testing.assert_allclose(v2t.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(t2v.data.sum(-1), 1.0, atol=1e-6)

    # oracle: recompute the layer-1 inputs and projections outside the bundle
    dk = cfg.head_dim
    with no_grad():
        hv = s.visual.embed(images)
        ht = s.textual.embed(ids)
        key_t = np.concatenate([np.ones((3, 1), bool), mask], axis=1)
        hv, _ = s.visual.layer[0](hv, None)
        ht, _ = s.textual.layer[0](ht, key_t)

    def proj(layer, h):
        x = h.data
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        x = (x - mu) / np.sqrt(var + 1e-5) * layer.ln1.gain.data + layer.ln1.bias.data
        q = x @ layer.wq.weight.data + layer.wq.bias.data
        k = x @ layer.wk.weight.data + layer.wk.bias.data
        split = lambda y: y.reshape(3, -1, cfg.heads, dk).transpose(0, 2, 1, 3)
        return split(q), split(k)

    qv, kv = proj(s.visual.layer[1], hv)
    qt, kt = proj(s.textual.layer[1], ht)
    sc = qv[:, :, 1:] @ kt[:, :, 1:].transpose(0, 1, 3, 2) / np.sqrt(dk)
    sc = np.where(mask[:, None, None, :], sc, -np.inf)
    ref = np.exp(sc - sc.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    np.testing.assert_allclose(v2t.data, ref, atol=1e-6)
    sc = qt[:, :, 1:] @ kv[:, :, 1:].transpose(0, 1, 3, 2) / np.sqrt(dk)
    ref = np.exp(sc - sc.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    rows = mask[:, None, :].repeat(cfg.heads, 1)
    np.testing.assert_allclose(t2v.data[rows], ref[rows], atol=1e-6)


def test_student_zero_visual_queries_uniform():
    cfg = tiny()
    s = DualStudent(cfg)
    _zero_queries(s.visual.layer)
    images, ids, mask = inputs(cfg, pad=False)
    v2t, _ = s(images, ids, mask, capture=[0]).bundle.cross(0)
    np.testing.assert_allclose(v2t.data, 1.0 / ids.shape[1], atol=1e-6)


def test_forward_cached_matches_full():
    cfg = tiny()
    s = DualStudent(cfg, seed=5)
    images, ids, mask = inputs(cfg)
    for head in ("task", "itm", "mlm", "dot"):
        full = s(images, ids, mask, head=head).logits.data
        with no_grad():
            states, _ = s.encode_visual(s.visual.embed(images))
        cached = s.forward_cached(states, ids, mask, head=head).logits.data
        np.testing.assert_allclose(cached, full, atol=1e-6)


def test_include_cls_and_dedicated_projection_shapes():
    cfg = tiny(include_cls=True, dedicated_cross_proj=True)
    s = DualStudent(cfg)
    images, ids, mask = inputs(cfg)
    v2t, t2v = s(images, ids, mask, capture=[0]).bundle.cross(0)
    assert v2t.shape == (3, 2, cfg.num_patches + 1, ids.shape[1] + 1)
    assert t2v.shape == (3, 2, ids.shape[1] + 1, cfg.num_patches + 1)
    assert any(k.startswith("cross_q") for k in s.parameters(""))


# -- fusion ----------------------------------------------------------------------------------
def test_fuse_dot_and_mlp():
    a, b = Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]]))
    assert fuse(a, b, "dot").data.tolist() == [11.0]
    assert fuse(a, Tensor(np.zeros((1, 2))), "dot").data.tolist() == [0.0]
    cfg = tiny()
    s = DualStudent(cfg)
    images, ids, mask = inputs(cfg)
    assert s(images, ids, mask).logits.shape == (3, cfg.num_classes)
    with pytest.raises(ValueError):
        fuse(a, b, "mlp")
    with pytest.raises(ValueError):
        fuse(a, b, "dot", s.task_head)
    with pytest.raises(ValueError):
        fuse(a, b, "bilinear")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dot_fusion_is_symmetric_and_bilinear(seed):
    rng = np.random.default_rng(seed)
    u, v, w = (Tensor(rng.normal(size=(4, 5))) for _ in range(3))
    np.testing.assert_allclose(fuse(u, v, "dot").data, fuse(v, u, "dot").data)
    np.testing.assert_allclose(fuse(u, v + w, "dot").data, fuse(u, v, "dot").data + fuse(u, w, "dot").data, atol=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_attention_rows_stochastic_under_random_padding(seed, m):
    cfg = tiny(init_std=0.2)
    rng = np.random.default_rng(seed)
    mask = rng.random((2, m)) < 0.7
    mask[:, 0] = True
    ids = np.where(mask, rng.integers(2, cfg.vocab_size, size=(2, m)), 0)
    images = rng.normal(size=(2, 32, 32, 1)).astype(np.float32)
    t = FusionTeacher(cfg, seed=seed % 7)
    s = DualStudent(cfg, seed=seed % 5)
    for bundle in (t(images, ids, mask, capture=[0, 1]).bundle, s(images, ids, mask, capture=[0, 1]).bundle):
        for l in (0, 1):
            v2t, t2v = bundle.cross(l)
            v2v, t2t = bundle.uni(l)
            for blk, rows in ((v2t, None), (v2v, None), (t2v, mask), (t2t, mask)):
                sums = blk.data.sum(-1)
                if rows is not None:
                    sums = sums.transpose(0, 2, 1)[rows]
                np.testing.assert_allclose(sums, 1.0, atol=1e-5)


# -- parameters / init ------------------------------------------------------------------------
def test_parameter_naming():
    cfg = tiny()
    t, s = FusionTeacher(cfg), DualStudent(cfg)
    assert all(k.startswith("teacher/") for k in t.state_dict())
    names = set(s.state_dict())
    assert "student/visual/layer0/wq/weight" in names
    assert "student/textual/layer1/ffn/fc2/bias" in names
    assert "student/log_tau" in names


def test_student_init_from_teacher_copies_encoder():
    cfg = tiny()
    t, s = FusionTeacher(cfg, seed=1), DualStudent(cfg, seed=2)
    init_student_from_teacher(s, t)
    tp, sp = t.parameters(""), s.parameters("")
    np.testing.assert_array_equal(sp["visual/layer1/wk/weight"].data, tp["encoder/layer1/wk/weight"].data)
    np.testing.assert_array_equal(sp["textual/final_ln/gain"].data, tp["encoder/final_ln/gain"].data)
    np.testing.assert_array_equal(sp["visual/embed/patch_proj"].data, tp["visual_embed/patch_proj"].data)
    np.testing.assert_array_equal(sp["textual/embed/words"].data, tp["text_embed/words"].data)
    # copies, not aliases
    sp["visual/layer0/wq/weight"].data[0, 0] += 1
    assert tp["encoder/layer0/wq/weight"].data[0, 0] != sp["visual/layer0/wq/weight"].data[0, 0]


def test_load_state_dict_strict():
    cfg = tiny()
    s = DualStudent(cfg)
    state = s.state_dict()
    other = DualStudent(cfg, seed=9)
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    bad = dict(state)
    bad.pop("student/log_tau")
    with pytest.raises(KeyError):
        other.load_state_dict(bad)
    bad = dict(state)
    bad["student/log_tau"] = np.zeros(3, np.float32)
    with pytest.raises((ValueError, ShapeError)):
        other.load_state_dict(bad)
