import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tqground import tensorcore as tc
from tqground.checks import MODEL_ENTRIES, micro_model_builder
from tqground.data import SynthConfig, synth_instance
from tqground.losses import SupervisionSetting
from tqground.model import (FeatureBatch, FeatureBundle, GroundingModel, ModelConfig, decode_span,
                            param_shapes, positional_encoding)
from tqground.timeline import Span, ValidationError

D = 6


def model(**kw):
    base = dict(d=D, text_dim=5, video_dim=5, seed=1)
    base.update(kw)
    return GroundingModel(ModelConfig(**base))


def const(x):
    return tc.constant(np.asarray(x, dtype=float))


def test_default_shapes_follow_the_paper_sizes():
    m = GroundingModel(ModelConfig())
    out = m.encode_stream(np.random.default_rng(0).standard_normal((1, 16, 4, 300)), "v", -3)
    assert out.shape == (1, 16, 4, 128)


def test_zero_input_leaves_positional_encoding_through_conv():
    m = model()
    m.params["proj_v.b"].data[:] = 0.0
    T = 5
    out = m.encode_stream(np.zeros((T, 2, 5)), "v", -2).data
    pe = positional_encoding(2, D)
    w, b = m["conv_v.w"].data, m["conv_v.b"].data
    padded = np.vstack([np.zeros(D), pe, np.zeros(D)])
    conv = sum(padded[k:k + 2] * w[k] for k in range(3)) + b
    assert np.allclose(out, np.broadcast_to(pe + conv, out.shape), atol=1e-14)


def test_single_step_conv_uses_centre_tap_only():
    m = model()
    x = np.random.default_rng(2).standard_normal((1, 5))
    z = np.maximum(x @ m["proj_t.W"].data + m["proj_t.b"].data, 0) + positional_encoding(1, D)
    want = z + z * m["conv_t.w"].data[1] + m["conv_t.b"].data
    assert np.allclose(m.encode_stream(x, "t").data, want, atol=1e-14)


def test_orthogonal_words_collapse_to_bias():
    m = model(softmax_similarity=False)
    q = np.zeros((1, 1, 2, D))
    q[..., 0] = 1.0
    c = np.zeros((1, 3, 2, D))
    c[..., 1] = 1.0
    out = m.word_level_attention(const(q), const(c)).data
    assert np.allclose(out, np.broadcast_to(m["fuse1.b"].data, out.shape), atol=0)


def test_single_word_attention_is_scaled_copy():
    m = model(softmax_similarity=False)
    rng = np.random.default_rng(4)
    h, v = rng.standard_normal(D), rng.standard_normal(D)
    s = h @ v
    out = m.word_level_attention(const(h.reshape(1, 1, 1, D)), const(v.reshape(1, 1, 1, D))).data
    a, b = s * v, s * h
    want = np.concatenate([a, b, a * b, a + b]) @ m["fuse1.W"].data + m["fuse1.b"].data
    assert np.allclose(out.reshape(-1), want, atol=1e-12)


@pytest.mark.parametrize("softmax", [False, True])
def test_swapping_identical_words_changes_nothing(softmax):
    m = model(softmax_similarity=softmax)
    rng = np.random.default_rng(5)
    w = rng.standard_normal(D)
    other = rng.standard_normal(D)
    q1 = np.stack([w, other, w])[None, None]
    q2 = np.stack([w, w, other])[None, None]
    c = const(rng.standard_normal((1, 4, 3, D)))
    a = m.word_level_attention(const(q1), c).data
    b = m.word_level_attention(const(q2), c).data
    assert np.allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("mode", ["raw", "mean"])
def test_zero_subtitle_frames_give_bias(mode):
    m = model(frame_similarity=mode)
    V_f = const(np.random.default_rng(6).standard_normal((3, D)))
    F = m.frame_level_attention(const(np.zeros((3, D))), V_f).data
    assert np.allclose(F, np.broadcast_to(m["fuse2.b"].data, F.shape), atol=0)


def test_frame_similarity_is_bilinear():
    rng = np.random.default_rng(7)
    S_f, V_f = rng.standard_normal((4, D)), rng.standard_normal((4, D))
    assert np.allclose((3 * S_f) @ V_f.T, 3 * (S_f @ V_f.T))


def test_single_frame_fusion():
    m = model(frame_similarity="raw")
    rng = np.random.default_rng(8)
    s, v = rng.standard_normal(D), rng.standard_normal(D)
    k = s @ v
    a, b = k * v, k * s
    want = np.concatenate([a, b, a * b, a + b]) @ m["fuse2.W"].data + m["fuse2.b"].data
    got = m.frame_level_attention(const(s[None]), const(v[None])).data[0]
    assert np.allclose(got, want, atol=1e-12)


def test_temporal_attention_examples():
    m = model()
    F = np.random.default_rng(9).standard_normal((5, D))
    m.params["tatt.w"].data[:] = 0.0
    m.params["tatt.b"].data[:] = 0.0
    A, Fp = m.temporal_attention(const(F))
    assert np.array_equal(A.data, np.full(5, 0.5)) and np.allclose(Fp.data, F / 2, atol=0)
    m.params["tatt.b"].data[:] = 30.0
    A, Fp = m.temporal_attention(const(F))
    assert np.allclose(A.data, 1.0, atol=1e-12) and np.allclose(Fp.data, F, atol=1e-11)
    m = model()
    A, _ = m.temporal_attention(const(np.zeros((4, D))))
    assert np.allclose(A.data, 1 / (1 + np.exp(-m["tatt.b"].data[0])), atol=1e-15)


def test_answer_head_examples():
    m = model()
    one = np.random.default_rng(10).standard_normal((4, D))
    same = m.predict_answer(const(np.stack([one] * 5)[None])).data[0]
    assert np.all(same == same[0])
    m.params["answer.w"].data[:] = 0.0
    zero = m.predict_answer(const(np.random.default_rng(1).standard_normal((1, 5, 4, D)))).data
    assert np.all(zero == m["answer.b"].data[0])


def test_span_head_examples():
    m = model()
    m.params["span.W"].data[:] = 0.0
    p = m.predict_span(const(np.random.default_rng(11).standard_normal((7, D)))).data
    assert np.allclose(p, 1 / 7, atol=1e-15)
    m = model()
    assert np.array_equal(m.predict_span(const(np.ones((1, D)))).data, np.ones((1, 2)))


def test_softmax_shift_on_start_logits():
    m = model()
    F = const(np.random.default_rng(12).standard_normal((6, D)))
    base = m.predict_span(F).data[:, 0]
    m.params["span.b"].data[0] += 4.2
    assert np.allclose(m.predict_span(F).data[:, 0], base, atol=1e-15)


def test_decode_examples():
    e = np.eye(8)
    assert decode_span(e[2] + 1e-3, e[5] + 1e-3) == Span(2, 5)
    assert decode_span(np.full(6, 1 / 6), np.full(6, 1 / 6)) == Span(0, 0)


def _brute_decode(p, q, cap=None):
    best = None
    for i, j in itertools.product(range(len(p)), repeat=2):
        if i <= j and (not cap or j - i < cap):
            if best is None or p[i] * q[j] > best[0]:
                best = (p[i] * q[j], i, j)
    return Span(best[1], best[2])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 1)), st.data(), st.integers(0, 4))
def test_decode_matches_exhaustive_scan(p, data, cap):
    q = data.draw(arrays(np.float64, p.shape, elements=st.floats(0, 1)))
    assert decode_span(p, q, cap or None) == _brute_decode(p, q, cap or None)


def test_reversed_peaks_use_best_ordered_pair():
    e = np.eye(8) * 0.9 + 0.1 / 8
    assert decode_span(e[5], e[2]) == _brute_decode(e[5], e[2])


MICRO = SynthConfig(T=6, raw_dim=5, min_span=1, max_span=4)


def _inst(seed=0):
    return synth_instance(np.random.default_rng(seed), MICRO, f"i{seed}")


def test_predictions_are_distributions_and_deterministic():
    m = model()
    b = FeatureBatch.stack([_inst(i).bundle(None) for i in range(3)])
    p1, p2 = m.predict(b), m.predict(b)
    for a, c in zip(p1, p2):
        assert abs(a.p_st.sum() - 1) < 1e-6 and abs(a.p_ed.sum() - 1) < 1e-6
        assert np.all((a.attention > 0) & (a.attention < 1))
        assert np.array_equal(a.answer_scores, c.answer_scores) and a.decoded_span == c.decoded_span


def test_hypothesis_permutation_permutes_scores():
    m = model()
    bund = _inst(3).bundle(None)
    perm = [3, 0, 4, 1, 2]
    base = m.forward(bund)["scores"].data[0]
    moved = m.forward(FeatureBundle(bund.H[perm], bund.V, bund.S))["scores"].data[0]
    assert np.allclose(moved, base[perm], rtol=0, atol=1e-13)


def test_fs_branch_shapes_and_identical_proposals():
    m = model()
    inst = _inst(4)
    bund = inst.bundle()
    traces = m.fs_branch_forward(bund)
    assert len(traces) == bund.Sp.shape[0] and all(t.shape == (inst.T,) for t in traces)
    twin = FeatureBundle(bund.H, bund.V, bund.S, np.stack([bund.Sp[0]] * 2), np.stack([bund.Sp_mask[0]] * 2))
    a, b = m.fs_branch_forward(twin)
    assert np.array_equal(a, b)


def test_fs_branch_without_proposals_is_empty():
    bund = _inst(5).bundle(None)
    assert model().fs_branch_forward(bund) == []


@pytest.mark.parametrize("softmax", [False, True])
def test_fs_branch_zero_context_is_constant(softmax):
    m = model(softmax_similarity=softmax)
    batch = FeatureBatch.stack([_inst(6).bundle()])
    with tc.no_grad():
        enc = m.encode(batch)
        enc["V"] = const(np.zeros(enc["V"].shape))
        enc["S"] = const(np.zeros(enc["S"].shape))
        A = m.fs_branch(enc, batch).data[0]
    assert A.shape[1] == batch.T
    assert np.allclose(A, A[:, :1], rtol=0, atol=1e-15)


def test_weight_sharing_between_branches():
    m = model()
    bund = _inst(7).bundle()
    before = m.fs_branch_forward(bund)[0].copy()
    m.params["fuse1.W"].data *= 1.5
    assert not np.array_equal(before, m.fs_branch_forward(bund)[0])


def test_checkpoint_round_trip(tmp_path):
    m = model()
    m.save(tmp_path / "m.json")
    back = GroundingModel.load(tmp_path / "m.json")
    assert back.cfg == m.cfg
    for k in param_shapes(m.cfg):
        assert np.array_equal(back[k].data, m[k].data)


def test_checkpoint_shape_checked(tmp_path):
    m = model()
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["params"]["span.W"]["shape"] = [2, D]
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="span.W"):
        GroundingModel.load(tmp_path / "m.json")


def test_checkpoint_dim_mismatch(tmp_path):
    model().save(tmp_path / "m.json")
    with pytest.raises(ValidationError, match="text_dim"):
        GroundingModel.load(tmp_path / "m.json", expect=ModelConfig(d=D, text_dim=7, video_dim=5))


def test_wrong_feature_dim_rejected():
    with pytest.raises(ValidationError):
        model().encode_stream(np.zeros((2, 3, 9)), "t")


@pytest.mark.parametrize("setting", list(SupervisionSetting))
def test_micro_model_gradcheck(setting):
    b = micro_model_builder(setting)
    assert max(tc.gradcheck(b, s, max_entries=MODEL_ENTRIES) for s in range(2)) <= 1e-4


@pytest.mark.parametrize("kw", [dict(softmax_similarity=False, frame_similarity="softmax"),
                                dict(softmax_similarity=True, frame_similarity="raw")])
def test_micro_model_gradcheck_other_modes(kw):
    b = micro_model_builder(SupervisionSetting.FULL_SELF, **kw)
    assert tc.gradcheck(b, 0, max_entries=MODEL_ENTRIES) <= 1e-4
