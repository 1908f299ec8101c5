import numpy as np
import pytest

from tqground.config import RunConfig, TrainConfig
from tqground.data import SynthConfig, synth_dataset
from tqground.losses import LossWeights, SupervisionSetting
from tqground.metrics import evaluate
from tqground.model import GroundingModel, ModelConfig
from tqground import tensorcore as tc
from tqground.trainer import Adam, build_model, eval_records, infer, learning_rate, train
from tqground.timeline import ValidationError

S = SupervisionSetting
SYN = SynthConfig(T=8, raw_dim=8, min_span=2, max_span=4)


def small_cfg(**train_kw):
    kw = dict(d=8, epochs=1, batch_size=8)
    kw.update(train_kw)
    return RunConfig(train=TrainConfig(**kw), synth=SYN)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SYN, 24, 0, "tr")


def test_schedule():
    cfg = TrainConfig()
    assert [learning_rate(e, cfg) for e in (1, 10, 11, 15)] == [1e-3, 1e-3, 2e-4, 2e-4]


def test_zero_epochs_returns_initialisation(data):
    cfg = small_cfg(epochs=0)
    init = build_model(data, cfg).state_dict()
    model, log = train(data, S.FULL_SELF, cfg)
    assert log.epochs == [] and all(np.array_equal(init[k], v) for k, v in model.state_dict().items())


def test_zero_learning_rate_keeps_parameters(data):
    cfg = small_cfg(lr=0.0)
    init = build_model(data, cfg).state_dict()
    model, _ = train(data, S.FULL, cfg)
    assert all(np.array_equal(init[k], v) for k, v in model.state_dict().items())


def test_log_columns_follow_setting(data):
    cols = {}
    for s in S:
        _, log = train(data, s, small_cfg())
        cols[s] = set(log.epochs[0]) - {"epoch", "lr"}
        assert set(log.steps[0]) - {"epoch", "lr", "n"} == cols[s]
    assert cols[S.QA_ONLY] == {"qa", "total"}
    assert cols[S.QA_SELF] == {"qa", "self", "total"}
    assert cols[S.FULL] == {"qa", "span", "total"}
    assert cols[S.FULL_SELF] == {"qa", "span", "self", "total"}


def test_step_total_is_weighted_sum_of_components(data):
    w = LossWeights()
    _, log = train(data, S.FULL_SELF, small_cfg())
    for row in log.steps:
        want = row["qa"] + w.lambda1 * row["span"] + w.lambda2 * row["self"]
        assert abs(row["total"] - want) <= 1e-12


@pytest.mark.parametrize("setting, calls", [(S.QA_ONLY, 0), (S.FULL, 0), (S.QA_SELF, 1), (S.FULL_SELF, 1)])
def test_self_branch_only_runs_with_self_supervision(data, setting, calls):
    model, _ = train(data, setting, small_cfg())
    assert (model.fs_calls > 0) == bool(calls)


def test_training_is_reproducible(data):
    a = train(data, S.FULL_SELF, small_cfg())[1].epochs[0]["total"]
    b = train(data, S.FULL_SELF, small_cfg())[1].epochs[0]["total"]
    assert abs(a - b) <= 1e-12


def test_full_setting_needs_spans(data):
    bare = synth_dataset(SYN, 3, 1)
    bare[1].gt_span = None
    with pytest.raises(ValidationError, match="gt_span"):
        train(bare, S.FULL, small_cfg())
    train(bare, S.QA_SELF, small_cfg())  # weak settings do not need spans


def test_checkpoint_per_epoch(data, tmp_path):
    train(data, S.QA_ONLY, small_cfg(epochs=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch001.json", "epoch002.json"]
    GroundingModel.load(tmp_path / "epoch002.json")


def test_adam_matches_hand_update():
    p = tc.parameter([1.0, -2.0])
    opt = Adam([p])
    p.grad = np.array([0.5, -0.1])
    opt.step(0.1)
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    want = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.1]) / (np.array([0.5, 0.1]) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-15)


def test_inference_is_deterministic_and_answers_do_not_depend_on_grounding(data):
    model, _ = train(data, S.FULL, small_cfg())
    a = infer(data[:10], model, S.QA_ONLY)
    b = infer(data[:10], model, S.QA_ONLY)
    c = infer(data[:10], model, S.FULL)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [r.predicted_answer for r in a] == [r.predicted_answer for r in c]


def test_infer_rejects_dimension_mismatch(data):
    m = GroundingModel(ModelConfig(d=8, text_dim=5, video_dim=5))
    with pytest.raises(ValidationError, match="dims"):
        infer(data[:2], m, S.FULL)


def test_untrained_accuracy_is_chance():
    accs = []
    for seed in range(8):
        val = synth_dataset(SYN, 60, 100 + seed)
        m = GroundingModel(ModelConfig(d=8, text_dim=8, video_dim=8, seed=seed))
        accs.append(evaluate(eval_records(infer(val, m, S.FULL))).acc)
    assert 0.12 <= np.mean(accs) <= 0.28


def test_no_signal_training_stays_at_chance():
    cfg = small_cfg(epochs=3)
    blind = SynthConfig(T=8, raw_dim=8, min_span=2, max_span=4, signal=0.0)
    model, _ = train(synth_dataset(blind, 160, 3), S.QA_ONLY, cfg)
    acc = evaluate(eval_records(infer(synth_dataset(blind, 300, 4), model, S.QA_ONLY))).acc
    assert 0.12 <= acc <= 0.28
