"""Gradient-check builders for every tensor op and for the full model loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensorcore as tc
from .data import SynthConfig, synth_instance
from .losses import LossWeights, SupervisionSetting, batch_losses, loss_bce, loss_qa, loss_rank, loss_span
from .model import FeatureBatch, GroundingModel, ModelConfig
from .timeline import Span


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return tc.parameter(rng.uniform(lo, hi, size=shape))


def _unary(fn, shape=(3, 4), **kw):
    def build(rng, leaves=None):
        if leaves is None:
            leaves = [_leaf(rng, *shape, **kw)]
        # random projection turns any output into a scalar with a generic gradient
        out = fn(leaves[0])
        w = tc.constant(np.random.default_rng(99).uniform(-1, 1, size=out.shape))
        return tc.sum(out * w), leaves
    return build


def _binary(fn, sa, sb):
    def build(rng, leaves=None):
        if leaves is None:
            leaves = [_leaf(rng, *sa), _leaf(rng, *sb)]
        out = fn(*leaves)
        w = tc.constant(np.random.default_rng(98).uniform(-1, 1, size=out.shape))
        return tc.sum(out * w), leaves
    return build


OP_BUILDERS: dict[str, Callable] = {
    "matmul": _binary(tc.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(tc.matmul, (2, 3, 4), (2, 4, 5)),
    "matmul_shared": _binary(tc.matmul, (2, 3, 4), (4, 5)),
    "transpose": _unary(tc.transpose, (2, 3, 4)),
    "add": _binary(tc.add, (3, 4), (3, 4)),
    "sub": _binary(tc.sub, (3, 4), (3, 4)),
    "mul": _binary(tc.mul, (3, 4), (3, 4)),
    "add_bias": _binary(tc.add_bias, (2, 3, 4), (4,)),
    "relu": _unary(tc.relu, (4, 5)),
    "sigmoid": _unary(tc.sigmoid, (4, 5), lo=-3, hi=3),
    "log": _unary(tc.log, (4, 5), lo=0.2, hi=3.0),
    "softmax": _unary(lambda x: tc.softmax(x, 1), (3, 5), lo=-2, hi=2),
    "log_softmax": _unary(lambda x: tc.log_softmax(x, 0), (5, 3), lo=-2, hi=2),
    "max": _unary(lambda x: tc.max(x, 1), (3, 6)),
    "sum": _unary(lambda x: tc.sum(x, 0), (3, 4)),
    "sum_all": _unary(tc.sum, (3, 4)),
    "mean": _unary(lambda x: tc.mean(x, 1), (3, 4)),
    "concat": _binary(lambda a, b: tc.concat([a, b, a]), (2, 3), (2, 2)),
    "scale": _unary(lambda x: tc.scale(x, -2.5), (3, 3)),
    "reshape": _unary(lambda x: tc.reshape(x, (4, 3)), (2, 6)),
    "broadcast_to": _unary(lambda x: tc.broadcast_to(x, (3, 4, 2)), (1, 4, 1)),
    "take": _unary(lambda x: x[1:3, 2], (4, 5)),
    "pad": _unary(lambda x: tc.pad(x, 0, 1, 2), (3, 2)),
    "clip": _unary(lambda x: tc.clip(x, -0.5, 0.5), (4, 4)),
}


def sum_of_squares(rng, leaves=None):
    if leaves is None:
        leaves = [_leaf(rng, 3, 3)]
    x = leaves[0]
    return tc.sum(x * x), leaves


def constant_loss(rng, leaves=None):
    return tc.constant(3.0), []


# finite differences on the model are sampled; 50 seeds x 64 entries covers the ~740 parameters several times over
MODEL_ENTRIES = 64

MICRO = SynthConfig(T=4, N_o=2, L_h=3, L_s=6, raw_dim=5, min_span=1, max_span=3,
                    signal=1.0, noise=1.0)


def micro_model_builder(setting: SupervisionSetting = SupervisionSetting.FULL_SELF,
                        softmax_similarity: bool = True, frame_similarity: str = "mean"):
    """Builder for the full forward pass plus total loss on a T=4, d=8 instance."""
    cache: dict[tuple[int, int], tuple] = {}

    def build(rng, leaves=None):
        key = (int(rng.integers(2**31)), int(rng.integers(2**31)))
        if key not in cache:
            inst = synth_instance(np.random.default_rng(key[0]), MICRO, "micro")
            model = GroundingModel(ModelConfig(d=8, text_dim=MICRO.raw_dim, video_dim=MICRO.raw_dim,
                                               softmax_similarity=softmax_similarity,
                                               frame_similarity=frame_similarity, seed=key[1]))
            cache.clear()
            cache[key] = (inst, model, FeatureBatch.stack([inst.bundle()]), inst.proposals()[1][None])
        inst, model, batch, masks = cache[key]
        if leaves is not None:
            model.params = dict(zip(model.params, leaves))
        out = model.forward(batch, with_self=setting.uses_self)
        res = batch_losses(out, [inst.gt_answer], [inst.gt_span], masks, batch.Sp_valid,
                           LossWeights(), setting)
        return tc.sum(res["total"]), model.parameters()
    return build


def loss_builders() -> dict[str, Callable]:
    """Gradchecks of the single-instance loss functions w.r.t. their inputs."""
    T = 6
    mask = np.array([0, 1, 1, 1, 0, 0], dtype=float)

    def qa(rng, leaves=None):
        leaves = leaves or [_leaf(rng, 5, lo=-2, hi=2)]
        return loss_qa(leaves[0], 2), leaves

    def span(rng, leaves=None):
        leaves = leaves or [_leaf(rng, T, lo=-2, hi=2), _leaf(rng, T, lo=-2, hi=2)]
        return loss_span(tc.softmax(leaves[0], 0), tc.softmax(leaves[1], 0), Span(1, 4)), leaves

    def rank(rng, leaves=None):
        leaves = leaves or [_leaf(rng, T, lo=0.05, hi=0.95)]
        return loss_rank(leaves[0], mask), leaves

    def bce(rng, leaves=None):
        leaves = leaves or [_leaf(rng, T, lo=0.05, hi=0.95)]
        return loss_bce(leaves[0], mask), leaves

    return {"loss_qa": qa, "loss_span": span, "loss_rank": rank, "loss_bce": bce}


def run_all(seeds=range(50), model_seeds=None) -> dict[str, float]:
    """Worst relative error per builder over the given seeds."""
    report = {}
    builders = dict(OP_BUILDERS)
    builders.update(loss_builders())
    builders["sum_of_squares"] = sum_of_squares
    for name, b in builders.items():
        report[name] = max(tc.gradcheck(b, s) for s in seeds)
    for s in (seeds if model_seeds is None else model_seeds):
        err = tc.gradcheck(micro_model_builder(), s, max_entries=MODEL_ENTRIES)
        report["model"] = max(report.get("model", 0.0), err)
    return report
