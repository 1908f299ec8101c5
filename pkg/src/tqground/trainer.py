"""Training under the four supervision settings, and inference."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .data import Instance, PredictionRecord
from .losses import SupervisionSetting, batch_losses
from .metrics import EvalRecord
from .model import FeatureBatch, GroundingModel, ModelConfig
from .timeline import ValidationError
from .wsqg import WsqgConfig, ground

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params: Sequence[tc.Value], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


def learning_rate(epoch: int, cfg) -> float:
    """Rate for 1-based ``epoch``: ``lr`` up to ``lr_drop_epoch``, ``lr_after`` beyond."""
    return cfg.lr if epoch <= cfg.lr_drop_epoch else cfg.lr_after


def _groups(instances: Sequence[Instance], scales, with_self: bool):
    """Split instances into runs with identical feature shapes (order kept within a shape)."""
    by_shape: dict[tuple, list[Instance]] = defaultdict(list)
    for inst in instances:
        b = inst.bundle(scales if with_self else None)
        by_shape[b.shape_key].append((inst, b))
    return list(by_shape.values())


def build_model(instances: Sequence[Instance], cfg: RunConfig) -> GroundingModel:
    first = instances[0]
    return GroundingModel(ModelConfig(
        d=cfg.train.d, text_dim=first.H.shape[-1], video_dim=first.V.shape[-1],
        softmax_similarity=cfg.train.softmax_similarity,
        max_span_frames=cfg.train.max_span_frames,
        temporal_encoder=cfg.train.temporal_encoder,
        frame_similarity=cfg.train.frame_similarity, seed=cfg.train.seed))


def check_dataset(instances: Sequence[Instance], setting: SupervisionSetting):
    if not instances:
        raise ValidationError("empty dataset")
    if setting.uses_span:
        missing = [i.id for i in instances if i.gt_span is None]
        if missing:
            raise ValidationError(f"setting {setting.value} needs gt_span; missing for {missing[:5]}"
                                  f"{' ...' if len(missing) > 5 else ''}")


def batch_step_losses(model: GroundingModel, pairs, setting: SupervisionSetting, cfg: RunConfig):
    """Forward one same-shape group; returns the per-instance loss vectors."""
    insts = [p[0] for p in pairs]
    batch = FeatureBatch.stack([p[1] for p in pairs])
    out = model.forward(batch, with_self=setting.uses_self)
    masks = None
    if setting.uses_self:
        P = batch.Sp.shape[1]
        masks = np.zeros((len(insts), P, batch.T))
        for i, inst in enumerate(insts):
            m = inst.proposals(cfg.train.scales)[1]
            masks[i, :len(m)] = m
    return batch_losses(out, [i.gt_answer for i in insts], [i.gt_span for i in insts],
                        masks, batch.Sp_valid, cfg.loss, setting)


def train(dataset: Sequence[Instance], setting: SupervisionSetting, cfg: RunConfig | None = None,
          model: GroundingModel | None = None, checkpoint_dir=None) -> tuple[GroundingModel, TrainLog]:
    cfg = cfg or RunConfig()
    tcfg = cfg.train
    check_dataset(dataset, setting)
    model = model or build_model(dataset, cfg)
    params = model.parameters()
    opt = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    history = TrainLog()
    comps = ["qa"] + (["span"] if setting.uses_span else []) + (["self"] if setting.uses_self else [])
    log.info("adam beta1=%g beta2=%g eps=%g, setting %s", tcfg.adam_beta1, tcfg.adam_beta2,
             tcfg.adam_eps, setting.value)

    for epoch in range(1, tcfg.epochs + 1):
        lr = learning_rate(epoch, tcfg)
        order = rng.permutation(len(dataset))
        sums = defaultdict(float)
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch = [dataset[i] for i in idx]
            tc.zero_grad(params)
            step = defaultdict(float)
            for pairs in _groups(batch, tcfg.scales, setting.uses_self):
                res = batch_step_losses(model, pairs, setting, cfg)
                tc.backward(tc.scale(tc.sum(res["total"]), 1.0 / len(batch)))
                for k in comps + ["total"]:
                    step[k] += float(np.sum(res[k].data))
            opt.step(lr)
            rec = {"epoch": epoch, "lr": lr, "n": len(batch)}
            rec.update({k: step[k] / len(batch) for k in comps + ["total"]})
            history.steps.append(rec)
            for k in comps + ["total"]:
                sums[k] += step[k]
        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / len(dataset) for k in comps + ["total"]})
        history.epochs.append(row)
        log.info("epoch %d lr %g %s", epoch, lr, " ".join(f"{k}={row[k]:.4f}" for k in comps + ["total"]))
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(checkpoint_dir) / f"epoch{epoch:03d}.json")
    return model, history


def infer(dataset: Sequence[Instance], model: GroundingModel, setting: SupervisionSetting,
          wsqg_cfg: WsqgConfig | None = None, batch_size: int = 64) -> list[PredictionRecord]:
    """Answer = argmax score; span from WSQG on the predicted stream's attention
    (QA-only settings) or from the span predictor (full settings)."""
    wsqg_cfg = wsqg_cfg or WsqgConfig()
    if not dataset:
        return []
    if dataset[0].H.shape[-1] != model.cfg.text_dim or dataset[0].V.shape[-1] != model.cfg.video_dim:
        raise ValidationError(f"checkpoint expects text/video dims {model.cfg.text_dim}/{model.cfg.video_dim}, "
                              f"data has {dataset[0].H.shape[-1]}/{dataset[0].V.shape[-1]}")
    out: dict[str, PredictionRecord] = {}
    for start in range(0, len(dataset), batch_size):
        for pairs in _groups(dataset[start:start + batch_size], None, False):
            preds = model.predict(FeatureBatch.stack([b for _, b in pairs]))
            for (inst, _), p in zip(pairs, preds):
                trace = p.attention[p.stream]
                span = p.decoded_span if setting.uses_span else ground(trace, wsqg_cfg)
                out[inst.id] = PredictionRecord(inst.id, p.answer_scores.tolist(), p.p_st.tolist(),
                                                p.p_ed.tolist(), trace.tolist(), span, p.answer,
                                                inst.gt_answer, inst.gt_span)
    return [out[i.id] for i in dataset]


def eval_records(preds: Sequence[PredictionRecord]) -> list[EvalRecord]:
    """Records with ground truth, ready for :func:`metrics.evaluate`."""
    return [EvalRecord(p.id, p.predicted_answer, p.gt_answer, p.span, p.gt_span)
            for p in preds if p.gt_answer is not None and p.gt_span is not None]
