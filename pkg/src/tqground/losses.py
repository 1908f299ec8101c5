"""QA, span, and attention self-supervision losses and their combination."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Value
from .timeline import Span, ValidationError

log = logging.getLogger(__name__)


class SupervisionSetting(enum.Enum):
    QA_ONLY = "qa"
    QA_SELF = "qa+self"
    FULL = "full"
    FULL_SELF = "full+self"

    @property
    def uses_span(self) -> bool:
        return self in (SupervisionSetting.FULL, SupervisionSetting.FULL_SELF)

    @property
    def uses_self(self) -> bool:
        return self in (SupervisionSetting.QA_SELF, SupervisionSetting.FULL_SELF)

    @classmethod
    def parse(cls, text: str) -> "SupervisionSetting":
        key = text.strip().lower()
        for s in cls:
            if key in (s.value, s.name.lower()):
                return s
        raise ValidationError(f"unknown supervision setting {text!r}")


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.25
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("loss weights must be non-negative")
        if not 0 < self.epsilon < 1e-3:
            raise ValidationError(f"epsilon must lie in (0, 1e-3), got {self.epsilon}")


def _v(x) -> Value:
    return x if isinstance(x, Value) else tc.constant(x)


def loss_qa(scores, gt_index: int) -> Value:
    """Cross-entropy of the five answer scores against the correct index."""
    scores = _v(scores)
    if not 0 <= gt_index < scores.shape[0]:
        raise ValidationError(f"gt_index {gt_index} out of range for {scores.shape[0]} answers")
    return -tc.log_softmax(scores, 0)[gt_index]


def loss_span(p_st, p_ed, gt: Span, epsilon: float = 1e-7) -> Value:
    p_st, p_ed = _v(p_st), _v(p_ed)
    T = p_st.shape[0]
    if gt.ed >= T:
        raise ValidationError(f"gt span [{gt.st}, {gt.ed}] outside grid of {T} frames")
    a = tc.log(tc.clip(p_st[gt.st:gt.st + 1], epsilon, 1.0))
    b = tc.log(tc.clip(p_ed[gt.ed:gt.ed + 1], epsilon, 1.0))
    return tc.scale(tc.sum(a + b), -0.5)


def _counts(mask):
    mask = np.asarray(mask, dtype=np.float64)
    n_in = int(mask.sum())
    n_out = mask.size - n_in
    return mask, n_in, n_out


def loss_rank(A, mask) -> Value:
    """``1 + avg(A_out) - avg(A_in)``; degenerate masks contribute 0."""
    A = _v(A)
    mask, n_in, n_out = _counts(mask)
    if n_in == 0 or n_out == 0:
        log.debug("loss_rank: degenerate-mask")
        return tc.constant(0.0)
    inside = tc.scale(tc.sum(A * tc.constant(mask)), 1.0 / n_in)
    outside = tc.scale(tc.sum(A * tc.constant(1.0 - mask)), 1.0 / n_out)
    return tc.add(tc.sub(outside, inside), tc.constant(1.0))


def loss_bce(A, mask, epsilon: float = 1e-7) -> Value:
    A = tc.clip(_v(A), epsilon, 1.0 - epsilon)
    mask, n_in, n_out = _counts(mask)
    total = tc.constant(0.0)
    if n_in:
        total = total - tc.scale(tc.sum(tc.log(A) * tc.constant(mask)), 1.0 / n_in)
    if n_out:
        total = total - tc.scale(tc.sum(tc.log(1.0 - A) * tc.constant(1.0 - mask)), 1.0 / n_out)
    return total


def loss_self(traces, masks: Sequence, epsilon: float = 1e-7) -> Value:
    """Mean over proposals of rank + BCE.

    ``traces`` is a list of length-T values or one ``(n, T)`` value; the
    matrix form is evaluated in a single vectorized pass.
    """
    if len(traces) != len(masks):
        raise ValidationError(f"{len(traces)} traces vs {len(masks)} masks")
    if not len(traces):
        return tc.constant(0.0)
    if not isinstance(traces, Value):
        total = tc.constant(0.0)
        for A, m in zip(traces, masks):
            total = total + loss_rank(A, m) + loss_bce(A, m, epsilon)
        return tc.scale(total, 1.0 / len(traces))

    M = np.asarray(masks, dtype=np.float64)
    n_in = M.sum(axis=1, keepdims=True)
    n_out = M.shape[1] - n_in
    w_in = np.divide(M, n_in, out=np.zeros_like(M), where=n_in > 0)
    w_out = np.divide(1.0 - M, n_out, out=np.zeros_like(M), where=n_out > 0)
    ok = (n_in > 0) & (n_out > 0)  # rows whose rank term is defined
    rank = tc.sum(traces * tc.constant((w_out - w_in) * ok)) + float(ok.sum())
    A = tc.clip(traces, epsilon, 1.0 - epsilon)
    bce = -(tc.sum(tc.log(A) * tc.constant(w_in)) + tc.sum(tc.log(1.0 - A) * tc.constant(w_out)))
    return tc.scale(rank + bce, 1.0 / len(masks))


def total_loss(qa, span, self_, w: LossWeights, setting: SupervisionSetting) -> Value:
    """``qa + lambda1 * span + lambda2 * self`` with inactive terms dropped."""
    total = _v(qa)
    if setting.uses_span:
        total = total + tc.scale(_v(span), w.lambda1)
    if setting.uses_self:
        total = total + tc.scale(_v(self_), w.lambda2)
    return total


def batch_losses(out: dict, gt_answers: Sequence[int], gt_spans: Sequence[Span | None],
                 self_masks: np.ndarray | None, valid: np.ndarray | None,
                 w: LossWeights, setting: SupervisionSetting) -> dict[str, Value]:
    """Per-instance loss vectors (n,) for a batched forward pass.

    Mirrors :func:`loss_qa`, :func:`loss_span`, :func:`loss_self` and
    :func:`total_loss` instance by instance; inactive components are absent
    from the result. ``self_masks`` is (n, P, T) and ``valid`` (n, P) marks
    real proposals.
    """
    scores = out["scores"]
    n, K = scores.shape
    onehot = np.zeros((n, K))
    onehot[np.arange(n), gt_answers] = 1.0
    res = {"qa": -tc.sum(tc.log_softmax(scores, 1) * tc.constant(onehot), 1)}
    total = res["qa"]

    if setting.uses_span:
        probs = out["span_probs"]  # (n, K, T, 2)
        T = probs.shape[2]
        pick = np.zeros(probs.shape)
        for i, (g, s) in enumerate(zip(gt_answers, gt_spans)):
            if s is None or s.ed >= T:
                raise ValidationError(f"instance {i}: span supervision needs a gt_span on the grid")
            pick[i, g, s.st, 0] = 1.0
            pick[i, g, s.ed, 1] = 1.0
        sel = tc.sum(tc.reshape(probs * tc.constant(pick), (n, K * T, 2)), 1)  # (n, 2)
        logs = tc.log(tc.clip(sel, w.epsilon, 1.0))
        res["span"] = tc.scale(tc.sum(logs, 1), -0.5)
        total = total + tc.scale(res["span"], w.lambda1)

    if setting.uses_self:
        A = out.get("A_self")
        if A is None:
            res["self"] = tc.constant(np.zeros(n))
        else:
            M = np.asarray(self_masks, dtype=np.float64)
            live_rows = np.asarray(valid, dtype=np.float64)
            n_in = M.sum(axis=2, keepdims=True)
            n_out = M.shape[2] - n_in
            w_in = np.divide(M, n_in, out=np.zeros_like(M), where=n_in > 0) * live_rows[..., None]
            w_out = np.divide(1.0 - M, n_out, out=np.zeros_like(M), where=n_out > 0) * live_rows[..., None]
            ok = ((n_in > 0) & (n_out > 0)) * live_rows[..., None]  # (n, P, 1)
            live = ok[..., 0].sum(axis=1)
            count = live_rows.sum(axis=1)
            inv = np.divide(1.0, count, out=np.zeros_like(count), where=count > 0)
            Ac = tc.clip(A, w.epsilon, 1.0 - w.epsilon)
            per = (tc.sum(tc.sum(A * tc.constant((w_out - w_in) * ok), 2), 1) + tc.constant(live)
                   - tc.sum(tc.sum(tc.log(Ac) * tc.constant(w_in), 2), 1)
                   - tc.sum(tc.sum(tc.log(1.0 - Ac) * tc.constant(w_out), 2), 1))
            res["self"] = per * tc.constant(inv)
        total = total + tc.scale(res["self"], w.lambda2)

    res["total"] = total
    return res
