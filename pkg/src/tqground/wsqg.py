"""Turn a temporal attention trace into a single grounded span.

Frames scoring strictly above the trace mean are joined into maximal runs,
each run is scored, and the score is multiplied by ``length ** alpha`` so
that short local peaks do not beat long relevant stretches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .timeline import Span, ValidationError


@dataclass
class WsqgConfig:
    alpha: float = 0.5
    scoring: str = "mean"  # "mean" or "sum"
    refine: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.scoring not in ("mean", "sum"):
            raise ValidationError(f"scoring must be 'mean' or 'sum', got {self.scoring!r}")


@dataclass(frozen=True)
class Proposal:
    span: Span
    raw_score: float
    refined_score: float


def extract_proposals(A) -> list[Span]:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 1 or A.size == 0:
        raise ValidationError("empty attention trace")
    above = A > A.mean()
    if not above.any():
        return [Span(0, A.size - 1)]
    # run boundaries from the 0/1 edges of the padded indicator
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [Span(int(s), int(e)) for s, e in zip(starts, ends)]


def score_proposal(A, span: Span, cfg: WsqgConfig | None = None) -> float:
    cfg = cfg or WsqgConfig()
    seg = np.asarray(A, dtype=np.float64)[span.st:span.ed + 1]
    return float(seg.sum() if cfg.scoring == "sum" else seg.mean())


def refine_score(raw: float, span: Span, cfg: WsqgConfig | None = None) -> float:
    cfg = cfg or WsqgConfig()
    return float(raw * span.length ** cfg.alpha)


def scored_proposals(A, cfg: WsqgConfig | None = None) -> list[Proposal]:
    cfg = cfg or WsqgConfig()
    out = []
    for span in extract_proposals(A):
        raw = score_proposal(A, span, cfg)
        out.append(Proposal(span, raw, refine_score(raw, span, cfg) if cfg.refine else raw))
    return out


def ground(A, cfg: WsqgConfig | None = None) -> Span:
    """Highest refined-score proposal; ties go to the earliest, then longest."""
    props = scored_proposals(A, cfg)
    best = max(props, key=lambda p: (p.refined_score, -p.span.st, p.span.length))
    return best.span
