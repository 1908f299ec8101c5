"""Answer accuracy and temporal grounding metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .timeline import Span, ValidationError, temporal_iou

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    predicted_answer: int
    gt_answer: int
    predicted_span: Span
    gt_span: Span


@dataclass
class EvalReport:
    acc: float
    t_miou: float
    r_at_1: dict[float, float] = field(default_factory=dict)
    asa: float = 0.0
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "t_miou": self.t_miou,
            "r_at_1": {f"{m:g}": v for m, v in sorted(self.r_at_1.items())},
            "asa": self.asa,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """Plain-text table: R@1 columns, T.mIoU, then Acc and ASA."""
        cols = [f"R@1,IoU={m:g}" for m in sorted(self.r_at_1)] + ["T.mIoU", "Acc.", "ASA", "N"]
        vals = [f"{100 * self.r_at_1[m]:.2f}" for m in sorted(self.r_at_1)]
        vals += [f"{100 * self.t_miou:.2f}", f"{100 * self.acc:.2f}", f"{100 * self.asa:.2f}", str(self.n)]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{row}\n"


# JSON schema of EvalReport.to_dict(), used to validate CLI reports
REPORT_SCHEMA = {
    "type": "object",
    "required": ["acc", "t_miou", "r_at_1", "asa", "n"],
    "additionalProperties": False,
    "properties": {
        "acc": {"type": "number", "minimum": 0, "maximum": 1},
        "t_miou": {"type": "number", "minimum": 0, "maximum": 1},
        "asa": {"type": "number", "minimum": 0, "maximum": 1},
        "n": {"type": "integer", "minimum": 1},
        "r_at_1": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
    },
}


def evaluate(records: Iterable[EvalRecord],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    records = list(records)
    if not records:
        raise ValidationError("no-records")
    n = len(records)
    ious = [temporal_iou(r.predicted_span, r.gt_span) for r in records]
    correct = [r.predicted_answer == r.gt_answer for r in records]
    return EvalReport(
        acc=sum(correct) / n,
        t_miou=sum(ious) / n,
        r_at_1={m: sum(iou >= m for iou in ious) / n for m in thresholds},
        asa=sum(c and iou >= 0.5 for c, iou in zip(correct, ious)) / n,
        n=n,
    )
