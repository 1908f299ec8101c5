"""Question-guided temporal grounding for video question answering.

A numpy reverse-mode autodiff core (:mod:`tensorcore`) drives a dual-level
attention model (:mod:`model`) trained under four supervision settings
(:mod:`trainer`). Spans come either from a start/end predictor or, without
span labels, from attention traces via :mod:`wsqg`.
"""

from .losses import LossWeights, SupervisionSetting
from .metrics import EvalRecord, EvalReport, evaluate
from .timeline import Span, SubtitleTrack, ValidationError
from .wsqg import WsqgConfig, ground

__all__ = ["LossWeights", "SupervisionSetting", "EvalRecord", "EvalReport", "evaluate",
           "Span", "SubtitleTrack", "ValidationError", "WsqgConfig", "ground"]
__version__ = "0.1.0"
