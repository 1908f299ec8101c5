"""Spans, subtitle tracks, subtitle proposals and frame projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """Malformed input data; the CLI maps it to exit code 1."""


@dataclass(frozen=True, order=True)
class Span:
    """Inclusive frame interval ``[st, ed]``."""

    st: int
    ed: int

    def __post_init__(self):
        if not (0 <= self.st <= self.ed):
            raise ValidationError(f"invalid span [{self.st}, {self.ed}]")

    @property
    def length(self) -> int:
        return self.ed - self.st + 1

    def to_list(self) -> list[int]:
        return [self.st, self.ed]


@dataclass(frozen=True)
class SubtitleTrack:
    starts: tuple[float, ...]
    texts: tuple[str, ...]
    video_end: float

    def __post_init__(self):
        if len(self.starts) != len(self.texts):
            raise ValidationError("subtitle starts and texts differ in length")
        for i, s in enumerate(self.starts):
            if s < 0:
                raise ValidationError(f"subtitle {i}: negative start time {s}")
            if i and s <= self.starts[i - 1]:
                raise ValidationError(f"subtitle {i}: start time {s} not after {self.starts[i - 1]}")
        if self.starts and self.starts[-1] >= self.video_end:
            raise ValidationError(f"subtitle start {self.starts[-1]} not before video end {self.video_end}")

    def __len__(self):
        return len(self.starts)

    def start(self, j: int) -> float:
        return self.video_end if j >= len(self.starts) else self.starts[j]


@dataclass(frozen=True)
class FrameGrid:
    T: int
    fps: float = 0.5

    @property
    def duration(self) -> float:
        return self.T / self.fps

    def window(self, i: int) -> tuple[float, float]:
        return i / self.fps, (i + 1) / self.fps


@dataclass(frozen=True)
class SubtitleProposal:
    first: int  # index of the first grouped subtitle
    size: int
    interval: tuple[float, float]
    span: Span | None = field(default=None, compare=False)

    @property
    def subtitle_indices(self) -> range:
        return range(self.first, self.first + self.size)


def build_subtitle_proposals(track: SubtitleTrack, scale: int = 2) -> list[SubtitleProposal]:
    """Group ``scale`` adjacent subtitles into proposals with derived intervals.

    Proposal ``j`` covers ``[start(j), start(j + scale))`` where the start past
    the last subtitle is the video end. Tracks shorter than ``scale`` give one
    proposal over the whole remainder.
    """
    if scale < 2:
        raise ValueError(f"scale must be >= 2, got {scale}")
    n = len(track)
    if n == 0:
        return []
    if n < scale:
        return [SubtitleProposal(0, n, (track.start(0), track.video_end))]
    return [SubtitleProposal(j, scale, (track.start(j), track.start(j + scale)))
            for j in range(n - scale + 1)]


def project_to_frames(interval: tuple[float, float], grid: FrameGrid) -> Span:
    """Frames whose window ``[i/fps, (i+1)/fps)`` meets the interval with positive length."""
    t0, t1 = interval
    if not t0 < t1:
        raise ValueError(f"empty interval [{t0}, {t1})")
    if t1 <= 0 or t0 >= grid.duration:
        raise ValidationError(f"interval-off-grid: [{t0}, {t1}) vs [0, {grid.duration})")
    st = math.floor(t0 * grid.fps)
    ed = math.ceil(t1 * grid.fps) - 1
    return Span(max(st, 0), min(ed, grid.T - 1))


def span_window(span: Span, grid: FrameGrid) -> tuple[float, float]:
    return span.st / grid.fps, (span.ed + 1) / grid.fps


def proposal_spans(track: SubtitleTrack, grid: FrameGrid, scale: int = 2) -> list[SubtitleProposal]:
    """Proposals with their projected frame spans; off-grid proposals are dropped."""
    out = []
    for p in build_subtitle_proposals(track, scale):
        try:
            span = project_to_frames(p.interval, grid)
        except ValidationError:
            continue
        out.append(SubtitleProposal(p.first, p.size, p.interval, span))
    return out


def temporal_iou(a: Span, b: Span) -> float:
    inter = min(a.ed, b.ed) - max(a.st, b.st) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def span_mask(s: Span, T: int) -> np.ndarray:
    if s.ed >= T:
        raise ValidationError(f"span [{s.st}, {s.ed}] outside grid of {T} frames")
    m = np.zeros(T)
    m[s.st:s.ed + 1] = 1.0
    return m


def aligned_subtitles(track: SubtitleTrack, grid: FrameGrid, k: int = 2) -> list[list[int]]:
    """For each frame, the ``k`` subtitles whose start is nearest the frame midpoint.

    Distance ties go to the earlier subtitle; each list is in track order.
    """
    starts = np.asarray(track.starts, dtype=np.float64)
    out = []
    for i in range(grid.T):
        mid = (i + 0.5) / grid.fps
        order = sorted(range(len(starts)), key=lambda j: (abs(starts[j] - mid), j))
        out.append(sorted(order[:k]))
    return out


def parse_subtitle_track(text: str, source: str = "<string>") -> SubtitleTrack:
    """Parse ``start<TAB>text`` lines terminated by ``END<TAB>video_end``."""
    starts, texts, video_end = [], [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if video_end is not None:
            raise ValidationError(f"{source}:{lineno}: content after END line")
        head, sep, rest = line.partition("\t")
        if not sep:
            raise ValidationError(f"{source}:{lineno}: expected a tab-separated line")
        try:
            if head == "END":
                video_end = float(rest)
                continue
            t = float(head)
        except ValueError:
            raise ValidationError(f"{source}:{lineno}: bad number {rest if head == 'END' else head!r}") from None
        if t < 0:
            raise ValidationError(f"{source}:{lineno}: negative start time {t}")
        if starts and t <= starts[-1]:
            raise ValidationError(f"{source}:{lineno}: start time {t} not after {starts[-1]}")
        starts.append(t)
        texts.append(rest)
    if video_end is None:
        raise ValidationError(f"{source}: missing END line")
    if starts and starts[-1] >= video_end:
        raise ValidationError(f"{source}: video end {video_end} not after last start {starts[-1]}")
    return SubtitleTrack(tuple(starts), tuple(texts), video_end)


def format_subtitle_track(track: SubtitleTrack) -> str:
    lines = [f"{s!r}\t{t}" for s, t in zip(track.starts, track.texts)]
    lines.append(f"END\t{track.video_end!r}")
    return "\n".join(lines) + "\n"


def read_subtitle_track(path) -> SubtitleTrack:
    path = Path(path)
    return parse_subtitle_track(path.read_text(encoding="utf-8"), str(path))
