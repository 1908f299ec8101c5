"""Instances, on-disk formats, and the planted-span synthetic generator."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import FeatureBundle
from .timeline import (FrameGrid, Span, SubtitleTrack, ValidationError, aligned_subtitles,
                       format_subtitle_track, proposal_spans, read_subtitle_track, span_mask)

FEATURE_MAGIC = b"TQGF"
FEATURE_VERSION = 1
N_ANSWERS = 5


# ---------------------------------------------------------------- feature files

def write_features(path, arr: np.ndarray) -> None:
    """Magic, uint32 version, uint32 ndim, uint64 dims, little-endian float64 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_features(path, expect_shape: Sequence[int | None] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read feature file ({exc.strerror})") from None
    if buf[:4] != FEATURE_MAGIC or len(buf) < 12:
        raise ValidationError(f"{path}: not a feature file (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise ValidationError(f"{path}: unsupported feature file version {version}")
    off = 12 + 8 * ndim
    if len(buf) < off:
        raise ValidationError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 12)
    n = int(np.prod(shape))
    payload = len(buf) - off
    if payload != 8 * n:
        raise ValidationError(f"{path}: header declares shape {tuple(shape)} ({n} floats) "
                              f"but payload holds {payload / 8:g}")
    if expect_shape is not None:
        if len(expect_shape) != ndim or any(e is not None and e != s for e, s in zip(expect_shape, shape)):
            raise ValidationError(f"{path}: shape {tuple(shape)} does not match expected {tuple(expect_shape)}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


# ---------------------------------------------------------------- instances

@dataclass(eq=False)
class Instance:
    id: str
    H: np.ndarray  # (5, L_h, D) hypothesis word features
    V: np.ndarray  # (T, N_o, D) region features
    sub_words: np.ndarray  # (N_sub, L_w, D) word features per subtitle
    track: SubtitleTrack
    gt_answer: int
    gt_span: Span | None = None
    grid: FrameGrid = field(default_factory=lambda: FrameGrid(16))
    question: str = ""
    answers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.H.shape[0] != N_ANSWERS:
            raise ValidationError(f"{self.id}: expected {N_ANSWERS} hypotheses, got {self.H.shape[0]}")
        if self.V.shape[0] != self.grid.T:
            raise ValidationError(f"{self.id}: video has {self.V.shape[0]} frames, grid has {self.grid.T}")
        if self.sub_words.shape[0] != len(self.track):
            raise ValidationError(f"{self.id}: {self.sub_words.shape[0]} subtitle feature rows "
                                  f"for {len(self.track)} subtitles")
        if not 0 <= self.gt_answer < N_ANSWERS:
            raise ValidationError(f"{self.id}: gt_index {self.gt_answer} out of range")
        if self.gt_span is not None and self.gt_span.ed >= self.grid.T:
            raise ValidationError(f"{self.id}: gt_span {self.gt_span.to_list()} outside grid of {self.grid.T}")
        self._cache: dict = {}

    @property
    def T(self) -> int:
        return self.grid.T

    def aligned_subtitle_features(self) -> np.ndarray:
        """(T, 2 * L_w, D): words of the two subtitles nearest each frame midpoint."""
        if "S" not in self._cache:
            N, Lw, D = self.sub_words.shape
            S = np.zeros((self.T, 2 * Lw, D))
            if N:
                for t, idx in enumerate(aligned_subtitles(self.track, self.grid, 2)):
                    S[t, :Lw * len(idx)] = self.sub_words[idx].reshape(-1, D)
            self._cache["S"] = S
        return self._cache["S"]

    def _proposal_arrays(self, scales: Sequence[int]):
        key = ("sp", tuple(scales))
        if key not in self._cache:
            N, Lw, D = self.sub_words.shape
            props = [p for s in scales for p in proposal_spans(self.track, self.grid, s)]
            L_sp = max(scales) * Lw
            Sp = np.zeros((len(props), L_sp, D))
            words = np.zeros((len(props), L_sp))
            masks = np.zeros((len(props), self.T))
            for j, p in enumerate(props):
                w = self.sub_words[list(p.subtitle_indices)].reshape(-1, D)
                Sp[j, :len(w)] = w
                words[j, :len(w)] = 1.0
                masks[j] = span_mask(p.span, self.T)
            self._cache[key] = (Sp, words, masks)
        return self._cache[key]

    def proposals(self, scales: Sequence[int] = (2,)) -> tuple[np.ndarray, np.ndarray]:
        """Subtitle-proposal word features (T_sp, L_sp, D) and frame masks (T_sp, T)."""
        Sp, _, masks = self._proposal_arrays(scales)
        return Sp, masks

    def bundle(self, scales: Sequence[int] | None = (2,)) -> FeatureBundle:
        S = self.aligned_subtitle_features()
        if not scales:
            return FeatureBundle(self.H, self.V, S)
        Sp, words, _ = self._proposal_arrays(scales)
        return FeatureBundle(self.H, self.V, S, Sp, words)


# ---------------------------------------------------------------- manifest datasets

def _load_entry(entry: dict, root: Path) -> Instance:
    iid = str(entry.get("id", "?"))
    try:
        T = int(entry["T"])
        paths = {k: root / entry[k] for k in ("video_feat", "sub_feat", "qa_feat", "qa_json", "subs_path")}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"instance {iid}: manifest entry missing or bad field {exc}") from None

    def fail(path, msg):
        raise ValidationError(f"instance {iid}: {path}: {msg}")

    try:
        qa = json.loads(paths["qa_json"].read_text(encoding="utf-8"))
    except OSError as exc:
        fail(paths["qa_json"], f"cannot read ({exc.strerror})")
    except json.JSONDecodeError as exc:
        fail(paths["qa_json"], f"malformed JSON ({exc.msg})")
    if not isinstance(qa, dict) or "gt_index" not in qa:
        fail(paths["qa_json"], "QA JSON must be an object with gt_index")
    answers = qa.get("answers", [""] * N_ANSWERS)
    if len(answers) != N_ANSWERS:
        fail(paths["qa_json"], f"expected {N_ANSWERS} answers, got {len(answers)}")
    try:
        V = read_features(paths["video_feat"], (T, None, None))
        H = read_features(paths["qa_feat"], (N_ANSWERS, None, None))
        subs = read_features(paths["sub_feat"], (None, None, None))
        track = read_subtitle_track(paths["subs_path"])
    except ValidationError as exc:
        raise ValidationError(f"instance {iid}: {exc}") from None
    except OSError as exc:
        fail(paths["subs_path"], f"cannot read ({exc.strerror})")
    gt_span = None
    if qa.get("gt_span") is not None:
        try:
            st, ed = (int(x) for x in qa["gt_span"])
            gt_span = Span(st, ed)
        except (TypeError, ValueError, ValidationError):
            fail(paths["qa_json"], f"bad gt_span {qa['gt_span']!r}")
    fps = float(entry.get("fps", 0.5))
    try:
        return Instance(iid, H, V, subs, track, int(qa["gt_index"]), gt_span, FrameGrid(T, fps),
                        str(qa.get("question", "")), tuple(map(str, answers)))
    except ValidationError as exc:
        raise ValidationError(f"instance {iid}: {paths['qa_json']}: {exc}") from None


def load_dataset(manifest) -> list[Instance]:
    """Load every instance listed in a manifest JSON file."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    try:
        entries = json.loads(manifest.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"{manifest}: cannot read manifest ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest}: malformed JSON ({exc.msg})") from None
    if not isinstance(entries, list):
        raise ValidationError(f"{manifest}: manifest must be a JSON list")
    if not entries:
        warnings.warn(f"{manifest}: manifest lists no instances", stacklevel=2)
    return [_load_entry(e, manifest.parent) for e in entries]


def save_dataset(instances: Iterable[Instance], out_dir) -> Path:
    """Write instances in manifest form; returns the manifest path."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in instances:
        stem = f"feats/{inst.id}"
        write_features(out / f"{stem}.video.bin", inst.V)
        write_features(out / f"{stem}.subs.bin", inst.sub_words)
        write_features(out / f"{stem}.qa.bin", inst.H)
        qa = {"question": inst.question, "answers": list(inst.answers) or [""] * N_ANSWERS,
              "gt_index": inst.gt_answer}
        if inst.gt_span is not None:
            qa["gt_span"] = inst.gt_span.to_list()
        (out / f"{stem}.qa.json").write_text(json.dumps(qa), encoding="utf-8")
        (out / f"{stem}.subs.txt").write_text(format_subtitle_track(inst.track), encoding="utf-8")
        entries.append({"id": inst.id, "video_feat": f"{stem}.video.bin", "sub_feat": f"{stem}.subs.bin",
                        "qa_feat": f"{stem}.qa.bin", "qa_json": f"{stem}.qa.json",
                        "subs_path": f"{stem}.subs.txt", "T": inst.T, "fps": inst.grid.fps})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    T: int = 16
    N_o: int = 4
    L_h: int = 6
    L_s: int = 6  # two aligned subtitles of L_s // 2 words each
    raw_dim: int = 32
    n_train: int = 800
    n_val: int = 200
    signal: float = 1.0
    noise: float = 0.5
    fps: float = 0.5
    min_span: int = 3
    max_span: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.L_s < 2 or self.L_s % 2:
            raise ValidationError(f"L_s must be an even number >= 2, got {self.L_s}")
        if not 1 <= self.min_span <= self.max_span <= self.T:
            raise ValidationError("need 1 <= min_span <= max_span <= T")
        if self.signal < 0 or self.noise < 0:
            raise ValidationError("signal and noise must be non-negative")


def _synth_track(rng: np.random.Generator, duration: float) -> SubtitleTrack:
    starts = [0.0]
    while True:
        nxt = starts[-1] + float(rng.uniform(2.0, 6.0))
        if nxt >= duration - 1.0:
            break
        starts.append(round(nxt, 3))
    return SubtitleTrack(tuple(starts), tuple(f"line {j}" for j in range(len(starts))), duration)


def synth_instance(rng: np.random.Generator, cfg: SynthConfig, iid: str) -> Instance:
    """One planted-span instance.

    Five per-instance answer signatures are drawn; hypothesis k carries
    signature k in its words, and only the correct signature is added to the
    region and subtitle features inside the planted span.
    """
    T, D = cfg.T, cfg.raw_dim
    Lw = cfg.L_s // 2
    grid = FrameGrid(T, cfg.fps)
    length = int(rng.integers(cfg.min_span, cfg.max_span + 1))
    st = int(rng.integers(0, T - length + 1))
    span = Span(st, st + length - 1)
    gt = int(rng.integers(N_ANSWERS))
    sig = rng.standard_normal((N_ANSWERS, D))

    H = cfg.noise * rng.standard_normal((N_ANSWERS, cfg.L_h, D))
    H += cfg.signal * sig[:, None, :]

    inside = span_mask(span, T)
    V = cfg.noise * rng.standard_normal((T, cfg.N_o, D))
    V += cfg.signal * inside[:, None, None] * sig[gt][None, None, :]

    track = _synth_track(rng, grid.duration)
    subs = cfg.noise * rng.standard_normal((len(track), Lw, D))
    t0, t1 = span.st / cfg.fps, (span.ed + 1) / cfg.fps
    for j in range(len(track)):
        a, b = track.start(j), track.start(j + 1)
        if a < t1 and b > t0:
            subs[j] += cfg.signal * sig[gt]
    return Instance(iid, H, V, subs, track, gt, span, grid,
                    question="which signature appears in the video?",
                    answers=tuple(f"signature {k}" for k in range(N_ANSWERS)))


def synth_dataset(cfg: SynthConfig, n: int | None = None, seed: int | None = None,
                  prefix: str = "syn") -> list[Instance]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = cfg.n_train if n is None else n
    return [synth_instance(rng, cfg, f"{prefix}{i:05d}") for i in range(n)]


def synth_splits(cfg: SynthConfig) -> tuple[list[Instance], list[Instance]]:
    """Train and validation sets from independent streams of the configured seed."""
    train_seed, val_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    train = synth_dataset(cfg, cfg.n_train, np.random.default_rng(train_seed).integers(2**63), "train")
    val = synth_dataset(cfg, cfg.n_val, np.random.default_rng(val_seed).integers(2**63), "val")
    return train, val


# ---------------------------------------------------------------- predictions

@dataclass
class PredictionRecord:
    id: str
    answer_scores: list[float]
    p_st: list[float]
    p_ed: list[float]
    scores: list[float]  # attention trace of the selected stream
    span: Span
    predicted_answer: int
    gt_answer: int | None = None
    gt_span: Span | None = None

    def validate(self):
        T = len(self.p_st)
        if len(self.p_ed) != T or len(self.scores) != T:
            raise ValidationError(f"{self.id}: trace length {len(self.scores)} / p_ed length "
                                  f"{len(self.p_ed)} differ from grid T={T}")
        if self.span.ed >= T:
            raise ValidationError(f"{self.id}: span {self.span.to_list()} outside grid of {T}")

    def to_dict(self) -> dict:
        d = {"id": self.id, "answer_scores": list(map(float, self.answer_scores)),
             "p_st": list(map(float, self.p_st)), "p_ed": list(map(float, self.p_ed)),
             "scores": list(map(float, self.scores)), "span": self.span.to_list(),
             "predicted_answer": self.predicted_answer}
        if self.gt_answer is not None:
            d["gt_answer"] = self.gt_answer
        if self.gt_span is not None:
            d["gt_span"] = self.gt_span.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(str(d["id"]), d["answer_scores"], d["p_st"], d["p_ed"], d["scores"], Span(*d["span"]),
                   int(d["predicted_answer"]), d.get("gt_answer"),
                   Span(*d["gt_span"]) if d.get("gt_span") is not None else None)


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    path = Path(path)
    lines = []
    for r in records:
        r.validate()
        lines.append(json.dumps(r.to_dict()))
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def read_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = PredictionRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad prediction record ({exc})") from None
        rec.validate()
        out.append(rec)
    return out
