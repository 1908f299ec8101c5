"""Two-stream dual-level attention network with a temporal attention head.

All streams share one parameter store. The upper branch scores the five
question-answer hypotheses against video and subtitle context; the
subtitle-proposal branch runs the same attention stack with each proposal
as a single-token query.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Value
from .timeline import Span, ValidationError

CHECKPOINT_FORMAT = "tqground-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 128
    text_dim: int = 300
    video_dim: int = 300
    softmax_similarity: bool = True
    max_span_frames: int = 0  # 0 means unbounded
    temporal_encoder: bool = True
    frame_similarity: str = "mean"  # softmax | mean | raw
    seed: int = 0


@dataclass
class FeatureBundle:
    """Per-instance feature tensors, raw (pre-encoding) or encoded.

    H: (5, L_h, D) hypotheses, V: (T, N_o, D) regions, S: (T, L_s, D)
    aligned subtitle words, Sp: (T_sp, L_sp, D) subtitle-proposal words with
    ``Sp_mask`` (T_sp, L_sp) marking real (non-padding) words.
    """

    H: np.ndarray
    V: np.ndarray
    S: np.ndarray
    Sp: np.ndarray | None = None
    Sp_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.Sp is None:
            self.Sp = np.zeros((0, 1, self.H.shape[-1]))
        if self.Sp_mask is None:
            self.Sp_mask = np.ones(self.Sp.shape[:2])

    @property
    def T(self) -> int:
        return self.V.shape[0]

    @property
    def shape_key(self) -> tuple:
        return (self.H.shape, self.V.shape, self.S.shape)


@dataclass
class FeatureBatch:
    """Instances with identical H/V/S shapes stacked on a leading axis.

    Proposals are padded to the largest count and word length in the batch;
    ``Sp_valid`` (n, P) marks real proposals.
    """

    H: np.ndarray
    V: np.ndarray
    S: np.ndarray
    Sp: np.ndarray
    Sp_mask: np.ndarray
    Sp_valid: np.ndarray

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def T(self) -> int:
        return self.V.shape[1]

    @classmethod
    def stack(cls, bundles: list[FeatureBundle]) -> "FeatureBatch":
        keys = {b.shape_key for b in bundles}
        if len(keys) != 1:
            raise tc.ShapeError(f"FeatureBatch: instances differ in shape {sorted(keys)}")
        n = len(bundles)
        P = max(b.Sp.shape[0] for b in bundles)
        L = max(b.Sp.shape[1] for b in bundles)
        D = bundles[0].H.shape[-1]
        Sp = np.zeros((n, P, L, D))
        mask = np.zeros((n, P, L))
        valid = np.zeros((n, P))
        for i, b in enumerate(bundles):
            p, l_ = b.Sp.shape[:2]
            Sp[i, :p, :l_] = b.Sp
            mask[i, :p, :l_] = b.Sp_mask
            valid[i, :p] = 1.0
        return cls(np.stack([b.H for b in bundles]), np.stack([b.V for b in bundles]),
                   np.stack([b.S for b in bundles]), Sp, mask, valid)


@dataclass
class Prediction:
    answer_scores: np.ndarray  # (5,)
    p_st: np.ndarray  # (T,) from the selected stream
    p_ed: np.ndarray
    attention: np.ndarray  # (5, T)
    stream: int
    decoded_span: Span

    @property
    def answer(self) -> int:
        return int(np.argmax(self.answer_scores))


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = 1.0 / 10000 ** (2 * (np.arange(d) // 2) / d)
    ang = pos * rate[None, :]
    return np.where(np.arange(d) % 2 == 0, np.sin(ang), np.cos(ang))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    return {
        "proj_v.W": (cfg.video_dim, d), "proj_v.b": (d,),
        "proj_t.W": (cfg.text_dim, d), "proj_t.b": (d,),
        "conv_v.w": (3, d), "conv_v.b": (d,),
        "conv_t.w": (3, d), "conv_t.b": (d,),
        "fuse1.W": (4 * d, d), "fuse1.b": (d,),
        "fuse2.W": (4 * d, d), "fuse2.b": (d,),
        "tatt.w": (d, 1), "tatt.b": (1,),
        "span.W": (d, 2), "span.b": (2,),
        "answer.w": (d, 1), "answer.b": (1,),
    }


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    layer = name.rsplit(".", 1)[0]
    if layer.startswith("conv"):
        return 3
    weight = layer + ".W" if layer + ".W" in shapes else layer + ".w"
    return shapes[weight][0]


class GroundingModel:
    def __init__(self, cfg: ModelConfig | None = None, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg or ModelConfig()
        shapes = param_shapes(self.cfg)
        if params is None:
            rng = np.random.default_rng(self.cfg.seed)
            params = {}
            for name, shape in shapes.items():
                bound = 1.0 / np.sqrt(_fan_in(name, shapes))
                params[name] = rng.uniform(-bound, bound, size=shape)
        for name, shape in shapes.items():
            if name not in params:
                raise ValidationError(f"missing parameter {name}")
            if tuple(np.shape(params[name])) != shape:
                raise ValidationError(f"parameter {name}: shape {np.shape(params[name])}, expected {shape}")
        extra = set(params) - set(shapes)
        if extra:
            raise ValidationError(f"unknown parameters {sorted(extra)}")
        self.params = {k: tc.parameter(params[k], k) for k in shapes}
        self.fs_calls = 0
        # frame-indexed streams are encoded along time (-3) or along regions/words (-2)
        self.time_axis = -3 if self.cfg.temporal_encoder else -2
        self._pe: dict[int, np.ndarray] = {}

    def __getitem__(self, name: str) -> Value:
        return self.params[name]

    def parameters(self) -> list[Value]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------ encoder

    def _pos(self, length: int) -> np.ndarray:
        if length not in self._pe:
            self._pe[length] = positional_encoding(length, self.cfg.d)
        return self._pe[length]

    def encode_stream(self, x, kind: str, axis: int = -2) -> Value:
        """Linear+relu to d, then positional encoding and a residual depthwise
        conv (kernel 3, zero padding) along the sequence ``axis``."""
        x = x if isinstance(x, Value) else tc.constant(x)
        W, b = self[f"proj_{kind}.W"], self[f"proj_{kind}.b"]
        if x.shape[-1] != W.shape[0]:
            raise ValidationError(f"encode: feature dim {x.shape[-1]} != projection input {W.shape[0]}")
        z = tc.relu(tc.add_bias(x @ W, b))
        ax = axis % z.ndim
        L, d = z.shape[ax], z.shape[-1]
        pe = self._pos(L).reshape((L,) + (1,) * (z.ndim - ax - 2) + (d,))
        z = z + tc.constant(np.broadcast_to(pe, z.shape))
        w, cb = self[f"conv_{kind}.w"], self[f"conv_{kind}.b"]
        zp = tc.pad(z, ax, 1, 1)
        ones = (1,) * (z.ndim - 1)
        conv = None
        for k in range(3):
            sl = [slice(None)] * z.ndim
            sl[ax] = slice(k, k + L)
            tap = tc.broadcast_to(tc.reshape(w[k], ones + (d,)), z.shape)
            term = zp[tuple(sl)] * tap
            conv = term if conv is None else conv + term
        return z + tc.add_bias(conv, cb)

    def encode(self, batch: FeatureBatch, with_proposals: bool = True) -> dict[str, Value]:
        out = {
            "H": self.encode_stream(batch.H, "t"),
            "V": self.encode_stream(batch.V, "v", self.time_axis),
            "S": self.encode_stream(batch.S, "t", self.time_axis),
        }
        if with_proposals and batch.Sp.shape[1]:
            out["Sp"] = self.encode_stream(batch.Sp, "t")
        return out

    # ------------------------------------------------------------ attention

    def _fuse(self, a: Value, b: Value, layer: str) -> Value:
        cat = tc.concat([a, b, a * b, a + b])
        return tc.add_bias(cat @ self[f"{layer}.W"], self[f"{layer}.b"])

    def word_level_attention(self, query: Value, context: Value) -> Value:
        """Queries (n, B, L, d) against per-frame context (n, T, N, d) -> (n, B, T, d)."""
        n, B, L, d = query.shape
        T, N = context.shape[1], context.shape[2]
        if context.shape[0] != n or context.shape[-1] != d:
            raise tc.ShapeError(f"word_level_attention: shape mismatch {query.shape} vs {context.shape}")
        q = tc.broadcast_to(tc.reshape(query, (n, B, 1, L, d)), (n, B, T, L, d))
        c = tc.broadcast_to(tc.reshape(context, (n, 1, T, N, d)), (n, B, T, N, d))
        sim = q @ tc.transpose(c)  # (n, B, T, L, N)
        sim_t = tc.transpose(sim)
        if self.cfg.softmax_similarity:
            sim, sim_t = tc.softmax(sim, -1), tc.softmax(sim_t, -1)
        v_att = tc.max(sim @ c, -2)
        h_att = tc.max(sim_t @ q, -2)
        return self._fuse(v_att, h_att, "fuse1")

    def frame_level_attention(self, S_f: Value, V_f: Value) -> Value:
        """Subtitle and video frame features (..., T, d) -> fused (..., T, d)."""
        if S_f.shape != V_f.shape:
            raise tc.ShapeError(f"frame_level_attention: shape mismatch {S_f.shape} vs {V_f.shape}")
        sim = S_f @ tc.transpose(V_f)
        mode = self.cfg.frame_similarity
        if mode == "mean":
            sim = tc.scale(sim, 1.0 / (sim.shape[-1] * S_f.shape[-1]))
        sim_t = tc.transpose(sim)
        if mode == "softmax":
            sim, sim_t = tc.softmax(sim, -1), tc.softmax(sim_t, -1)
        v_fatt = sim_t @ V_f
        s_fatt = sim @ S_f
        return self._fuse(v_fatt, s_fatt, "fuse2")

    def temporal_attention(self, F: Value) -> tuple[Value, Value]:
        """Sigmoid scores (..., T) and the gated features ``A * F``."""
        lead, d = F.shape[:-1], F.shape[-1]
        logits = tc.add_bias(F @ self["tatt.w"], self["tatt.b"])
        A = tc.sigmoid(tc.reshape(logits, lead))
        gate = tc.broadcast_to(tc.reshape(A, lead + (1,)), F.shape)
        return A, F * gate

    def predict_answer(self, Fp: Value) -> Value:
        """Max-pool over time then a shared linear head: (n, 5, T, d) -> (n, 5)."""
        pooled = tc.max(Fp, -2)
        scores = tc.add_bias(pooled @ self["answer.w"], self["answer.b"])
        return tc.reshape(scores, scores.shape[:-1])

    def predict_span(self, Fp: Value) -> Value:
        """Start/end distributions over time, shape (..., T, 2)."""
        logits = tc.add_bias(Fp @ self["span.W"], self["span.b"])
        return tc.softmax(logits, -2)

    # ------------------------------------------------------------ branches

    def upper_branch(self, enc: dict[str, Value]) -> dict[str, Value]:
        H = enc["H"]
        V_f = self.word_level_attention(H, enc["V"])
        S_f = self.word_level_attention(H, enc["S"])
        F = self.frame_level_attention(S_f, V_f)
        A, Fp = self.temporal_attention(F)
        return {"scores": self.predict_answer(Fp), "span_probs": self.predict_span(Fp), "A": A}

    def fs_branch(self, enc: dict[str, Value], batch: FeatureBatch) -> Value | None:
        """Attention traces (n, P, T) for the subtitle proposals, or None if there are none."""
        if "Sp" not in enc:
            return None
        self.fs_calls += 1
        V, S, Sp = enc["V"], enc["S"], enc["Sp"]
        n, T, d = V.shape[0], V.shape[1], V.shape[-1]
        P = Sp.shape[1]
        # mean rather than sum pooling: the product terms of both fusion layers
        # would otherwise square the region/word count and saturate the sigmoid
        v = tc.reshape(tc.mean(V, 2), (n, T, 1, d))
        s = tc.reshape(tc.mean(S, 2), (n, T, 1, d))
        count = np.maximum(batch.Sp_mask.sum(axis=2, keepdims=True), 1.0)
        words = tc.constant(np.broadcast_to((batch.Sp_mask / count)[..., None], Sp.shape))
        sp = tc.reshape(tc.sum(Sp * words, 2), (n, P, 1, d))
        V_f = self.word_level_attention(sp, v)
        S_f = self.word_level_attention(sp, s)
        A, _ = self.temporal_attention(self.frame_level_attention(S_f, V_f))
        return A

    def forward(self, batch: FeatureBatch | FeatureBundle, with_self: bool = False) -> dict[str, Value]:
        """Scores (n, 5), span_probs (n, 5, T, 2), A (n, 5, T) and, with
        ``with_self``, A_self (n, P, T) (None when no proposals exist)."""
        if isinstance(batch, FeatureBundle):
            batch = FeatureBatch.stack([batch])
        enc = self.encode(batch, with_proposals=with_self)
        out = self.upper_branch(enc)
        if with_self:
            out["A_self"] = self.fs_branch(enc, batch)
        return out

    def fs_branch_forward(self, raw: FeatureBundle) -> list[np.ndarray]:
        """One attention trace per subtitle proposal of a single instance."""
        with tc.no_grad():
            A = self.forward(raw, with_self=True)["A_self"]
        return [] if A is None else list(A.data[0])

    def predict(self, raw: FeatureBundle | FeatureBatch, stream: int | None = None) -> list[Prediction]:
        """Inference; span distributions come from ``stream`` (default: predicted answer)."""
        with tc.no_grad():
            out = self.forward(raw)
        preds = []
        for i in range(out["scores"].shape[0]):
            scores = out["scores"].data[i]
            k = int(np.argmax(scores)) if stream is None else stream
            probs = out["span_probs"].data[i, k]
            span = decode_span(probs[:, 0], probs[:, 1], self.cfg.max_span_frames or None)
            preds.append(Prediction(scores.copy(), probs[:, 0].copy(), probs[:, 1].copy(),
                                    out["A"].data[i].copy(), k, span))
        return preds

    # ------------------------------------------------------------ checkpoint

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                       for k, v in self.params.items()},
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc))
        tmp.replace(path)

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> "GroundingModel":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: cannot read checkpoint ({exc})") from None
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        cfg = ModelConfig(**doc["config"])
        if expect is not None:
            for key in ("d", "text_dim", "video_dim"):
                if getattr(expect, key) != getattr(cfg, key):
                    raise ValidationError(f"{path}: checkpoint {key}={getattr(cfg, key)} "
                                          f"but config has {getattr(expect, key)}")
        params = {}
        for name, entry in doc["params"].items():
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValidationError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
            params[name] = data.reshape(shape)
        try:
            return cls(cfg, params)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


def decode_span(p_st, p_ed, max_span_frames: int | None = None) -> Span:
    """Best ``(i, j)`` with ``i <= j`` (and ``j - i < max_span_frames``) by ``p_st[i] * p_ed[j]``."""
    p_st, p_ed = np.asarray(p_st), np.asarray(p_ed)
    T = p_st.size
    joint = np.triu(np.outer(p_st, p_ed))
    valid = np.triu(np.ones((T, T), dtype=bool))
    if max_span_frames:
        valid &= ~np.triu(valid, max_span_frames)
    joint = np.where(valid, joint, -1.0)
    i, j = divmod(int(np.argmax(joint)), T)
    return Span(i, j)
