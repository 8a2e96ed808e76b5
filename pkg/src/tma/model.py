"""Model assembly: the four captioner variants, encoders, the decoding
step shared by training and search, per-caption log-likelihood, and the
TMAW weight file format.

Context streams are always ordered (current, prev_video, prev_caption);
the previous-caption encoder shares the embedding matrix object with the
decoder, so the two observe the same storage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import layers
from .data import BOS, EOS, PAD, Vocabulary, RESERVED_TOKENS
from .layers import (
    AttentionParams,
    BlstmParams,
    DecoderState,
    GATES,
    InitStateParams,
    LstmParams,
    MultiInputLstmParams,
    OutputLayerParams,
)
from .seeding import named_rng
from .tensor import Tensor, add_n, log_clamped, matmul, pick, tensor

STREAM_ORDER = ("current", "prev_video", "prev_caption")

WEIGHT_MAGIC = b"TMAW"
WEIGHT_VERSION = 1


class ModelVariant(Enum):
    BASELINE = "baseline"
    PREV_CAPTION = "prev-caption"
    PREV_VIDEO = "prev-video"
    PREV_VIDEO_CAPTION = "prev-video-caption"

    @property
    def streams(self) -> tuple[str, ...]:
        extra = {
            ModelVariant.BASELINE: (),
            ModelVariant.PREV_CAPTION: ("prev_caption",),
            ModelVariant.PREV_VIDEO: ("prev_video",),
            ModelVariant.PREV_VIDEO_CAPTION: ("prev_video", "prev_caption"),
        }[self]
        return tuple(s for s in STREAM_ORDER if s == "current" or s in extra)

    @property
    def uses_prev_video(self) -> bool:
        return "prev_video" in self.streams

    @property
    def uses_prev_caption(self) -> bool:
        return "prev_caption" in self.streams


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    embed_dim: int = 301
    encoder_dim: int = 717
    decoder_dim: int = 484
    align_dim: int = 512
    readout_dim: int = 301
    tanh_on_cell_output: bool = False

    def annotation_dim(self, stream: str) -> int:
        # Video annotations concatenate the raw frame feature with both
        # BLSTM directions; caption annotations are the two directions only.
        if stream in ("current", "prev_video"):
            return self.feature_dim + 2 * self.encoder_dim
        if stream == "prev_caption":
            return 2 * self.encoder_dim
        raise ValueError(f"unknown stream {stream!r}")


@dataclass
class PreviousEventInput:
    """Previous-event conditioning: frames for video streams and/or token
    ids for the caption stream. Empty-event placeholders come from
    ``make_empty_event``."""

    frames: np.ndarray | None = None
    caption: list[int] | None = None


@dataclass
class EncodedEvent:
    source: str
    annotations: Tensor     # (positions, annotation_dim)


@dataclass
class ModelParams:
    variant: ModelVariant
    dims: ModelDims
    vocab_size: int
    embedding: Tensor
    encoders: dict[str, BlstmParams]
    attention: dict[str, AttentionParams]
    decoder: MultiInputLstmParams
    output: OutputLayerParams
    init: InitStateParams
    _names: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor map, sorted by name."""
        if not self._names:
            named: dict[str, Tensor] = {"embedding.E": self.embedding}
            for stream, enc in self.encoders.items():
                for tag, half in (("fwd", enc.fwd), ("bwd", enc.bwd)):
                    for g in GATES:
                        named[f"encoder.{stream}.{tag}.W_{g}"] = half.W[g]
                        named[f"encoder.{stream}.{tag}.U_{g}"] = half.U[g]
                        named[f"encoder.{stream}.{tag}.b_{g}"] = half.b[g]
            for stream, att in self.attention.items():
                named[f"attention.{stream}.w"] = att.w
                named[f"attention.{stream}.W_a"] = att.W_a
                named[f"attention.{stream}.U_a"] = att.U_a
                named[f"attention.{stream}.b"] = att.b
            for g in GATES:
                named[f"decoder.W_{g}"] = self.decoder.W[g]
                named[f"decoder.U_{g}"] = self.decoder.U[g]
                named[f"decoder.b_{g}"] = self.decoder.b[g]
                for stream in self.decoder.streams:
                    named[f"decoder.ctx_{g}.{stream}"] = self.decoder.ctx[stream][g]
            named["output.M_h"] = self.output.M_h
            named["output.M_e"] = self.output.M_e
            for stream in self.output.streams:
                named[f"output.M_ctx.{stream}"] = self.output.M_ctx[stream]
            named["output.b_m"] = self.output.b_m
            named["output.U_p"] = self.output.U_p
            named["output.b_p"] = self.output.b_p
            named["init.W_h"] = self.init.W_h
            named["init.b_h"] = self.init.b_h
            named["init.W_c"] = self.init.W_c
            named["init.b_c"] = self.init.b_c
            self._names = dict(sorted(named.items()))
        return self._names

    def copy_weights(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_weights(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ValueError(f"weight name mismatch: missing {missing}, extra {extra}")
        for k, t in params.items():
            arr = np.ascontiguousarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {k}: {arr.shape} != {t.data.shape}"
                )
            t.data = arr


# -----------------------------------------------------------------------------
# Construction
# -----------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, shape) -> Tensor:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return tensor(rng.uniform(-limit, limit, size=shape))

def _orthogonal(rng: np.random.Generator, n: int) -> Tensor:
    a = rng.normal(size=(n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix signs so the draw is well defined
    return tensor(q)

def _zeros(shape) -> Tensor:
    return tensor(np.zeros(shape))

def _lstm_params(rng, in_dim: int, hidden: int) -> LstmParams:
    W = {g: _glorot(rng, (hidden, in_dim)) for g in GATES}
    U = {g: _orthogonal(rng, hidden) for g in GATES}
    b = {g: _zeros((hidden,)) for g in GATES}
    b["f"] = tensor(np.ones(hidden))  # standard forget-gate bias
    return LstmParams(W=W, U=U, b=b)

def _attention_params(rng, dims: ModelDims, annot_dim: int) -> AttentionParams:
    return AttentionParams(
        w=_glorot(rng, (dims.align_dim,)),
        W_a=_glorot(rng, (dims.align_dim, dims.decoder_dim)),
        U_a=_glorot(rng, (dims.align_dim, annot_dim)),
        b=_zeros((dims.align_dim,)),
    )


def build_model(
    variant: ModelVariant, dims: ModelDims, vocab_size: int, seed: int
) -> ModelParams:
    """Deterministically initialized parameters for one variant.

    Glorot-uniform for non-recurrent matrices, orthogonal for recurrent
    ones, zero biases except the forget gates (1.0).
    """
    if vocab_size <= 0:
        raise ValueError("vocab_size must be positive")
    for name, value in (("feature_dim", dims.feature_dim),
                        ("embed_dim", dims.embed_dim),
                        ("encoder_dim", dims.encoder_dim),
                        ("decoder_dim", dims.decoder_dim),
                        ("align_dim", dims.align_dim),
                        ("readout_dim", dims.readout_dim)):
        if value <= 0:
            raise ValueError(f"{name} must be positive")
    rng = named_rng(seed, "init")
    streams = variant.streams

    embedding = _glorot(rng, (vocab_size, dims.embed_dim))
    encoders: dict[str, BlstmParams] = {}
    attention: dict[str, AttentionParams] = {}
    for stream in streams:
        in_dim = dims.embed_dim if stream == "prev_caption" else dims.feature_dim
        encoders[stream] = BlstmParams(
            fwd=_lstm_params(rng, in_dim, dims.encoder_dim),
            bwd=_lstm_params(rng, in_dim, dims.encoder_dim),
        )
        attention[stream] = _attention_params(rng, dims, dims.annotation_dim(stream))

    decoder = MultiInputLstmParams(
        streams=streams,
        W={g: _glorot(rng, (dims.decoder_dim, dims.embed_dim)) for g in GATES},
        U={g: _orthogonal(rng, dims.decoder_dim) for g in GATES},
        ctx={
            s: {g: _glorot(rng, (dims.decoder_dim, dims.annotation_dim(s))) for g in GATES}
            for s in streams
        },
        b={g: (tensor(np.ones(dims.decoder_dim)) if g == "f" else _zeros((dims.decoder_dim,)))
           for g in GATES},
    )
    output = OutputLayerParams(
        streams=streams,
        M_h=_glorot(rng, (dims.readout_dim, dims.decoder_dim)),
        M_e=_glorot(rng, (dims.readout_dim, dims.embed_dim)),
        M_ctx={s: _glorot(rng, (dims.readout_dim, dims.annotation_dim(s))) for s in streams},
        b_m=_zeros((dims.readout_dim,)),
        U_p=_glorot(rng, (vocab_size, dims.readout_dim)),
        b_p=_zeros((vocab_size,)),
    )
    init = InitStateParams(
        W_h=_glorot(rng, (dims.decoder_dim, dims.annotation_dim("current"))),
        b_h=_zeros((dims.decoder_dim,)),
        W_c=_glorot(rng, (dims.decoder_dim, dims.annotation_dim("current"))),
        b_c=_zeros((dims.decoder_dim,)),
    )
    return ModelParams(
        variant=variant, dims=dims, vocab_size=vocab_size, embedding=embedding,
        encoders=encoders, attention=attention, decoder=decoder, output=output,
        init=init,
    )


# -----------------------------------------------------------------------------
# Encoding
# -----------------------------------------------------------------------------


def make_empty_event(variant: ModelVariant, feature_dim: int) -> PreviousEventInput:
    """Artificial empty previous event: a single all-zero frame for video
    streams, the padding token for caption streams."""
    return PreviousEventInput(
        frames=np.zeros((1, feature_dim)) if variant.uses_prev_video else None,
        caption=[PAD] if variant.uses_prev_caption else None,
    )


def encode_current(frames: np.ndarray, p: ModelParams) -> EncodedEvent:
    """Annotations for the current event: frame features concatenated with
    both BLSTM directions, one row per frame."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("current event needs a non-empty (J, D) frame matrix")
    if frames.shape[1] != p.dims.feature_dim:
        raise ValueError(
            f"feature dim {frames.shape[1]} != model feature_dim {p.dims.feature_dim}"
        )
    enc = p.encoders["current"]
    x = tensor(frames)
    states = layers.blstm_encode(x, enc.fwd, enc.bwd, p.dims.tanh_on_cell_output)
    from .tensor import hconcat

    return EncodedEvent(source="current", annotations=hconcat([x, states]))


def encode_previous(prev: PreviousEventInput, p: ModelParams) -> list[EncodedEvent]:
    """Encoded previous-event streams in the fixed stream order (empty list
    for the baseline variant)."""
    out: list[EncodedEvent] = []
    for stream in p.variant.streams:
        if stream == "current":
            continue
        enc = p.encoders[stream]
        if stream == "prev_video":
            if prev is None or prev.frames is None:
                raise ValueError("variant expects previous-event frames")
            frames = np.asarray(prev.frames, dtype=np.float64)
            if frames.ndim != 2 or frames.shape[0] == 0:
                raise ValueError("previous event needs a non-empty frame matrix")
            if frames.shape[1] != p.dims.feature_dim:
                raise ValueError(
                    f"feature dim {frames.shape[1]} != model feature_dim {p.dims.feature_dim}"
                )
            x = tensor(frames)
            states = layers.blstm_encode(x, enc.fwd, enc.bwd, p.dims.tanh_on_cell_output)
            from .tensor import hconcat

            out.append(EncodedEvent(source=stream, annotations=hconcat([x, states])))
        else:
            if prev is None or prev.caption is None:
                raise ValueError("variant expects a previous-event caption")
            toks = list(prev.caption) if prev.caption else [PAD]
            embs = layers.embed_sequence(p.embedding, toks)
            states = layers.blstm_encode(embs, enc.fwd, enc.bwd, p.dims.tanh_on_cell_output)
            out.append(EncodedEvent(source=stream, annotations=states))
    if prev is not None:
        if prev.frames is not None and not p.variant.uses_prev_video:
            raise ValueError(f"variant {p.variant.value} takes no previous-video stream")
        if prev.caption is not None and not p.variant.uses_prev_caption:
            raise ValueError(f"variant {p.variant.value} takes no previous-caption stream")
    return out


# -----------------------------------------------------------------------------
# Decoding step shared by teacher forcing and beam search
# -----------------------------------------------------------------------------


@dataclass
class StepResult:
    state: DecoderState
    probs: Tensor                    # (vocab,) word distribution
    alphas: dict[str, Tensor]        # attention weights per stream


class DecoderRun:
    """Per-sample decoding context.

    Encodes the current and previous events once, precomputes the
    attention projections, and exposes ``step`` to advance the decoder by
    one token. ``dropout`` (training only) supplies mask functions for
    annotations entering attention and for output-layer inputs.
    """

    def __init__(self, p: ModelParams, current_frames, prev: PreviousEventInput | None,
                 dropout=None):
        self.p = p
        self.dropout = dropout
        enc_current = encode_current(current_frames, p)
        encoded = [enc_current] + encode_previous(prev, p)
        self.initial_state = layers.init_decoder_state(enc_current.annotations, p.init)
        self._streams = []
        for enc in encoded:
            ann = enc.annotations
            if dropout is not None:
                ann = dropout.annotations(ann)
            proj = layers.attention_proj(ann, p.attention[enc.source])
            self._streams.append((enc.source, ann, proj))
        # gate stacks shared by every step of this sample
        self._W_all = layers.fuse_gate_stack(p.decoder.W)
        self._U_all = layers.fuse_gate_stack(p.decoder.U)
        self._b_all = layers.fuse_gate_stack(p.decoder.b)
        self._ctx_all = {s: layers.fuse_gate_stack(p.decoder.ctx[s])
                         for s in p.decoder.streams}

    def step(self, prev_token: int, state: DecoderState) -> StepResult:
        p = self.p
        emb = layers.embed(p.embedding, prev_token)
        zs, alphas = [], {}
        for stream, ann, proj in self._streams:
            att = layers.attend(ann, state.h, p.attention[stream], proj=proj)
            zs.append(att.z)
            alphas[stream] = att.alpha
        terms = [matmul(self._W_all, emb), matmul(self._U_all, state.h)]
        terms += [matmul(self._ctx_all[s], z)
                  for s, z in zip(p.decoder.streams, zs)]
        terms.append(self._b_all)
        h, c = layers.fused_cell_update(
            add_n(terms), state.c, p.decoder.hidden_size,
            p.dims.tanh_on_cell_output,
        )
        new_state = DecoderState(h=h, c=c)
        if self.dropout is not None:
            drop = self.dropout.output_input
            out_state = DecoderState(h=drop(new_state.h), c=new_state.c)
            zs_out = [drop(z) for z in zs]
            emb_out = drop(emb)
        else:
            out_state, zs_out, emb_out = new_state, zs, emb
        probs = layers.output_distribution(out_state, zs_out, emb_out, p.output)
        return StepResult(state=new_state, probs=probs, alphas=alphas)


@dataclass
class ForwardResult:
    logprob: Tensor            # scalar: sum over steps of log p_t[target_t]
    per_step: list[Tensor]     # per-step word distributions


def forward_pass(
    current_frames,
    prev: PreviousEventInput | None,
    target: list[int],
    p: ModelParams,
    dropout=None,
) -> ForwardResult:
    """Teacher-forced pass over a target caption (graph-building form).

    Step t consumes target[t-1] (BOS at t=1) and scores target[t]; the
    target must be non-empty and end with EOS. Probabilities at the target
    index are floored at 1e-12 inside the log, so the result is finite.
    """
    if not target:
        raise ValueError("target caption is empty")
    if target[-1] != EOS:
        raise ValueError("target caption must end with EOS")
    for tok in target:
        if not 0 <= tok < p.vocab_size:
            raise IndexError(f"target token {tok} out of range for vocab {p.vocab_size}")
    run = DecoderRun(p, current_frames, prev, dropout=dropout)
    state = run.initial_state
    inputs = [BOS] + list(target[:-1])
    per_step, logps = [], []
    for tok_in, tok_out in zip(inputs, target):
        res = run.step(tok_in, state)
        state = res.state
        per_step.append(res.probs)
        logps.append(log_clamped(pick(res.probs, tok_out)))
    return ForwardResult(logprob=add_n(logps), per_step=per_step)


def forward_logprob(
    current_frames,
    prev: PreviousEventInput | None,
    target: list[int],
    p: ModelParams,
    mode: str = "eval",
    reg=None,
) -> tuple[float, list[np.ndarray]]:
    """Total log-probability of a target caption plus the per-step
    distributions. ``eval`` mode is deterministic; ``train`` mode applies
    the regularization context ``reg`` (weight noise and dropout) when one
    is supplied."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p_eff, dropout = p, None
    if mode == "train" and reg is not None:
        p_eff = reg.noisy_params(p)
        dropout = reg.dropout
    res = forward_pass(current_frames, prev, target, p_eff, dropout=dropout)
    return float(res.logprob.data), [ps.data.copy() for ps in res.per_step]


# -----------------------------------------------------------------------------
# Weight file (TMAW) + JSON sidecar
# -----------------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_weights(path, p: ModelParams, vocab: Vocabulary | None = None) -> None:
    """Write weights as TMAW (entries sorted by name, float64 LE payloads)
    plus a JSON sidecar holding variant, dims and the vocabulary."""
    path = Path(path)
    params = p.parameters()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sH", WEIGHT_MAGIC, WEIGHT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())
    meta = {
        "variant": p.variant.value,
        "dims": {
            "feature_dim": p.dims.feature_dim,
            "embed_dim": p.dims.embed_dim,
            "encoder_dim": p.dims.encoder_dim,
            "decoder_dim": p.dims.decoder_dim,
            "align_dim": p.dims.align_dim,
            "readout_dim": p.dims.readout_dim,
            "tanh_on_cell_output": p.dims.tanh_on_cell_output,
        },
        "vocab_size": p.vocab_size,
        "vocab": vocab.tokens if vocab is not None else None,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1) + "\n")


class WeightFileError(ValueError):
    """Malformed TMAW file or sidecar."""


def load_weights(path) -> tuple[ModelParams, Vocabulary | None]:
    """Rebuild a model from a TMAW file and its JSON sidecar."""
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"cannot read sidecar for {path}: {exc}") from exc
    try:
        variant = ModelVariant(meta["variant"])
        dims = ModelDims(**meta["dims"])
        vocab_size = int(meta["vocab_size"])
        vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightFileError(f"bad sidecar for {path}: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        head = f.read(6)
        if len(head) < 6:
            raise WeightFileError(f"{path}: truncated header")
        magic, version = struct.unpack("<4sH", head)
        if magic != WEIGHT_MAGIC:
            raise WeightFileError(f"{path}: bad magic {magic!r}")
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            payload = f.read(8 * n)
            if len(payload) != 8 * n:
                raise WeightFileError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise WeightFileError(f"{path}: trailing bytes after last entry")

    model = build_model(variant, dims, vocab_size, seed=0)
    try:
        model.load_weights(arrays)
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    return model, vocab
