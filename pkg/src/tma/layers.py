"""Neural building blocks: embedding, LSTM, BLSTM, soft attention, the
multi-input decoder cell, decoder-state init, and the skip-connection
output distribution.

Conventions: weight matrices act from the left (W is (out, in), W @ x),
gate dictionaries are keyed by "i", "f", "o", "c". The cell output is
h = o * c, matching the reference formulation; pass
``tanh_on_cell_output=True`` for the conventional h = o * tanh(c).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add,
    add_n,
    hconcat,
    matmul,
    mean_rows,
    mul,
    reverse_rows,
    row,
    rows,
    segment,
    sigmoid,
    softmax,
    stack_rows,
    tanh,
    tensor,
    transpose,
    vconcat,
)

GATES = ("i", "f", "o", "c")


# -----------------------------------------------------------------------------
# Parameter containers
# -----------------------------------------------------------------------------


@dataclass
class LstmParams:
    """One LSTM direction: per-gate input weights W (H, in), recurrent
    weights U (H, H) and biases b (H,)."""

    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    @property
    def hidden_size(self) -> int:
        return self.U["i"].data.shape[0]

    @property
    def input_size(self) -> int:
        return self.W["i"].data.shape[1]


@dataclass
class BlstmParams:
    fwd: LstmParams
    bwd: LstmParams


@dataclass
class AttentionParams:
    """Single-layer perceptron aligner: score_j = w . tanh(W_a h + U_a v_j + b)."""

    w: Tensor      # (align,)
    W_a: Tensor    # (align, decoder_dim)
    U_a: Tensor    # (align, annotation_dim)
    b: Tensor      # (align,)


@dataclass
class MultiInputLstmParams:
    """Decoder cell params. ``ctx[stream][gate]`` holds the context matrix
    applied to that stream's attended vector; one matrix per configured
    stream in every gate."""

    streams: tuple[str, ...]
    W: dict[str, Tensor]                    # (H, embed_dim)
    U: dict[str, Tensor]                    # (H, H)
    ctx: dict[str, dict[str, Tensor]]       # stream -> gate -> (H, annot_dim)
    b: dict[str, Tensor]                    # (H,)

    @property
    def hidden_size(self) -> int:
        return self.U["i"].data.shape[0]


@dataclass
class OutputLayerParams:
    """Skip-connection readout: softmax(U_p tanh(M_h h + sum_s M_ctx[s] z_s
    + M_e emb + b_m) + b_p)."""

    streams: tuple[str, ...]
    M_h: Tensor                   # (readout, decoder_dim)
    M_e: Tensor                   # (readout, embed_dim)
    M_ctx: dict[str, Tensor]      # stream -> (readout, annot_dim)
    b_m: Tensor                   # (readout,)
    U_p: Tensor                   # (vocab, readout)
    b_p: Tensor                   # (vocab,)


@dataclass
class InitStateParams:
    """tanh-of-mean initializer, separate projections for h0 and c0."""

    W_h: Tensor    # (decoder_dim, annot_dim)
    b_h: Tensor    # (decoder_dim,)
    W_c: Tensor    # (decoder_dim, annot_dim)
    b_c: Tensor    # (decoder_dim,)


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor


@dataclass
class AttentionResult:
    z: Tensor        # (annot_dim,) convex combination of the annotations
    alpha: Tensor    # (J,) attention weights, a probability vector


# -----------------------------------------------------------------------------
# Embedding
# -----------------------------------------------------------------------------


def embed(E: Tensor, token: int) -> Tensor:
    """Row ``token`` of the embedding matrix."""
    vocab = E.data.shape[0]
    if not 0 <= token < vocab:
        raise IndexError(f"token {token} out of range for vocab of {vocab}")
    return row(E, token)


def embed_sequence(E: Tensor, tokens) -> Tensor:
    """Rows of E for a token sequence -> (T, embed_dim)."""
    idx = np.asarray(tokens, dtype=np.intp)
    vocab = E.data.shape[0]
    if idx.size == 0:
        raise ValueError("cannot embed an empty token sequence")
    if idx.min() < 0 or idx.max() >= vocab:
        raise IndexError(f"token out of range for vocab of {vocab}")
    return rows(E, idx)


# -----------------------------------------------------------------------------
# LSTM
# -----------------------------------------------------------------------------


def _lstm_core(pre, prev_h: Tensor, prev_c: Tensor, tanh_on_cell_output: bool):
    """Shared gate arithmetic. ``pre`` maps gate -> preactivation (H,)."""
    i = sigmoid(pre["i"])
    f = sigmoid(pre["f"])
    o = sigmoid(pre["o"])
    c_tilde = tanh(pre["c"])
    c = add(mul(f, prev_c), mul(i, c_tilde))
    h = mul(o, tanh(c)) if tanh_on_cell_output else mul(o, c)
    return h, c


def fuse_gate_stack(mats: dict[str, Tensor]) -> Tensor:
    """Stack the four gate matrices (or biases) along axis 0 in gate order,
    so all gate preactivations come from one product."""
    return vconcat([mats[g] for g in GATES])


def fused_cell_update(
    pre_all: Tensor, prev_c: Tensor, hidden: int, tanh_on_cell_output: bool
) -> tuple[Tensor, Tensor]:
    """Cell update from stacked gate preactivations (4H,); returns (h, c)."""
    i = sigmoid(segment(pre_all, 0, hidden))
    f = sigmoid(segment(pre_all, hidden, 2 * hidden))
    o = sigmoid(segment(pre_all, 2 * hidden, 3 * hidden))
    c_tilde = tanh(segment(pre_all, 3 * hidden, 4 * hidden))
    c = add(mul(f, prev_c), mul(i, c_tilde))
    h = mul(o, tanh(c)) if tanh_on_cell_output else mul(o, c)
    return h, c


def lstm_step(
    x: Tensor,
    prev_h: Tensor,
    prev_c: Tensor,
    p: LstmParams,
    tanh_on_cell_output: bool = False,
) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns (h, c)."""
    if x.data.shape[0] != p.input_size:
        raise ValueError(
            f"input size {x.data.shape[0]} != expected {p.input_size}"
        )
    if prev_h.data.shape[0] != p.hidden_size or prev_c.data.shape[0] != p.hidden_size:
        raise ValueError("state size does not match hidden size")
    pre = {g: add_n([matmul(p.W[g], x), matmul(p.U[g], prev_h), p.b[g]]) for g in GATES}
    return _lstm_core(pre, prev_h, prev_c, tanh_on_cell_output)


def lstm_forward(
    xs: Tensor, p: LstmParams, tanh_on_cell_output: bool = False
) -> Tensor:
    """Run an LSTM over xs (J, in) from zero states; returns hiddens (J, H).

    All four gates are stacked into single products: the input projection
    for the whole sequence is one matmul, each step needs one recurrent
    matvec. Matches the per-step math up to float rounding.
    """
    J = xs.data.shape[0]
    H = p.hidden_size
    if xs.data.shape[1] != p.input_size:
        raise ValueError(
            f"input size {xs.data.shape[1]} != expected {p.input_size}"
        )
    W_all = fuse_gate_stack(p.W)
    U_all = fuse_gate_stack(p.U)
    b_all = fuse_gate_stack(p.b)
    xp = add(matmul(xs, transpose(W_all)), b_all)   # (J, 4H)
    h = tensor(np.zeros(H))
    c = tensor(np.zeros(H))
    hs = []
    for j in range(J):
        pre_all = add(row(xp, j), matmul(U_all, h))
        h, c = fused_cell_update(pre_all, c, H, tanh_on_cell_output)
        hs.append(h)
    return stack_rows(hs)


def blstm_encode(
    seq, fwd: LstmParams, bwd: LstmParams, tanh_on_cell_output: bool = False
) -> Tensor:
    """Bidirectional encoding of seq (J, in) -> annotations (J, 2H).

    Position j concatenates the forward hidden state at j (run left to
    right) with the backward hidden state at j (run right to left); both
    directions start from zero states.
    """
    if not isinstance(seq, Tensor):
        seq = tensor(seq)
    if seq.data.ndim != 2 or seq.data.shape[0] == 0:
        raise ValueError("blstm_encode needs a non-empty (J, in) sequence")
    h_fwd = lstm_forward(seq, fwd, tanh_on_cell_output)
    h_bwd = reverse_rows(lstm_forward(reverse_rows(seq), bwd, tanh_on_cell_output))
    return hconcat([h_fwd, h_bwd])


# -----------------------------------------------------------------------------
# Attention
# -----------------------------------------------------------------------------


def attention_proj(annotations: Tensor, p: AttentionParams) -> Tensor:
    """Precompute U_a v_j for all annotations -> (J, align)."""
    return matmul(annotations, transpose(p.U_a))


def attend(
    annotations: Tensor,
    prev_h: Tensor,
    p: AttentionParams,
    proj: Tensor | None = None,
) -> AttentionResult:
    """Soft attention over annotations (J, A) given the previous decoder
    state; returns the context vector and the weights.

    ``proj`` may carry a precomputed ``attention_proj`` result for reuse
    across decoding steps.
    """
    if not isinstance(annotations, Tensor):
        annotations = tensor(annotations)
    if annotations.data.ndim != 2 or annotations.data.shape[0] == 0:
        raise ValueError("attend needs a non-empty (J, A) annotation matrix")
    if proj is None:
        proj = attention_proj(annotations, p)
    q = add(matmul(p.W_a, prev_h), p.b)          # (align,)
    scores = matmul(tanh(add(proj, q)), p.w)     # (J,)
    alpha = softmax(scores)
    z = matmul(alpha, annotations)               # (A,)
    return AttentionResult(z=z, alpha=alpha)


# -----------------------------------------------------------------------------
# Decoder cell, state init, output layer
# -----------------------------------------------------------------------------


def multi_input_lstm_step(
    prev_word_emb: Tensor,
    state: DecoderState,
    contexts: list[Tensor],
    p: MultiInputLstmParams,
    tanh_on_cell_output: bool = False,
) -> DecoderState:
    """Decoder cell consuming the previous word embedding plus one attended
    context per configured stream."""
    if len(contexts) != len(p.streams):
        raise ValueError(
            f"expected {len(p.streams)} context vectors ({p.streams}), got {len(contexts)}"
        )
    pre = {}
    for g in GATES:
        terms = [matmul(p.W[g], prev_word_emb), matmul(p.U[g], state.h)]
        terms += [matmul(p.ctx[s][g], z) for s, z in zip(p.streams, contexts)]
        terms.append(p.b[g])
        pre[g] = add_n(terms)
    h, c = _lstm_core(pre, state.h, state.c, tanh_on_cell_output)
    return DecoderState(h=h, c=c)


def init_decoder_state(annotations: Tensor, p: InitStateParams) -> DecoderState:
    """tanh of a learned projection of the mean annotation, separately for
    h0 and c0."""
    if not isinstance(annotations, Tensor):
        annotations = tensor(annotations)
    if annotations.data.ndim != 2 or annotations.data.shape[0] == 0:
        raise ValueError("init_decoder_state needs a non-empty annotation matrix")
    m = mean_rows(annotations)
    h0 = tanh(add(matmul(p.W_h, m), p.b_h))
    c0 = tanh(add(matmul(p.W_c, m), p.b_c))
    return DecoderState(h=h0, c=c0)


def output_distribution(
    state: DecoderState,
    contexts: list[Tensor],
    prev_word_emb: Tensor,
    p: OutputLayerParams,
) -> Tensor:
    """Word distribution from skip connections of h_t, the contexts and the
    previous word embedding -> (vocab,) probabilities."""
    if len(contexts) != len(p.streams):
        raise ValueError(
            f"expected {len(p.streams)} context vectors ({p.streams}), got {len(contexts)}"
        )
    terms = [matmul(p.M_h, state.h)]
    terms += [matmul(p.M_ctx[s], z) for s, z in zip(p.streams, contexts)]
    terms.append(matmul(p.M_e, prev_word_emb))
    terms.append(p.b_m)
    hidden = tanh(add_n(terms))
    logits = add(matmul(p.U_p, hidden), p.b_p)
    return softmax(logits)
