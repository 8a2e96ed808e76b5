"""Model assembly: deterministic construction, encoder shapes, the empty
event, forward log-probabilities against an independent scalar oracle,
baseline-reduction equivalence, and the weight file round trip."""

import numpy as np
import pytest

from tma.data import BOS, EOS, PAD, Vocabulary, RESERVED_TOKENS
from tma.model import (
    GATES,
    ModelDims,
    ModelVariant,
    PreviousEventInput,
    build_model,
    encode_current,
    encode_previous,
    forward_logprob,
    load_weights,
    make_empty_event,
    save_weights,
)

DIMS = ModelDims(feature_dim=4, embed_dim=4, encoder_dim=3, decoder_dim=4,
                 align_dim=3, readout_dim=4)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


# -----------------------------------------------------------------------------
# construction
# -----------------------------------------------------------------------------


def test_build_same_seed_bit_identical():
    a = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=4)
    b = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=4)
    pa, pb = a.parameters(), b.parameters()
    assert list(pa) == list(pb)
    for k in pa:
        np.testing.assert_array_equal(pa[k].data, pb[k].data)


def test_build_different_seed_differs():
    a = build_model(ModelVariant.BASELINE, DIMS, 9, seed=0)
    b = build_model(ModelVariant.BASELINE, DIMS, 9, seed=1)
    assert not np.array_equal(a.embedding.data, b.embedding.data)


def test_baseline_has_one_attention():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=0)
    assert list(m.attention) == ["current"]
    assert m.variant.streams == ("current",)


def test_attention_count_per_variant():
    expected = {
        ModelVariant.BASELINE: 1,
        ModelVariant.PREV_CAPTION: 2,
        ModelVariant.PREV_VIDEO: 2,
        ModelVariant.PREV_VIDEO_CAPTION: 3,
    }
    for variant, n in expected.items():
        m = build_model(variant, DIMS, 9, seed=0)
        assert len(m.attention) == n


def test_prev_video_caption_shares_embedding_storage():
    m = build_model(ModelVariant.PREV_VIDEO_CAPTION, DIMS, 9, seed=0)
    assert len(m.attention) == 3
    # mutating E must be observed by both consumers: single storage
    prev = PreviousEventInput(caption=[4, 5], frames=np.zeros((1, 4)))
    before = encode_previous(prev, m)[1].annotations.data.copy()
    m.embedding.data = m.embedding.data + 0.5
    after = encode_previous(prev, m)[1].annotations.data
    assert not np.array_equal(before, after)


def test_build_rejects_zero_vocab():
    with pytest.raises(ValueError):
        build_model(ModelVariant.BASELINE, DIMS, 0, seed=0)


def test_parameter_names_sorted_and_stable():
    m = build_model(ModelVariant.PREV_CAPTION, DIMS, 9, seed=0)
    names = list(m.parameters())
    assert names == sorted(names)
    assert "encoder.prev_caption.fwd.W_i" in names
    assert "decoder.ctx_c.prev_caption" in names


# -----------------------------------------------------------------------------
# encoding
# -----------------------------------------------------------------------------


def test_encode_current_shape_arithmetic():
    dims = ModelDims(feature_dim=4, embed_dim=4, encoder_dim=2, decoder_dim=4,
                     align_dim=3, readout_dim=4)
    m = build_model(ModelVariant.BASELINE, dims, 9, seed=0)
    enc = encode_current(np.random.default_rng(0).normal(size=(1, 4)), m)
    assert enc.annotations.data.shape == (1, 4 + 2 + 2)


def test_encode_current_contains_raw_features():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=0)
    frames = np.random.default_rng(1).normal(size=(3, 4))
    enc = encode_current(frames, m)
    np.testing.assert_array_equal(enc.annotations.data[:, :4], frames)


def test_encode_current_matches_blstm_oracle():
    from tma.layers import blstm_encode

    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=2)
    frames = np.random.default_rng(2).normal(size=(3, 4))
    enc = encode_current(frames, m)
    states = blstm_encode(frames, m.encoders["current"].fwd, m.encoders["current"].bwd)
    np.testing.assert_array_equal(enc.annotations.data[:, 4:], states.data)


def test_encode_previous_baseline_empty():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=0)
    assert encode_previous(None, m) == []


def test_encode_previous_caption_length():
    m = build_model(ModelVariant.PREV_CAPTION, DIMS, 9, seed=0)
    out = encode_previous(PreviousEventInput(caption=[4, 5, 6]), m)
    assert len(out) == 1
    assert out[0].source == "prev_caption"
    assert out[0].annotations.data.shape == (3, 2 * DIMS.encoder_dim)


def test_encode_previous_video_matches_blstm_oracle():
    from tma.layers import blstm_encode

    m = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=3)
    frames = np.random.default_rng(3).normal(size=(2, 4))
    out = encode_previous(PreviousEventInput(frames=frames), m)
    states = blstm_encode(frames, m.encoders["prev_video"].fwd,
                          m.encoders["prev_video"].bwd)
    np.testing.assert_array_equal(out[0].annotations.data[:, 4:], states.data)
    np.testing.assert_array_equal(out[0].annotations.data[:, :4], frames)


def test_encode_previous_stream_mismatch():
    m = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=0)
    with pytest.raises(ValueError):
        encode_previous(PreviousEventInput(caption=[4]), m)
    m2 = build_model(ModelVariant.PREV_CAPTION, DIMS, 9, seed=0)
    with pytest.raises(ValueError):
        encode_previous(PreviousEventInput(frames=np.zeros((1, 4))), m2)


def test_make_empty_event_per_variant():
    empty = make_empty_event(ModelVariant.PREV_VIDEO, 4)
    np.testing.assert_array_equal(empty.frames, np.zeros((1, 4)))
    assert empty.caption is None

    empty = make_empty_event(ModelVariant.PREV_CAPTION, 4)
    assert empty.frames is None
    assert empty.caption == [PAD]

    empty = make_empty_event(ModelVariant.PREV_VIDEO_CAPTION, 4)
    np.testing.assert_array_equal(empty.frames, np.zeros((1, 4)))
    assert empty.caption == [PAD]

    empty = make_empty_event(ModelVariant.BASELINE, 4)
    assert empty.frames is None and empty.caption is None


# -----------------------------------------------------------------------------
# forward log-probability
# -----------------------------------------------------------------------------


def test_forward_uniform_when_readout_zero():
    V = 9
    m = build_model(ModelVariant.BASELINE, DIMS, V, seed=5)
    m.output.U_p.data = np.zeros_like(m.output.U_p.data)
    frames = np.random.default_rng(5).normal(size=(2, 4))
    target = [4, 5, EOS]
    total, per_step = forward_logprob(frames, None, target, m)
    for p in per_step:
        np.testing.assert_allclose(p, np.full(V, 1 / V), rtol=1e-12)
    assert abs(total - 3 * np.log(1 / V)) < 1e-12


def test_forward_total_matches_per_step():
    m = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=6)
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(3, 4))
    prev = PreviousEventInput(frames=rng.normal(size=(2, 4)))
    target = [4, 7, 5, EOS]
    total, per_step = forward_logprob(frames, prev, target, m)
    recomputed = sum(np.log(p[t]) for p, t in zip(per_step, target))
    assert abs(total - recomputed) < 1e-12
    for p in per_step:
        assert abs(p.sum() - 1.0) < 1e-12


def test_forward_eval_is_pure():
    m = build_model(ModelVariant.PREV_CAPTION, DIMS, 9, seed=7)
    rng = np.random.default_rng(7)
    frames = rng.normal(size=(2, 4))
    prev = PreviousEventInput(caption=[4, 8])
    target = [5, EOS]
    t1, s1 = forward_logprob(frames, prev, target, m)
    t2, s2 = forward_logprob(frames, prev, target, m)
    assert t1 == t2
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a, b)


def test_forward_rejects_bad_targets():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=0)
    frames = np.zeros((1, 4))
    with pytest.raises(ValueError):
        forward_logprob(frames, None, [], m)
    with pytest.raises(ValueError):
        forward_logprob(frames, None, [4, 5], m)  # no EOS
    with pytest.raises(IndexError):
        forward_logprob(frames, None, [42, EOS], m)


def test_forward_matches_full_scalar_oracle():
    """End-to-end composition oracle: a previous-video model with vocab 7
    and 4-dim layers, re-evaluated step by step with plain numpy."""
    dims = ModelDims(feature_dim=3, embed_dim=4, encoder_dim=2, decoder_dim=4,
                     align_dim=3, readout_dim=4)
    V = 7
    m = build_model(ModelVariant.PREV_VIDEO, dims, V, seed=8)
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(3, 3))
    prev_frames = rng.normal(size=(2, 3))
    target = [4, 6, EOS]
    total, per_step = forward_logprob(
        frames, PreviousEventInput(frames=prev_frames), target, m
    )

    P = {k: t.data for k, t in m.parameters().items()}

    def lstm_run(prefix, xs):
        H = P[f"{prefix}.U_i"].shape[0]
        h, c = np.zeros(H), np.zeros(H)
        out = []
        for x in xs:
            pre = {g: P[f"{prefix}.W_{g}"] @ x + P[f"{prefix}.U_{g}"] @ h
                   + P[f"{prefix}.b_{g}"] for g in GATES}
            c = _sig(pre["f"]) * c + _sig(pre["i"]) * np.tanh(pre["c"])
            h = _sig(pre["o"]) * c
            out.append(h)
        return np.stack(out)

    def encode(stream, xs):
        fwd = lstm_run(f"encoder.{stream}.fwd", xs)
        bwd = lstm_run(f"encoder.{stream}.bwd", xs[::-1])[::-1]
        return np.concatenate([xs, fwd, bwd], axis=1)

    ann = {"current": encode("current", frames),
           "prev_video": encode("prev_video", prev_frames)}

    mean = ann["current"].mean(axis=0)
    h = np.tanh(P["init.W_h"] @ mean + P["init.b_h"])
    c = np.tanh(P["init.W_c"] @ mean + P["init.b_c"])

    def attend(stream, h_prev):
        A = ann[stream]
        scores = np.array([
            P[f"attention.{stream}.w"] @ np.tanh(
                P[f"attention.{stream}.W_a"] @ h_prev
                + P[f"attention.{stream}.U_a"] @ A[j]
                + P[f"attention.{stream}.b"]
            )
            for j in range(A.shape[0])
        ])
        e = np.exp(scores - scores.max())
        alpha = e / e.sum()
        return alpha @ A

    logp = 0.0
    inputs = [BOS] + target[:-1]
    for t, (tok_in, tok_out) in enumerate(zip(inputs, target)):
        emb = P["embedding.E"][tok_in]
        zs = {s: attend(s, h) for s in ("current", "prev_video")}
        pre = {
            g: P[f"decoder.W_{g}"] @ emb + P[f"decoder.U_{g}"] @ h
            + P[f"decoder.ctx_{g}.current"] @ zs["current"]
            + P[f"decoder.ctx_{g}.prev_video"] @ zs["prev_video"]
            + P[f"decoder.b_{g}"]
            for g in GATES
        }
        c = _sig(pre["f"]) * c + _sig(pre["i"]) * np.tanh(pre["c"])
        h = _sig(pre["o"]) * c
        hidden = np.tanh(
            P["output.M_h"] @ h
            + P["output.M_ctx.current"] @ zs["current"]
            + P["output.M_ctx.prev_video"] @ zs["prev_video"]
            + P["output.M_e"] @ emb + P["output.b_m"]
        )
        logits = P["output.U_p"] @ hidden + P["output.b_p"]
        exp = np.exp(logits - logits.max())
        probs = exp / exp.sum()
        np.testing.assert_allclose(per_step[t], probs, rtol=1e-10)
        logp += np.log(probs[tok_out])
    assert abs(total - logp) < 1e-10


def test_prev_video_with_zeroed_context_equals_baseline():
    """Zeroing the previous stream's gate and skip matrices while sharing
    every remaining parameter reproduces the baseline exactly."""
    base = build_model(ModelVariant.BASELINE, DIMS, 9, seed=9)
    full = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=10)
    shared = base.parameters()
    target_params = full.parameters()
    for name, t in target_params.items():
        if name in shared:
            t.data = shared[name].data.copy()
        if name.startswith("decoder.ctx_") and name.endswith("prev_video"):
            t.data = np.zeros_like(t.data)
        if name == "output.M_ctx.prev_video":
            t.data = np.zeros_like(t.data)

    rng = np.random.default_rng(11)
    for _ in range(5):
        frames = rng.normal(size=(rng.integers(1, 5), 4))
        prev = PreviousEventInput(frames=rng.normal(size=(rng.integers(1, 4), 4)))
        target = [int(x) for x in rng.integers(4, 9, size=3)] + [EOS]
        t_full, s_full = forward_logprob(frames, prev, target, full)
        t_base, s_base = forward_logprob(frames, None, target, base)
        assert abs(t_full - t_base) <= 1e-12
        for a, b in zip(s_full, s_base):
            np.testing.assert_allclose(a, b, atol=1e-15)


def test_day_order_independence():
    """Samples are linked only within a day: a sample's likelihood does not
    depend on any other day's existence or order."""
    m = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=12)
    rng = np.random.default_rng(12)
    frames = rng.normal(size=(2, 4))
    prev = PreviousEventInput(frames=rng.normal(size=(3, 4)))
    target = [5, 6, EOS]
    before, _ = forward_logprob(frames, prev, target, m)
    # interleave unrelated evaluations (other "days"), then re-evaluate
    for _ in range(3):
        forward_logprob(rng.normal(size=(2, 4)), PreviousEventInput(
            frames=rng.normal(size=(1, 4))), [4, EOS], m)
    after, _ = forward_logprob(frames, prev, target, m)
    assert before == after


def test_first_event_with_empty_event_is_finite():
    for variant in ModelVariant:
        m = build_model(variant, DIMS, 9, seed=13)
        frames = np.random.default_rng(13).normal(size=(2, 4))
        prev = None if variant is ModelVariant.BASELINE else make_empty_event(variant, 4)
        total, per_step = forward_logprob(frames, prev, [4, EOS], m)
        assert np.isfinite(total)
        assert all(np.all(np.isfinite(p)) for p in per_step)


# -----------------------------------------------------------------------------
# weight files
# -----------------------------------------------------------------------------


def test_weights_roundtrip(tmp_path):
    vocab = Vocabulary(list(RESERVED_TOKENS) + ["walked", "street"])
    m = build_model(ModelVariant.PREV_VIDEO_CAPTION, DIMS, len(vocab), seed=14)
    path = tmp_path / "w.tmaw"
    save_weights(path, m, vocab)
    assert path.read_bytes()[:4] == b"TMAW"
    loaded, loaded_vocab = load_weights(path)
    assert loaded_vocab == vocab
    assert loaded.variant == m.variant
    assert loaded.dims == m.dims
    pa, pb = m.parameters(), loaded.parameters()
    assert list(pa) == list(pb)
    for k in pa:
        np.testing.assert_array_equal(pa[k].data, pb[k].data)


def test_weights_truncation_detected(tmp_path):
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=15)
    path = tmp_path / "w.tmaw"
    save_weights(path, m, None)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    from tma.model import WeightFileError

    with pytest.raises(WeightFileError):
        load_weights(path)
