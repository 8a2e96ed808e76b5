"""Loss, clipping, optimizer recurrences, regularization contracts and
training-loop behavior."""

import math

import numpy as np
import pytest

from tma.data import EOS, Day, Event, Manifest, write_features, write_manifest
from tma.model import ModelDims, ModelVariant, PreviousEventInput, build_model, forward_pass, forward_logprob
from tma.seeding import named_rng
from tma.tensor import finite_diff_max_rel_error, grad, tensor
from tma.training import (
    AdadeltaState,
    AdamState,
    TrainingConfig,
    TrainingDiverged,
    adadelta_step,
    adam_epoch_end,
    adam_step,
    apply_regularization,
    clamp_warnings,
    clip_gradients,
    make_adadelta_state,
    make_adam_state,
    nll_loss,
    non_recurrent_weight_names,
    train_loop,
)

DIMS = ModelDims(feature_dim=4, embed_dim=4, encoder_dim=3, decoder_dim=4,
                 align_dim=3, readout_dim=4)


# -----------------------------------------------------------------------------
# nll_loss
# -----------------------------------------------------------------------------


def test_nll_one_hot_is_zero():
    dists = [np.eye(4)[i] for i in (1, 3, 0)]
    assert nll_loss(dists, [1, 3, 0]).item() == 0.0


def test_nll_uniform_closed_form():
    dists = [np.full(10, 0.1)] * 5
    loss = nll_loss(dists, [0, 3, 9, 2, 7]).item()
    assert abs(loss - 5 * math.log(10)) < 1e-12


def test_nll_matches_direct_summation():
    rng = np.random.default_rng(0)
    dists, targets = [], []
    for _ in range(4):
        p = rng.random(6)
        p /= p.sum()
        dists.append(p)
        targets.append(int(rng.integers(6)))
    expected = -sum(math.log(p[t]) for p, t in zip(dists, targets))
    assert abs(nll_loss(dists, targets).item() - expected) < 1e-12


def test_nll_clamps_zero_probability():
    clamp_warnings.reset()
    p = np.zeros(3)
    p[1] = 1.0
    loss = nll_loss([p], [0]).item()
    assert np.isfinite(loss)
    assert abs(loss - (-math.log(1e-12))) < 1e-9
    assert clamp_warnings.count == 1


def test_nll_length_mismatch():
    with pytest.raises(ValueError):
        nll_loss([np.full(3, 1 / 3)], [0, 1])


# -----------------------------------------------------------------------------
# clip_gradients
# -----------------------------------------------------------------------------


def test_clip_below_threshold_unchanged():
    g = {"a": np.array([3.0]), "b": np.zeros(2)}
    out = clip_gradients(g, max_norm=10.0)
    np.testing.assert_array_equal(out["a"], [3.0])


def test_clip_single_large_gradient():
    out = clip_gradients({"a": np.array([20.0])}, max_norm=10.0)
    np.testing.assert_allclose(out["a"], [10.0])


def test_clip_zero_gradients():
    g = {"a": np.zeros(4)}
    np.testing.assert_array_equal(clip_gradients(g)["a"], np.zeros(4))


def test_clip_preserves_direction_and_never_grows():
    rng = np.random.default_rng(1)
    g = {"a": rng.normal(size=5) * 10, "b": rng.normal(size=(2, 3)) * 10}
    out = clip_gradients(g, max_norm=1.0)
    norm = np.sqrt(sum(np.sum(v * v) for v in out.values()))
    assert norm <= 1.0 + 1e-12
    ratio = out["a"] / g["a"]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert ratio[0] > 0


# -----------------------------------------------------------------------------
# optimizers
# -----------------------------------------------------------------------------


def _cfg(**kw):
    return TrainingConfig(**kw)


def test_adadelta_zero_gradient_no_move():
    p = {"w": tensor([1.0, -2.0])}
    state = make_adadelta_state(p)
    state.sq_grad["w"] = np.array([4.0, 4.0])
    adadelta_step(p, {"w": np.zeros(2)}, state, _cfg())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    np.testing.assert_allclose(state.sq_grad["w"], 0.95 * np.array([4.0, 4.0]))


def test_adadelta_first_step_recurrence():
    g = np.array([0.3, -1.7])
    p = {"w": tensor(np.zeros(2))}
    state = make_adadelta_state(p)
    adadelta_step(p, {"w": g}, state, _cfg())
    rho, eps = 0.95, 1e-6
    expected = -1.0 * np.sqrt(eps) / np.sqrt((1 - rho) * g * g + eps) * g
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-12)


def test_adadelta_two_identical_steps_match_hand_recurrence():
    g = np.array([0.5])
    p = {"w": tensor(np.zeros(1))}
    state = make_adadelta_state(p)
    cfg = _cfg()
    rho, eps = 0.95, 1e-6
    acc_g = acc_u = np.zeros(1)
    w = np.zeros(1)
    for _ in range(2):
        acc_g = rho * acc_g + (1 - rho) * g * g
        delta = -np.sqrt(acc_u + eps) / np.sqrt(acc_g + eps) * g
        acc_u = rho * acc_u + (1 - rho) * delta * delta
        w = w + delta
        adadelta_step(p, {"w": g}, state, cfg)
        np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)
    assert abs(state.sq_update["w"][0] - acc_u[0]) < 1e-18


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": tensor(np.zeros(3))}
    cfg = _cfg(optimizer="adam")
    state = make_adam_state(p, cfg)
    adam_step(p, {"w": g}, state, cfg)
    np.testing.assert_allclose(p["w"].data, -cfg.adam_lr * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_no_move():
    p = {"w": tensor([1.0])}
    cfg = _cfg(optimizer="adam")
    state = make_adam_state(p, cfg)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(1)}, state, cfg)
    np.testing.assert_array_equal(p["w"].data, [1.0])


def test_adam_lr_decays_per_epoch():
    cfg = _cfg(optimizer="adam")
    state = make_adam_state({"w": tensor([0.0])}, cfg)
    adam_epoch_end(state, cfg)
    adam_epoch_end(state, cfg)
    assert abs(state.lr - 0.001 * 0.995**2) < 1e-15


@pytest.mark.parametrize("optimizer", ["adadelta", "adam"])
def test_one_step_decreases_quadratic(optimizer):
    cfg = _cfg(optimizer=optimizer)
    p = {"w": tensor([1.0])}
    state = (make_adam_state(p, cfg) if optimizer == "adam"
             else make_adadelta_state(p))
    loss0 = p["w"].data[0] ** 2
    g = {"w": 2 * p["w"].data}
    if optimizer == "adam":
        adam_step(p, g, state, cfg)
    else:
        adadelta_step(p, g, state, cfg)
    assert p["w"].data[0] ** 2 < loss0


# -----------------------------------------------------------------------------
# regularization
# -----------------------------------------------------------------------------


def test_non_recurrent_names_exclude_recurrent_and_biases():
    m = build_model(ModelVariant.PREV_CAPTION, DIMS, 9, seed=0)
    names = set(non_recurrent_weight_names(m))
    assert "embedding.E" in names
    assert "output.U_p" in names
    assert "attention.current.U_a" in names
    assert "decoder.U_i" not in names
    assert "encoder.current.fwd.U_f" not in names
    assert "decoder.b_i" not in names
    assert "output.b_p" not in names


def test_eval_mode_regularizer_is_identity():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=1)
    cfg = _cfg()
    reg = apply_regularization(cfg, m, named_rng(0, "noise"), named_rng(0, "dropout"),
                               train_mode=False)
    assert reg.noisy_params(m) is m
    assert reg.dropout is None
    assert reg.penalty(m) is None


def test_zero_rates_train_equals_eval():
    m = build_model(ModelVariant.PREV_VIDEO, DIMS, 9, seed=2)
    cfg = _cfg(dropout_p=0.0, noise_sigma=0.0, weight_decay=0.0)
    reg = apply_regularization(cfg, m, named_rng(0, "noise"), named_rng(0, "dropout"))
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(2, 4))
    prev = PreviousEventInput(frames=rng.normal(size=(1, 4)))
    target = [4, 5, EOS]
    t_train, _ = forward_logprob(frames, prev, target, m, mode="train", reg=reg)
    t_eval, _ = forward_logprob(frames, prev, target, m, mode="eval")
    assert t_train == t_eval
    assert reg.penalty(m) is None


def test_penalty_nonnegative_and_additive():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=3)
    cfg = _cfg(dropout_p=0.0, noise_sigma=0.0)
    reg = apply_regularization(cfg, m, named_rng(0, "noise"), named_rng(0, "dropout"))
    pen = reg.penalty(m).item()
    assert pen > 0.0
    expected = cfg.weight_decay * sum(
        float(np.sum(m.parameters()[n].data ** 2))
        for n in non_recurrent_weight_names(m)
    )
    assert abs(pen - expected) < 1e-9


def test_penalty_gradient_is_2_lambda_w():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=4)
    cfg = _cfg(dropout_p=0.0, noise_sigma=0.0)
    reg = apply_regularization(cfg, m, named_rng(0, "noise"), named_rng(0, "dropout"))
    params = m.parameters()
    g = grad(reg.penalty(m), params)
    for name in non_recurrent_weight_names(m):
        np.testing.assert_allclose(
            g[name], 2 * cfg.weight_decay * params[name].data, rtol=1e-12
        )
    err = finite_diff_max_rel_error(
        lambda: reg.penalty(m),
        {"W": params["output.M_h"]},
        eps=1e-5,
    )
    assert err < 1e-6


def test_noise_flows_gradient_to_clean_weights():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=5)
    cfg = _cfg(dropout_p=0.0, noise_sigma=1e-2, weight_decay=0.0)
    reg = apply_regularization(cfg, m, named_rng(3, "noise"), named_rng(3, "dropout"))
    noisy = reg.noisy_params(m)
    assert noisy is not m
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(2, 4))
    res = forward_pass(frames, None, [4, EOS], noisy)
    g = grad(res.logprob, m.parameters())
    assert any(np.any(v != 0) for v in g.values())
    # recurrent weights stay exactly noise-free
    np.testing.assert_array_equal(
        noisy.decoder.U["i"].data, m.decoder.U["i"].data
    )
    assert not np.array_equal(noisy.embedding.data, m.embedding.data)


def test_dropout_changes_train_forward():
    m = build_model(ModelVariant.BASELINE, DIMS, 9, seed=6)
    cfg = _cfg(dropout_p=0.5, noise_sigma=0.0, weight_decay=0.0)
    reg = apply_regularization(cfg, m, named_rng(4, "noise"), named_rng(4, "dropout"))
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(2, 4))
    target = [4, 5, EOS]
    t_train, _ = forward_logprob(frames, None, target, m, mode="train", reg=reg)
    t_eval, _ = forward_logprob(frames, None, target, m, mode="eval")
    assert t_train != t_eval


# -----------------------------------------------------------------------------
# train_loop
# -----------------------------------------------------------------------------


def _toy_manifest(tmp_path, n_events=3, feature_dim=4, captions=None):
    rng = np.random.default_rng(0)
    captions = captions or ["i walked on the street", "i worked with my laptop",
                            "i went to my office"]
    days = []
    for split, tag in (("train", "t"), ("val", "v")):
        events = []
        for i in range(n_events):
            path = tmp_path / f"{tag}{i}.tmaf"
            write_features(path, rng.normal(size=(3, feature_dim))
                           + 2.0 * np.eye(feature_dim)[i % feature_dim])
            events.append(Event(id=f"{tag}{i}", frame_file=path.resolve(),
                                captions=[captions[i % len(captions)]]))
        days.append(Day(id=f"day_{tag}", split=split, events=events))
    manifest = Manifest(feature_dim=feature_dim, days=days)
    write_manifest(manifest, tmp_path / "m.json")
    return manifest


def test_train_loop_patience_zero_stops_at_first_flat_check(tmp_path):
    manifest = _toy_manifest(tmp_path)
    cfg = _cfg(optimizer="adam", patience=0, eval_every_updates=1, max_epochs=50,
               dropout_p=0.0, noise_sigma=0.0, weight_decay=0.0, batch_size=8,
               beam_size=2, seed=0)
    result = train_loop(manifest, ModelVariant.BASELINE, cfg, DIMS)
    # stops exactly at the first check that fails to improve the best so far
    best = -1.0
    for i, h in enumerate(result.history):
        if h["val_bleu4"] > best:
            best = h["val_bleu4"]
        else:
            assert i == len(result.history) - 1
            break
    else:
        pytest.fail("no non-improving check found")


def test_train_loop_fixed_seed_identical_history(tmp_path):
    manifest = _toy_manifest(tmp_path)
    cfg = _cfg(optimizer="adam", eval_every_updates=2, max_epochs=6, batch_size=8,
               beam_size=2, seed=7)
    r1 = train_loop(manifest, ModelVariant.PREV_VIDEO, cfg, DIMS)
    r2 = train_loop(manifest, ModelVariant.PREV_VIDEO, cfg, DIMS)
    assert r1.history == r2.history
    w1, w2 = r1.model.copy_weights(), r2.model.copy_weights()
    for k in w1:
        np.testing.assert_array_equal(w1[k], w2[k])


def test_train_loop_requires_val_split(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "e.tmaf"
    write_features(path, rng.normal(size=(2, 4)))
    manifest = Manifest(feature_dim=4, days=[
        Day(id="d", split="train",
            events=[Event(id="e", frame_file=path.resolve(), captions=["a b"])])
    ])
    with pytest.raises(ValueError, match="val"):
        train_loop(manifest, ModelVariant.BASELINE, _cfg(), DIMS)


def test_train_loop_loss_decreases(tmp_path):
    manifest = _toy_manifest(tmp_path)
    cfg = _cfg(optimizer="adam", eval_every_updates=5, max_epochs=40, batch_size=8,
               dropout_p=0.0, noise_sigma=0.0, weight_decay=0.0, beam_size=1,
               patience=1000, seed=1)
    result = train_loop(manifest, ModelVariant.BASELINE, cfg, DIMS)
    losses = [h["train_loss"] for h in result.history]
    assert losses[-1] < losses[0]
