"""Loss, optimizers, regularization and the early-stopped training loop.

The optimized objective per update is the mean negative log-likelihood
per target token over the mini-batch, plus the L2 weight penalty over
non-recurrent weights. Model selection runs beam decoding on the
validation split every ``eval_every_updates`` updates and keeps the
weights with the best BLEU-4.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .data import EOS, PAD, LinkedSample, Manifest, Vocabulary, build_vocab, link_events
from .decoding import DecodeConfig, caption_day
from .metrics import bleu4
from .model import ModelDims, ModelParams, ModelVariant, PreviousEventInput
from .seeding import named_rng
from .tensor import GradientSet, Tensor, add, add_n, cadd, cmul, grad, log_clamped, pick, scale, sum_squares


@dataclass
class TrainingConfig:
    optimizer: str = "adadelta"            # "adadelta" or "adam"
    adadelta_lr: float = 1.0
    adam_lr: float = 0.001
    adam_decay_per_epoch: float = 0.995
    clip_norm: float = 10.0
    dropout_p: float = 0.5
    weight_decay: float = 1e-4
    noise_sigma: float = 1e-2
    batch_size: int = 64
    patience: int = 20
    eval_every_updates: int = 50
    selection_metric: str = "bleu4"
    max_epochs: int = 200
    max_target_len: int = 30
    beam_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adadelta", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.selection_metric != "bleu4":
            raise ValueError("only bleu4 model selection is supported")
        for name in ("adadelta_lr", "adam_lr", "clip_norm", "batch_size",
                     "eval_every_updates", "max_epochs", "max_target_len", "beam_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


class ClampCounter:
    """Counts probability floors applied inside the NLL (diagnostic only)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_warnings = ClampCounter()


def nll_loss(per_step, targets: list[int]) -> Tensor:
    """Negative sum of log probabilities at the target indices.

    ``per_step`` holds one distribution per step (Tensors or arrays).
    Probabilities below 1e-12 are floored (counted in ``clamp_warnings``)
    so the loss never becomes NaN.
    """
    if len(per_step) != len(targets):
        raise ValueError(
            f"{len(per_step)} distributions for {len(targets)} target tokens"
        )
    logps = []
    for probs, tok in zip(per_step, targets):
        if not isinstance(probs, Tensor):
            probs = Tensor(np.asarray(probs, dtype=np.float64))
        if float(probs.data[tok]) < 1e-12:
            clamp_warnings.count += 1
        logps.append(log_clamped(pick(probs, tok)))
    return scale(add_n(logps), -1.0)


def clip_gradients(g: GradientSet, max_norm: float = 10.0) -> GradientSet:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; direction is preserved exactly."""
    total = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
    if total <= max_norm or total == 0.0:
        return g
    factor = max_norm / total
    return {k: v * factor for k, v in g.items()}


# -----------------------------------------------------------------------------
# Optimizers
# -----------------------------------------------------------------------------


@dataclass
class AdadeltaState:
    sq_grad: dict[str, np.ndarray]
    sq_update: dict[str, np.ndarray]
    rho: float = 0.95
    eps: float = 1e-6


def make_adadelta_state(params: dict[str, Tensor]) -> AdadeltaState:
    return AdadeltaState(
        sq_grad={k: np.zeros_like(t.data) for k, t in params.items()},
        sq_update={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adadelta_step(params: dict[str, Tensor], g: GradientSet,
                  state: AdadeltaState, cfg: TrainingConfig) -> None:
    """One Adadelta update (rho=0.95, eps=1e-6), scaled by adadelta_lr."""
    rho, eps = state.rho, state.eps
    for k, t in params.items():
        gk = g[k]
        state.sq_grad[k] = rho * state.sq_grad[k] + (1.0 - rho) * gk * gk
        delta = -np.sqrt(state.sq_update[k] + eps) / np.sqrt(state.sq_grad[k] + eps) * gk
        state.sq_update[k] = rho * state.sq_update[k] + (1.0 - rho) * delta * delta
        t.data = t.data + cfg.adadelta_lr * delta


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def make_adam_state(params: dict[str, Tensor], cfg: TrainingConfig) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        lr=cfg.adam_lr,
    )


def adam_step(params: dict[str, Tensor], g: GradientSet,
              state: AdamState, cfg: TrainingConfig) -> None:
    """One bias-corrected Adam update at the state's current learning rate."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, t in params.items():
        gk = g[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * gk
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        t.data = t.data - state.lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_epoch_end(state: AdamState, cfg: TrainingConfig) -> None:
    state.lr *= cfg.adam_decay_per_epoch


# -----------------------------------------------------------------------------
# Regularization
# -----------------------------------------------------------------------------


def non_recurrent_weight_names(p: ModelParams) -> list[str]:
    """Weight matrices/vectors that receive noise and weight decay: every
    weight except the recurrent U matrices; biases are excluded."""
    recurrent = {"U_i", "U_f", "U_o", "U_c"}
    out = []
    for name in p.parameters():
        leaf = name.split(".")[-1]
        if leaf.startswith("b") or leaf in recurrent:
            continue
        out.append(name)
    return out


class _Dropout:
    """Inverted dropout with a dedicated rng stream."""

    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def _mask(self, shape) -> np.ndarray:
        keep = 1.0 - self.p
        return (self.rng.random(shape) < keep) / keep

    def annotations(self, t: Tensor) -> Tensor:
        if self.p <= 0.0:
            return t
        return cmul(t, self._mask(t.data.shape))

    def output_input(self, t: Tensor) -> Tensor:
        if self.p <= 0.0:
            return t
        return cmul(t, self._mask(t.data.shape))


class Regularizer:
    """Per-update regularization context.

    Weight noise is sampled once per update and shared by all samples in
    the batch; dropout masks are drawn per call. The L2 penalty applies to
    the clean weights.
    """

    def __init__(self, cfg: TrainingConfig, p: ModelParams,
                 noise_rng: np.random.Generator, dropout_rng: np.random.Generator,
                 train_mode: bool = True):
        self.cfg = cfg
        self.train_mode = train_mode
        self._names = non_recurrent_weight_names(p)
        self._noise: dict[str, np.ndarray] = {}
        if train_mode and cfg.noise_sigma > 0.0:
            params = p.parameters()
            for name in self._names:
                self._noise[name] = noise_rng.normal(
                    0.0, cfg.noise_sigma, size=params[name].data.shape
                )
        self.dropout = (
            _Dropout(cfg.dropout_p, dropout_rng)
            if train_mode and cfg.dropout_p > 0.0
            else None
        )

    def noisy_params(self, p: ModelParams) -> ModelParams:
        """Model view whose non-recurrent weights carry this update's noise."""
        if not self._noise:
            return p
        noisy: dict[str, Tensor] = {
            name: cadd(t, self._noise[name]) if name in self._noise else t
            for name, t in p.parameters().items()
        }
        return _rebuild_with(p, noisy)

    def penalty(self, p: ModelParams) -> Tensor | None:
        """weight_decay * sum of squared non-recurrent weights, or None."""
        if not self.train_mode or self.cfg.weight_decay <= 0.0:
            return None
        params = p.parameters()
        return scale(add_n([sum_squares(params[n]) for n in self._names]),
                     self.cfg.weight_decay)


def apply_regularization(cfg: TrainingConfig, p: ModelParams,
                         noise_rng: np.random.Generator,
                         dropout_rng: np.random.Generator,
                         train_mode: bool = True) -> Regularizer:
    """Regularization context for one update. The rng streams are consumed
    in place, so successive updates draw fresh noise and masks. In eval
    mode (or with all rates zero) the context is an exact identity."""
    return Regularizer(cfg, p, noise_rng, dropout_rng, train_mode=train_mode)


def _rebuild_with(p: ModelParams, named: dict[str, Tensor]) -> ModelParams:
    """Shallow model copy with tensors replaced per the name map."""
    import dataclasses

    def pick_name(name: str) -> Tensor:
        return named[name]

    encoders = {
        s: model_mod.BlstmParams(
            fwd=model_mod.LstmParams(
                W={g: pick_name(f"encoder.{s}.fwd.W_{g}") for g in model_mod.GATES},
                U={g: pick_name(f"encoder.{s}.fwd.U_{g}") for g in model_mod.GATES},
                b={g: pick_name(f"encoder.{s}.fwd.b_{g}") for g in model_mod.GATES},
            ),
            bwd=model_mod.LstmParams(
                W={g: pick_name(f"encoder.{s}.bwd.W_{g}") for g in model_mod.GATES},
                U={g: pick_name(f"encoder.{s}.bwd.U_{g}") for g in model_mod.GATES},
                b={g: pick_name(f"encoder.{s}.bwd.b_{g}") for g in model_mod.GATES},
            ),
        )
        for s in p.encoders
    }
    attention = {
        s: model_mod.AttentionParams(
            w=pick_name(f"attention.{s}.w"),
            W_a=pick_name(f"attention.{s}.W_a"),
            U_a=pick_name(f"attention.{s}.U_a"),
            b=pick_name(f"attention.{s}.b"),
        )
        for s in p.attention
    }
    decoder = model_mod.MultiInputLstmParams(
        streams=p.decoder.streams,
        W={g: pick_name(f"decoder.W_{g}") for g in model_mod.GATES},
        U={g: pick_name(f"decoder.U_{g}") for g in model_mod.GATES},
        ctx={
            s: {g: pick_name(f"decoder.ctx_{g}.{s}") for g in model_mod.GATES}
            for s in p.decoder.streams
        },
        b={g: pick_name(f"decoder.b_{g}") for g in model_mod.GATES},
    )
    output = model_mod.OutputLayerParams(
        streams=p.output.streams,
        M_h=pick_name("output.M_h"),
        M_e=pick_name("output.M_e"),
        M_ctx={s: pick_name(f"output.M_ctx.{s}") for s in p.output.streams},
        b_m=pick_name("output.b_m"),
        U_p=pick_name("output.U_p"),
        b_p=pick_name("output.b_p"),
    )
    init = model_mod.InitStateParams(
        W_h=pick_name("init.W_h"), b_h=pick_name("init.b_h"),
        W_c=pick_name("init.W_c"), b_c=pick_name("init.b_c"),
    )
    return ModelParams(
        variant=p.variant, dims=p.dims, vocab_size=p.vocab_size,
        embedding=pick_name("embedding.E"), encoders=encoders,
        attention=attention, decoder=decoder, output=output, init=init,
    )


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ModelParams
    history: list[dict]
    vocab: Vocabulary


class _FeatureCache:
    """Reads feature files once, subsampled with the 26-frame rule."""

    def __init__(self, max_frames: int = 26):
        self.max_frames = max_frames
        self._cache: dict = {}

    def __call__(self, path) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            arr = data_mod.subsample_frames(data_mod.read_features(path), self.max_frames)
            self._cache[path] = arr
        return arr


def _target_tokens(caption: str, vocab: Vocabulary, max_len: int) -> list[int]:
    toks = vocab.encode(data_mod.tokenize(caption))[:max_len]
    return toks + [EOS]


def _prev_input(sample: LinkedSample, variant: ModelVariant, vocab: Vocabulary,
                cfg: TrainingConfig, load, ref_choice: int) -> PreviousEventInput | None:
    if variant is ModelVariant.BASELINE:
        return None
    if sample.previous is None:
        return model_mod.make_empty_event(variant, load(sample.current.frame_file).shape[1])
    frames = load(sample.previous.frame_file) if variant.uses_prev_video else None
    caption = None
    if variant.uses_prev_caption:
        refs = sample.previous.captions
        toks = vocab.encode(data_mod.tokenize(refs[ref_choice % len(refs)]))
        caption = toks[: cfg.max_target_len] if toks else [PAD]
    return PreviousEventInput(frames=frames, caption=caption)


def validation_bleu(model: ModelParams, manifest: Manifest, cfg: TrainingConfig,
                    vocab: Vocabulary, load) -> float:
    """Beam-decode the validation split and score BLEU-4 against its
    references. Caption streams use ground-truth previous captions, so the
    selection signal is independent of earlier decoding mistakes."""
    decode_cfg = DecodeConfig(beam_size=cfg.beam_size, max_length=cfg.max_target_len)
    corpus = {}
    for day in manifest.split_days("val"):
        for cap in caption_day(model, day, decode_cfg, vocab, load_frames=load,
                              use_generated_prev_caption=False):
            refs = next(ev for ev in day.events if ev.id == cap.event_id).captions
            corpus[cap.event_id] = (cap.tokens, [data_mod.tokenize(r) for r in refs])
    return bleu4(corpus)


def train_loop(manifest: Manifest, variant: ModelVariant, cfg: TrainingConfig,
               dims: ModelDims | None = None) -> TrainResult:
    """Train one variant with seeded shuffling, gradient clipping, the
    configured optimizer, and BLEU-4 early stopping on the validation
    split. Returns the best-scoring weights and the per-check history."""
    train_days = manifest.split_days("train")
    val_days = manifest.split_days("val")
    if not train_days or not val_days:
        raise ValueError("training needs non-empty train and val splits")
    vocab = build_vocab(
        cap for day in train_days for ev in day.events for cap in ev.captions
    )
    if dims is None:
        dims = ModelDims(feature_dim=manifest.feature_dim)
    if dims.feature_dim != manifest.feature_dim:
        raise ValueError(
            f"dims.feature_dim {dims.feature_dim} != manifest feature_dim "
            f"{manifest.feature_dim}"
        )
    model = model_mod.build_model(variant, dims, len(vocab), cfg.seed)
    params = model.parameters()
    opt_state = (make_adam_state(params, cfg) if cfg.optimizer == "adam"
                 else make_adadelta_state(params))

    load = _FeatureCache()
    samples = [s for day in train_days for s in link_events(day)]
    shuffle_rng = named_rng(cfg.seed, "shuffle")
    noise_rng = named_rng(cfg.seed, "noise")
    dropout_rng = named_rng(cfg.seed, "dropout")

    best_bleu = -1.0
    best_weights = model.copy_weights()
    history: list[dict] = []
    update = 0
    fails = 0
    stop = False
    losses_since_check: list[float] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(samples))
        ref_choices = shuffle_rng.integers(0, 2**31 - 1, size=len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            reg = apply_regularization(cfg, model, noise_rng, dropout_rng)
            p_eff = reg.noisy_params(model)
            sample_losses = []
            token_count = 0
            for i in batch:
                s = samples[i]
                target = _target_tokens(s.current.captions[s.caption_index],
                                        vocab, cfg.max_target_len)
                prev = _prev_input(s, variant, vocab, cfg, load, int(ref_choices[i]))
                res = model_mod.forward_pass(load(s.current.frame_file), prev,
                                             target, p_eff, dropout=reg.dropout)
                sample_losses.append(scale(res.logprob, -1.0))
                token_count += len(target)
            data_loss = scale(add_n(sample_losses), 1.0 / token_count)
            penalty = reg.penalty(model)
            total = add(data_loss, penalty) if penalty is not None else data_loss
            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at update {update + 1}"
                )
            g = clip_gradients(grad(total, params), cfg.clip_norm)
            if cfg.optimizer == "adam":
                adam_step(params, g, opt_state, cfg)
            else:
                adadelta_step(params, g, opt_state, cfg)
            update += 1
            losses_since_check.append(float(data_loss.data))

            if update % cfg.eval_every_updates == 0:
                val = validation_bleu(model, manifest, cfg, vocab, load)
                if val > best_bleu:
                    fails = 0
                else:
                    fails += 1
                if val >= best_bleu:
                    # ties keep the freshest weights: at a saturated score the
                    # later checkpoint is the better-trained one
                    best_bleu = val
                    best_weights = model.copy_weights()
                history.append({
                    "update": update,
                    "epoch": epoch,
                    "train_loss": float(np.mean(losses_since_check)),
                    "val_bleu4": val,
                    "best_so_far": best_bleu,
                })
                losses_since_check = []
                if fails > cfg.patience:
                    stop = True
                    break
        if stop:
            break
        if cfg.optimizer == "adam":
            adam_epoch_end(opt_state, cfg)

    model.load_weights(best_weights)
    return TrainResult(model=model, history=history, vocab=vocab)
