"""Temporally-linked multi-input attention captioner.

A desk-scale sequence-to-sequence captioner over precomputed frame
features where each event may condition on its temporally previous
event (frames, caption, or both), with its own autodiff tape, beam
search, and n-gram caption metrics.
"""

from .data import (
    Day,
    Event,
    Manifest,
    Vocabulary,
    build_vocab,
    link_events,
    load_manifest,
    read_features,
    subsample_frames,
    synth_generate,
    tokenize,
    write_features,
    write_manifest,
)
from .decoding import BeamHypothesis, DecodeConfig, beam_search, caption_day
from .gradcheck import GradCheckConfig, finite_diff_check, finite_diff_report
from .metrics import EvalCorpus, EvalReport, bleu4, cider, evaluate_corpus
from .model import (
    ModelDims,
    ModelParams,
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
from .tensor import Tensor, grad, no_grad, softmax, tensor
from .training import (
    TrainingConfig,
    TrainResult,
    adadelta_step,
    adam_step,
    clip_gradients,
    nll_loss,
    train_loop,
)

__version__ = "0.1.0"
