"""Beam-search decoding and day-level chained inference.

Hypotheses accumulate raw log-probability (no length normalization);
finished hypotheses retire into a completed pool and the pool's best
hypothesis wins, ties broken by lexicographically smaller token
sequence. Day-level inference feeds each event's generated caption into
the next event's previous-caption stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BOS, EOS, PAD, Day, read_features, subsample_frames, tokenize, Vocabulary
from .layers import DecoderState
from .model import DecoderRun, ModelParams, ModelVariant, PreviousEventInput, make_empty_event
from .tensor import no_grad


@dataclass
class DecodeConfig:
    beam_size: int = 10
    max_length: int = 30
    length_normalization: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.length_normalization:
            raise ValueError("length normalization is not supported")


@dataclass
class BeamHypothesis:
    tokens: list[int]          # includes the final EOS iff finished
    logprob: float
    state: DecoderState
    finished: bool


def beam_search(
    p: ModelParams,
    current_frames,
    prev: PreviousEventInput | None,
    cfg: DecodeConfig,
) -> tuple[list[int], float]:
    """Most likely caption for one event; returns (tokens without EOS,
    accumulated log-probability).

    Standard beam search: every live hypothesis is expanded over the full
    vocabulary, the top ``beam_size`` candidates by accumulated
    log-probability survive, EOS-ended candidates retire into the
    completed pool, and hypotheses reaching ``max_length`` tokens retire
    unfinished. Termination within max_length steps is guaranteed.
    """
    with no_grad():
        run = DecoderRun(p, current_frames, prev)
        live = [BeamHypothesis([], 0.0, run.initial_state, False)]
        completed: list[BeamHypothesis] = []
        for t in range(cfg.max_length):
            pool: list[tuple[float, list[int], DecoderState, int]] = []
            for hyp in live:
                prev_tok = hyp.tokens[-1] if hyp.tokens else BOS
                res = run.step(prev_tok, hyp.state)
                logp = np.log(res.probs.data)
                scores = hyp.logprob + logp
                # Global top-k lives inside the per-hypothesis top-k union;
                # stable order keeps the smaller token on score ties.
                k = min(cfg.beam_size, scores.shape[0])
                best = np.argsort(-scores, kind="stable")[:k]
                for tok in best:
                    pool.append((float(scores[tok]), hyp.tokens + [int(tok)],
                                 res.state, int(tok)))
            pool.sort(key=lambda c: (-c[0], c[1]))
            next_live = []
            for score, seq, state, tok in pool[: cfg.beam_size]:
                if tok == EOS:
                    completed.append(BeamHypothesis(seq, score, state, True))
                elif t == cfg.max_length - 1:
                    completed.append(BeamHypothesis(seq, score, state, False))
                else:
                    next_live.append(BeamHypothesis(seq, score, state, False))
            live = next_live
            if not live:
                break
        best_hyp = min(completed, key=lambda h: (-h.logprob, h.tokens))
        caption = best_hyp.tokens[:-1] if best_hyp.finished else list(best_hyp.tokens)
        return caption, best_hyp.logprob


@dataclass
class EventCaption:
    day_id: str
    event_id: str
    tokens: list[str]
    text: str
    logprob: float


def _default_loader(path):
    return subsample_frames(read_features(path))


def caption_day(
    p: ModelParams,
    day: Day,
    cfg: DecodeConfig,
    vocab: Vocabulary,
    load_frames=None,
    use_generated_prev_caption: bool = True,
) -> list[EventCaption]:
    """Decode a day's events in order.

    The first event conditions on the artificial empty event. For
    caption-bearing variants, later events consume the *generated*
    caption of their predecessor (re-tokenized through the vocabulary,
    UNK allowed), or the predecessor's first reference when
    ``use_generated_prev_caption`` is False (validation-time selection).
    Previous-video streams always chain the predecessor's frames.
    """
    load = load_frames or _default_loader
    variant = p.variant
    results: list[EventCaption] = []
    prev_event = None
    prev_generated: str | None = None
    for ev in day.events:
        current = load(ev.frame_file)
        if variant is ModelVariant.BASELINE:
            prev = None
        elif prev_event is None:
            prev = make_empty_event(variant, p.dims.feature_dim)
        else:
            frames = load(prev_event.frame_file) if variant.uses_prev_video else None
            caption_ids: list[int] | None = None
            if variant.uses_prev_caption:
                source = prev_generated if use_generated_prev_caption else prev_event.captions[0]
                ids = vocab.encode(tokenize(source or ""))
                caption_ids = ids if ids else [PAD]
            prev = PreviousEventInput(frames=frames, caption=caption_ids)
        token_ids, logprob = beam_search(p, current, prev, cfg)
        words = vocab.decode(token_ids)
        text = " ".join(words)
        results.append(EventCaption(day_id=day.id, event_id=ev.id,
                                    tokens=words, text=text, logprob=logprob))
        prev_event = ev
        prev_generated = text
    return results
