#!/usr/bin/env python3
"""Miniature of the central comparison: on a synthetic corpus whose
captions name the *previous* event's activity, a captioner that sees the
previous event's frames recovers that slot while a current-frames-only
baseline cannot beat chance.

Uses a reduced corpus and budget so it finishes in about a minute; the
full-scale version lives in tests/test_acceptance.py (criterion 4).
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from tma.data import synth_generate, tokenize
from tma.decoding import DecodeConfig, caption_day
from tma.metrics import bleu4
from tma.model import ModelDims, ModelVariant
from tma.training import TrainingConfig, train_loop

root = Path(tempfile.mkdtemp(prefix="tma_demo_"))
manifest = synth_generate(root, seed=0, n_days=12, events_per_day=6,
                          feature_dim=8, n_activities=4)
print(f"synthetic corpus at {root}: 12 days x 6 events, 4 activities")
print("caption shape: 'after <previous activity> did <current activity>'\n")

dims = ModelDims(feature_dim=8, embed_dim=12, encoder_dim=12, decoder_dim=16,
                 align_dim=12, readout_dim=12)

def run(variant):
    cfg = TrainingConfig(optimizer="adam", seed=1, batch_size=16,
                         dropout_p=0.0, noise_sigma=0.0, weight_decay=0.0,
                         max_epochs=60, eval_every_updates=40, patience=4,
                         beam_size=3, max_target_len=8)
    t0 = time.time()
    result = train_loop(manifest, variant, cfg, dims)
    corpus, slot_hits = {}, []
    for day in manifest.split_days("test"):
        caps = caption_day(result.model, day, DecodeConfig(beam_size=10, max_length=8),
                           result.vocab)
        for cap, ev in zip(caps, day.events):
            ref = tokenize(ev.captions[0])
            corpus[ev.id] = (cap.tokens, [ref])
            slot_hits.append(len(cap.tokens) > 1 and cap.tokens[1] == ref[1])
    print(f"  {variant.value:<12} {time.time()-t0:5.0f}s  "
          f"test bleu4={bleu4(corpus):.3f}  'after _' slot accuracy={np.mean(slot_hits):.3f}")
    return result

print("training both variants with the same budget:")
run(ModelVariant.PREV_VIDEO)
run(ModelVariant.BASELINE)
print("\nthe slot is unpredictable from current frames (uniform activity"
      "\nchain), so only the temporally-linked variant can recover it.")
