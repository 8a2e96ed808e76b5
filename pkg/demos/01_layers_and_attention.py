#!/usr/bin/env python3
"""Tour of the building blocks: run a bidirectional encoder over a toy
frame sequence, attend over its annotations, and inspect how the
attention weights shift as the decoder state changes."""

import numpy as np

from tma.layers import AttentionParams, LstmParams, GATES, attend, blstm_encode
from tma.tensor import tensor

rng = np.random.default_rng(0)

# A "video" of 6 frames with 5-dim features: a slow drift plus noise.
frames = np.cumsum(rng.normal(0, 0.3, size=(6, 5)), axis=0)

def lstm_params(in_dim, hidden):
    return LstmParams(
        W={g: tensor(rng.normal(0, 0.4, (hidden, in_dim))) for g in GATES},
        U={g: tensor(rng.normal(0, 0.4, (hidden, hidden))) for g in GATES},
        b={g: tensor(np.zeros(hidden)) for g in GATES},
    )

annotations = blstm_encode(frames, lstm_params(5, 4), lstm_params(5, 4))
print(f"frames {frames.shape} -> annotations {annotations.data.shape}")
print("(each row: forward states | backward states)\n")

attn = AttentionParams(
    w=tensor(rng.normal(0, 0.5, 6)),
    W_a=tensor(rng.normal(0, 0.5, (6, 3))),
    U_a=tensor(rng.normal(0, 0.5, (6, 8))),
    b=tensor(np.zeros(6)),
)

print("attention weights for three different decoder states:")
for k in range(3):
    h = tensor(rng.normal(size=3))
    result = attend(annotations, h, attn)
    weights = " ".join(f"{a:.3f}" for a in result.alpha.data)
    print(f"  state {k}: alpha = [{weights}]  (sum={result.alpha.data.sum():.6f})")

print("\nthe context vector is a convex combination of the annotations:")
result = attend(annotations, tensor(rng.normal(size=3)), attn)
lo, hi = annotations.data.min(axis=0), annotations.data.max(axis=0)
inside = np.all((result.z.data >= lo - 1e-12) & (result.z.data <= hi + 1e-12))
print(f"  z within the annotations' coordinate-wise range: {inside}")
