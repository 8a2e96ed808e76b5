#!/usr/bin/env python3
"""What BLEU-4 and CIDEr reward and punish, on small worked corpora."""

import math

from tma.metrics import bleu4, cider

def show(title, corpus):
    b = bleu4(corpus)
    c, per = cider(corpus)
    print(f"{title}\n  bleu4={b:.4f} cider={c:.4f} per-sentence={ {k: round(v, 3) for k, v in per.items()} }\n")

show("perfect match", {
    "e0": ("i walked on the street".split(), ["i walked on the street".split()]),
    "e1": ("i went to my office".split(), ["i went to my office".split()]),
})

show("one wrong word breaks higher-order n-grams", {
    "e0": ("i walked on the road".split(), ["i walked on the street".split()]),
    "e1": ("i went to my office".split(), ["i went to my office".split()]),
})

show("short hypothesis pays the brevity penalty (exp(1 - r/c))", {
    "e0": ("a b c d e".split(), ["a b c d e f".split()]),
})
print(f"  (hand value: exp(1 - 6/5) = {math.exp(1 - 6 / 5):.4f})\n")

show("CIDEr down-weights n-grams every event's references share", {
    "e0": (["the", "x"], [["the", "a"]]),
    "e1": (["the", "y"], [["the", "b"]]),
    "e2": (["the", "z"], [["the", "c"]]),
})

show("empty hypotheses are scored, not crashed", {
    "e0": ([], ["something happened".split()]),
    "e1": ("something happened".split(), ["something happened".split()]),
})
