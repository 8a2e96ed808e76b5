"""Corpus-level BLEU-4 and CIDEr for multi-reference caption evaluation.

The corpus maps an event id to (hypothesis tokens, list of reference
token lists). BLEU aggregates clipped n-gram counts over the corpus
before the geometric mean and brevity penalty. CIDEr is the plain
TF-IDF consensus variant: cosine similarity of n-gram vectors averaged
over references and over n = 1..4, scaled to [0, 10], with IDF computed
from this corpus's reference sets (one document per event).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

# event id -> (hypothesis tokens, [reference token lists])
EvalCorpus = dict[str, tuple[list[str], list[list[str]]]]

MAX_N = 4


@dataclass
class EvalReport:
    bleu4: float
    cider: float
    per_sentence_cider: dict[str, float]


def _check_corpus(corpus: EvalCorpus) -> None:
    if not corpus:
        raise ValueError("evaluation corpus is empty")
    for key, (hyp, refs) in corpus.items():
        if not refs:
            raise ValueError(f"entry {key!r} has no references")


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus: EvalCorpus) -> float:
    """Corpus BLEU with n = 1..4.

    Per sentence, each hypothesis n-gram count is clipped by the maximum
    count over references; counts aggregate over the corpus. The brevity
    penalty uses the closest-length reference (ties to the shorter one).
    Returns 0 whenever some order has matches only through clipping to
    zero; orders with no hypothesis n-grams at all are vacuously perfect.
    """
    _check_corpus(corpus)
    matched = [0] * MAX_N
    total = [0] * MAX_N
    hyp_len = 0
    ref_len = 0
    for hyp, refs in corpus.values():
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in refs),
                       key=lambda L: (abs(L - len(hyp)), L))
        for n in range(1, MAX_N + 1):
            counts = ngram_counts(hyp, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for ref in refs:
                for g, c in ngram_counts(ref, n).items():
                    if c > max_ref[g]:
                        max_ref[g] = c
            total[n - 1] += max(0, len(hyp) - n + 1)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(MAX_N):
        if total[n] == 0:
            continue  # no n-grams of this order exist to get wrong
        if matched[n] == 0:
            return 0.0
        log_precision += math.log(matched[n] / total[n]) / MAX_N
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


def _tfidf_vector(counts: Counter, idf: dict, n_corpus: int):
    """(vector, norm) of tf*idf entries; unseen n-grams fall back to df=1."""
    default_idf = math.log(n_corpus)
    vec = {g: c * idf.get(g, default_idf) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def _similarity(hvec, hnorm, hcounts, rvec, rnorm, rcounts) -> float:
    if hnorm == 0.0 and rnorm == 0.0:
        # Degenerate corpora can zero every IDF weight; fall back to the
        # limit convention that identical non-empty count vectors match
        # perfectly (a single-event corpus scoring its own reference).
        return 1.0 if (hcounts and hcounts == rcounts) else 0.0
    if hnorm == 0.0 or rnorm == 0.0:
        return 0.0
    dot = sum(v * rvec.get(g, 0.0) for g, v in hvec.items())
    return dot / (hnorm * rnorm)


def cider(corpus: EvalCorpus) -> tuple[float, dict[str, float]]:
    """Plain CIDEr: (corpus score in [0, 10], per-sentence contributions).

    IDF is log(N / df) where df counts the events whose reference set
    contains the n-gram, floored at one document; an n-gram present in
    every event's references gets IDF 0 and contributes nothing.
    """
    _check_corpus(corpus)
    n_corpus = len(corpus)
    idf: list[dict] = []
    for n in range(1, MAX_N + 1):
        df: Counter = Counter()
        for _, refs in corpus.values():
            present = set()
            for ref in refs:
                present.update(ngram_counts(ref, n))
            df.update(present)
        idf.append({g: math.log(n_corpus / max(1, c)) for g, c in df.items()})

    per_sentence: dict[str, float] = {}
    for key, (hyp, refs) in corpus.items():
        score = 0.0
        for n in range(1, MAX_N + 1):
            hcounts = ngram_counts(hyp, n)
            hvec, hnorm = _tfidf_vector(hcounts, idf[n - 1], n_corpus)
            sim = 0.0
            for ref in refs:
                rcounts = ngram_counts(ref, n)
                rvec, rnorm = _tfidf_vector(rcounts, idf[n - 1], n_corpus)
                sim += _similarity(hvec, hnorm, hcounts, rvec, rnorm, rcounts)
            score += sim / len(refs)
        per_sentence[key] = 10.0 * score / MAX_N
    overall = sum(per_sentence.values()) / n_corpus
    return overall, per_sentence


def evaluate_corpus(corpus: EvalCorpus) -> EvalReport:
    score, per_sentence = cider(corpus)
    return EvalReport(bleu4=bleu4(corpus), cider=score,
                      per_sentence_cider=per_sentence)
