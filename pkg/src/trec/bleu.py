"""Sentence and corpus BLEU on token-id sequences, scaled to [0, 1]."""

from __future__ import annotations

import math
from collections import Counter
from typing import Hashable, Sequence


def ngram_counts(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def clipped_matches(candidate: Sequence, reference: Sequence, n: int) -> tuple[int, int]:
    """(clipped n-gram matches, candidate n-gram count)."""
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    matched = sum(min(count, ref[gram]) for gram, count in cand.items())
    return matched, max(len(candidate) - n + 1, 0)


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c >= r else math.exp(1.0 - r / c)


def bleu(candidate: Sequence, reference: Sequence, max_n: int = 4, smoothing: str = "add_one") -> float:
    """Sentence BLEU.

    ``add_one`` adds one to numerator and denominator of the 2..max_n-gram
    precisions; unigram precision stays unsmoothed so a candidate sharing no
    token with the reference scores exactly 0.
    """
    if len(reference) == 0:
        raise ValueError("reference must be nonempty")
    if smoothing not in ("add_one", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    if len(candidate) == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        matched, total = clipped_matches(candidate, reference, n)
        if smoothing == "add_one" and n > 1:
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total)
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_p / max_n)


sentence_bleu = bleu


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Unsmoothed corpus-level BLEU (n-gram statistics pooled over all pairs)."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in count")
    if not references:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            m, t = clipped_matches(cand, ref, n)
            matched[n - 1] += m
            totals[n - 1] += t
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, totals)) / max_n
    return brevity_penalty(c_len, r_len) * math.exp(log_p)
