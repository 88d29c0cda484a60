"""Similarity rewards between augmenter samples and their prototypes.

Discrete sequences are scored with a smoothed sentence-level BLEU-4 and
with Levenshtein distance; continuous sequences with negated mean squared
deviation. ``delta_bleu_steps`` decomposes a sequence's BLEU into
per-position increments whose sum telescopes back to the sentence score,
which is the shape reward-to-go policy gradients want.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import UsageError
from .seqmodel import TokenSeq, VecSeq


def _ngrams(ids, n: int) -> Counter:
    return Counter(zip(*(ids[i:] for i in range(n))))


def bleu4(candidate: TokenSeq, reference: TokenSeq) -> float:
    """Sentence BLEU with n-grams up to 4.

    Modified (clipped) precisions, add-1 smoothing on both numerator and
    denominator for n >= 2, and brevity penalty
    exp(min(0, 1 - |ref| / |cand|)). An empty candidate scores 0; a
    candidate sharing no unigram with the reference also scores 0
    (the n=1 precision is unsmoothed).
    """
    if not isinstance(candidate, TokenSeq) or not isinstance(reference, TokenSeq):
        raise UsageError("bleu4 scores TokenSeq pairs")
    cand, ref = candidate.ids, reference.ids
    if not ref:
        raise UsageError("bleu4 reference must be non-empty")
    if not cand:
        return 0.0
    logs = []
    for n in range(1, 5):
        ref_counts = _ngrams(ref, n)
        matched = total = 0
        for gram, count in _ngrams(cand, n).items():
            matched += min(count, ref_counts[gram])
            total += count
        if n >= 2:
            matched += 1
            total += 1
        if matched == 0:  # only reachable at n = 1
            return 0.0
        logs.append(np.log(matched / total))
    bp = np.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return float(bp * np.exp(np.mean(logs)))


def corpus_bleu(candidates, references) -> float:
    """Corpus BLEU-4: clipped n-gram counts pooled over pairs, no smoothing.

    Standard corpus-level form: precisions are ratios of summed counts,
    the brevity penalty compares total lengths, and any empty pooled
    precision yields 0. Scale is 0..1 like `bleu4`.
    """
    candidates, references = list(candidates), list(references)
    if len(candidates) != len(references):
        raise UsageError("corpus_bleu needs aligned candidate/reference lists")
    if not references:
        raise UsageError("corpus_bleu needs at least one pair")
    matched = np.zeros(4)
    total = np.zeros(4)
    cand_len = ref_len = 0
    for candidate, reference in zip(candidates, references):
        if not isinstance(candidate, TokenSeq) or not isinstance(reference, TokenSeq):
            raise UsageError("corpus_bleu scores TokenSeq pairs")
        if not reference.ids:
            raise UsageError("corpus_bleu references must be non-empty")
        cand_len += len(candidate.ids)
        ref_len += len(reference.ids)
        for n in range(1, 5):
            ref_counts = _ngrams(reference.ids, n)
            for gram, count in _ngrams(candidate.ids, n).items():
                matched[n - 1] += min(count, ref_counts[gram])
                total[n - 1] += count
    if np.any(matched == 0.0):
        return 0.0
    logs = np.log(matched / total)
    bp = np.exp(min(0.0, 1.0 - ref_len / cand_len))
    return float(bp * np.exp(np.mean(logs)))


def edit_distance(a: TokenSeq, b: TokenSeq) -> int:
    """Levenshtein distance (unit-cost insert/delete/substitute)."""
    if not isinstance(a, TokenSeq) or not isinstance(b, TokenSeq):
        raise UsageError("edit_distance compares TokenSeq pairs")
    xa, xb = a.ids, b.ids
    prev = list(range(len(xb) + 1))
    for i, ta in enumerate(xa, 1):
        cur = [i]
        for j, tb in enumerate(xb, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ta != tb)))
        prev = cur
    return prev[-1]


def delta_bleu_steps(candidate: TokenSeq, reference: TokenSeq) -> np.ndarray:
    """Per-position BLEU increments b(y_1..t) - b(y_1..t-1).

    One entry per content token; the empty prefix scores 0, so the
    increments sum to the sentence score (up to float cancellation).
    """
    if not isinstance(candidate, TokenSeq) or not candidate.terminated:
        raise UsageError("delta_bleu_steps needs a terminated candidate")
    scores = [
        bleu4(TokenSeq(candidate.ids[:t]), reference)
        for t in range(len(candidate.ids) + 1)
    ]
    return np.diff(scores)


def cont_sim(sample: VecSeq, prototype: VecSeq) -> float:
    """Negated mean squared deviation over all positions and channels."""
    if not isinstance(sample, VecSeq) or not isinstance(prototype, VecSeq):
        raise UsageError("cont_sim compares VecSeq pairs")
    if sample.vectors.shape != prototype.vectors.shape:
        raise UsageError(
            f"shape mismatch: {sample.vectors.shape} vs {prototype.vectors.shape}"
        )
    d = sample.vectors - prototype.vectors
    return float(-np.mean(d * d))
