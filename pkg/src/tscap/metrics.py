"""Corpus text-overlap metrics over multi-reference captions.

All three metrics take plain strings and tokenize them the same way the rest
of the pipeline does (lowercase, punctuation split off). Conventions, fixed
here and asserted by the worked-example tests:

* BLEU-n: corpus-level modified n-gram precision, geometric mean over orders
  1..n, closest-reference-length brevity penalty; an order with zero matches
  contributes the floor 1e-9 instead of raising.
* ROUGE-L: per-candidate max-over-references LCS F-measure with beta = 1,
  averaged over the corpus.
* CIDEr: tf-idf n-gram cosine (orders 1..4, idf = ln(N/df) over reference
  sets), averaged over references then orders, scaled by 10.
"""

from __future__ import annotations

from collections import Counter

import math

from .data import tokenize_text

BLEU_FLOOR = 1e-9


def _tokens(text: str) -> list[str]:
    return tokenize_text(text) if text and text.strip() else []


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, n=4) -> float:
    """Corpus BLEU-n for one candidate and >= 1 references per instance."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    correct = [0] * n
    guess = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        ctoks = _tokens(cand)
        rtoks = [_tokens(r) for r in refs]
        cand_len += len(ctoks)
        ref_len += min((abs(len(r) - len(ctoks)), len(r)) for r in rtoks)[1]
        for k in range(1, n + 1):
            ccounts = _ngrams(ctoks, k)
            maxref: Counter = Counter()
            for r in rtoks:
                for gram, cnt in _ngrams(r, k).items():
                    maxref[gram] = max(maxref[gram], cnt)
            guess[k - 1] += max(len(ctoks) - k + 1, 0)
            correct[k - 1] += sum(min(cnt, maxref[gram]) for gram, cnt in ccounts.items())
    log_prec = 0.0
    for k in range(n):
        if guess[k] == 0 or correct[k] == 0:
            log_prec += math.log(BLEU_FLOOR)
        else:
            log_prec += math.log(correct[k] / guess[k])
    geo = math.exp(log_prec / n)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * geo


def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references) -> float:
    """Mean over candidates of the best LCS F1 against any reference."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    total = 0.0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        ctoks = _tokens(cand)
        best = 0.0
        for ref in refs:
            rtoks = _tokens(ref)
            lcs = _lcs_len(ctoks, rtoks)
            if lcs == 0 or not ctoks or not rtoks:
                continue
            prec = lcs / len(ctoks)
            rec = lcs / len(rtoks)
            best = max(best, 2.0 * prec * rec / (prec + rec))
        total += best
    return total / len(candidates) if candidates else 0.0


def cider(candidates, references, n=4) -> float:
    """Corpus CIDEr with the conventional x10 scaling (so values in [0, 10])."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    num_inst = len(candidates)
    if num_inst == 0:
        return 0.0
    doc_freq: Counter = Counter()
    ref_grams = []
    for refs in references:
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        per_ref = [
            [_ngrams(_tokens(r), k) for k in range(1, n + 1)] for r in refs
        ]
        ref_grams.append(per_ref)
        seen = set()
        for grams_by_order in per_ref:
            for grams in grams_by_order:
                seen.update(grams)
        doc_freq.update(seen)

    def tfidf(grams: Counter):
        vec = {g: cnt * math.log(num_inst / max(1.0, doc_freq[g])) for g, cnt in grams.items()}
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    total = 0.0
    for cand, per_ref in zip(candidates, ref_grams):
        ctoks = _tokens(cand)
        cand_vecs = [tfidf(_ngrams(ctoks, k)) for k in range(1, n + 1)]
        score = 0.0
        for grams_by_order in per_ref:
            for k in range(n):
                cvec, cnorm = cand_vecs[k]
                rvec, rnorm = tfidf(grams_by_order[k])
                if cnorm == 0.0 or rnorm == 0.0:
                    continue
                dot = sum(v * rvec[g] for g, v in cvec.items() if g in rvec)
                score += dot / (cnorm * rnorm)
        total += 10.0 * score / (n * len(per_ref))
    return total / num_inst
