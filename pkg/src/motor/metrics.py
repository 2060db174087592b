"""Evaluation metrics, implemented directly so every number is auditable.

Text metrics tokenize candidates and references identically: special
tokens (bracketed markers and the triplet separator) are removed, the rest
is lowercased, punctuation-stripped, and whitespace-split. All metrics are
pure functions and permutation-invariant over example order.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict

import numpy as np

_SPECIAL = re.compile(r"\[[a-z]+\]", re.IGNORECASE)
_PUNCT = re.compile(r"[^a-z0-9\s]")


def metric_tokens(text: str) -> list[str]:
    return _PUNCT.sub(" ", _SPECIAL.sub(" ", text).lower()).split()


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


# ---------------------------------------------------------------------------
# retrieval

def recall_at_k(rankings: dict[str, list[str]], ground_truth: dict[str, str],
                ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of queries whose target id appears in the top k."""
    if not rankings:
        raise ValueError("no rankings given")
    out = {}
    for k in ks:
        hits = sum(1 for q, ranked in rankings.items()
                   if ground_truth[q] in ranked[:k])
        out[k] = hits / len(rankings)
    return out


# ---------------------------------------------------------------------------
# generation

def bleu4(candidates: list[str], references: list[list[str]],
          max_n: int = 4) -> float:
    """Corpus-level BLEU with uniform 1/4 weights, clipped counts, and the
    brevity penalty against closest reference lengths. No smoothing: any
    empty n-gram precision gives 0."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    correct = [0] * max_n
    guess = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cw = metric_tokens(cand)
        rws = [metric_tokens(r) for r in refs]
        cand_len += len(cw)
        ref_len += min((abs(len(r) - len(cw)), len(r)) for r in rws)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cw, n)
            max_ref = Counter()
            for rw in rws:
                for g, c in _ngrams(rw, n).items():
                    max_ref[g] = max(max_ref[g], c)
            correct[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            guess[n - 1] += max(0, len(cw) - n + 1)
    if any(g == 0 or c == 0 for c, g in zip(correct, guess)):
        return 0.0
    log_prec = sum(math.log(c / g) for c, g in zip(correct, guess)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_prec)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: list[str], references: list[list[str]],
            beta_sq: float = 1.2) -> float:
    """Mean LCS-based F-score; per candidate the best precision and recall
    over its references are combined with weight beta_sq."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    scores = []
    for cand, refs in zip(candidates, references):
        cw = metric_tokens(cand)
        best_p = best_r = 0.0
        for ref in refs:
            rw = metric_tokens(ref)
            lcs = _lcs_len(cw, rw)
            if cw:
                best_p = max(best_p, lcs / len(cw))
            if rw:
                best_r = max(best_r, lcs / len(rw))
        denom = best_r + beta_sq * best_p
        scores.append((1 + beta_sq) * best_p * best_r / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def cider_d(candidates: list[str], references: list[list[str]],
            sigma: float = 6.0, max_n: int = 4) -> float:
    """Consensus score: TF-IDF n-gram cosine similarity for n=1..4 with a
    gaussian length penalty, averaged over references and n, scaled by 10.

    Document frequency counts the reference sets (one document per
    candidate) in which an n-gram appears.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    n_docs = len(references)
    doc_freq: dict[tuple, int] = defaultdict(int)
    for refs in references:
        grams = set()
        for ref in refs:
            rw = metric_tokens(ref)
            for n in range(1, max_n + 1):
                grams.update(_ngrams(rw, n))
        for g in grams:
            doc_freq[g] += 1
    log_docs = math.log(n_docs)

    def tfidf(words):
        vecs = [{} for _ in range(max_n)]
        norms = [0.0] * max_n
        for n in range(1, max_n + 1):
            for g, c in _ngrams(words, n).items():
                idf = log_docs - math.log(max(1.0, doc_freq[g]))
                vecs[n - 1][g] = c * idf
                norms[n - 1] += (c * idf) ** 2
        return vecs, [math.sqrt(x) for x in norms], len(words)

    scores = []
    for cand, refs in zip(candidates, references):
        cv, cn, clen = tfidf(metric_tokens(cand))
        per_ref = np.zeros(max_n)
        for ref in refs:
            rv, rn, rlen = tfidf(metric_tokens(ref))
            penalty = math.exp(-((clen - rlen) ** 2) / (2 * sigma ** 2))
            for n in range(max_n):
                num = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0)
                          for g, w in cv[n].items())
                if cn[n] > 0 and rn[n] > 0:
                    per_ref[n] += penalty * num / (cn[n] * rn[n])
        scores.append(per_ref.mean() / len(refs))
    return float(10.0 * np.mean(scores))


# ---------------------------------------------------------------------------
# classification

def _auroc_single(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUROC with half credit for ties; nan if one class only."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0   # average rank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class AUROC (nan marks single-class columns, which are excluded
    from the mean) for scores/labels of shape [n_examples, n_classes]."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    per_class = np.array([_auroc_single(scores[:, c], labels[:, c])
                          for c in range(scores.shape[1])])
    valid = ~np.isnan(per_class)
    mean = float(per_class[valid].mean()) if valid.any() else math.nan
    return per_class, mean


def f1_suite(probabilities: np.ndarray, labels: np.ndarray,
             threshold: float = 0.5) -> dict:
    """Per-class, macro, micro, and example-averaged F1 at a threshold.

    Empty/empty cases (0/0) score 0 everywhere, by convention.
    """
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels).astype(bool)
    preds = probs >= threshold

    def f1(tp, fp, fn):
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom > 0 else 0.0

    tp = (preds & labels).sum(axis=0)
    fp = (preds & ~labels).sum(axis=0)
    fn = (~preds & labels).sum(axis=0)
    per_class = np.array([f1(tp[c], fp[c], fn[c]) for c in range(labels.shape[1])])
    micro = f1(tp.sum(), fp.sum(), fn.sum())
    tp_e = (preds & labels).sum(axis=1)
    fp_e = (preds & ~labels).sum(axis=1)
    fn_e = (~preds & labels).sum(axis=1)
    example = float(np.mean([f1(a, b, c) for a, b, c in zip(tp_e, fp_e, fn_e)]))
    return {
        "per_class": per_class,
        "macro_f1": float(per_class.mean()),
        "micro_f1": float(micro),
        "example_f1": example,
    }
