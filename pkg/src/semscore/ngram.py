"""ROUGE-L and BLEU compatible with the Google ``rouge_score`` and sacreBLEU defaults."""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

NGRAM_ORDER = 4

_ROUGE_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def rouge_tokenize(text: str) -> list[str]:
    """Lowercase, turn every non-``[a-z0-9]`` run into a separator, split.

    No stemming and no stopword removal.
    """
    return _ROUGE_NON_ALNUM.sub(" ", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(cur[j - 1] if cur[j - 1] > prev[j] else prev[j])
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class RougeL:
    precision: float
    recall: float
    fmeasure: float


def rouge_l_scores(target: str, candidate: str) -> RougeL:
    t = rouge_tokenize(target)
    c = rouge_tokenize(candidate)
    if not t or not c:
        return RougeL(0.0, 0.0, 0.0)
    lcs = lcs_length(t, c)
    if lcs == 0:
        return RougeL(0.0, 0.0, 0.0)
    p = lcs / len(c)
    r = lcs / len(t)
    return RougeL(p, r, 2 * p * r / (p + r))


def rouge_l(target: str, candidate: str) -> float:
    """ROUGE-L F-measure of ``candidate`` against a single ``target``."""
    return rouge_l_scores(target, candidate).fmeasure


# mteval-v13a punctuation rules, as used by sacreBLEU's default tokenizer
_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(text: str) -> list[str]:
    """Case-preserving 13a tokenization; periods and commas between digits stay attached."""
    norm = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in norm:
        norm = (
            norm.replace("&quot;", '"')
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
        )
    norm = f" {norm} "
    for pattern, repl in _13A_RULES:
        norm = pattern.sub(repl, norm)
    return norm.split()


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuStats:
    correct: tuple[int, ...]
    total: tuple[int, ...]
    hyp_len: int
    ref_len: int


def bleu_stats(target: str, candidate: str) -> BleuStats:
    ref = tokenize_13a(target)
    hyp = tokenize_13a(candidate)
    correct, total = [], []
    for n in range(1, NGRAM_ORDER + 1):
        hyp_ngrams = _ngram_counts(hyp, n)
        ref_ngrams = _ngram_counts(ref, n)
        correct.append(sum(min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items()))
        total.append(max(len(hyp) - n + 1, 0))
    return BleuStats(tuple(correct), tuple(total), len(hyp), len(ref))


def bleu_from_stats(stats: BleuStats, *, effective_order: bool = False) -> float:
    """BLEU on a 0-100 scale with exponential ("exp") smoothing of zero-match orders.

    An order with no candidate n-grams contributes a zero precision, so the
    score is 0 unless ``effective_order`` restricts the geometric mean to the
    orders actually present.
    """
    if stats.hyp_len == 0:
        return 0.0
    precisions: list[float] = []
    smooth = 1.0
    for correct, total in zip(stats.correct, stats.total):
        if total == 0:
            break
        if correct == 0:
            smooth *= 2
            precisions.append(100.0 / (smooth * total))
        else:
            precisions.append(100.0 * correct / total)
    order = len(precisions) if effective_order else NGRAM_ORDER
    if len(precisions) < order:
        return 0.0
    bp = 1.0
    if stats.hyp_len < stats.ref_len:
        bp = math.exp(1 - stats.ref_len / stats.hyp_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions[:order]) / order)
    return min(score, 100.0)


def sentence_bleu(target: str, candidate: str, *, effective_order: bool = False) -> float:
    return bleu_from_stats(bleu_stats(target, candidate), effective_order=effective_order)


def corpus_bleu(targets: Sequence[str], candidates: Sequence[str]) -> float:
    """Pooled-statistics BLEU over parallel lists (not used by default reports)."""
    if len(targets) != len(candidates):
        raise ValueError("targets and candidates differ in length")
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    hyp_len = ref_len = 0
    for t, c in zip(targets, candidates):
        s = bleu_stats(t, c)
        for i in range(NGRAM_ORDER):
            correct[i] += s.correct[i]
            total[i] += s.total[i]
        hyp_len += s.hyp_len
        ref_len += s.ref_len
    return bleu_from_stats(BleuStats(tuple(correct), tuple(total), hyp_len, ref_len))


def mean_metric(scores: Sequence[float]) -> float:
    if not scores:
        raise ValueError("mean of empty score list")
    return math.fsum(scores) / len(scores)
