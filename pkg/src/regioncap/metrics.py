"""Caption evaluation metrics and the grounding accuracy score.

All text metrics share one tokenization (lowercase, punctuation and
whitespace as separators) so scores cannot drift apart across metrics.
Parameter conventions, fixed here because the literature leaves them
implicit: ROUGE-L uses beta = 1.2; METEOR uses alpha = 0.9, beta = 3.0,
gamma = 0.5 with exact-then-stem matching over a monotone alignment
(maximum matches, ties broken by fewest chunks); CIDEr is the CIDEr-D
variant with n = 1..4, a sigma = 6 Gaussian length penalty, a x10 scale,
and smoothed IDF ``ln((1+N)/(1+df)) + 1`` so a candidate identical to its
sole reference scores the maximum even in a one-document corpus.

BERTScore needs a pretrained token embedder, which is out of scope; it is
a plug-in seam: pass any ``embedder(tokens) -> (len(tokens), dim)`` array
function, or get a skipped report.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box, iou_boxes
from .text import stem, tokenize

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
CIDER_SCALE = 10.0


class EmptyEvalError(ValueError):
    """No evaluation pairs were supplied."""


class AlignmentError(ValueError):
    """Predicted and gold sequences are not index-aligned."""


@dataclass(frozen=True)
class EvalPair:
    """One candidate caption with its (non-empty) reference set."""

    id: str
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"pair {self.id!r} has no references")
        object.__setattr__(self, "references", tuple(self.references))


@dataclass
class MetricReport:
    """Named corpus score plus the per-sample breakdown."""

    metric: str
    corpus_score: float | None
    per_sample: list[float]
    count: int
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "corpus_score": self.corpus_score,
            "per_sample": self.per_sample,
            "count": self.count,
            "note": self.note,
        }


def _require_pairs(pairs) -> list[EvalPair]:
    pairs = list(pairs)
    if not pairs:
        raise EmptyEvalError("no evaluation pairs")
    return pairs


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# BLEU-4 ---------------------------------------------------------------

def _bleu_stats(cand: list[str], refs: list[list[str]]):
    """Per-pair clipped match / total counts for n = 1..4 plus the
    effective reference length (closest to the candidate, ties -> shorter)."""
    matches = np.zeros(4, dtype=np.int64)
    totals = np.zeros(4, dtype=np.int64)
    for n in range(1, 5):
        c_counts = ngram_counts(cand, n)
        totals[n - 1] = max(0, len(cand) - n + 1)
        if not c_counts:
            continue
        max_ref = Counter()
        for r in refs:
            for gram, cnt in ngram_counts(r, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        matches[n - 1] = sum(min(cnt, max_ref[g]) for g, cnt in c_counts.items())
    ref_len = min(
        (abs(len(r) - len(cand)), len(r)) for r in refs
    )[1]
    return matches, totals, ref_len, len(cand)


def _bleu_from_stats(matches, totals, ref_len, cand_len) -> float:
    if cand_len == 0:
        return 0.0
    precisions = []
    for m, t in zip(matches, totals):
        if t == 0 or m == 0:
            return 0.0  # no smoothing: any empty order zeroes the geometric mean
        precisions.append(m / t)
    geo = math.exp(sum(math.log(p) for p in precisions) / 4.0)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * geo


def bleu4(pairs) -> MetricReport:
    """Corpus-level BLEU-4: clipped n-gram precisions pooled over the corpus,
    geometric mean, multiplicative brevity penalty."""
    pairs = _require_pairs(pairs)
    agg_m = np.zeros(4, dtype=np.int64)
    agg_t = np.zeros(4, dtype=np.int64)
    agg_r = 0
    agg_c = 0
    per_sample = []
    for p in pairs:
        cand = tokenize(p.candidate)
        refs = [tokenize(r) for r in p.references]
        m, t, r, c = _bleu_stats(cand, refs)
        agg_m += m
        agg_t += t
        agg_r += r
        agg_c += c
        per_sample.append(_bleu_from_stats(m, t, r, c))
    corpus = _bleu_from_stats(agg_m, agg_t, agg_r, agg_c)
    return MetricReport("bleu4", corpus, per_sample, len(pairs))


# ROUGE-L --------------------------------------------------------------

def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs) -> MetricReport:
    """LCS F-measure with beta = 1.2; maximum over references; corpus score
    is the per-sample mean."""
    pairs = _require_pairs(pairs)
    per_sample = []
    b2 = ROUGE_BETA * ROUGE_BETA
    for p in pairs:
        cand = tokenize(p.candidate)
        best = 0.0
        for ref_text in p.references:
            ref = tokenize(ref_text)
            ell = lcs_length(cand, ref)
            if ell == 0 or not cand or not ref:
                continue
            prec = ell / len(cand)
            rec = ell / len(ref)
            best = max(best, (1 + b2) * prec * rec / (rec + b2 * prec))
        per_sample.append(best)
    return MetricReport("rouge_l", float(np.mean(per_sample)), per_sample, len(pairs))


# METEOR ---------------------------------------------------------------

def meteor_alignment(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """(matches, chunks) of the best monotone alignment.

    Tokens match when their surface forms or Porter stems agree (an exact
    match is a stem match, so a single relation covers both stages). Among
    monotone alignments the one with maximum matches wins; ties prefer the
    fewest chunks, where a chunk is a run of matches contiguous in both
    sequences.
    """
    n, m = len(cand), len(ref)
    cs = [stem(w) for w in cand]
    rs = [stem(w) for w in ref]
    neg = (-1, 0)
    # state: best (matches, -chunks) after consuming i and j tokens,
    # split by whether (i-1, j-1) is a matched pair.
    best = [[[neg, neg] for _ in range(m + 1)] for _ in range(n + 1)]
    best[0][0][0] = (0, 0)
    for i in range(n + 1):
        for j in range(m + 1):
            for diag in (0, 1):
                cur = best[i][j][diag]
                if cur == neg:
                    continue
                matches, negchunks = cur
                if i < n and best[i + 1][j][0] < cur:
                    best[i + 1][j][0] = cur
                if j < m and best[i][j + 1][0] < cur:
                    best[i][j + 1][0] = cur
                if i < n and j < m and cs[i] == rs[j]:
                    nc = negchunks if diag else negchunks - 1
                    cand_state = (matches + 1, nc)
                    if best[i + 1][j + 1][1] < cand_state:
                        best[i + 1][j + 1][1] = cand_state
    final = max(best[n][m])
    return final[0], -final[1]


def meteor_score_pair(cand: list[str], ref: list[str]) -> float:
    matches, chunks = meteor_alignment(cand, ref)
    if matches == 0 or not cand or not ref:
        return 0.0
    prec = matches / len(cand)
    rec = matches / len(ref)
    f_mean = prec * rec / (METEOR_ALPHA * prec + (1 - METEOR_ALPHA) * rec)
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def meteor(pairs) -> MetricReport:
    """Exact + Porter-stem matching, fragmentation penalty; maximum over
    references; corpus score is the per-sample mean."""
    pairs = _require_pairs(pairs)
    per_sample = []
    for p in pairs:
        cand = tokenize(p.candidate)
        best = max(meteor_score_pair(cand, tokenize(r)) for r in p.references)
        per_sample.append(best)
    return MetricReport("meteor", float(np.mean(per_sample)), per_sample, len(pairs))


# CIDEr-D --------------------------------------------------------------

@dataclass
class CorpusDF:
    """Document frequencies over a reference corpus: one document is one
    sample's reference set."""

    num_docs: int
    df: dict[tuple, int]


def build_corpus_df(reference_sets) -> CorpusDF:
    df: dict[tuple, int] = {}
    num_docs = 0
    for refs in reference_sets:
        num_docs += 1
        grams = set()
        for r in refs:
            toks = tokenize(r)
            for n in range(1, CIDER_MAX_N + 1):
                grams.update(ngram_counts(toks, n).keys())
        for g in grams:
            df[g] = df.get(g, 0) + 1
    return CorpusDF(num_docs, df)


def _idf(corpus: CorpusDF, gram: tuple) -> float:
    return math.log((1 + corpus.num_docs) / (1 + corpus.df.get(gram, 0))) + 1.0


def _tfidf_vec(tokens: list[str], n: int, corpus: CorpusDF) -> dict[tuple, float]:
    return {
        g: cnt * _idf(corpus, g) for g, cnt in ngram_counts(tokens, n).items()
    }


def _clipped_cosine(vc: dict, vr: dict) -> float:
    nc = math.sqrt(sum(v * v for v in vc.values()))
    nr = math.sqrt(sum(v * v for v in vr.values()))
    if nc == 0.0 or nr == 0.0:
        return 0.0
    num = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
    return num / (nc * nr)


def cider(pairs, corpus_df: CorpusDF | None = None) -> MetricReport:
    """CIDEr-D: clipped TF-IDF n-gram cosine (n = 1..4) with a Gaussian
    length penalty, averaged over references and n, scaled by 10."""
    pairs = _require_pairs(pairs)
    if corpus_df is None:
        corpus_df = build_corpus_df(p.references for p in pairs)
    if corpus_df.num_docs == 0:
        raise ConfigError("corpus document frequencies are empty")
    per_sample = []
    for p in pairs:
        cand = tokenize(p.candidate)
        cand_vecs = [_tfidf_vec(cand, n, corpus_df) for n in range(1, CIDER_MAX_N + 1)]
        acc = np.zeros(CIDER_MAX_N)
        for ref_text in p.references:
            ref = tokenize(ref_text)
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta * delta) / (2 * CIDER_SIGMA**2))
            for n in range(1, CIDER_MAX_N + 1):
                ref_vec = _tfidf_vec(ref, n, corpus_df)
                acc[n - 1] += penalty * _clipped_cosine(cand_vecs[n - 1], ref_vec)
        score = CIDER_SCALE * float(np.mean(acc / len(p.references)))
        per_sample.append(score)
    return MetricReport("cider", float(np.mean(per_sample)), per_sample, len(pairs))


# BERTScore (plug-in embedder) ----------------------------------------

def bert_score(pairs, embedder=None) -> MetricReport:
    """Greedy cosine-matching F1 over contextual token embeddings.

    ``embedder`` maps a token list to a (len, dim) array; without one, the
    metric is reported as skipped rather than silently zero.
    """
    pairs = _require_pairs(pairs)
    if embedder is None:
        return MetricReport("bert_score", None, [], 0,
                            note="skipped: no token embedder available")
    per_sample = []
    for p in pairs:
        cand = tokenize(p.candidate)
        best = 0.0
        for ref_text in p.references:
            ref = tokenize(ref_text)
            if not cand or not ref:
                continue
            ec = np.asarray(embedder(cand), dtype=np.float64)
            er = np.asarray(embedder(ref), dtype=np.float64)
            ec = ec / np.maximum(np.linalg.norm(ec, axis=1, keepdims=True), 1e-12)
            er = er / np.maximum(np.linalg.norm(er, axis=1, keepdims=True), 1e-12)
            sim = ec @ er.T  # (cand, ref)
            precision = float(sim.max(axis=1).mean())
            recall = float(sim.max(axis=0).mean())
            if precision + recall > 0:
                best = max(best, 2 * precision * recall / (precision + recall))
        per_sample.append(best)
    return MetricReport("bert_score", float(np.mean(per_sample)), per_sample, len(pairs))


# grounding ------------------------------------------------------------

def grounding_acc(pred: list[Box], gold: list[Box], threshold: float = 0.5) -> MetricReport:
    """Fraction of index-aligned box pairs with IoU >= threshold."""
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predictions vs {len(gold)} gold boxes")
    if not pred:
        raise EmptyEvalError("no box pairs")
    hits = [1.0 if iou_boxes(a, b) >= threshold else 0.0 for a, b in zip(pred, gold)]
    return MetricReport(f"grounding_acc@{threshold:g}", float(np.mean(hits)),
                        hits, len(pred))
