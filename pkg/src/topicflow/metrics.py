"""Overlap, diversity and topic-hit metrics for generated responses."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import TopicClusters, assign_many, calinski_harabasz, davies_bouldin
from .corpus import Vocab, split_words, tokenize
from .encoder import EncoderModel, encode_many

DEFAULT_PHIS = (1.0, 0.95, 0.90, 0.85, 0.80)
BLEU_EPS = 1e-9

Tokens = Sequence[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")


def bleu_n(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 2) -> float:
    """Corpus BLEU: clipped n-gram precisions (orders 1..max_n), geometric mean, brevity penalty.

    A zero precision is floored at ``BLEU_EPS`` so the geometric mean stays defined.
    """
    _check_aligned(hypotheses, references)
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    log_p = 0.0
    for n in range(1, max_n + 1):
        match = total = 0
        for hyp, ref in zip(hypotheses, references):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            match += sum(min(c, r[g]) for g, c in h.items())
            total += sum(h.values())
        p = match / total if total else 0.0
        log_p += math.log(max(p, BLEU_EPS)) / max_n
    c = sum(len(h) for h in hypotheses)
    r = sum(len(x) for x in references)
    if c == 0:
        return BLEU_EPS
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def distinct_n(hypotheses: Sequence[Tokens], n: int = 1) -> float:
    grams = [g for hyp in hypotheses for g in zip(*(hyp[i:] for i in range(n)))]
    if not hypotheses:
        raise ValueError("empty corpus")
    if not grams:
        warnings.warn(f"no hypothesis has {n} tokens; distinct-{n} is 0", RuntimeWarning)
        return 0.0
    return len(set(grams)) / len(grams)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Tokens, ref: Tokens) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Mean per-pair LCS F1 (balanced)."""
    _check_aligned(hypotheses, references)
    return float(np.mean([rouge_l_pair(h, r) for h, r in zip(hypotheses, references)]))


def _check_labels(labels, k: int):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"unknown cluster label (valid range 0..{k - 1})")
    return labels


def topic_hit(gen_labels, ref_labels, centers: np.ndarray, phi: float = 1.0) -> float:
    """Share of pairs whose cluster centers have cosine similarity >= ``phi``.

    Identical labels always hit, so ``phi=1.0`` is exact label agreement for distinct centers.
    """
    k = len(centers)
    g, r = _check_labels(gen_labels, k), _check_labels(ref_labels, k)
    if len(g) != len(r):
        raise ValueError("label lists are not aligned")
    if not len(g):
        raise ValueError("no labels")
    c = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    sims = np.einsum("ij,ij->i", c[g], c[r])
    hits = (g == r) | (sims >= phi)
    return float(hits.mean())


def f1_scores(gen_labels, ref_labels, k: int) -> tuple[float, float]:
    """(macro-F1 over all k classes with 0/0 := 0, micro-F1)."""
    g, r = _check_labels(gen_labels, k), _check_labels(ref_labels, k)
    if len(g) != len(r):
        raise ValueError("label lists are not aligned")
    f1s = []
    tp_all = fp_all = fn_all = 0
    for c in range(k):
        tp = int(np.sum((g == c) & (r == c)))
        fp = int(np.sum((g == c) & (r != c)))
        fn = int(np.sum((g != c) & (r == c)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    micro_p = tp_all / (tp_all + fp_all) if tp_all + fp_all else 0.0
    micro_r = tp_all / (tp_all + fn_all) if tp_all + fn_all else 0.0
    micro = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return float(np.mean(f1s)), float(micro)


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    distinct1: float
    distinct2: float
    rouge_l: float
    htha: float
    stha: dict[float, float]
    macro_f1: float
    micro_f1: float
    chi: float | None
    dbi: float | None
    examples: int
    clusters: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["stha"] = {f"{phi:.2f}": v for phi, v in self.stha.items()}
        return d

    def table(self) -> str:
        rows = [
            ("BLEU-1", self.bleu1), ("BLEU-2", self.bleu2),
            ("Distinct-1", self.distinct1), ("Distinct-2", self.distinct2),
            ("ROUGE-L", self.rouge_l), ("HTHA", self.htha),
        ]
        rows += [(f"STHA(phi={phi:.2f})", v) for phi, v in self.stha.items()]
        rows += [("macro-F1", self.macro_f1), ("micro-F1", self.micro_f1)]
        if self.chi is not None:
            rows += [("CHI", self.chi), ("DBI", self.dbi)]
        rows += [("examples", self.examples), ("clusters", self.clusters)]
        width = max(len(name) for name, _ in rows)
        return "\n".join(
            f"{name:<{width}}  {value:>12.4f}" if isinstance(value, float) else f"{name:<{width}}  {value:>12d}"
            for name, value in rows
        ) + "\n"


GEN_FIELDS = ("conv_id", "turn_index", "context", "reference", "hypothesis")


def read_generations(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = [f for f in GEN_FIELDS if f not in row]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing field(s) {missing}")
            if not isinstance(row["hypothesis"], str) or not isinstance(row["reference"], str):
                raise ValueError(f"{path}:{lineno}: hypothesis and reference must be strings")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no generations")
    return rows


def pseudo_labels(texts: Sequence[str], vocab: Vocab, encoder: EncoderModel, clusters: TopicClusters) -> np.ndarray:
    # an empty hypothesis is encoded as a lone UNK so every row gets a label
    seqs = [tokenize(t, vocab) or [vocab.unk_id] for t in texts]
    return assign_many(encode_many(seqs, encoder), clusters)


def evaluate_run(
    generations: str | Path | Sequence[dict],
    vocab: Vocab,
    encoder: EncoderModel,
    clusters: TopicClusters,
    phis: Sequence[float] = DEFAULT_PHIS,
    embeddings: np.ndarray | None = None,
) -> EvalReport:
    """All metrics for a generation file; topic labels come from encoder + nearest center."""
    rows = read_generations(generations) if isinstance(generations, (str, Path)) else list(generations)
    hyps = [split_words(r["hypothesis"]) for r in rows]
    refs = [split_words(r["reference"]) for r in rows]
    g = pseudo_labels([r["hypothesis"] for r in rows], vocab, encoder, clusters)
    r = pseudo_labels([r["reference"] for r in rows], vocab, encoder, clusters)
    phis = sorted({float(p) for p in phis} | {1.0}, reverse=True)
    stha = {phi: topic_hit(g, r, clusters.centers, phi) for phi in phis}
    macro, micro = f1_scores(g, r, clusters.k)
    chi = dbi = None
    if embeddings is not None:
        chi = calinski_harabasz(embeddings, clusters.assignments)
        dbi = davies_bouldin(embeddings, clusters.assignments)
    return EvalReport(
        bleu1=bleu_n(hyps, refs, 1),
        bleu2=bleu_n(hyps, refs, 2),
        distinct1=distinct_n(hyps, 1),
        distinct2=distinct_n(hyps, 2),
        rouge_l=rouge_l(hyps, refs),
        htha=stha[1.0],
        stha=stha,
        macro_f1=macro,
        micro_f1=micro,
        chi=chi,
        dbi=dbi,
        examples=len(rows),
        clusters=clusters.k,
        config={"phis": phis, "k": clusters.k},
    )
