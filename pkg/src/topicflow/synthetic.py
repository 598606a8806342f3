"""Synthetic topic-Markov dialogue corpora with known ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, _build_conversation

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]
FILLERS = ["i", "you", "the", "really", "think", "so", "and"]


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    chain: np.ndarray  # (k, k)
    initial: np.ndarray  # (k,)
    labels: list[list[int]]
    topic_words: list[list[str]]


def _topic_vocab(k: int, words_per_topic: int, rng: np.random.Generator) -> list[list[str]]:
    seen: set[str] = set(FILLERS)
    vocab = []
    for _ in range(k):
        words = []
        while len(words) < words_per_topic:
            w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(3))
            if w not in seen:
                seen.add(w)
                words.append(w)
        vocab.append(words)
    return vocab


def sample_chain(k: int, rng: np.random.Generator, stickiness: float = 0.5, concentration: float = 1.0) -> np.ndarray:
    """Dirichlet rows mixed with the identity: ``stickiness`` is the extra stay-on-topic mass."""
    rows = rng.dirichlet(np.full(k, concentration), size=k)
    return (1.0 - stickiness) * rows + stickiness * np.eye(k)


def make_synthetic(
    k_topics: int = 4,
    conversations: int = 200,
    seed: int = 0,
    min_turns: int = 6,
    max_turns: int = 10,
    words_per_topic: int = 12,
    words_per_utterance: tuple[int, int] = (4, 7),
    stickiness: float = 0.5,
) -> SyntheticCorpus:
    """Sample a topic chain and emit templated utterances from disjoint topic vocabularies."""
    if k_topics < 2:
        raise ValueError("k_topics must be >= 2")
    if conversations < 1:
        raise ValueError("conversations must be >= 1")
    if not 2 <= min_turns <= max_turns:
        raise ValueError("need 2 <= min_turns <= max_turns")
    if not 0.0 <= stickiness < 1.0:
        raise ValueError("stickiness must be in [0, 1)")
    rng = np.random.default_rng(seed)
    chain = sample_chain(k_topics, rng, stickiness)
    initial = np.full(k_topics, 1.0 / k_topics)
    vocab = _topic_vocab(k_topics, words_per_topic, rng)
    convs, labels = [], []
    lo, hi = words_per_utterance
    for ci in range(conversations):
        m = int(rng.integers(min_turns, max_turns + 1))
        topic = int(rng.choice(k_topics, p=initial))
        seq, texts = [], []
        for _ in range(m):
            seq.append(topic)
            words = list(rng.choice(vocab[topic], size=int(rng.integers(lo, hi + 1))))
            words.insert(int(rng.integers(len(words) + 1)), str(rng.choice(FILLERS)))
            texts.append(" ".join(words) + rng.choice([" .", " ?", " !"]))
            topic = int(rng.choice(k_topics, p=chain[topic]))
        convs.append(_build_conversation(f"syn-{ci:05d}", texts))
        labels.append(seq)
    return SyntheticCorpus(Corpus(convs), chain, initial, labels, vocab)


def write_synthetic(data: SyntheticCorpus, out_path: str | Path) -> dict[str, Path]:
    """Write ``<out>.jsonl`` plus ``<stem>.chain.json`` and ``<stem>.labels.json`` beside it."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.corpus.to_jsonl(out)
    stem = out.with_suffix("")
    chain_path = stem.with_name(stem.name + ".chain.json")
    labels_path = stem.with_name(stem.name + ".labels.json")
    chain_path.write_text(json.dumps({
        "k": int(data.chain.shape[0]),
        "matrix": data.chain.tolist(),
        "initial": data.initial.tolist(),
        "topic_words": data.topic_words,
    }, sort_keys=True))
    labels_path.write_text(json.dumps({
        conv.id: seq for conv, seq in zip(data.corpus.conversations, data.labels)
    }, sort_keys=True))
    return {"corpus": out, "chain": chain_path, "labels": labels_path}
