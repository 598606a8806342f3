"""Dialogue corpora: parsing, vocabulary, tokenization, augmentation views and batching."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPEAKER_A, SPEAKER_B = "[A]", "[B]"
SPECIALS = (PAD, UNK, BOS, EOS, SPEAKER_A, SPEAKER_B)

DEFAULT_MAX_LEN = 32
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    """Raised for malformed corpus input."""


class AugmentationConfigError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation marks are kept as tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Utterance:
    conv_id: str
    turn_index: int
    speaker: str
    text: str
    words: tuple[str, ...]
    tokens: tuple[int, ...] = ()


@dataclass
class Conversation:
    id: str
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class Corpus:
    conversations: list[Conversation]
    skipped_short: int = 0
    rejected_empty: int = 0

    def __len__(self) -> int:
        return len(self.conversations)

    def utterances(self) -> Iterator[Utterance]:
        for conv in self.conversations:
            yield from conv.utterances

    @property
    def num_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def attach_vocab(self, vocab: "Vocab", max_len: int = DEFAULT_MAX_LEN) -> "Corpus":
        """Fill in token ids for every utterance (in place) and return self."""
        for utt in self.utterances():
            utt.tokens = tuple(vocab.encode_words(utt.words, max_len))
        return self

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for conv in self.conversations:
                row = {
                    "id": conv.id,
                    "utterances": [{"speaker": u.speaker, "text": u.text} for u in conv.utterances],
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _build_conversation(conv_id: str, texts: Sequence[str]) -> Conversation:
    utts = []
    for i, text in enumerate(texts):
        words = tuple(split_words(text))
        utts.append(Utterance(conv_id, i, "AB"[i % 2], text, words))
    return Conversation(conv_id, utts)


def parse_jsonl(path: str | Path) -> Corpus:
    """Read a JSONL corpus, one conversation object per line.

    Speakers are re-labelled A/B by alternation from the first utterance, whatever
    the file says. Conversations shorter than two utterances are skipped; lines with
    an empty utterance are rejected. Both counts are kept on the returned corpus.
    """
    convs: list[Conversation] = []
    skipped = rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                conv_id = str(obj["id"])
                texts = [str(u["text"]) for u in obj["utterances"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed conversation line ({exc})") from exc
            if any(not split_words(t) for t in texts):
                logger.warning("%s:%d: empty utterance, line rejected", path, lineno)
                rejected += 1
                continue
            if len(texts) < 2:
                skipped += 1
                continue
            convs.append(_build_conversation(conv_id, texts))
    if skipped:
        logger.warning("%s: skipped %d conversation(s) with fewer than 2 utterances", path, skipped)
    return Corpus(convs, skipped_short=skipped, rejected_empty=rejected)


def parse_dailydialog(path: str | Path) -> Corpus:
    """Read DailyDialog-style text: one conversation per line, turns split by ``__eou__``."""
    convs: list[Conversation] = []
    skipped = rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = [p.strip() for p in line.rstrip("\n").split("__eou__")]
            if parts and not parts[-1]:
                parts.pop()
            if any(not split_words(p) for p in parts):
                logger.warning("%s:%d: empty utterance, line rejected", path, lineno)
                rejected += 1
                continue
            if len(parts) < 2:
                skipped += 1
                continue
            convs.append(_build_conversation(f"dd-{lineno}", parts))
    if skipped:
        logger.warning("%s: skipped %d conversation(s) with fewer than 2 utterances", path, skipped)
    return Corpus(convs, skipped_short=skipped, rejected_empty=rejected)


class Vocab:
    def __init__(self, itos: Sequence[str], min_freq: int = 2):
        self.itos = list(itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_freq = min_freq
        if self.itos[:len(SPECIALS)] != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")

    pad_id = 0
    unk_id = 1
    bos_id = 2
    eos_id = 3
    a_id = 4
    b_id = 5
    first_regular_id = len(SPECIALS)

    @classmethod
    def build(cls, corpus: Corpus, min_freq: int = 2) -> "Vocab":
        counts = Counter(w for u in corpus.utterances() for w in u.words)
        kept = sorted((w for w, c in counts.items() if c >= min_freq and w not in SPECIALS),
                      key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + kept, min_freq)

    def __len__(self) -> int:
        return len(self.itos)

    def encode_words(self, words: Sequence[str], max_len: int | None = DEFAULT_MAX_LEN) -> list[int]:
        ids = [self.stoi.get(w, self.unk_id) for w in words]
        return ids[:max_len] if max_len is not None else ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            if skip_special and i < self.first_regular_id and i != self.unk_id:
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def speaker_id(self, speaker: str) -> int:
        return self.a_id if speaker == "A" else self.b_id

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.itos).encode()).hexdigest()

    def to_json(self) -> dict:
        return {"itos": self.itos, "min_freq": self.min_freq}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocab":
        return cls(obj["itos"], obj.get("min_freq", 2))


def tokenize(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return vocab.encode_words(split_words(text), max_len)


def load_lexicon(path: str | Path) -> dict[str, list[str]]:
    """Synonym lexicon TSV: ``word<TAB>syn1,syn2,...``."""
    lex: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            word, _, syns = line.partition("\t")
            lex[word.strip().lower()] = [s.strip().lower() for s in syns.split(",") if s.strip()]
    return lex


class Strategy(str, enum.Enum):
    CONTEXT_INSERT = "context_insert"
    RANDOM_REPLACE = "random_replace"
    SYNONYM_SUB = "synonym_sub"
    DROPOUT = "dropout"


@dataclass(frozen=True)
class AugmentationStrategy:
    kind: Strategy
    rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if not 0.0 <= self.rate <= 1.0:
            raise AugmentationConfigError(f"augmentation rate must be in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class UtteranceView:
    tokens: tuple[int, ...]
    dropout: bool
    strategy: Strategy


def augment(
    u: Utterance,
    s: AugmentationStrategy,
    seed: int,
    vocab: Vocab,
    conversation: Conversation | None = None,
    lexicon: Mapping[str, Sequence[str]] | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> UtteranceView:
    """Produce one augmented view of ``u``; deterministic given ``seed``.

    ContextInsert draws ``floor(rate * len)`` tokens from the parent conversation's
    token multiset and inserts each at a uniformly chosen slot.
    """
    rng = np.random.default_rng(seed)
    toks = list(u.tokens)
    kind = s.kind
    if kind is Strategy.DROPOUT:
        return UtteranceView(tuple(toks), True, kind)
    if kind is Strategy.CONTEXT_INSERT:
        if conversation is None:
            raise AugmentationConfigError("context_insert needs the parent conversation")
        pool = [t for utt in conversation.utterances for t in utt.tokens]
        n_ins = math.floor(s.rate * len(toks))
        for _ in range(n_ins):
            tok = pool[int(rng.integers(len(pool)))]
            pos = int(rng.integers(len(toks) + 1))
            toks.insert(pos, tok)
        toks = toks[:max_len]
    elif kind is Strategy.RANDOM_REPLACE:
        n_rep = math.floor(s.rate * len(toks))
        if n_rep:
            positions = rng.choice(len(toks), size=n_rep, replace=False)
            low = vocab.unk_id if len(vocab) == Vocab.first_regular_id else Vocab.first_regular_id
            for pos in sorted(int(p) for p in positions):
                toks[pos] = int(rng.integers(low, len(vocab)))
    elif kind is Strategy.SYNONYM_SUB:
        if lexicon is None:
            raise AugmentationConfigError("synonym_sub needs a synonym lexicon")
        for i, tok in enumerate(toks):
            syns = [vocab.stoi[w] for w in lexicon.get(vocab.itos[tok], ()) if w in vocab.stoi]
            if not syns:
                continue
            if rng.random() < s.rate:
                toks[i] = syns[int(rng.integers(len(syns)))]
    return UtteranceView(tuple(toks), False, kind)


DEFAULT_STRATEGIES = (
    AugmentationStrategy(Strategy.DROPOUT),
    AugmentationStrategy(Strategy.CONTEXT_INSERT, 0.15),
    AugmentationStrategy(Strategy.RANDOM_REPLACE, 0.15),
)


@dataclass
class Batch:
    utterances: list[Utterance]
    boundary_mask: np.ndarray  # shape (N-1,), True where (i, i+1) crosses a conversation boundary
    paired_views: list[tuple[UtteranceView, UtteranceView]]
    view_seeds: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def tokens(self) -> list[tuple[int, ...]]:
        return [u.tokens for u in self.utterances]


def _seed_seq(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def batch_stream(
    c: Corpus,
    batch_size: int,
    seed: int,
    vocab: Vocab,
    epoch: int = 0,
    strategies: Sequence[AugmentationStrategy] = DEFAULT_STRATEGIES,
    lexicon: Mapping[str, Sequence[str]] | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> Iterator[Batch]:
    """Yield contiguous windows over the (per-epoch shuffled) conversation stream.

    Utterances keep their order inside a conversation. Each utterance gets two views,
    each drawn from ``strategies`` uniformly. The final short batch is kept.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 so that in-batch negatives exist")
    if not strategies:
        raise AugmentationConfigError("at least one augmentation strategy is required")
    rng = _seed_seq(seed, epoch)
    order = rng.permutation(len(c.conversations))
    stream: list[tuple[Utterance, Conversation, int]] = []
    for ci in order:
        conv = c.conversations[int(ci)]
        for u in conv.utterances:
            stream.append((u, conv, int(ci)))

    for start in range(0, len(stream), batch_size):
        window = stream[start:start + batch_size]
        mask = np.array([window[i][2] != window[i + 1][2] for i in range(len(window) - 1)], dtype=bool)
        views = []
        seeds = []
        for u, conv, _ in window:
            pair = []
            pair_seeds = []
            for _ in range(2):
                strat = strategies[int(rng.integers(len(strategies)))]
                vseed = int(rng.integers(2**31 - 1))
                pair.append(augment(u, strat, vseed, vocab, conv, lexicon, max_len))
                pair_seeds.append(vseed)
            views.append((pair[0], pair[1]))
            seeds.append((pair_seeds[0], pair_seeds[1]))
        yield Batch([w[0] for w in window], mask, views, seeds)
