import json

import numpy as np
import pytest

from topicflow.corpus import Conversation, Corpus, Utterance, Vocab, split_words


def make_corpus(convs):
    """Corpus from lists of utterance strings, speakers alternating from A."""
    out = []
    for ci, texts in enumerate(convs):
        utts = [
            Utterance(f"c{ci}", t, "AB"[t % 2], text, tuple(split_words(text)))
            for t, text in enumerate(texts)
        ]
        out.append(Conversation(f"c{ci}", utts))
    return Corpus(out)


@pytest.fixture
def small_corpus():
    c = make_corpus([
        ["hello there", "hi how are you", "fine thanks", "good to hear"],
        ["the cat sat", "the dog ran", "a bird flew"],
        ["hello again", "the cat ran", "fine fine"],
    ])
    vocab = Vocab.build(c, min_freq=1)
    c.attach_vocab(vocab)
    return c, vocab


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(rows, name="corpus.jsonl"):
        path = tmp_path / name
        path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")
        return path
    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
