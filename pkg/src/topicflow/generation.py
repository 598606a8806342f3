"""Toy encoder-decoder response generator with KL topic control, plus decoding strategies."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .clustering import TopicClusters, assign
from .contrastive import DivergenceError
from .corpus import Corpus, Vocab
from .encoder import DTYPE, EncoderConfig, EncoderModel, encode, pad_batch
from .structure import Policy, policy_distribution
from .tensorio import CheckpointError, load_tensors, save_tensors

logger = logging.getLogger(__name__)

DECODING = ("greedy", "beam", "top_k", "top_p")
TEACHER_TOPICS = ("policy_predicted", "ground_truth")


@dataclass
class GenerationConfig:
    lambda2: float = 1.2
    max_context_turns: int = 4
    max_context_tokens: int = 128
    max_response_len: int = 32
    decoding: str = "greedy"
    beam_width: int = 4
    top_k: int = 10
    top_p: float = 0.9
    temperature: float = 1.0
    teacher_topic: str = "policy_predicted"
    n_layers: int = 2
    n_heads: int = 2
    tie_embeddings: bool = True
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.decoding not in DECODING:
            raise ValueError(f"decoding must be one of {DECODING}")
        if self.teacher_topic not in TEACHER_TOPICS:
            raise ValueError(f"teacher_topic must be one of {TEACHER_TOPICS}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _attention(q_in, kv_in, wq, wk, wv, wo, heads: int, blocked: torch.Tensor) -> torch.Tensor:
    """Multi-head scaled dot-product attention; ``blocked`` is (B, Lq, Lk), True = masked."""
    B, Lq, n = q_in.shape
    Lk = kv_in.shape[1]
    d = n // heads
    q = (q_in @ wq).view(B, Lq, heads, d).transpose(1, 2)
    k = (kv_in @ wk).view(B, Lk, heads, d).transpose(1, 2)
    v = (kv_in @ wv).view(B, Lk, heads, d).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    scores = scores.masked_fill(blocked.unsqueeze(1), float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(B, Lq, n) @ wo


def _layer_norm(x, g, b, eps: float = 1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


class DecoderBlock(nn.Module):
    def __init__(self, n: int, heads: int, gen: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(n)

        def mat(rows, cols, b=bound):
            return nn.Parameter((torch.rand(rows, cols, generator=gen, dtype=DTYPE) * 2 - 1) * b)

        self.heads = heads
        self.ln1_g, self.ln1_b = nn.Parameter(torch.ones(n, dtype=DTYPE)), nn.Parameter(torch.zeros(n, dtype=DTYPE))
        self.sa_q, self.sa_k, self.sa_v, self.sa_o = mat(n, n), mat(n, n), mat(n, n), mat(n, n)
        self.ln2_g, self.ln2_b = nn.Parameter(torch.ones(n, dtype=DTYPE)), nn.Parameter(torch.zeros(n, dtype=DTYPE))
        self.ca_q, self.ca_k, self.ca_v, self.ca_o = mat(n, n), mat(n, n), mat(n, n), mat(n, n)
        self.ln3_g, self.ln3_b = nn.Parameter(torch.ones(n, dtype=DTYPE)), nn.Parameter(torch.zeros(n, dtype=DTYPE))
        self.ff1 = mat(n, 2 * n)
        self.ff1_b = nn.Parameter(torch.zeros(2 * n, dtype=DTYPE))
        self.ff2 = mat(2 * n, n, 1.0 / math.sqrt(2 * n))
        self.ff2_b = nn.Parameter(torch.zeros(n, dtype=DTYPE))

    def forward(self, x, ctx, self_blocked, cross_blocked):
        h = _layer_norm(x, self.ln1_g, self.ln1_b)
        x = x + _attention(h, h, self.sa_q, self.sa_k, self.sa_v, self.sa_o, self.heads, self_blocked)
        h = _layer_norm(x, self.ln2_g, self.ln2_b)
        x = x + _attention(h, ctx, self.ca_q, self.ca_k, self.ca_v, self.ca_o, self.heads, cross_blocked)
        h = _layer_norm(x, self.ln3_g, self.ln3_b)
        return x + torch.tanh(h @ self.ff1 + self.ff1_b) @ self.ff2 + self.ff2_b


class GeneratorModel(nn.Module):
    def __init__(self, vocab_size: int, n: int, cfg: GenerationConfig):
        super().__init__()
        if n % cfg.n_heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.n = n
        self.context_encoder = EncoderModel(EncoderConfig(
            vocab_size=vocab_size, n=n, use_attention=True, dropout_rate=0.0,
            max_positions=cfg.max_context_tokens, seed=cfg.seed,
        ))
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        bound = 1.0 / math.sqrt(n)
        self.tok = nn.Parameter((torch.rand(vocab_size, n, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.pos = nn.Parameter((torch.rand(cfg.max_response_len + 1, n, generator=gen, dtype=DTYPE) * 2 - 1) * 0.1 * bound)
        self.blocks = nn.ModuleList(DecoderBlock(n, cfg.n_heads, gen) for _ in range(cfg.n_layers))
        self.lnf_g = nn.Parameter(torch.ones(n, dtype=DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(n, dtype=DTYPE))
        if not cfg.tie_embeddings:
            self.out = nn.Parameter((torch.rand(vocab_size, n, generator=gen, dtype=DTYPE) * 2 - 1) * bound)

    def encode_context(self, ctx: torch.Tensor) -> torch.Tensor:
        return self.context_encoder.token_states(ctx)

    def hidden(self, ctx_states: torch.Tensor, ctx: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Last decoder hidden states for every prefix position, shape (B, L, n)."""
        B, L = prefix.shape
        if L > self.cfg.max_response_len + 1:
            raise ValueError(f"prefix length {L} exceeds max_response_len + 1 = {self.cfg.max_response_len + 1}")
        x = self.tok[prefix] + self.pos[:L]
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        self_blocked = causal.unsqueeze(0).expand(B, L, L)
        cross_blocked = (ctx == 0).unsqueeze(1).expand(B, L, ctx.shape[1])
        for block in self.blocks:
            x = block(x, ctx_states, self_blocked, cross_blocked)
        return _layer_norm(x, self.lnf_g, self.lnf_b)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        w = self.tok if self.cfg.tie_embeddings else self.out
        return hidden @ w.T

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().copy() for name, p in self.named_parameters()}

    def save(self, path: str | Path, vocab_hash: str) -> None:
        save_tensors(path, "generator", {"vocab_size": self.vocab_size, "n": self.n, "cfg": asdict(self.cfg)},
                     self.tensors(), vocab_hash=vocab_hash)

    @classmethod
    def load(cls, path: str | Path, vocab_hash: str) -> "GeneratorModel":
        env, tensors = load_tensors(path, kind="generator", vocab_hash=vocab_hash)
        c = env["config"]
        model = cls(c["vocab_size"], c["n"], GenerationConfig(**c["cfg"]))
        names = {name for name, _ in model.named_parameters()}
        if names != set(tensors):
            raise CheckpointError(f"{path}: generator tensor names do not match")
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.as_tensor(tensors[name], dtype=DTYPE))
        return model


def _as_batch(seq: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor([list(seq)], dtype=torch.long)


def decoder_step(context: Sequence[int], prefix: Sequence[int], model: GeneratorModel, bos_id: int = 2) -> np.ndarray:
    """Next-token distribution given the context tokens and a BOS-initial prefix."""
    if not prefix or prefix[0] != bos_id:
        raise ValueError("prefix must begin with BOS")
    with torch.no_grad():
        ctx = _as_batch(context)
        hid = model.hidden(model.encode_context(ctx), ctx, _as_batch(prefix))
        return torch.softmax(model.logits(hid[0, -1]), dim=-1).numpy()


def step_distributions(context: Sequence[int], prefix: Sequence[int], model: GeneratorModel) -> np.ndarray:
    """Distributions at every prefix position (row i predicts token i+1)."""
    with torch.no_grad():
        ctx = _as_batch(context)
        hid = model.hidden(model.encode_context(ctx), ctx, _as_batch(prefix))
        return torch.softmax(model.logits(hid[0]), dim=-1).numpy()


def kl_control_loss(h_gen, c_target):
    """``KL(softmax(h_gen) || softmax(c_target))``; differentiable when given tensors."""
    as_numpy = not isinstance(h_gen, torch.Tensor)
    h = torch.as_tensor(np.asarray(h_gen, dtype=np.float64), dtype=DTYPE) if as_numpy else h_gen
    c = c_target if isinstance(c_target, torch.Tensor) else torch.as_tensor(np.asarray(c_target, dtype=np.float64), dtype=DTYPE)
    if h.shape[-1] != c.shape[-1]:
        raise ValueError(f"dimension mismatch: {h.shape[-1]} vs {c.shape[-1]}")
    log_p = torch.log_softmax(h, dim=-1)
    log_q = torch.log_softmax(c, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return float(kl) if as_numpy and kl.dim() == 0 else kl


@dataclass
class Example:
    context: tuple[int, ...]
    response: tuple[int, ...]  # ends with EOS
    last_utterance: tuple[int, ...]
    reference: tuple[int, ...]  # response tokens without EOS
    conv_id: str = ""
    turn_index: int = 0
    context_text: str = ""
    reference_text: str = ""


def build_context(utterances, t: int, vocab: Vocab, max_turns: int, max_tokens: int) -> tuple[int, ...]:
    ctx: list[int] = []
    for u in utterances[max(0, t - max_turns):t]:
        ctx.append(vocab.speaker_id(u.speaker))
        ctx.extend(u.tokens)
    return tuple(ctx[-max_tokens:])


def make_examples(corpus: Corpus, vocab: Vocab, cfg: GenerationConfig) -> list[Example]:
    """Every utterance after the first is a target; context is the preceding turns with speaker tags."""
    out = []
    for conv in corpus.conversations:
        utts = conv.utterances
        for t in range(1, len(utts)):
            resp = tuple(utts[t].tokens[: cfg.max_response_len - 1]) + (vocab.eos_id,)
            out.append(Example(
                context=build_context(utts, t, vocab, cfg.max_context_turns, cfg.max_context_tokens),
                response=resp,
                last_utterance=tuple(utts[t - 1].tokens),
                reference=tuple(utts[t].tokens),
                conv_id=conv.id,
                turn_index=t,
                context_text=" ".join(f"[{u.speaker}] {u.text}" for u in utts[max(0, t - cfg.max_context_turns):t]),
                reference_text=utts[t].text,
            ))
    return out


@dataclass
class TopicController:
    """Structure artifacts used to pick the controlling cluster for a response."""
    encoder: EncoderModel
    clusters: TopicClusters
    policy: Policy

    def predicted_cluster(self, last_utterance: Sequence[int]) -> int:
        h = encode(last_utterance, self.encoder)
        return int(np.argmax(policy_distribution(h, self.policy, self.clusters)))

    def reference_cluster(self, tokens: Sequence[int]) -> int:
        return assign(encode(tokens, self.encoder), self.clusters)

    def target(self, ex: Example, teacher_topic: str) -> tuple[int, np.ndarray]:
        if teacher_topic == "policy_predicted":
            j = self.predicted_cluster(ex.last_utterance)
        else:
            j = self.reference_cluster(ex.reference)
        return j, self.clusters.centers[j]


def _forward_batch(model: GeneratorModel, contexts, responses, bos_id: int):
    ctx = pad_batch(contexts)
    targets = pad_batch(responses)
    inputs = torch.cat([torch.full((len(responses), 1), bos_id, dtype=torch.long), targets[:, :-1]], dim=1)
    hid = model.hidden(model.encode_context(ctx), ctx, inputs)
    logp = torch.log_softmax(model.logits(hid), dim=-1)
    mask = (targets != 0).to(DTYPE)
    tok_logp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    nll = -(tok_logp * mask).sum(1)
    h_gen = (hid * mask.unsqueeze(-1)).sum(1) / mask.sum(1, keepdim=True)
    return nll, h_gen


def nll_loss(response: Sequence[int], model: GeneratorModel, context: Sequence[int], bos_id: int = 2):
    """Teacher-forced ``-sum log P(t_i | t_<i, context)``; ``response`` should end with EOS."""
    if max(response) >= model.vocab_size or min(response) < 0:
        raise ValueError("token id out of range")
    nll, _ = _forward_batch(model, [context], [response], bos_id)
    return nll[0]


def gen_loss_terms(model, contexts, responses, targets, lambda2: float, bos_id: int = 2):
    """Per-batch mean of NLL + lambda2 * KL; returns (loss, mean nll, mean kl) tensors."""
    nll, h_gen = _forward_batch(model, contexts, responses, bos_id)
    if lambda2 == 0:
        zero = torch.zeros((), dtype=DTYPE)
        return nll.mean(), nll.mean(), zero
    kl = kl_control_loss(h_gen, targets)
    return (nll + lambda2 * kl).mean(), nll.mean(), kl.mean()


def gen_loss(
    ex: Example,
    model: GeneratorModel,
    controller: TopicController | None,
    cfg: GenerationConfig,
    bos_id: int = 2,
) -> tuple[torch.Tensor, dict]:
    """``NLL + lambda2 * KL`` for one example, with the controlling cluster in the breakdown."""
    if cfg.lambda2 == 0:
        nll = nll_loss(ex.response, model, ex.context, bos_id)
        return nll, {"nll": float(nll.detach()), "kl": 0.0, "cluster": None}
    if controller is None:
        raise ValueError("structure artifacts are required when lambda2 > 0")
    cluster, center = controller.target(ex, cfg.teacher_topic)
    target = torch.as_tensor(center, dtype=DTYPE).unsqueeze(0)
    loss, nll, kl = gen_loss_terms(model, [ex.context], [ex.response], target, cfg.lambda2, bos_id)
    return loss, {"nll": float(nll.detach()), "kl": float(kl.detach()), "cluster": cluster}


@dataclass
class GenHistory:
    nll: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    steps: int = 0
    pairs: int = 0
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def train_generator(
    corpus: Corpus,
    vocab: Vocab,
    controller: TopicController | None,
    cfg: GenerationConfig,
    n: int | None = None,
) -> tuple[GeneratorModel, GenHistory]:
    """Teacher-forced training on every (context, response) pair in the corpus."""
    if cfg.lambda2 > 0 and controller is None:
        raise ValueError("structure artifacts are required when lambda2 > 0")
    if n is None:
        if controller is None:
            raise ValueError("hidden size n is required without structure artifacts")
        n = controller.encoder.n
    if controller is not None and controller.encoder.n != n:
        raise ValueError("generator hidden size must equal the structure encoder size")
    examples = make_examples(corpus, vocab, cfg)
    model = GeneratorModel(len(vocab), n, cfg)
    history = GenHistory(pairs=len(examples))
    if not examples:
        return model, history
    if controller is not None:
        targets = np.stack([controller.target(ex, cfg.teacher_topic)[1] for ex in examples])
    else:
        targets = np.zeros((len(examples), n))
    targets_t = torch.as_tensor(targets, dtype=DTYPE)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffle = torch.Generator().manual_seed(cfg.seed + 29)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(examples), generator=shuffle).tolist()
        nll_sum = kl_sum = 0.0
        nb = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, nll, kl = gen_loss_terms(
                model, [examples[i].context for i in idx], [examples[i].response for i in idx],
                targets_t[idx], cfg.lambda2, vocab.bos_id,
            )
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite generator loss at epoch {epoch + 1}, batch {nb + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.steps += 1
            nll_sum += float(nll.detach())
            kl_sum += float(kl.detach())
            nb += 1
        history.nll.append(nll_sum / nb)
        history.kl.append(kl_sum / nb)
        logger.info("generator epoch %d/%d nll=%.4f kl=%.4f", epoch + 1, cfg.epochs, history.nll[-1], history.kl[-1])
    history.wall_time = time.perf_counter() - start
    return model, history


# decoding

def filter_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-probs, kind="stable")
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep]
    return out / out.sum()


def filter_top_p(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest high-probability prefix whose mass reaches ``p``."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p - 1e-12)) + 1
    keep = order[: min(cut, len(order))]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def beam_search(
    step_fn: Callable[[Sequence[int]], np.ndarray],
    width: int,
    max_len: int,
    bos_id: int,
    eos_id: int,
) -> list[int]:
    """Highest log-probability sequence under ``step_fn`` found with a beam of ``width``.

    Returns generated tokens without BOS/EOS. No length normalisation.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    alive: list[tuple[float, list[int]]] = [(0.0, [bos_id])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        cands = []
        for score, seq in alive:
            logp = np.log(np.maximum(step_fn(seq), 1e-300))
            for tok in range(len(logp)):
                cands.append((score + float(logp[tok]), seq + [tok]))
        cands.sort(key=lambda c: -c[0])
        alive = []
        for score, seq in cands[:width]:
            (finished if seq[-1] == eos_id else alive).append((score, seq))
        if not alive:
            break
        if finished and max(f[0] for f in finished) >= alive[0][0]:
            break
    pool = finished + alive
    best = max(pool, key=lambda c: c[0])[1]
    return [t for t in best[1:] if t != eos_id]


def decode(
    context: Sequence[int],
    model: GeneratorModel,
    cfg: GenerationConfig,
    seed: int = 0,
    bos_id: int = 2,
    eos_id: int = 3,
) -> list[int]:
    """Generate a response; greedy and beam are deterministic, sampling is seeded."""
    max_len = cfg.max_response_len
    if cfg.decoding == "beam":
        return beam_search(lambda prefix: decoder_step(context, prefix, model, bos_id), cfg.beam_width,
                           max_len, bos_id, eos_id)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        ctx = _as_batch(context)
        states = model.encode_context(ctx)
        prefix = [bos_id]
        for _ in range(max_len):
            hid = model.hidden(states, ctx, _as_batch(prefix))
            logits = model.logits(hid[0, -1]).numpy()
            if cfg.decoding == "greedy":
                tok = int(np.argmax(logits))
            else:
                z = logits / cfg.temperature
                probs = np.exp(z - z.max())
                probs /= probs.sum()
                probs = filter_top_k(probs, cfg.top_k) if cfg.decoding == "top_k" else filter_top_p(probs, cfg.top_p)
                tok = int(rng.choice(len(probs), p=probs))
            if tok == eos_id:
                break
            prefix.append(tok)
    return prefix[1:]
