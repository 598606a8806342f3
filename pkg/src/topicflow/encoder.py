"""Utterance encoder: embeddings, one bidirectional self-attention block, masked mean-pool, projection head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .tensorio import CheckpointError, load_tensors, save_tensors

DTYPE = torch.float64


@dataclass
class EncoderConfig:
    vocab_size: int = 0
    n: int = 64
    use_attention: bool = True
    dropout_rate: float = 0.1
    max_positions: int = 128
    init: str = "uniform"
    projection_init: str = "uniform"  # "identity" zeroes the head's output map -> head is the identity
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("embedding dimension n must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.projection_init not in ("uniform", "identity"):
            raise ValueError(f"unknown projection_init {self.projection_init!r}")


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> torch.Tensor:
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise ValueError("empty token sequence")
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _uniform(gen: torch.Generator, shape, bound: float) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def dropout_mask(shape, rate: float, seed: int) -> torch.Tensor:
    """Inverted-dropout mask drawn from its own seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    keep = (torch.rand(shape, generator=gen, dtype=DTYPE) >= rate).to(DTYPE)
    return keep / (1.0 - rate)


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ValueError("vocab_size must be set")
        self.config = config
        n = config.n
        gen = torch.Generator().manual_seed(config.seed)
        bound = 1.0 / math.sqrt(n)
        self.embed = nn.Parameter(_uniform(gen, (config.vocab_size, n), bound))
        if config.use_attention:
            # small positional init so the shared position signal does not swamp token content
            self.pos = nn.Parameter(_uniform(gen, (config.max_positions, n), 0.1 * bound))
            self.wq = nn.Parameter(_uniform(gen, (n, n), bound))
            self.wk = nn.Parameter(_uniform(gen, (n, n), bound))
            self.wv = nn.Parameter(_uniform(gen, (n, n), bound))
            self.wo = nn.Parameter(_uniform(gen, (n, n), bound))
        self.w1 = nn.Parameter(_uniform(gen, (n, n), bound))
        self.b1 = nn.Parameter(torch.zeros(n, dtype=DTYPE))
        w2 = _uniform(gen, (n, n), bound)
        b2 = torch.zeros(n, dtype=DTYPE)
        if config.projection_init == "identity":
            w2.zero_()
            b2.zero_()
        self.w2 = nn.Parameter(w2)
        self.b2 = nn.Parameter(b2)

    @property
    def n(self) -> int:
        return self.config.n

    def token_states(self, tokens: torch.Tensor, dropout_seeds: Sequence[int | None] | None = None) -> torch.Tensor:
        """Per-token hidden states H, shape (B, L, n). PAD keys are masked out of attention."""
        if tokens.numel() == 0 or tokens.shape[1] == 0:
            raise ValueError("empty token sequence")
        if int(tokens.max()) >= self.config.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id out of range")
        B, L = tokens.shape
        if self.config.use_attention and L > self.config.max_positions:
            raise ValueError(f"sequence length {L} exceeds max_positions {self.config.max_positions}")
        x = self.embed[tokens]
        rate = self.config.dropout_rate
        if dropout_seeds is not None and rate > 0:
            masks = [
                dropout_mask((L, self.n), rate, s) if s is not None else torch.ones(L, self.n, dtype=DTYPE)
                for s in dropout_seeds
            ]
            x = x * torch.stack(masks)
        if not self.config.use_attention:
            return x
        x = x + self.pos[:L]
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        scores = q @ k.transpose(1, 2) / math.sqrt(self.n)
        pad = (tokens == 0).unsqueeze(1)
        scores = scores.masked_fill(pad, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return x + (attn @ v) @ self.wo

    def pool(self, states: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        keep = (tokens != 0).to(DTYPE).unsqueeze(-1)
        return (states * keep).sum(1) / keep.sum(1)

    def head(self, m: torch.Tensor, dropout_seeds: Sequence[int | None] | None = None) -> torch.Tensor:
        hidden = torch.tanh(m @ self.w1.T + self.b1)
        rate = self.config.dropout_rate
        if dropout_seeds is not None and rate > 0:
            # offset keeps the head mask independent of the embedding mask drawn from the same seed
            masks = [
                dropout_mask((self.n,), rate, s + 7919) if s is not None else torch.ones(self.n, dtype=DTYPE)
                for s in dropout_seeds
            ]
            hidden = hidden * torch.stack(masks)
        return m + hidden @ self.w2.T + self.b2

    def forward(self, tokens: torch.Tensor, dropout_seeds: Sequence[int | None] | None = None) -> torch.Tensor:
        states = self.token_states(tokens, dropout_seeds)
        return self.head(self.pool(states, tokens), dropout_seeds)

    def encode_batch(self, seqs: Sequence[Sequence[int]], dropout_seeds: Sequence[int | None] | None = None) -> torch.Tensor:
        return self(pad_batch(seqs), dropout_seeds)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.named_parameters()}


def encode(u: Sequence[int], model: EncoderModel, mode: str = "eval", seed: int | None = None) -> np.ndarray:
    """Encode one token sequence. ``train`` mode applies a dropout mask derived from ``seed``."""
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    if mode == "train" and seed is None:
        raise ValueError("train mode needs a dropout seed")
    seeds = [seed] if mode == "train" else None
    with torch.no_grad():
        return model.encode_batch([u], seeds)[0].numpy()


def encode_many(seqs: Sequence[Sequence[int]], model: EncoderModel, chunk: int = 256) -> np.ndarray:
    """Eval-mode encodings for many sequences, shape (len(seqs), n)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), chunk):
            out.append(model.encode_batch(seqs[i:i + chunk]).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.n))


def encode_gradients(
    batch: Sequence[Sequence[int]],
    model: EncoderModel,
    upstream: np.ndarray | torch.Tensor,
    dropout_seeds: Sequence[int | None] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * h)`` w.r.t. every parameter (vector-Jacobian product)."""
    upstream = torch.as_tensor(np.asarray(upstream), dtype=DTYPE)
    if upstream.shape != (len(batch), model.n):
        raise ValueError(
            f"upstream gradient shape {tuple(upstream.shape)} does not match forward output {(len(batch), model.n)}"
        )
    if dropout_seeds is not None and len(dropout_seeds) != len(batch):
        raise ValueError("one dropout seed per sequence is required")
    h = model.encode_batch(batch, dropout_seeds)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(h, params, grad_outputs=upstream, allow_unused=True)
    return {
        name: (g.numpy().copy() if g is not None else np.zeros(tuple(p.shape)))
        for name, p, g in zip(names, params, grads)
    }


def save_checkpoint(model: EncoderModel, path: str | Path, vocab_hash: str) -> None:
    save_tensors(path, "encoder", asdict(model.config), model.tensors(), vocab_hash=vocab_hash)


def load_checkpoint(path: str | Path, vocab_hash: str) -> EncoderModel:
    env, tensors = load_tensors(path, kind="encoder", vocab_hash=vocab_hash)
    model = EncoderModel(EncoderConfig(**env["config"]))
    names = {name for name, _ in model.named_parameters()}
    if names != set(tensors):
        raise CheckpointError(f"{path}: tensor names {sorted(tensors)} do not match model {sorted(names)}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.as_tensor(tensors[name], dtype=DTYPE))
    return model
