"""Dialogue-aware contrastive objectives and the encoder training loop.

Three InfoNCE-shaped terms over in-batch negatives:

* absolute correlation - two augmented views of the same utterance are positives;
* strong relativity - an utterance and the one after it;
* weak relativity - an utterance and the one before it, down-weighted by ``lambda1``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import DEFAULT_STRATEGIES, AugmentationStrategy, Batch, Corpus, Vocab, batch_stream
from .encoder import DTYPE, EncoderConfig, EncoderModel

logger = logging.getLogger(__name__)

ABLATIONS = ("none", "no_wr", "no_rc", "no_total")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ContrastiveConfig:
    tau: float = 0.05
    lambda1: float = 0.2
    lambda1_mode: str = "literal"
    epochs: int = 20
    # 256 in the large-scale setting (128 was used under tighter memory); 32 at desk scale
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ablation: str = "none"
    seed: int = 0
    strategies: tuple[AugmentationStrategy, ...] = DEFAULT_STRATEGIES

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.lambda1 <= 1:
            raise ValueError("lambda1 must be in (0, 1]")
        if self.lambda1_mode not in ("literal", "weighted"):
            raise ValueError(f"lambda1_mode must be 'literal' or 'weighted', got {self.lambda1_mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        self.betas = tuple(self.betas)
        self.strategies = tuple(
            s if isinstance(s, AugmentationStrategy) else AugmentationStrategy(**s) for s in self.strategies
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["strategies"] = [{"kind": s.kind.value, "rate": s.rate} for s in self.strategies]
        return d


@dataclass
class LossBreakdown:
    loss_ac: float
    loss_sr: float
    loss_wr: float
    loss_rc: float
    loss_total: float

    def to_json(self) -> dict:
        return asdict(self)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def sim_matrix(h: torch.Tensor) -> torch.Tensor:
    norms = h.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity is undefined for a zero vector")
    z = h / norms
    return z @ z.T


def _anchor_terms(sims: torch.Tensor, anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """``-log softmax`` of the positive among all non-self entries, one value per anchor."""
    logits = sims[anchors] / tau
    self_mask = torch.zeros_like(logits, dtype=torch.bool)
    self_mask[torch.arange(len(anchors)), anchors] = True
    logits = logits.masked_fill(self_mask, float("-inf"))
    pos = logits[torch.arange(len(anchors)), positives]
    return torch.logsumexp(logits, dim=1) - pos


def loss_ac(views_a, views_b, tau: float = 0.05) -> torch.Tensor:
    """Symmetric two-view loss averaged over all 2N anchors.

    ``views_a[i]`` and ``views_b[i]`` are the two encodings of utterance ``i``.
    """
    a, b = _as_tensor(views_a), _as_tensor(views_b)
    N = a.shape[0]
    if N == 0:
        raise ValueError("loss_ac needs at least one pair of views")
    sims = sim_matrix(torch.cat([a, b]))
    anchors = torch.arange(2 * N)
    positives = torch.cat([torch.arange(N, 2 * N), torch.arange(N)])
    return _anchor_terms(sims, anchors, positives, tau).mean()


def _valid_pairs(n: int, boundary_mask) -> torch.Tensor:
    if boundary_mask is None:
        mask = np.zeros(max(n - 1, 0), dtype=bool)
    else:
        mask = np.asarray(boundary_mask, dtype=bool)
    if mask.shape != (max(n - 1, 0),):
        raise ValueError(f"boundary_mask must have length N-1={n - 1}, got {mask.shape}")
    return torch.as_tensor(np.flatnonzero(~mask), dtype=torch.long)


def loss_sr(h, boundary_mask=None, tau: float = 0.05) -> torch.Tensor:
    """Each utterance anchored against the next one, averaged over valid adjacent pairs."""
    h = _as_tensor(h)
    if h.shape[0] < 2:
        raise ValueError("loss_sr needs N >= 2")
    idx = _valid_pairs(h.shape[0], boundary_mask)
    if len(idx) == 0:
        raise ValueError("no valid adjacent pairs in batch")
    return _anchor_terms(sim_matrix(h), idx, idx + 1, tau).mean()


def loss_wr(h, boundary_mask=None, tau: float = 0.05, lambda1: float = 0.2, lambda1_mode: str = "literal") -> torch.Tensor:
    """Each utterance anchored against the previous one.

    ``literal`` keeps ``lambda1`` inside the log, i.e. adds the constant ``-ln lambda1``
    per pair; ``weighted`` scales the whole backward-pair loss by ``lambda1``.
    """
    h = _as_tensor(h)
    if lambda1 <= 0:
        raise ValueError("lambda1 must be > 0")
    if h.shape[0] < 2:
        raise ValueError("loss_wr needs N >= 2")
    idx = _valid_pairs(h.shape[0], boundary_mask)
    if len(idx) == 0:
        raise ValueError("no valid adjacent pairs in batch")
    base = _anchor_terms(sim_matrix(h), idx + 1, idx, tau).mean()
    if lambda1_mode == "literal":
        return base - math.log(lambda1)
    if lambda1_mode == "weighted":
        return lambda1 * base
    raise ValueError(f"unknown lambda1_mode {lambda1_mode!r}")


def total_loss_terms(views_a, views_b, h, boundary_mask, cfg: ContrastiveConfig) -> dict[str, torch.Tensor]:
    """Differentiable loss parts. A batch without valid adjacent pairs contributes no relative term."""
    zero = torch.zeros((), dtype=DTYPE)
    ac = loss_ac(views_a, views_b, cfg.tau)
    n = _as_tensor(h).shape[0]
    has_pairs = n >= 2 and len(_valid_pairs(n, boundary_mask)) > 0
    use_rc = cfg.ablation not in ("no_rc",) and has_pairs
    sr = loss_sr(h, boundary_mask, cfg.tau) if use_rc else zero
    wr = loss_wr(h, boundary_mask, cfg.tau, cfg.lambda1, cfg.lambda1_mode) if use_rc and cfg.ablation != "no_wr" else zero
    rc = sr + wr
    return {"loss_ac": ac, "loss_sr": sr, "loss_wr": wr, "loss_rc": rc, "loss_total": ac + rc}


def _breakdown(terms: Mapping[str, torch.Tensor]) -> LossBreakdown:
    return LossBreakdown(**{k: float(v.detach()) for k, v in terms.items()})


def encode_batch_views(model: EncoderModel, batch: Batch):
    """Encode both views (dropout-flagged views get their own masks) and the plain utterances."""
    views_a = [v[0].tokens for v in batch.paired_views]
    views_b = [v[1].tokens for v in batch.paired_views]
    seeds_a = [s[0] if v[0].dropout else None for v, s in zip(batch.paired_views, batch.view_seeds)]
    seeds_b = [s[1] if v[1].dropout else None for v, s in zip(batch.paired_views, batch.view_seeds)]
    ha = model.encode_batch(views_a, seeds_a)
    hb = model.encode_batch(views_b, seeds_b)
    h = model.encode_batch(batch.tokens)
    return ha, hb, h


def total_loss(batch: Batch, model: EncoderModel, cfg: ContrastiveConfig) -> LossBreakdown:
    with torch.no_grad():
        ha, hb, h = encode_batch_views(model, batch)
        return _breakdown(total_loss_terms(ha, hb, h, batch.boundary_mask, cfg))


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {"epochs": [e.to_json() for e in self.epochs], "steps": self.steps, "wall_time": self.wall_time}


def train_encoder(
    corpus: Corpus,
    vocab: Vocab,
    enc_cfg: EncoderConfig,
    cfg: ContrastiveConfig,
    lexicon=None,
    model: EncoderModel | None = None,
) -> tuple[EncoderModel, TrainHistory]:
    """Optimise the encoder on the summed contrastive loss with Adam.

    ``ablation="no_total"`` skips training and returns the encoder at initialisation.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if model is None:
        model = EncoderModel(enc_cfg)
    history = TrainHistory()
    if cfg.ablation == "no_total":
        return model, history
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(("loss_ac", "loss_sr", "loss_wr", "loss_rc", "loss_total"), 0.0)
        nb = 0
        for bi, batch in enumerate(batch_stream(corpus, cfg.batch_size, cfg.seed, vocab, epoch, cfg.strategies, lexicon)):
            ha, hb, h = encode_batch_views(model, batch)
            terms = total_loss_terms(ha, hb, h, batch.boundary_mask, cfg)
            loss = terms["loss_total"]
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite contrastive loss at epoch {epoch + 1}, batch {bi + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.steps += 1
            for k, v in terms.items():
                sums[k] += float(v.detach())
            nb += 1
        history.epochs.append(LossBreakdown(**{k: v / max(nb, 1) for k, v in sums.items()}))
        logger.info("encoder epoch %d/%d loss_total=%.4f", epoch + 1, cfg.epochs, history.epochs[-1].loss_total)
    history.wall_time = time.perf_counter() - start
    return model, history
