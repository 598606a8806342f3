"""Topic-transition structure learned by behavioral cloning over expert trajectories.

States are utterance encodings, actions are the center of the *next* utterance's
cluster. The actor regresses actions from states (squared error, constant variance),
and its Gaussian is discretised over the cluster centers to read off transition
probabilities.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import nnls
from torch import nn

from .clustering import TopicClusters, assign_many
from .contrastive import DivergenceError
from .corpus import Corpus
from .encoder import DTYPE, EncoderModel, encode_many
from .tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)


@dataclass
class TrajectorySet:
    states: np.ndarray  # (P, n)
    actions: np.ndarray  # (P, n)
    source_clusters: np.ndarray  # (P,) cluster of the state utterance
    target_clusters: np.ndarray  # (P,) cluster of the next utterance
    conv_index: np.ndarray  # (P,) which conversation each pair came from

    def __len__(self) -> int:
        return len(self.states)


def trajectories_from_labels(
    embeddings: np.ndarray,
    labels: np.ndarray,
    lengths: Sequence[int],
    clusters: TopicClusters,
) -> TrajectorySet:
    """Pair each utterance with the center of its successor's cluster, inside each conversation."""
    states, actions, src, tgt, conv = [], [], [], [], []
    offset = 0
    for ci, m in enumerate(lengths):
        if m < 2:
            logger.warning("conversation %d has a single utterance; it contributes no pairs", ci)
        for t in range(m - 1):
            states.append(embeddings[offset + t])
            actions.append(clusters.centers[labels[offset + t + 1]])
            src.append(labels[offset + t])
            tgt.append(labels[offset + t + 1])
            conv.append(ci)
        offset += m
    n = embeddings.shape[1] if embeddings.ndim == 2 else clusters.centers.shape[1]
    return TrajectorySet(
        np.asarray(states, dtype=np.float64).reshape(-1, n),
        np.asarray(actions, dtype=np.float64).reshape(-1, n),
        np.asarray(src, dtype=np.int64),
        np.asarray(tgt, dtype=np.int64),
        np.asarray(conv, dtype=np.int64),
    )


def corpus_embeddings(corpus: Corpus, encoder: EncoderModel) -> np.ndarray:
    return encode_many([u.tokens for u in corpus.utterances()], encoder)


def build_trajectories(corpus: Corpus, encoder: EncoderModel, clusters: TopicClusters) -> TrajectorySet:
    emb = corpus_embeddings(corpus, encoder)
    labels = assign_many(emb, clusters)
    return trajectories_from_labels(emb, labels, [len(c) for c in corpus.conversations], clusters)


@dataclass
class PolicyConfig:
    hidden: int = 128
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    sigma2: float = 1.0
    train_critic: bool = True
    # cosine decay to zero removes the constant-step jitter that biases per-cluster mean actions
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")


def _mlp(n_in: int, hidden: int, n_out: int, gen: torch.Generator) -> nn.Sequential:
    net = nn.Sequential(
        nn.Linear(n_in, hidden), nn.Tanh(),
        nn.Linear(hidden, hidden), nn.Tanh(),
        nn.Linear(hidden, n_out),
    ).to(DTYPE)
    with torch.no_grad():
        for layer in net:
            if isinstance(layer, nn.Linear):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    return net


class Policy(nn.Module):
    def __init__(self, n: int, config: PolicyConfig):
        super().__init__()
        self.n = n
        self.config = config
        # separate generators: building or training the critic never perturbs the actor's stream
        self.actor = _mlp(n, config.hidden, n, torch.Generator().manual_seed(config.seed))
        self.critic = _mlp(n, config.hidden, 1, torch.Generator().manual_seed(config.seed + 1_000_003))
        self.final_mse: float | None = None

    @property
    def sigma2(self) -> float:
        return self.config.sigma2

    def mean_action(self, h) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.atleast_2d(np.asarray(h, dtype=np.float64)), dtype=DTYPE)
            out = self.actor(x).numpy()
        return out[0] if np.ndim(h) == 1 else out

    def value(self, h) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.atleast_2d(np.asarray(h, dtype=np.float64)), dtype=DTYPE)
            return self.critic(x).numpy()[:, 0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().copy() for name, p in self.named_parameters()}

    def save(self, path: str | Path) -> None:
        save_tensors(path, "policy", {"n": self.n, **asdict(self.config)}, self.tensors(),
                     extra={"final_mse": self.final_mse})

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        env, tensors = load_tensors(path, kind="policy")
        cfg = dict(env["config"])
        n = cfg.pop("n")
        pol = cls(n, PolicyConfig(**cfg))
        with torch.no_grad():
            for name, p in pol.named_parameters():
                p.copy_(torch.as_tensor(tensors[name], dtype=DTYPE))
        pol.final_mse = env.get("extra", {}).get("final_mse")
        return pol


def train_policy(t: TrajectorySet, config: PolicyConfig | None = None) -> Policy:
    """Fit the actor by mini-batch squared-error regression of actions on states.

    The critic, if enabled, regresses the actor's detached per-pair squared error on
    the same schedule; it is a diagnostic and never feeds the actor's gradient.
    """
    config = config or PolicyConfig()
    if len(t) == 0:
        raise ValueError("need at least one (state, action) pair")
    n = t.states.shape[1]
    policy = Policy(n, config)
    x = torch.as_tensor(t.states, dtype=DTYPE)
    y = torch.as_tensor(t.actions, dtype=DTYPE)
    actor_opt = torch.optim.Adam(policy.actor.parameters(), lr=config.learning_rate)
    critic_opt = torch.optim.Adam(policy.critic.parameters(), lr=config.learning_rate)
    shuffle = torch.Generator().manual_seed(config.seed + 17)
    P = len(t)
    schedulers = []
    if config.lr_schedule == "cosine":
        total = max(config.epochs * math.ceil(P / config.batch_size), 1)
        opts = (actor_opt, critic_opt) if config.train_critic else (actor_opt,)
        schedulers = [torch.optim.lr_scheduler.CosineAnnealingLR(o, total) for o in opts]
    for epoch in range(config.epochs):
        perm = torch.randperm(P, generator=shuffle)
        for start in range(0, P, config.batch_size):
            idx = perm[start:start + config.batch_size]
            pred = policy.actor(x[idx])
            sq = ((y[idx] - pred) ** 2).sum(dim=1)
            loss = sq.mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite policy loss at epoch {epoch + 1}")
            actor_opt.zero_grad()
            loss.backward()
            actor_opt.step()
            if config.train_critic:
                value = policy.critic(x[idx])[:, 0]
                critic_loss = ((value - sq.detach()) ** 2).mean()
                critic_opt.zero_grad()
                critic_loss.backward()
                critic_opt.step()
            for sched in schedulers:
                sched.step()
    with torch.no_grad():
        policy.final_mse = float(((y - policy.actor(x)) ** 2).sum(dim=1).mean())
    return policy


def gaussian_over_centers(mu: np.ndarray, centers: np.ndarray, sigma2: float) -> np.ndarray:
    """``q_j ∝ exp(-|c_j - mu|^2 / (2 sigma2))``, normalised; works row-wise for a batch of ``mu``."""
    mu = np.atleast_2d(mu)
    d2 = ((mu[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = -d2 / (2.0 * sigma2)
    logits -= logits.max(axis=1, keepdims=True)
    q = np.exp(logits)
    return q / q.sum(axis=1, keepdims=True)


def policy_distribution(h, p: Policy, clusters: TopicClusters) -> np.ndarray:
    q = gaussian_over_centers(p.mean_action(h), clusters.centers, p.sigma2)
    return q[0] if np.ndim(h) == 1 else q


def nearest_center(a: np.ndarray, centers: np.ndarray) -> int:
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("zero action vector")
    return int(np.argmax(centers @ (a / norm)))


def predict_next_cluster(h, p: Policy, clusters: TopicClusters) -> int:
    """Cluster whose center is cosine-closest to the actor's action (lowest id on ties)."""
    mu = p.mean_action(h)
    if np.linalg.norm(mu) == 0:
        return int(np.argmax(policy_distribution(h, p, clusters)))
    return nearest_center(mu, clusters.centers)


@dataclass
class StructureGraph:
    matrix: np.ndarray  # (k, k) row-stochastic
    provenance: str
    vertex_meta: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "matrix": self.matrix.tolist(),
            "vertex_meta": self.vertex_meta,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StructureGraph":
        return cls(np.asarray(obj["matrix"], dtype=np.float64), obj["provenance"], list(obj.get("vertex_meta", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "StructureGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def _vertex_meta(k: int, labels: np.ndarray, texts: Sequence[str] | None, uniform_rows: Sequence[int]) -> list[dict]:
    meta = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        entry = {"cluster": c, "size": int(len(members)), "uniform_fallback": c in set(uniform_rows)}
        if texts is not None:
            entry["samples"] = [texts[i] for i in members[:3]]
        meta.append(entry)
    return meta


def mixture_weights(mu: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Simplex weights ``w`` minimising ``|mu - w @ centers|``, row-wise.

    The actor is a squared-error regressor, so its output estimates the expected next
    center ``sum_j P(j) c_j``; these weights read that expectation back as probabilities.
    """
    mu = np.atleast_2d(mu)
    k = centers.shape[0]
    # sum-to-one enforced as a heavily weighted extra equation of the NNLS system
    rho = 1e3 * max(1.0, float(np.abs(centers).max()))
    a = np.vstack([centers.T, np.full((1, k), rho)])
    out = np.empty((len(mu), k))
    for i, row in enumerate(mu):
        w, _ = nnls(a, np.concatenate([row, [rho]]))
        total = w.sum()
        out[i] = w / total if total > 0 else np.full(k, 1.0 / k)
    return out


EDGE_ESTIMATORS = ("mixture", "density")


def graph_from_states(
    states: np.ndarray,
    source_clusters: np.ndarray,
    p: Policy,
    clusters: TopicClusters,
    estimator: str = "mixture",
) -> tuple[np.ndarray, list[int]]:
    """Row ``i`` = mean per-state next-topic distribution over states in cluster ``i``.

    ``mixture`` decomposes each actor output into simplex weights over the centers;
    ``density`` uses the Gaussian discretisation of :func:`policy_distribution`.
    """
    k = clusters.k
    if estimator not in EDGE_ESTIMATORS:
        raise ValueError(f"estimator must be one of {EDGE_ESTIMATORS}")
    if not len(states):
        q = np.zeros((0, k))
    elif estimator == "density":
        q = policy_distribution(states, p, clusters)
    else:
        q = mixture_weights(p.mean_action(states), clusters.centers)
    matrix = np.full((k, k), 1.0 / k)
    empty = []
    for i in range(k):
        rows = q[source_clusters == i]
        if len(rows) == 0:
            empty.append(i)
            continue
        row = rows.mean(axis=0)
        matrix[i] = row / row.sum()
    return matrix, empty


def build_graph(
    corpus: Corpus,
    encoder: EncoderModel,
    clusters: TopicClusters,
    p: Policy,
    estimator: str = "mixture",
) -> StructureGraph:
    """Transition graph from the policy evaluated at every expert state that has a successor.

    Clusters without such states get a uniform row, flagged in ``vertex_meta``.
    """
    emb = corpus_embeddings(corpus, encoder)
    labels = assign_many(emb, clusters)
    t = trajectories_from_labels(emb, labels, [len(c) for c in corpus.conversations], clusters)
    matrix, empty = graph_from_states(t.states, t.source_clusters, p, clusters, estimator)
    texts = [u.text for u in corpus.utterances()]
    return StructureGraph(matrix, f"policy:{estimator}", _vertex_meta(clusters.k, labels, texts, empty))


def empirical_transitions(
    corpus_or_lengths,
    assignments,
    k: int | None = None,
    smoothing: bool = False,
) -> StructureGraph:
    """Count-based transition matrix within conversations.

    ``corpus_or_lengths`` is a corpus or a list of conversation lengths matching the
    flat ``assignments``. Rows with no outgoing transitions become uniform (flagged).
    """
    if isinstance(corpus_or_lengths, Corpus):
        lengths = [len(c) for c in corpus_or_lengths.conversations]
        texts = [u.text for u in corpus_or_lengths.utterances()]
    else:
        lengths = list(corpus_or_lengths)
        texts = None
    labels = np.asarray(assignments, dtype=np.int64)
    if sum(lengths) != len(labels):
        raise ValueError("assignments do not cover the corpus")
    k = int(labels.max()) + 1 if k is None else k
    counts = np.zeros((k, k))
    offset = 0
    for m in lengths:
        seq = labels[offset:offset + m]
        np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
        offset += m
    if smoothing:
        counts += 1.0
    out = counts.sum(axis=1)
    empty = [i for i in range(k) if out[i] == 0]
    matrix = np.where(out[:, None] > 0, counts / np.where(out[:, None] > 0, out[:, None], 1.0), 1.0 / k)
    return StructureGraph(matrix, "empirical", _vertex_meta(k, labels, texts, empty))


def export_graph(g: StructureGraph, format: str = "DOT", top_m: int = 3) -> str:
    if format.upper() == "JSON":
        return json.dumps(g.to_json(), sort_keys=True)
    if format.upper() != "DOT":
        raise ValueError(f"unknown export format {format!r}")
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    lines = ["digraph topics {"]
    meta = {m["cluster"]: m for m in g.vertex_meta}
    for i in range(g.k):
        samples = meta.get(i, {}).get("samples", [])[:3]
        label = "\\n".join([f"topic {i}"] + [s.replace("\\", "\\\\").replace('"', '\\"') for s in samples])
        lines.append(f'  t{i} [label="{label}"];')
    for i in range(g.k):
        # stable sort: higher probability first, lower id on ties
        order = sorted(range(g.k), key=lambda j: (-g.matrix[i, j], j))[:top_m]
        for j in order:
            lines.append(f'  t{i} -> t{j} [label="{g.matrix[i, j]:.2f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
