"""Spherical k-means topic clusters and internal cluster-quality indices."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class TopicClusters:
    k: int
    centers: np.ndarray  # (k, n), unit rows
    assignments: np.ndarray  # (u,)
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)  # objective after each iteration

    def to_json(self, keys=None, metrics=None) -> dict:
        out = {
            "k": self.k,
            "centers": self.centers.tolist(),
            "inertia": self.inertia,
            "n_iter": self.n_iter,
            "history": self.history,
        }
        if keys is not None:
            out["assignments"] = [
                {"conv_id": cid, "turn_index": ti, "cluster": int(a)} for (cid, ti), a in zip(keys, self.assignments)
            ]
        else:
            out["assignments"] = [int(a) for a in self.assignments]
        if metrics is not None:
            out["metrics"] = dict(metrics)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TopicClusters":
        raw = obj["assignments"]
        labels = [a["cluster"] if isinstance(a, dict) else a for a in raw]
        return cls(
            k=obj["k"],
            centers=np.asarray(obj["centers"], dtype=np.float64),
            assignments=np.asarray(labels, dtype=np.int64),
            inertia=obj["inertia"],
            n_iter=obj.get("n_iter", 0),
            history=list(obj.get("history", [])),
        )

    def save(self, path: str | Path, keys=None, metrics=None) -> None:
        Path(path).write_text(json.dumps(self.to_json(keys, metrics), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TopicClusters":
        return cls.from_json(json.loads(Path(path).read_text()))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding row")
    return x / norms


def _objective(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum(1.0 - np.einsum("ij,ij->i", x, centers[labels])))


def _seed_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # for unit vectors 1 - cos = |a - b|^2 / 2, so sampling proportional to it is k-means++
    u = len(x)
    chosen = [int(rng.integers(u))]
    dist = np.maximum(1.0 - x @ x[chosen[0]], 0.0)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            idx = int(rng.integers(u))
        else:
            idx = int(rng.choice(u, p=dist / total))
        chosen.append(idx)
        dist = np.minimum(dist, np.maximum(1.0 - x @ x[idx], 0.0))
    return x[chosen].copy()


def _update_centers(x: np.ndarray, labels: np.ndarray, old: np.ndarray) -> np.ndarray:
    k, n = old.shape
    sums = np.zeros((k, n))
    np.add.at(sums, labels, x)
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    return np.where(norms > 0, sums / np.where(norms > 0, norms, 1.0), old)


def _fill_empty(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Move the point farthest from its own center into each empty cluster."""
    labels = labels.copy()
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        dist = 1.0 - np.einsum("ij,ij->i", x, centers[labels])
        donors = counts[labels] > 1
        dist = np.where(donors, dist, -np.inf)
        idx = int(np.argmax(dist))
        labels[idx] = j
        centers[j] = x[idx]
    return labels


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> TopicClusters:
    centers = _seed_centers(x, k, rng)
    labels = None
    prev_obj = np.inf
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        new_labels = np.argmax(x @ centers.T, axis=1)
        new_labels = _fill_empty(x, new_labels, centers, k)
        centers = _update_centers(x, new_labels, centers)
        obj = _objective(x, centers, new_labels)
        history.append(obj)
        converged = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        if converged or prev_obj - obj < tol:
            break
        prev_obj = obj
    return TopicClusters(k, centers, labels.astype(np.int64), history[-1], it, history)


def spherical_kmeans(
    embeddings: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    n_init: int = 10,
) -> TopicClusters:
    """K-means on the unit sphere with cosine similarity.

    Each run stops when assignments stop changing, the objective (sum of ``1 - cos``
    to the assigned center) improves by less than ``tol``, or after ``max_iter``
    rounds. ``n_init`` independently seeded runs are made and the lowest objective
    wins (earliest run on ties).
    """
    x = normalize_rows(embeddings)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for run in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
        result = _lloyd(x, k, rng, max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def assign(h, clusters: TopicClusters) -> int:
    h = np.asarray(h, dtype=np.float64)
    if np.linalg.norm(h) == 0:
        raise ValueError("cannot assign a zero vector")
    return int(np.argmax(clusters.centers @ h))


def assign_many(hs: np.ndarray, clusters: TopicClusters) -> np.ndarray:
    return np.argmax(normalize_rows(hs) @ clusters.centers.T, axis=1).astype(np.int64)


def _centroids(x: np.ndarray, labels: np.ndarray):
    ids = np.unique(labels)
    cents = np.stack([x[labels == c].mean(axis=0) for c in ids])
    return ids, cents


def calinski_harabasz(embeddings: np.ndarray, assignments) -> float:
    """Between/within dispersion ratio on unit-normalised embeddings (higher is better)."""
    x = normalize_rows(embeddings)
    labels = np.asarray(assignments)
    ids, cents = _centroids(x, labels)
    k, u = len(ids), len(x)
    if k < 2 or u <= k:
        raise ValueError("calinski_harabasz needs 2 <= k < number of points")
    mean = x.mean(axis=0)
    between = sum(np.sum(labels == c) * np.sum((cent - mean) ** 2) for c, cent in zip(ids, cents))
    within = sum(np.sum((x[labels == c] - cent) ** 2) for c, cent in zip(ids, cents))
    if within == 0:
        warnings.warn("within-cluster dispersion is zero; Calinski-Harabasz is infinite", RuntimeWarning)
        return float("inf")
    return float((between / (k - 1)) / (within / (u - k)))


def davies_bouldin(embeddings: np.ndarray, assignments) -> float:
    """Mean worst-case scatter/separation ratio on unit-normalised embeddings (lower is better)."""
    x = normalize_rows(embeddings)
    labels = np.asarray(assignments)
    ids, cents = _centroids(x, labels)
    k = len(ids)
    if k < 2:
        raise ValueError("davies_bouldin needs at least 2 clusters")
    scatter = np.array([np.linalg.norm(x[labels == c] - cent, axis=1).mean() for c, cent in zip(ids, cents)])
    dist = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
    off_diag = ~np.eye(k, dtype=bool)
    if np.any(dist[off_diag] == 0):
        warnings.warn("coincident centroids; Davies-Bouldin is infinite", RuntimeWarning)
        return float("inf")
    ratios = np.where(off_diag, (scatter[:, None] + scatter[None, :]) / np.where(off_diag, dist, 1.0), -np.inf)
    return float(ratios.max(axis=1).mean())
