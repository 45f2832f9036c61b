"""Discriminative instance-embedding loss: pull, push and centroid regularization.

All gradients use subgradient 0 at hinge kinks and where a norm vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossConfig


@dataclass(frozen=True)
class InstancePartition:
    assignment: np.ndarray  # (N,) dense instance index in [0, K)
    sizes: np.ndarray  # (K,)
    centroids: np.ndarray  # (K, d)

    @property
    def K(self) -> int:
        return len(self.sizes)


def make_partition(embeddings: np.ndarray, labels) -> InstancePartition:
    """Group ``embeddings`` by arbitrary integer instance ``labels``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    _, assignment = np.unique(np.asarray(labels), return_inverse=True)
    assignment = assignment.reshape(-1)
    K = int(assignment.max()) + 1 if len(assignment) else 0
    sizes = np.bincount(assignment, minlength=K)
    if K == 0 or np.any(sizes == 0):
        raise ValueError("every instance needs at least one point")
    sums = np.zeros((K, emb.shape[1]))
    np.add.at(sums, assignment, emb)
    return InstancePartition(assignment, sizes, sums / sizes[:, None])


def _check(partition: InstancePartition):
    if partition.K < 1 or np.any(partition.sizes == 0):
        raise ValueError("empty instance in partition")


def pull_loss(embeddings, partition: InstancePartition, delta_v: float) -> float:
    _check(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    dist = np.linalg.norm(emb - partition.centroids[partition.assignment], axis=1)
    hinge = np.maximum(dist - delta_v, 0.0) ** 2
    per_instance = np.bincount(partition.assignment, weights=hinge, minlength=partition.K)
    return float(np.mean(per_instance / partition.sizes))


def push_loss(centroids, delta_d: float) -> float:
    mu = np.asarray(centroids, dtype=np.float64)
    K = len(mu)
    if K < 2:
        return 0.0
    dist = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=2)
    hinge = np.maximum(2 * delta_d - dist, 0.0) ** 2
    np.fill_diagonal(hinge, 0.0)
    return float(hinge.sum() / (K * (K - 1)))


def reg_loss(centroids) -> float:
    mu = np.asarray(centroids, dtype=np.float64)
    return float(np.mean(np.linalg.norm(mu, axis=1)))


def embedding_loss(embeddings, partition: InstancePartition, cfg: LossConfig) -> float:
    return (
        cfg.alpha * pull_loss(embeddings, partition, cfg.delta_v)
        + cfg.beta * push_loss(partition.centroids, cfg.delta_d)
        + cfg.gamma * reg_loss(partition.centroids)
    )


def embedding_loss_and_grad(
    embeddings, partition: InstancePartition, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Weighted loss and its gradient w.r.t. every embedding.

    Centroids are means of the embeddings, so the gradient flowing into each
    centroid is spread back evenly over that instance's members.
    """
    _check(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    a, sizes, mu = partition.assignment, partition.sizes, partition.centroids
    K = partition.K

    # pull: gradient w.r.t. the residual r_j = e_j - mu_k
    resid = emb - mu[a]
    dist = np.linalg.norm(resid, axis=1)
    excess = np.maximum(dist - cfg.delta_v, 0.0)
    pull = float(np.mean(np.bincount(a, weights=excess**2, minlength=K) / sizes))
    safe = np.where(dist > 0, dist, 1.0)
    g_resid = (2.0 / K) * (excess / safe / sizes[a])[:, None] * resid
    g_resid *= cfg.alpha
    # r_j depends on mu_k, which is the mean over the instance
    g_resid_sum = np.zeros_like(mu)
    np.add.at(g_resid_sum, a, g_resid)
    grad = g_resid - (g_resid_sum / sizes[:, None])[a]

    g_mu = np.zeros_like(mu)
    push = 0.0
    if K > 1:
        diff = mu[:, None, :] - mu[None, :, :]
        cdist = np.linalg.norm(diff, axis=2)
        gap = np.maximum(2 * cfg.delta_d - cdist, 0.0)
        np.fill_diagonal(gap, 0.0)
        push = float((gap**2).sum() / (K * (K - 1)))
        cs = np.where(cdist > 0, cdist, 1.0)
        # ordered pairs (k, m) and (m, k) contribute equally
        coef = -4.0 * gap / cs / (K * (K - 1))
        g_mu += cfg.beta * np.einsum("km,kmd->kd", coef, diff)

    norms = np.linalg.norm(mu, axis=1)
    reg = float(np.mean(norms))
    g_mu += cfg.gamma * (mu / np.where(norms > 0, norms, 1.0)[:, None] * (norms > 0)[:, None]) / K

    grad += (g_mu / sizes[:, None])[a]
    loss = cfg.alpha * pull + cfg.beta * push + cfg.gamma * reg
    return loss, grad
