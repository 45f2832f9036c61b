"""Multi-value CRF over joint (semantic, instance) labels and its mean-field inference.

Every point carries a semantic label s and an instance label i. The energy has
five groups of terms:

* semantic unary ``-log p_j(s)``;
* semantic pairwise: Potts sign times a Gaussian on the difference of two
  points' class scores;
* instance unary: minus the Gaussian density of the point's embedding under
  the instance's embedding distribution, minus the log instance size;
* instance pairwise: Potts sign times a Gaussian on location, normal and color;
* consistency: the entropy of each instance's semantic-label histogram.

Inference keeps a factorized distribution ``qs`` (N, S) and ``qi`` (N, K) and
applies parallel mean-field updates in the log domain. Instance statistics are
re-estimated from the argmax labels after each update and instances that lose
all their points are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .config import CrfConfig
from .meanshift import ClusterResult
from .mtpnet import PredictionField
from .scene_io import PointCloud

log = logging.getLogger(__name__)

P_FLOOR = 1e-8
ROW_TOL = 1e-9
_DENSE_CACHE_LIMIT = 5e7


def potts(a, b):
    return np.where(np.asarray(a) == np.asarray(b), -1.0, 1.0)


def entropy(hist) -> np.ndarray:
    """Entropy along the last axis with 0 log 0 = 0."""
    h = np.asarray(hist, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(h > 0, -h * np.log(np.where(h > 0, h, 1.0)), 0.0)
    return terms.sum(axis=-1)


# ---------------------------------------------------------------- potentials


def semantic_unary(pred: PredictionField, j: int, s: int) -> float:
    return float(-np.log(max(pred.probs[j, s], P_FLOOR)))


def semantic_pairwise(pred: PredictionField, j: int, k: int, s: int, s_prime: int, theta: float) -> float:
    diff = pred.probs[j, s] - pred.probs[k, s_prime]
    return float(potts(s, s_prime) * np.exp(-(diff * diff) / (2 * theta * theta)))


def appearance_kernel(cloud: PointCloud, cfg: CrfConfig, rows=None, cols=None) -> np.ndarray:
    """Gaussian mixture of location, normal and color differences (no Potts sign)."""
    rows = slice(None) if rows is None else rows
    cols = slice(None) if cols is None else cols
    expo = -_sq(cloud.locations[rows], cloud.locations[cols]) / (2 * cfg.lambda1**2)
    if cfg.use_normals and cloud.normals is not None:
        expo -= _sq(cloud.normals[rows], cloud.normals[cols]) / (2 * cfg.lambda2**2)
    expo -= _sq(cloud.colors[rows], cloud.colors[cols]) / (2 * cfg.lambda3**2)
    return np.exp(expo)


def _sq(a, b):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def instance_pairwise(cloud: PointCloud, j: int, k: int, i: int, i_prime: int, cfg: CrfConfig) -> float:
    d = cloud.locations[j] - cloud.locations[k]
    expo = -(d @ d) / (2 * cfg.lambda1**2)
    if cfg.use_normals and cloud.normals is not None:
        d = cloud.normals[j] - cloud.normals[k]
        expo -= (d @ d) / (2 * cfg.lambda2**2)
    d = cloud.colors[j] - cloud.colors[k]
    expo -= (d @ d) / (2 * cfg.lambda3**2)
    return float(potts(i, i_prime) * np.exp(expo))


def log_gaussian_density(x, mean, cov) -> np.ndarray:
    """Log of the normalized multivariate normal density at each row of ``x``."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    maha = (z * z).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (maha + d * np.log(2 * np.pi) + logdet)


# ---------------------------------------------------------------- state


@dataclass
class InstanceStats:
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    sizes: np.ndarray  # (K,)
    hist: np.ndarray  # (K, S) semantic-label frequencies

    @property
    def K(self) -> int:
        return len(self.sizes)


def compute_stats(embeddings, sem_labels, inst_labels, K: int, S: int, cfg: CrfConfig) -> InstanceStats:
    """Embedding mean/covariance, size and semantic histogram of instances 0..K-1."""
    emb = np.asarray(embeddings, dtype=np.float64)
    d = emb.shape[1]
    sizes = np.bincount(inst_labels, minlength=K).astype(np.int64)
    means = np.zeros((K, d))
    covs = np.zeros((K, d, d))
    hist = np.zeros((K, S))
    eye = np.eye(d)
    for i in range(K):
        members = inst_labels == i
        n = sizes[i]
        if n == 0:
            covs[i] = eye
            continue
        e = emb[members]
        means[i] = e.mean(axis=0)
        if n == 1:
            covs[i] = cfg.cov_scale * eye
        else:
            c = e - means[i]
            covs[i] = c.T @ c / n + cfg.cov_epsilon * eye
        hist[i] = np.bincount(sem_labels[members], minlength=S) / n
    return InstanceStats(means, covs, sizes, hist)


@dataclass
class LabelState:
    qs: np.ndarray  # (N, S)
    qi: np.ndarray  # (N, K)
    stats: InstanceStats
    # id each live column had when inference started (mean-shift cluster index)
    instance_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def K(self) -> int:
        return self.qi.shape[1]

    def semantic_labels(self) -> np.ndarray:
        return np.argmax(self.qs, axis=1)

    def instance_labels(self) -> np.ndarray:
        return np.argmax(self.qi, axis=1)

    def check_rows(self, tol: float = ROW_TOL) -> None:
        for name, q in (("qs", self.qs), ("qi", self.qi)):
            err = np.abs(q.sum(axis=1) - 1.0).max(initial=0.0)
            if err > tol:
                raise AssertionError(f"{name} rows deviate from 1 by {err:.3g}")


def make_state(qs, qi, embeddings, cfg: CrfConfig, instance_ids=None) -> LabelState:
    """Build a state from soft labels, dropping instance columns that own no argmax vertex."""
    qs = np.asarray(qs, dtype=np.float64)
    qi = np.asarray(qi, dtype=np.float64)
    ids = np.arange(qi.shape[1]) if instance_ids is None else np.asarray(instance_ids)
    assign = np.argmax(qi, axis=1)
    live = np.bincount(assign, minlength=qi.shape[1]) > 0
    if not live.all():
        qi = qi[:, live]
        qi = qi / qi.sum(axis=1, keepdims=True)
        ids = ids[live]
        assign = np.argmax(qi, axis=1)
    stats = compute_stats(embeddings, np.argmax(qs, axis=1), assign, qi.shape[1], qs.shape[1], cfg)
    return LabelState(qs, qi, stats, ids)


# ---------------------------------------------------------------- consistency terms


def consistency_term(state: LabelState, s: int, i: int) -> float:
    h = state.stats.hist[i, s]
    return float(-h * np.log(h)) if h > 0 else 0.0


def m_term(state: LabelState, j: int, candidate_s: int | None = None, candidate_i: int | None = None) -> float:
    """Vertex j's share of the consistency energy, H(h_i) / |i| for j's instance i.

    A candidate semantic or instance label for j is substituted into the
    histogram first; every other vertex keeps its argmax labels. Summed over all
    vertices at their argmax labels this equals the total consistency energy.
    """
    sem = state.semantic_labels()
    inst = state.instance_labels()
    s_j = sem[j] if candidate_s is None else candidate_s
    i_j = inst[j] if candidate_i is None else candidate_i
    counts = state.stats.hist[i_j] * state.stats.sizes[i_j]
    size = state.stats.sizes[i_j]
    if i_j == inst[j]:
        counts = counts.copy()
        counts[sem[j]] -= 1
        counts[s_j] += 1
    else:
        counts = counts.copy()
        counts[s_j] += 1
        size += 1
    return float(entropy(counts / size) / size)


def _m_semantic(stats: InstanceStats, sem, inst) -> np.ndarray:
    """(N, S) table of m_j with vertex j's semantic label set to each candidate."""
    S = stats.hist.shape[1]
    sizes = stats.sizes[inst].astype(np.float64)
    base = stats.hist[inst] * sizes[:, None]
    base[np.arange(len(sem)), sem] -= 1
    cand = base[:, None, :] + np.eye(S)[None, :, :]
    return entropy(cand / sizes[:, None, None]) / sizes[:, None]


def _m_instance(stats: InstanceStats, sem, inst) -> np.ndarray:
    """(N, K) table of m_j with vertex j moved into each candidate instance."""
    N, K = len(sem), stats.K
    S = stats.hist.shape[1]
    counts = stats.hist * stats.sizes[:, None]
    onehot = np.eye(S)[sem]
    cand = counts[None, :, :] + onehot[:, None, :]
    size = np.broadcast_to(stats.sizes[None, :] + 1.0, (N, K)).copy()
    own = np.arange(N), inst
    cand[own] = counts[inst]
    size[own] = stats.sizes[inst]
    return entropy(cand / size[:, :, None]) / size


# ---------------------------------------------------------------- energy


def instance_unary_table(stats: InstanceStats, embeddings) -> np.ndarray:
    """(N, K) instance unary potentials for every point and live instance."""
    emb = np.asarray(embeddings, dtype=np.float64)
    out = np.empty((len(emb), stats.K))
    for i in range(stats.K):
        if stats.sizes[i] == 0:
            raise ValueError(f"instance {i} has no members")
        dens = np.exp(log_gaussian_density(emb, stats.means[i], stats.covs[i]))
        out[:, i] = -dens - np.log(stats.sizes[i])
    return out


def instance_unary(state: LabelState, embeddings, j: int, i: int) -> float:
    if i < 0 or i >= state.K or state.stats.sizes[i] == 0:
        raise ValueError(f"instance {i} is not live")
    st = state.stats
    dens = np.exp(log_gaussian_density(np.asarray(embeddings)[j], st.means[i], st.covs[i]))[0]
    return float(-dens - np.log(st.sizes[i]))


@dataclass(frozen=True)
class JointLabeling:
    semantic: np.ndarray
    instance: np.ndarray


def _pair_scale(n: int, cfg: CrfConfig) -> float:
    if cfg.pairwise_norm == "mean" and n > 1:
        return 1.0 / (n - 1)
    return 1.0


def energy_terms(cloud: PointCloud, pred: PredictionField, labeling: JointLabeling, cfg: CrfConfig) -> dict[str, float]:
    """Each group of energy terms for a hard labeling; disabled groups are 0."""
    sem = np.asarray(labeling.semantic)
    inst = np.asarray(labeling.instance)
    n, S = pred.probs.shape
    if len(sem) != n or len(inst) != n or len(cloud) != n:
        raise ValueError("labeling, cloud and predictions must have equal length")
    if np.any(sem < 0) or np.any(sem >= S):
        raise ValueError("semantic label out of range")
    scale = _pair_scale(n, cfg)
    upper = np.triu_indices(n, k=1)

    terms = dict.fromkeys(
        ("semantic_unary", "semantic_pairwise", "instance_unary", "instance_pairwise", "consistency"), 0.0
    )
    p_lab = pred.probs[np.arange(n), sem]
    terms["semantic_unary"] = float(-np.log(np.maximum(p_lab, P_FLOOR)).sum())
    if cfg.semantic_pairwise and n > 1:
        diff = p_lab[:, None] - p_lab[None, :]
        k = potts(sem[:, None], sem[None, :]) * np.exp(-(diff**2) / (2 * cfg.theta**2))
        terms["semantic_pairwise"] = scale * float(k[upper].sum())

    _, dense = np.unique(inst, return_inverse=True)
    dense = dense.reshape(-1)
    K = int(dense.max()) + 1
    stats = compute_stats(pred.embeddings, sem, dense, K, S, cfg)
    table = instance_unary_table(stats, pred.embeddings)
    terms["instance_unary"] = float(table[np.arange(n), dense].sum())
    if cfg.instance_pairwise and n > 1:
        k = potts(dense[:, None], dense[None, :]) * appearance_kernel(cloud, cfg)
        terms["instance_pairwise"] = scale * float(k[upper].sum())
    if cfg.consistency:
        terms["consistency"] = float(entropy(stats.hist).sum())
    return terms


def energy(cloud: PointCloud, pred: PredictionField, labeling: JointLabeling, cfg: CrfConfig) -> float:
    return float(sum(energy_terms(cloud, pred, labeling, cfg).values()))


# ---------------------------------------------------------------- message passing


class _Messages:
    """Pairwise message computation for one inference run (kernels depend only on the inputs)."""

    def __init__(self, cloud: PointCloud, pred: PredictionField, cfg: CrfConfig):
        self.cfg = cfg
        self.cloud = cloud
        self.probs = pred.probs
        n, S = self.probs.shape
        self.scale = _pair_scale(n, cfg)
        self.grid = cfg.message_passing == "grid"
        self._sem_cache = None
        self._app = None
        if cfg.semantic_pairwise and not self.grid and S * S * n * n <= _DENSE_CACHE_LIMIT:
            self._sem_cache = {
                (s, t): self._sem_kernel(s, t) for s in range(S) for t in range(S)
            }
        if cfg.instance_pairwise:
            self._app = _GridFilter(cloud, cfg) if self.grid else _dense_app(cloud, cfg)

    def _sem_kernel(self, s, t):
        diff = self.probs[:, s][:, None] - self.probs[:, t][None, :]
        k = np.exp(-(diff * diff) / (2 * self.cfg.theta**2))
        np.fill_diagonal(k, 0.0)
        return k

    def semantic(self, qs: np.ndarray) -> np.ndarray:
        """(N, S): sum over s' and k != j of Q_k(s') * pairwise(j, k, s, s')."""
        n, S = qs.shape
        out = np.zeros((n, S))
        for s in range(S):
            for t in range(S):
                sign = -1.0 if s == t else 1.0
                if self.grid:
                    msg = _filter_1d(self.probs[:, s], self.probs[:, t], qs[:, t], self.cfg)
                else:
                    k = self._sem_cache[(s, t)] if self._sem_cache else self._sem_kernel(s, t)
                    msg = k @ qs[:, t]
                out[:, s] += sign * msg
        return self.scale * out

    def instance(self, qi: np.ndarray) -> np.ndarray:
        """(N, K): sum over i' and k != j of Q_k(i') * pairwise(j, k, i, i')."""
        if isinstance(self._app, _GridFilter):
            filt = self._app.apply(qi)
        else:
            filt = self._app @ qi
        # sum_i' Q_k(i') = 1, so the i' != i part is total - same
        total = filt.sum(axis=1, keepdims=True)
        return self.scale * (total - 2.0 * filt)


def _dense_app(cloud, cfg):
    k = appearance_kernel(cloud, cfg)
    np.fill_diagonal(k, 0.0)
    return k


def _filter_1d(at, pos, weights, cfg: CrfConfig) -> np.ndarray:
    """Approximate sum_{k != j} w_k exp(-(at_j - pos_k)^2 / 2 theta^2) on a 1-D grid.

    Weights are splatted with linear interpolation onto a lattice of spacing
    ``grid_cell * theta``, blurred with the sampled Gaussian, and read back by
    linear interpolation; the j == k term is removed exactly.
    """
    step = cfg.grid_cell * cfg.theta
    lo = min(at.min(), pos.min())
    n_cells = int(np.ceil((max(at.max(), pos.max()) - lo) / step)) + 2
    grid = np.zeros(n_cells)
    u = (pos - lo) / step
    i0 = np.floor(u).astype(int)
    frac = u - i0
    np.add.at(grid, i0, weights * (1 - frac))
    np.add.at(grid, i0 + 1, weights * frac)
    radius = int(np.ceil(4.0 / cfg.grid_cell))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) * cfg.grid_cell) ** 2)
    blurred = np.convolve(grid, taps, mode="same")
    v = (at - lo) / step
    j0 = np.clip(np.floor(v).astype(int), 0, n_cells - 2)
    fv = v - j0
    out = blurred[j0] * (1 - fv) + blurred[j0 + 1] * fv
    self_term = weights * np.exp(-((at - pos) ** 2) / (2 * cfg.theta**2))
    return out - self_term


class _GridFilter:
    """Downsample-filter-upsample approximation of the appearance-kernel product.

    Points are bucketed on a lattice over the scaled feature space (location /
    lambda1, normal / lambda2, color / lambda3) with cell side ``grid_cell``;
    each occupied cell holds its mean feature and the summed Q of its members.
    Messages are the dense kernel between every point and the cell means.
    """

    def __init__(self, cloud: PointCloud, cfg: CrfConfig):
        feats = [cloud.locations / cfg.lambda1]
        if cfg.use_normals and cloud.normals is not None:
            feats.append(cloud.normals / cfg.lambda2)
        feats.append(cloud.colors / cfg.lambda3)
        f = np.concatenate(feats, axis=1)
        keys = np.floor(f / cfg.grid_cell).astype(np.int64)
        _, self.cell, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        self.cell = self.cell.reshape(-1)
        n_cells = len(counts)
        centers = np.zeros((n_cells, f.shape[1]))
        np.add.at(centers, self.cell, f)
        centers /= counts[:, None]
        self.n_cells = n_cells
        self.kernel = np.exp(-0.5 * _sq(f, centers))
        self.self_weight = self.kernel[np.arange(len(f)), self.cell]

    def apply(self, q: np.ndarray) -> np.ndarray:
        sums = np.zeros((self.n_cells, q.shape[1]))
        np.add.at(sums, self.cell, q)
        return self.kernel @ sums - self.self_weight[:, None] * q


# ---------------------------------------------------------------- updates


def _normalize_log(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits).any(axis=1)):
        raise FloatingPointError("a mean-field row has no finite entries")
    q = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    # one more pass removes the residual rounding of exp
    return q / q.sum(axis=1, keepdims=True)


def mean_field_step(
    state: LabelState,
    cloud: PointCloud,
    pred: PredictionField,
    cfg: CrfConfig,
    messages: _Messages | None = None,
) -> LabelState:
    """One parallel update of Q^S and Q^I from ``state``; returns a new state."""
    messages = messages or _Messages(cloud, pred, cfg)
    sem = state.semantic_labels()
    inst = state.instance_labels()

    log_s = np.log(np.maximum(pred.probs, P_FLOOR))
    if cfg.semantic_pairwise:
        log_s = log_s - messages.semantic(state.qs)
    if cfg.consistency:
        log_s = log_s - _m_semantic(state.stats, sem, inst)

    log_i = -instance_unary_table(state.stats, pred.embeddings)
    if cfg.instance_pairwise:
        log_i = log_i - messages.instance(state.qi)
    if cfg.consistency:
        log_i = log_i - _m_instance(state.stats, sem, inst)

    qs = _normalize_log(log_s)
    qi = _normalize_log(log_i)
    return make_state(qs, qi, pred.embeddings, cfg, state.instance_ids)


def initial_state(pred: PredictionField, init: ClusterResult, cfg: CrfConfig, smoothing: float = 0.9) -> LabelState:
    """Q^S from the network scores; Q^I one-hot on the mean-shift cluster, smoothed 0.9 / 0.1."""
    n = len(pred)
    assign = np.asarray(init.assignment)
    if len(assign) != n:
        raise ValueError("initial clustering must assign every point")
    K = int(assign.max()) + 1
    if K == 1:
        qi = np.ones((n, 1))
    else:
        qi = np.full((n, K), (1.0 - smoothing) / (K - 1))
        qi[np.arange(n), assign] = smoothing
    qs = pred.probs / pred.probs.sum(axis=1, keepdims=True)
    return make_state(qs, qi, pred.embeddings, cfg)


@dataclass
class InferenceResult:
    labeling: JointLabeling
    state: LabelState
    energies: list[float] = field(default_factory=list)
    iterations: int = 0


def infer(
    cloud: PointCloud,
    pred: PredictionField,
    init: ClusterResult,
    cfg: CrfConfig,
    track_energy: bool = False,
    on_step=None,
) -> InferenceResult:
    """Mean-field inference from the network scores and a mean-shift clustering.

    Iterates until the largest change in any Q entry drops below ``mf_tol`` or
    ``mf_iters`` steps have run. ``on_step`` is called with every state,
    including the initial one.
    """
    if len(cloud) != len(pred):
        raise ValueError("cloud and predictions differ in length")
    messages = _Messages(cloud, pred, cfg)
    state = initial_state(pred, init, cfg)
    energies = []

    def record(st):
        if on_step is not None:
            on_step(st)
        if track_energy:
            energies.append(energy(cloud, pred, JointLabeling(st.semantic_labels(), st.instance_labels()), cfg))

    record(state)
    it = 0
    for it in range(1, cfg.mf_iters + 1):
        new = mean_field_step(state, cloud, pred, cfg, messages)
        change = np.abs(new.qs - state.qs).max()
        if new.K == state.K and np.array_equal(new.instance_ids, state.instance_ids):
            change = max(change, np.abs(new.qi - state.qi).max())
        else:
            change = np.inf
        state = new
        record(state)
        if change < cfg.mf_tol:
            break
    labeling = JointLabeling(state.semantic_labels(), state.instance_labels())
    return InferenceResult(labeling, state, energies, it)
