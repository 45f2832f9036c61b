"""Multi-task pointwise network in plain numpy.

A shared per-point MLP (9 -> 32 -> 64 -> 128, ReLU) yields a 128-d feature per
point. Its max over the window is appended to every point, and two heads
read the 256-d result: a classifier (-> 64 -> |S|, softmax) and an embedding
head (-> 64 -> d, linear).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import LossConfig, TrainConfig
from .embedding_loss import embedding_loss, embedding_loss_and_grad, make_partition
from .scene_io import PointCloud, scan_windows, window_features

log = logging.getLogger(__name__)

IN_FEATURES = 9
PROB_FLOOR = 1e-300
MAGIC = b"MTPNPAR\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PredictionField:
    probs: np.ndarray  # (N, S)
    embeddings: np.ndarray  # (N, d)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if probs.ndim != 2 or emb.ndim != 2 or len(probs) != len(emb):
            raise ValueError("probs and embeddings must be 2-D with equal row counts")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, idx) -> "PredictionField":
        return PredictionField(self.probs[idx], self.embeddings[idx])


@dataclass
class NetworkParams:
    """Weights keyed by layer name. ``trunk{i}``, ``sem{i}``, ``emb{i}`` layers each hold W and b."""

    arrays: dict[str, np.ndarray]
    num_classes: int
    embed_dim: int
    trunk_depth: int = 3

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        embed_dim: int = 8,
        trunk_widths: Sequence[int] = (32, 64, 128),
        head_width: int = 64,
        in_features: int = IN_FEATURES,
        rng: np.random.Generator | int | None = 0,
    ) -> "NetworkParams":
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        arrays: dict[str, np.ndarray] = {}

        def layer(name, fan_in, fan_out, relu=True):
            scale = np.sqrt((2.0 if relu else 1.0) / fan_in)
            arrays[f"{name}.W"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
            arrays[f"{name}.b"] = np.zeros(fan_out)

        widths = [in_features, *trunk_widths]
        for i in range(len(trunk_widths)):
            layer(f"trunk{i}", widths[i], widths[i + 1])
        head_in = 2 * widths[-1]
        layer("sem0", head_in, head_width)
        layer("sem1", head_width, num_classes, relu=False)
        layer("emb0", head_in, head_width)
        layer("emb1", head_width, embed_dim, relu=False)
        return cls(arrays, num_classes, embed_dim, len(trunk_widths))

    @property
    def in_features(self) -> int:
        return self.arrays["trunk0.W"].shape[0]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            {k: v.copy() for k, v in self.arrays.items()},
            self.num_classes,
            self.embed_dim,
            self.trunk_depth,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def validate(self):
        prev = self.in_features
        for i in range(self.trunk_depth):
            W, b = self.arrays[f"trunk{i}.W"], self.arrays[f"trunk{i}.b"]
            if W.shape[0] != prev or b.shape != (W.shape[1],):
                raise ValueError(f"layer trunk{i} does not chain")
            prev = W.shape[1]
        for head, out in (("sem", self.num_classes), ("emb", self.embed_dim)):
            W0, W1 = self.arrays[f"{head}0.W"], self.arrays[f"{head}1.W"]
            if W0.shape[0] != 2 * prev or W1.shape != (W0.shape[1], out):
                raise ValueError(f"{head} head does not chain")
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in {k}")


def _dense(params, name, x):
    return x @ params.arrays[f"{name}.W"] + params.arrays[f"{name}.b"]


def _forward(params: NetworkParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ValueError(
            f"expected input of shape (N, {params.in_features}), got {x.shape}"
        )
    if len(x) == 0:
        raise ValueError("empty input")
    cache = {"x": x}
    h = x
    for i in range(params.trunk_depth):
        z = _dense(params, f"trunk{i}", h)
        cache[f"trunk{i}.in"] = h
        cache[f"trunk{i}.z"] = z
        h = np.maximum(z, 0.0)
    feat = h
    pool_idx = np.argmax(feat, axis=0)
    pooled = feat[pool_idx, np.arange(feat.shape[1])]
    head_in = np.concatenate([feat, np.broadcast_to(pooled, feat.shape)], axis=1)
    cache["feat"], cache["pool_idx"], cache["head_in"] = feat, pool_idx, head_in

    zs = _dense(params, "sem0", head_in)
    hs = np.maximum(zs, 0.0)
    logits = _dense(params, "sem1", hs)
    ze = _dense(params, "emb0", head_in)
    he = np.maximum(ze, 0.0)
    emb = _dense(params, "emb1", he)
    cache.update(zs=zs, hs=hs, ze=ze, he=he, logits=logits)

    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    return PredictionField(probs, emb), cache


def forward(params: NetworkParams, window_points: np.ndarray) -> PredictionField:
    return _forward(params, window_points)[0]


def prediction_loss(pred: PredictionField, gt_semantic) -> float:
    y = np.asarray(gt_semantic, dtype=np.int64)
    if len(y) != len(pred):
        raise ValueError("one semantic label per point is required")
    if np.any(y < 0) or np.any(y >= pred.num_classes):
        raise ValueError(f"class index out of range [0, {pred.num_classes})")
    p = pred.probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def total_loss(pred: PredictionField, gt_semantic, gt_instance, cfg: LossConfig) -> float:
    ce = prediction_loss(pred, gt_semantic)
    part = make_partition(pred.embeddings, gt_instance)
    return ce + embedding_loss(pred.embeddings, part, cfg)


def backward(
    params: NetworkParams, window_points, gt_semantic, gt_instance, cfg: LossConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Total loss of one window and its gradient w.r.t. every parameter array."""
    pred, c = _forward(params, window_points)
    y = np.asarray(gt_semantic, dtype=np.int64)
    n = len(y)
    ce = prediction_loss(pred, y)
    part = make_partition(pred.embeddings, gt_instance)
    emb_loss, d_emb = embedding_loss_and_grad(pred.embeddings, part, cfg)

    A = params.arrays
    g: dict[str, np.ndarray] = {}
    d_logits = pred.probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n

    g["sem1.W"] = c["hs"].T @ d_logits
    g["sem1.b"] = d_logits.sum(axis=0)
    d_zs = (d_logits @ A["sem1.W"].T) * (c["zs"] > 0)
    g["sem0.W"] = c["head_in"].T @ d_zs
    g["sem0.b"] = d_zs.sum(axis=0)

    g["emb1.W"] = c["he"].T @ d_emb
    g["emb1.b"] = d_emb.sum(axis=0)
    d_ze = (d_emb @ A["emb1.W"].T) * (c["ze"] > 0)
    g["emb0.W"] = c["head_in"].T @ d_ze
    g["emb0.b"] = d_ze.sum(axis=0)

    d_head = d_zs @ A["sem0.W"].T + d_ze @ A["emb0.W"].T
    width = c["feat"].shape[1]
    d_feat = d_head[:, :width].copy()
    # the pooled half reaches only the argmax row of each feature column
    np.add.at(d_feat, (c["pool_idx"], np.arange(width)), d_head[:, width:].sum(axis=0))

    d_h = d_feat
    for i in reversed(range(params.trunk_depth)):
        d_z = d_h * (c[f"trunk{i}.z"] > 0)
        g[f"trunk{i}.W"] = c[f"trunk{i}.in"].T @ d_z
        g[f"trunk{i}.b"] = d_z.sum(axis=0)
        if i:
            d_h = d_z @ A[f"trunk{i}.W"].T
    return ce + emb_loss, g


# ---------------------------------------------------------------- training


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Rate used in 1-indexed ``epoch``."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.decay_every)


@dataclass
class TrainResult:
    params: NetworkParams
    epoch_loss: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)


def training_windows(scenes: Sequence[PointCloud], window_cfg, rng) -> list[tuple]:
    samples = []
    for cloud in scenes:
        if not cloud.has_labels:
            continue
        for w in scan_windows(cloud, window_cfg.size, window_cfg.stride, window_cfg.point_count, rng):
            idx = w.vertex_indices
            samples.append((window_features(cloud, w), cloud.gt_semantic[idx], cloud.gt_instance[idx]))
    return samples


def train(
    scenes: Sequence[PointCloud],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    window_cfg=None,
    num_classes: int | None = None,
    init: NetworkParams | None = None,
) -> TrainResult:
    """Minibatch SGD (with optional momentum) over overlapping windows of the scenes."""
    from .config import WindowConfig

    window_cfg = window_cfg or WindowConfig()
    rng = np.random.default_rng(cfg.seed)
    samples = training_windows(scenes, window_cfg, rng)
    if not samples:
        raise ValueError("no labeled points to train on")
    if num_classes is None:
        num_classes = max(len(s.class_names) for s in scenes) or int(
            max(int(y.max()) for _, y, _ in samples) + 1
        )
    params = init.copy() if init is not None else NetworkParams.initialize(
        num_classes, cfg.embed_dim, cfg.trunk_widths, cfg.head_width, rng=rng
    )
    velocity = params.zeros_like()
    result = TrainResult(params)
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = params.zeros_like()
            for b in batch:
                loss, grads = backward(params, *samples[b], loss_cfg)
                losses.append(loss)
                for k, v in grads.items():
                    acc[k] += v
            for k, v in acc.items():
                velocity[k] = cfg.momentum * velocity[k] - lr * v / len(batch)
                params.arrays[k] += velocity[k]
        result.epoch_loss.append(float(np.mean(losses)))
        result.epoch_lr.append(lr)
        log.info("epoch %d lr %.5f loss %.5f", epoch, lr, result.epoch_loss[-1])
    return result


# ---------------------------------------------------------------- serialization


def save_params(path: str | Path, params: NetworkParams) -> None:
    """Binary layout: magic, version, header ints, shape table, then little-endian float64 data."""
    names = list(params.arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, params.num_classes, params.embed_dim,
                             params.trunk_depth, len(names)))
        for name in names:
            arr = params.arrays[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_params(path: str | Path) -> NetworkParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    version, n_cls, d, depth, count = struct.unpack_from("<IIIII", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 8 + 20
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    params = NetworkParams(arrays, n_cls, d, depth)
    params.validate()
    return params


def export_predictions(path: str | Path, pred: PredictionField) -> None:
    np.savetxt(path, np.concatenate([pred.probs, pred.embeddings], axis=1), fmt="%.17g")


def import_predictions(path: str | Path, num_classes: int, embed_dim: int) -> PredictionField:
    """Load whitespace-separated rows of ``num_classes`` probabilities then ``embed_dim`` values."""
    table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    width = num_classes + embed_dim
    if table.shape[1] != width:
        raise ValueError(f"{path}: expected {width} columns per row, got {table.shape[1]}")
    if not np.all(np.isfinite(table)):
        row = int(np.argmax(~np.all(np.isfinite(table), axis=1)))
        raise ValueError(f"{path}: non-finite value in row {row}")
    probs = table[:, :num_classes]
    if np.any(probs < 0):
        row = int(np.argmax(np.any(probs < 0, axis=1)))
        raise ValueError(f"{path}: negative probability in row {row}")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-4
    if np.any(bad):
        row = int(np.argmax(bad))
        raise ValueError(f"{path}: probabilities in row {row} sum to {sums[row]:.6g}, not 1")
    return PredictionField(probs, table[:, num_classes:])
