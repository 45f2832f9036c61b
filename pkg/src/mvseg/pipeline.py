"""Per-scene inference: windows -> network -> mean shift -> MV-CRF -> BlockMerging -> NMS."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .meanshift import mean_shift
from .merge_nms import SegmentationResult, WindowLabels, assemble_result, block_merge_detailed
from .mtpnet import NetworkParams, PredictionField, forward
from .mvcrf import initial_state, infer
from .scene_io import PointCloud, scan_windows, window_features

log = logging.getLogger(__name__)

ABLATIONS = ("none", "unary", "pairwise", "full")


def scene_seed(seed: int, name: str) -> int:
    """Stable per-scene seed so scenes can run in any order or process."""
    return (seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2**32)


@dataclass
class WindowOutput:
    indices: np.ndarray
    origin: np.ndarray
    pred: PredictionField
    clusters: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    qs: np.ndarray
    qi_own: np.ndarray
    energies: list[float] = field(default_factory=list)


@dataclass
class SceneOutput:
    result: SegmentationResult
    windows: list[WindowOutput]
    merged_ids: np.ndarray


def run_window(cloud: PointCloud, params: NetworkParams, window, cfg: RunConfig, ablation: str, track_energy=False) -> WindowOutput:
    idx = window.unique_indices()
    pred = forward(params, window_features(cloud, window, idx))
    ms = cfg.meanshift
    clusters = mean_shift(pred.embeddings, ms.bandwidth, ms.max_iters, ms.tol, ms.merge_radius, ms.bin_seeding)
    sub = cloud.subset(idx)
    if ablation == "none":
        state = initial_state(pred, clusters, cfg.crf)
        energies: list[float] = []
    else:
        res = infer(sub, pred, clusters, cfg.crf.with_ablation(ablation), track_energy=track_energy)
        state, energies = res.state, res.energies
    inst = state.instance_labels()
    return WindowOutput(
        idx,
        window.origin,
        pred,
        clusters.assignment,
        state.semantic_labels(),
        inst,
        state.qs,
        state.qi[np.arange(len(idx)), inst],
        energies,
    )


def segment_scene(
    cloud: PointCloud,
    params: NetworkParams,
    cfg: RunConfig,
    name: str = "scene",
    ablation: str | None = None,
    track_energy: bool = False,
) -> SceneOutput:
    ablation = ablation or cfg.ablation
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    rng = np.random.default_rng(scene_seed(cfg.seed, name))
    w = cfg.window
    windows = scan_windows(cloud, w.size, w.stride, w.point_count, rng)
    outs = [run_window(cloud, params, win, cfg, ablation, track_energy) for win in windows]

    labels = [WindowLabels(o.indices, o.instance, o.semantic, o.origin) for o in outs]
    merged = block_merge_detailed(labels, cloud.locations, cfg.merge.voxel_size, cfg.merge.overlap_ratio)
    ids = merged.instance

    n, S = len(cloud), params.num_classes
    qs_sum = np.zeros((n, S))
    hits = np.zeros(n)
    qi_own = np.zeros(n)
    for o, wmap in zip(outs, merged.window_maps):
        qs_sum[o.indices] += o.qs
        hits[o.indices] += 1
        scene_of = np.array([wmap[int(g)] for g in o.instance])
        agree = scene_of == ids[o.indices]
        pts = o.indices[agree]
        qi_own[pts] = np.maximum(qi_own[pts], o.qi_own[agree])
    covered = hits > 0
    qs = np.full((n, S), 1.0 / S)
    qs[covered] = qs_sum[covered] / hits[covered, None]
    qi_own[qi_own == 0] = 1.0 / max(1, len(np.unique(ids)))
    semantic = np.argmax(qs, axis=1)
    result = assemble_result(semantic, ids, qs, qi_own, cfg.merge.nms_iou, cfg.merge.min_instance_points)
    return SceneOutput(result, outs, ids)
