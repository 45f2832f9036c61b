"""Scene assembly: BlockMerging of per-window instances, confidence scores and NMS."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

P_FLOOR = 1e-8


@dataclass
class WindowLabels:
    """Instance (and optionally semantic) labels for the unique points of one window."""

    indices: np.ndarray
    instance: np.ndarray
    semantic: np.ndarray | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class MergeResult:
    instance: np.ndarray  # (N,) scene instance id per point
    window_maps: list[dict[int, int]]  # per window (in input order): local id -> scene id, -1 if it owns no point
    filled: np.ndarray  # indices that no window labeled


def _majority(values: np.ndarray) -> int:
    counts = np.bincount(values)
    return int(np.argmax(counts))


def block_merge_detailed(
    windows: Sequence[WindowLabels],
    locations: np.ndarray,
    voxel_size: float = 0.05,
    overlap_ratio: float = 0.5,
    min_overlap: int = 1,
) -> MergeResult:
    """Fuse window instances into scene instances.

    Windows are visited in origin order. Each point of a window instance votes
    for the scene instance that already holds it: its own scene id when an
    earlier window labeled that very point, else the first owner of its voxel.
    The instance joins the top-voted scene instance when that owner collects
    at least ``overlap_ratio`` of the votes cast and at least ``min_overlap``
    votes; otherwise it gets a fresh id. Any other scene instance whose points
    all lie inside the window instance is absorbed into the chosen one, so
    slivers cut off at window borders do not survive as separate instances.
    """
    n = len(locations)
    keys = np.floor(np.asarray(locations) / voxel_size).astype(np.int64)
    owner: dict[tuple, int] = {}
    labels = np.full(n, -1, dtype=np.int64)
    alias: dict[int, int] = {}
    sizes: dict[int, int] = {}

    def find(i: int) -> int:
        while i in alias:
            i = alias[i]
        return i

    maps: list[dict[int, int]] = [dict() for _ in windows]
    next_id = 0
    order = sorted(range(len(windows)), key=lambda w: (tuple(np.asarray(windows[w].origin)), w))
    for w in order:
        win = windows[w]
        idx = np.asarray(win.indices)
        inst = np.asarray(win.instance)
        vox = [tuple(k) for k in keys[idx].tolist()]
        prior = labels[idx]
        decided: dict[int, int] = {}
        for g in np.unique(inst).tolist():
            hits = Counter()
            exact = Counter()
            for m in np.flatnonzero(inst == g).tolist():
                if prior[m] >= 0:
                    o = find(int(prior[m]))
                    exact[o] += 1
                else:
                    o = owner.get(vox[m])
                    if o is None:
                        continue
                    o = find(o)
                hits[o] += 1
            claimed = sum(hits.values())
            match = None
            if claimed:
                best, count = min(hits.items(), key=lambda kv: (-kv[1], kv[0]))
                if count >= min_overlap and count >= overlap_ratio * claimed:
                    match = best
            if match is None:
                match = next_id
                sizes[match] = 0
                next_id += 1
            for o, c in sorted(exact.items()):
                if o != match and c == sizes[o]:
                    alias[o] = match
                    sizes[match] += sizes.pop(o)
            decided[g] = match
        for m, p in enumerate(idx.tolist()):
            sid = decided[int(inst[m])]
            owner.setdefault(vox[m], sid)
            if labels[p] < 0:
                labels[p] = sid
                sizes[find(sid)] += 1
        maps[w] = decided

    # resolve absorbed ids, then renumber the ids that own points densely in
    # creation order; a window id whose points were all claimed earlier maps to -1
    roots = np.array([find(i) for i in range(next_id)], dtype=np.int64)
    has = labels >= 0
    labels[has] = roots[labels[has]]
    used = np.unique(labels[has])
    dense = np.full(next_id, -1, dtype=np.int64)
    dense[used] = np.arange(len(used))
    labels[has] = dense[labels[has]]
    maps = [{g: int(dense[roots[sid]]) for g, sid in m.items()} for m in maps]

    missing = np.flatnonzero(labels < 0)
    if len(missing):
        done = np.flatnonzero(labels >= 0)
        if len(done) == 0:
            raise ValueError("no window labeled any point")
        log.warning("%d points not covered by any window; using nearest labeled neighbour", len(missing))
        _, nn = cKDTree(locations[done]).query(locations[missing])
        labels[missing] = labels[done[nn]]
    return MergeResult(labels, maps, missing)


def block_merge(windows: Sequence[WindowLabels], locations, voxel_size: float = 0.05, overlap_ratio: float = 0.5) -> np.ndarray:
    return block_merge_detailed(windows, locations, voxel_size, overlap_ratio).instance


def confidence(qs_rows: np.ndarray, qi_values: np.ndarray, semantic_class: int) -> float:
    """Mean over member points of log Q^S(majority class) + log Q^I(own instance)."""
    qs_rows = np.atleast_2d(qs_rows)
    qi_values = np.asarray(qi_values, dtype=np.float64).reshape(-1)
    if len(qi_values) == 0:
        raise ValueError("confidence of an empty instance")
    terms = np.log(np.maximum(qs_rows[:, semantic_class], P_FLOOR)) + np.log(np.maximum(qi_values, P_FLOOR))
    return float(terms.mean())


def instance_confidence(state, i: int) -> float:
    """Confidence of live instance ``i`` of an inference state, over its argmax members."""
    members = np.flatnonzero(state.instance_labels() == i)
    if len(members) == 0:
        raise ValueError(f"instance {i} has no members")
    s = _majority(state.semantic_labels()[members])
    return confidence(state.qs[members], state.qi[members, i], s)


@dataclass
class Instance:
    points: np.ndarray  # sorted point indices
    semantic: int
    confidence: float
    scene: str = ""


def point_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def nms(instances: Sequence[Instance], iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression within each class; returns kept positions in ``instances``."""
    order = sorted(range(len(instances)), key=lambda k: (-instances[k].confidence, k))
    kept: list[int] = []
    for k in order:
        cand = instances[k]
        if all(
            instances[m].semantic != cand.semantic or point_iou(instances[m].points, cand.points) <= iou_threshold
            for m in kept
        ):
            kept.append(k)
    return kept


@dataclass
class SegmentationResult:
    semantic: np.ndarray  # (N,) class per point
    instance: np.ndarray  # (N,) dense instance id, -1 where suppressed or pruned
    confidences: np.ndarray  # (K,)
    instance_semantic: np.ndarray  # (K,)

    def instances(self, scene: str = "") -> list[Instance]:
        return [
            Instance(np.flatnonzero(self.instance == k), int(self.instance_semantic[k]), float(self.confidences[k]), scene)
            for k in range(len(self.confidences))
        ]


def assemble_result(
    semantic: np.ndarray,
    scene_ids: np.ndarray,
    qs: np.ndarray,
    qi_own: np.ndarray,
    nms_iou: float = 0.5,
    min_points: int = 0,
) -> SegmentationResult:
    """Score merged instances, prune small ones, run NMS and renumber densely."""
    candidates: list[Instance] = []
    for sid in np.unique(scene_ids).tolist():
        members = np.flatnonzero(scene_ids == sid)
        if len(members) < max(min_points, 1):
            continue
        s = _majority(semantic[members])
        candidates.append(Instance(members, s, confidence(qs[members], qi_own[members], s)))
    kept = sorted(nms(candidates, nms_iou), key=lambda k: candidates[k].points[0])
    instance = np.full(len(semantic), -1, dtype=np.int64)
    conf, cls = [], []
    for new_id, k in enumerate(kept):
        instance[candidates[k].points] = new_id
        conf.append(candidates[k].confidence)
        cls.append(candidates[k].semantic)
    return SegmentationResult(
        np.asarray(semantic, dtype=np.int64), instance, np.asarray(conf, dtype=np.float64), np.asarray(cls, dtype=np.int64)
    )


def write_instance_summary(path, result: SegmentationResult, class_names: Sequence[str]) -> None:
    """``<instance_id> <class_name> <size> <confidence>`` per surviving instance."""
    sizes = np.bincount(result.instance[result.instance >= 0], minlength=len(result.confidences))
    with open(path, "w") as fh:
        for k, (c, f) in enumerate(zip(result.instance_semantic.tolist(), result.confidences.tolist())):
            name = class_names[c] if c < len(class_names) else str(c)
            fh.write(f"{k} {name} {int(sizes[k])} {f:.10f}\n")


def read_instance_summary(path) -> list[tuple[int, str, int, float]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                k, name, size, conf = line.split()
                rows.append((int(k), name, int(size), float(conf)))
    return rows
