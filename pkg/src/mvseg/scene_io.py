"""Point clouds: data model, PLY and label-file I/O, synthetic scenes, window scanning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

DEFAULT_COLOR = 0.5
NORMAL_TOL = 1e-6


class PlyError(ValueError):
    """Unreadable PLY file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Vertex:
    location: np.ndarray
    normal: np.ndarray | None
    color: np.ndarray
    gt_semantic: int | None = None
    gt_instance: int | None = None


def _frozen(a, dtype):
    if a is None:
        return None
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable point cloud stored column-wise.

    ``locations`` is (N, 3) in meters, ``colors`` (N, 3) in [0, 1], ``normals``
    (N, 3) unit vectors or None. Ground-truth labels are optional (N,) integer arrays.
    """

    locations: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    gt_semantic: np.ndarray | None = None
    gt_instance: np.ndarray | None = None
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.float64).reshape(-1, 3)
        n = len(loc)
        if not np.all(np.isfinite(loc)):
            raise ValueError("point locations must be finite")
        colors = self.colors
        if colors is None:
            colors = np.full((n, 3), DEFAULT_COLOR)
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if len(colors) != n:
            raise ValueError("colors length differs from locations")
        if np.any(colors < 0) or np.any(colors > 1):
            raise ValueError("color channels must lie in [0, 1]")
        normals = self.normals
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != n:
                raise ValueError("normals length differs from locations")
            norms = np.linalg.norm(normals, axis=1)
            if np.any(norms == 0) or not np.all(np.isfinite(norms)):
                raise ValueError("normals must be finite and non-zero")
            off = np.abs(norms - 1) > NORMAL_TOL
            if np.any(off):
                normals = normals.copy()
                normals[off] /= norms[off, None]
        sem, inst = self.gt_semantic, self.gt_instance
        if sem is not None:
            sem = np.asarray(sem, dtype=np.int64).reshape(-1)
            if len(sem) != n:
                raise ValueError("gt_semantic length differs from locations")
            if np.any(sem < 0):
                raise ValueError("semantic labels must be non-negative")
        if inst is not None:
            inst = np.asarray(inst, dtype=np.int64).reshape(-1)
            if len(inst) != n:
                raise ValueError("gt_instance length differs from locations")
            if np.any(inst < 0):
                raise ValueError("instance ids must be non-negative")
            if sem is not None:
                pairs = np.unique(np.stack([inst, sem], axis=1), axis=0)
                if len(np.unique(pairs[:, 0])) != len(pairs):
                    raise ValueError("an instance id maps to more than one semantic label")
        object.__setattr__(self, "locations", _frozen(loc, np.float64))
        object.__setattr__(self, "colors", _frozen(colors, np.float64))
        object.__setattr__(self, "normals", _frozen(normals, np.float64))
        object.__setattr__(self, "gt_semantic", _frozen(sem, np.int64))
        object.__setattr__(self, "gt_instance", _frozen(inst, np.int64))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def has_labels(self) -> bool:
        return self.gt_semantic is not None and self.gt_instance is not None

    def vertex(self, j: int) -> Vertex:
        return Vertex(
            location=self.locations[j],
            normal=None if self.normals is None else self.normals[j],
            color=self.colors[j],
            gt_semantic=None if self.gt_semantic is None else int(self.gt_semantic[j]),
            gt_instance=None if self.gt_instance is None else int(self.gt_instance[j]),
        )

    def with_labels(self, semantic, instance) -> "PointCloud":
        return PointCloud(
            self.locations, self.colors, self.normals, semantic, instance, self.class_names
        )

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(
            self.locations[idx],
            self.colors[idx],
            pick(self.normals),
            pick(self.gt_semantic),
            pick(self.gt_instance),
            self.class_names,
        )


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_SEM_NAMES = ("semantic", "label", "class")
_INST_NAMES = ("instance", "instance_id")


@dataclass
class _Element:
    name: str
    count: int
    props: list[tuple[str, str]] = field(default_factory=list)
    has_list: bool = False


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("header has no end_header line", len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("header has no end_header line", len(data))
    body_start = nl + 1
    fmt = None
    comments: list[str] = []
    elements: list[_Element] = []
    offset = 0
    for raw in data[:body_start].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line == "ply" or line == "end_header":
            continue
        parts = line.split()
        kw = parts[0]
        if kw == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported format line {line!r}", line_offset)
            fmt = parts[1]
        elif kw in ("comment", "obj_info"):
            comments.append(line[len(kw):].strip())
        elif kw == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"bad element line {line!r}", line_offset)
            elements.append(_Element(parts[1], int(parts[2])))
        elif kw == "property":
            if not elements:
                raise PlyError("property before any element", line_offset)
            if len(parts) == 5 and parts[1] == "list":
                elements[-1].has_list = True
                elements[-1].props.append((parts[4], "list"))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise PlyError(f"bad property line {line!r}", line_offset)
        else:
            raise PlyError(f"unknown header keyword {kw!r}", line_offset)
    if fmt is None:
        raise PlyError("header has no format line", 0)
    return fmt, comments, elements, body_start


def read_ply(path: str | Path) -> PointCloud:
    """Read a vertex cloud from an ASCII or binary-little-endian PLY file.

    Recognised vertex properties: x, y, z (required), nx, ny, nz, red, green,
    blue (integer colors are divided by 255), and optional per-vertex
    ``semantic``/``instance`` labels. Class names come from a
    ``comment classes ...`` header line.
    """
    data = Path(path).read_bytes()
    fmt, comments, elements, pos = _parse_header(data)
    class_names: tuple[str, ...] = ()
    for c in comments:
        if c.startswith("classes "):
            class_names = tuple(c.split()[1:])

    vertex = None
    for el in elements:
        if el.name == "vertex":
            vertex = el
            break
        # skip preceding elements
        if fmt == "ascii":
            for _ in range(el.count):
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise PlyError(f"truncated body in element {el.name!r}", len(data))
                pos = nl + 1
        else:
            if el.has_list:
                raise PlyError(f"cannot skip list element {el.name!r} before vertices", pos)
            pos += el.count * np.dtype([(n, "<" + t) for n, t in el.props]).itemsize
    if vertex is None:
        raise PlyError("no vertex element", pos)
    names = [n for n, _ in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}", 0)
    if vertex.has_list:
        raise PlyError("list properties on vertices are not supported", 0)

    dtype = np.dtype([(n, "<" + t) for n, t in vertex.props])
    if fmt == "ascii":
        table, row_offsets = _read_ascii_rows(data, pos, vertex, dtype)
    else:
        need = vertex.count * dtype.itemsize
        if len(data) - pos < need:
            have = (len(data) - pos) // dtype.itemsize
            raise PlyError(
                f"truncated body: {vertex.count} vertices declared, {have} present", len(data)
            )
        table = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=pos)
        row_offsets = pos + dtype.itemsize * np.arange(vertex.count)

    loc = np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1)
    bad = ~np.all(np.isfinite(loc), axis=1)
    if np.any(bad):
        row = int(np.argmax(bad))
        raise PlyError(f"non-finite coordinate in vertex {row}", int(row_offsets[row]))

    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        normals = np.stack([table[k].astype(np.float64) for k in ("nx", "ny", "nz")], axis=1)
    colors = None
    if all(k in names for k in ("red", "green", "blue")):
        cols = [table[k] for k in ("red", "green", "blue")]
        colors = np.stack([c.astype(np.float64) for c in cols], axis=1)
        if cols[0].dtype.kind in "iu":
            colors /= 255.0
    sem = next((table[k].astype(np.int64) for k in _SEM_NAMES if k in names), None)
    inst = next((table[k].astype(np.int64) for k in _INST_NAMES if k in names), None)
    try:
        return PointCloud(loc, colors, normals, sem, inst, class_names)
    except ValueError as exc:
        raise PlyError(str(exc), pos) from exc


def _read_ascii_rows(data: bytes, pos: int, el: _Element, dtype: np.dtype):
    table = np.zeros(el.count, dtype=dtype)
    offsets = np.zeros(el.count, dtype=np.int64)
    width = len(el.props)
    row = 0
    while row < el.count:
        if pos >= len(data):
            raise PlyError(
                f"truncated body: {el.count} vertices declared, {row} present", len(data)
            )
        nl = data.find(b"\n", pos)
        end = len(data) if nl < 0 else nl
        fields = data[pos:end].split()
        if fields:
            if len(fields) < width:
                raise PlyError(f"vertex {row} has {len(fields)} values, expected {width}", pos)
            try:
                table[row] = tuple(
                    float(f) if dtype[i].kind == "f" else int(f)
                    for i, f in enumerate(fields[:width])
                )
            except ValueError as exc:
                raise PlyError(f"unparsable value in vertex {row}", pos) from exc
            offsets[row] = pos
            row += 1
        pos = end + 1
    return table, offsets


def write_ply(path: str | Path, cloud: PointCloud, binary: bool = True, color_format: str = "float"):
    """Write ``cloud`` as PLY.

    Coordinates are stored as doubles so a binary round trip is bit-exact.
    ``color_format="uchar"`` writes 8-bit colors (lossy) instead of doubles.
    """
    props: list[tuple[str, str, np.ndarray]] = []
    for i, a in enumerate("xyz"):
        props.append((a, "double", cloud.locations[:, i]))
    if cloud.normals is not None:
        for i, a in enumerate(("nx", "ny", "nz")):
            props.append((a, "double", cloud.normals[:, i]))
    for i, a in enumerate(("red", "green", "blue")):
        if color_format == "uchar":
            props.append((a, "uchar", np.round(cloud.colors[:, i] * 255).astype(np.uint8)))
        else:
            props.append((a, "double", cloud.colors[:, i]))
    if cloud.gt_semantic is not None:
        props.append(("semantic", "int", cloud.gt_semantic))
    if cloud.gt_instance is not None:
        props.append(("instance", "int", cloud.gt_instance))

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if cloud.class_names:
        header.append("comment classes " + " ".join(cloud.class_names))
    header.append(f"element vertex {len(cloud)}")
    header += [f"property {t} {n}" for n, t, _ in props]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    dtype = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t, _ in props])
    table = np.zeros(len(cloud), dtype=dtype)
    for n, _, col in props:
        table[n] = col
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            fh.write(table.tobytes())
        else:
            lines = (" ".join(repr(v) for v in rec) + "\n" for rec in table.tolist())
            fh.write("".join(lines).encode("ascii"))


# ---------------------------------------------------------------- label files


def read_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``<semantic_index> <instance_id>`` lines."""
    arr = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if arr.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if arr.shape[1] != 2:
        raise ValueError(f"{path}: expected 2 columns per line, got {arr.shape[1]}")
    return arr[:, 0].copy(), arr[:, 1].copy()


def write_labels(path: str | Path, semantic, instance) -> None:
    sem = np.asarray(semantic, dtype=np.int64)
    inst = np.asarray(instance, dtype=np.int64)
    if sem.shape != inst.shape:
        raise ValueError("semantic and instance label arrays differ in length")
    with open(path, "w") as fh:
        fh.writelines(f"{s} {i}\n" for s, i in zip(sem.tolist(), inst.tolist()))


# ---------------------------------------------------------------- synthetic scenes


def _sample_rect(rng, count, center, u, v, half_u, half_v):
    a = rng.uniform(-half_u, half_u, size=count)
    b = rng.uniform(-half_v, half_v, size=count)
    return center + a[:, None] * u + b[:, None] * v


def _plane_points(rng, prim):
    sx, sy = prim["size"][:2]
    count = int(round(sx * sy * prim["density"]))
    center = np.asarray(prim["center"], dtype=np.float64)
    c, s = math.cos(prim.get("yaw", 0.0)), math.sin(prim.get("yaw", 0.0))
    u, v = np.array([c, s, 0.0]), np.array([-s, c, 0.0])
    pts = _sample_rect(rng, count, center, u, v, sx / 2, sy / 2)
    normals = np.tile([0.0, 0.0, 1.0], (count, 1))
    return pts, normals


def _box_points(rng, prim):
    sx, sy, sz = prim["size"]
    base = np.asarray(prim["center"], dtype=np.float64)
    c, s = math.cos(prim.get("yaw", 0.0)), math.sin(prim.get("yaw", 0.0))
    ex, ey, ez = np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])
    mid = base + ez * sz / 2
    faces = [
        (mid + ez * sz / 2, ex, ey, sx, sy, ez),
        (mid + ex * sx / 2, ey, ez, sy, sz, ex),
        (mid - ex * sx / 2, ey, ez, sy, sz, -ex),
        (mid + ey * sy / 2, ex, ez, sx, sz, ey),
        (mid - ey * sy / 2, ex, ez, sx, sz, -ey),
    ]
    if not prim.get("open_bottom", True):
        faces.append((mid - ez * sz / 2, ex, ey, sx, sy, -ez))
    pts, nrm = [], []
    for center, u, v, du, dv, normal in faces:
        count = int(round(du * dv * prim["density"]))
        pts.append(_sample_rect(rng, count, center, u, v, du / 2, dv / 2))
        nrm.append(np.tile(normal, (count, 1)))
    return np.concatenate(pts), np.concatenate(nrm)


def generate_synthetic_scene(seed: int, recipe: dict[str, Any]) -> PointCloud:
    """Sample a labeled cloud from a recipe of planes and boxes.

    Each primitive becomes one ground-truth instance (ids in recipe order). The
    number of points on a surface is ``round(area * density)``; positions are
    uniform on the surface plus Gaussian noise of std ``position_noise``.
    """
    prims = recipe.get("primitives") or []
    if not prims:
        raise ValueError("recipe has no primitives")
    classes = list(recipe.get("classes") or [])
    for p in prims:
        if p["class"] not in classes:
            classes.append(p["class"])
    rng = np.random.default_rng(seed)
    locs, normals, colors, sem, inst = [], [], [], [], []
    for idx, prim in enumerate(prims):
        kind = prim.get("kind", "box")
        if kind == "plane":
            pts, nrm = _plane_points(rng, prim)
        elif kind == "box":
            pts, nrm = _box_points(rng, prim)
        else:
            raise ValueError(f"primitive {idx}: unknown kind {kind!r}")
        pts = pts + rng.normal(0.0, prim.get("position_noise", 0.0), size=pts.shape)
        base = np.asarray(prim.get("color", (0.5, 0.5, 0.5)), dtype=np.float64)
        col = base + rng.normal(0.0, prim.get("color_noise", 0.0), size=pts.shape)
        locs.append(pts)
        normals.append(nrm)
        colors.append(np.clip(col, 0.0, 1.0))
        sem.append(np.full(len(pts), classes.index(prim["class"])))
        inst.append(np.full(len(pts), idx))
    return PointCloud(
        np.concatenate(locs),
        np.concatenate(colors),
        np.concatenate(normals),
        np.concatenate(sem),
        np.concatenate(inst),
        tuple(classes),
    )


_CLASS_COLORS = [
    (0.55, 0.5, 0.45),
    (0.8, 0.25, 0.2),
    (0.2, 0.35, 0.8),
    (0.25, 0.7, 0.3),
    (0.85, 0.75, 0.2),
    (0.6, 0.3, 0.7),
]
# box footprint and height per non-floor class slot
_CLASS_SHAPES = [
    (0.45, 0.45, 0.45),
    (0.7, 0.6, 0.75),
    (0.5, 0.3, 1.0),
    (0.4, 0.4, 0.3),
    (0.8, 0.4, 0.5),
]


def random_recipe(rng: np.random.Generator, synth) -> dict[str, Any]:
    """Random room recipe: a floor plane (first class) plus non-overlapping boxes."""
    classes = list(synth.classes)
    rx, ry = synth.room_size
    prims: list[dict[str, Any]] = [
        dict(
            kind="plane",
            **{"class": classes[0]},
            center=[rx / 2, ry / 2, 0.0],
            size=[rx, ry],
            density=synth.density,
            color=list(_CLASS_COLORS[0]),
            color_noise=synth.color_noise,
            position_noise=synth.position_noise,
        )
    ]
    n_obj = int(rng.integers(synth.min_objects, synth.max_objects + 1))
    placed: list[tuple[float, float, float]] = []
    for _ in range(n_obj):
        cls = int(rng.integers(1, len(classes)))
        sx, sy, sz = (v * rng.uniform(0.9, 1.1) for v in _CLASS_SHAPES[(cls - 1) % len(_CLASS_SHAPES)])
        radius = 0.5 * math.hypot(sx, sy)
        for _attempt in range(200):
            cx = rng.uniform(radius, rx - radius)
            cy = rng.uniform(radius, ry - radius)
            if all(math.hypot(cx - px, cy - py) >= radius + pr + synth.min_gap for px, py, pr in placed):
                break
        else:
            continue
        placed.append((cx, cy, radius))
        base = np.asarray(_CLASS_COLORS[cls % len(_CLASS_COLORS)])
        color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        prims.append(
            dict(
                kind="box",
                **{"class": classes[cls]},
                center=[cx, cy, 0.0],
                size=[sx, sy, sz],
                yaw=float(rng.uniform(0, math.pi)),
                density=synth.density,
                color=color.tolist(),
                color_noise=synth.color_noise,
                position_noise=synth.position_noise,
            )
        )
    return {"classes": classes, "primitives": prims}


# ---------------------------------------------------------------- windows


@dataclass(frozen=True, eq=False)
class Window:
    vertex_indices: np.ndarray
    origin: np.ndarray
    size: np.ndarray

    def unique_indices(self) -> np.ndarray:
        return np.unique(self.vertex_indices)


def window_origins(lo, hi, size, stride) -> list[np.ndarray]:
    """Candidate window min-corners tiling the box [lo, hi] (axes with infinite size span it whole)."""
    axes = []
    for a in range(3):
        if not math.isfinite(size[a]):
            axes.append([lo[a]])
            continue
        extent = hi[a] - lo[a]
        n = 1 if extent <= size[a] else int(math.ceil((extent - size[a]) / stride[a] - 1e-9)) + 1
        axes.append([lo[a] + k * stride[a] for k in range(n)])
    return [np.array([x, y, z]) for x in axes[0] for y in axes[1] for z in axes[2]]


def scan_windows(
    cloud: PointCloud,
    window_size: Sequence[float] = (1.0, 1.0, float("inf")),
    stride: Sequence[float] = (0.5, 0.5, float("inf")),
    window_point_count: int = 4096,
    rng: np.random.Generator | int | None = 0,
) -> list[Window]:
    """Cover the cloud with overlapping windows of exactly ``window_point_count`` indices.

    A cell holding more points than the budget yields several windows (disjoint
    chunks of a random permutation, the last one topped up from the rest of the
    cell), so every vertex lands in some window. A cell holding fewer keeps all
    of its points and pads by sampling them with replacement.
    """
    if len(cloud) == 0:
        raise ValueError("cannot scan an empty cloud")
    if window_point_count < 1:
        raise ValueError("window_point_count must be >= 1")
    size = np.array(window_size, dtype=np.float64)
    step = np.array(stride, dtype=np.float64)
    finite = np.isfinite(size)
    if np.any(step[finite] > size[finite]) or np.any(step[finite] <= 0):
        raise ValueError("stride must be positive and no larger than the window size")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    loc = cloud.locations
    lo, hi = loc.min(axis=0), loc.max(axis=0)
    windows: list[Window] = []
    for origin in window_origins(lo, hi, size, step):
        top = np.where(finite, origin + size, np.inf)
        extent = np.where(finite, size, hi - lo)
        inside = np.all((loc >= origin) & (loc <= top), axis=1)
        members = np.flatnonzero(inside)
        if len(members) == 0:
            continue
        for chunk in _chunk_members(rng, members, window_point_count):
            windows.append(Window(chunk, origin.copy(), extent.copy()))
    return windows


def _chunk_members(rng, members, count):
    if len(members) <= count:
        extra = rng.choice(members, size=count - len(members), replace=True)
        return [np.concatenate([members, extra])]
    perm = rng.permutation(members)
    chunks = []
    for start in range(0, len(perm), count):
        chunk = perm[start:start + count]
        if len(chunk) < count:
            rest = np.setdiff1d(members, chunk, assume_unique=True)
            chunk = np.concatenate([chunk, rng.choice(rest, size=count - len(chunk), replace=False)])
        chunks.append(chunk)
    return chunks


def window_features(cloud: PointCloud, window: Window, indices=None) -> np.ndarray:
    """Per-point network input: location relative to the window origin, color, normal (or zeros)."""
    idx = window.vertex_indices if indices is None else indices
    rel = cloud.locations[idx] - window.origin
    normals = cloud.normals[idx] if cloud.normals is not None else np.zeros((len(idx), 3))
    return np.concatenate([rel, cloud.colors[idx], normals], axis=1)
