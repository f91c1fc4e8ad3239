"""Synthetic indoor scenes and their on-disk formats.

Points are ASCII PLY (``element vertex`` with float x y z). Annotations
live in a sidecar text file next to the PLY, one ``box`` line per object::

    scene <id>
    classes bed table ...
    box <class:int> <cx> <cy> <cz> <w> <l> <h>

Detections use the same layout with ``det <class> <score> <cx> <cy> <cz> <w> <l> <h>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .boxes import Box3D, Detection

PathLike = Union[str, Path]

CLASS_NAMES = ("bed", "table", "sofa", "chair", "toilet", "desk", "dresser",
               "night_stand", "bookshelf", "bathtub")

# mean (w, l, h) in meters; chosen so every class is separable by size alone
CLASS_SIZES = (
    (2.0, 1.5, 0.5),
    (1.0, 1.0, 0.75),
    (1.9, 0.9, 0.9),
    (0.5, 0.5, 1.0),
    (0.4, 0.7, 0.7),
    (1.4, 0.6, 0.8),
    (1.0, 0.5, 1.2),
    (0.45, 0.45, 0.55),
    (0.9, 0.3, 1.9),
    (1.6, 0.8, 0.45),
)


class SceneFormatError(ValueError):
    pass


@dataclass
class Scene:
    points: np.ndarray
    boxes: List[Box3D] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    scene_id: str = "scene"
    classes: Tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.labels = [int(v) for v in self.labels]
        if len(self.boxes) != len(self.labels):
            raise ValueError("one label per box")
        if any(not 0 <= c < len(self.classes) for c in self.labels):
            raise ValueError("class id outside the vocabulary")

    @property
    def centroids(self) -> np.ndarray:
        return np.array([b.center for b in self.boxes]).reshape(-1, 3)

    def points_in_box(self, i: int) -> int:
        return int(self.boxes[i].contains(self.points).sum())


@dataclass
class SceneSpec:
    room_size: Tuple[float, float, float] = (4.0, 4.0, 2.2)
    object_count: Tuple[int, int] = (2, 3)
    class_sizes: Tuple[Tuple[float, float, float], ...] = CLASS_SIZES
    size_jitter: float = 0.08
    density: float = 150.0
    clutter_fraction: float = 0.2
    margin: float = 0.15
    max_retries: int = 100
    max_layouts: int = 50

    def min_points(self, size) -> int:
        """Points the generator guarantees on a box of this size (density x visible area)."""
        return int(np.ceil(self.density * visible_area(size)))


def visible_area(size) -> float:
    w, l, h = size
    return w * l + 2 * h * (w + l)


def _sample_box_surface(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    # five faces: the top and four sides; the bottom rests on the floor
    w, l, h = box.size
    lo = box.lo
    areas = np.array([w * l, w * h, w * h, l * h, l * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    for f, (ax_u, ax_v, fixed_ax, fixed_val) in enumerate((
            (0, 1, 2, h), (0, 2, 1, 0.0), (0, 2, 1, l), (1, 2, 0, 0.0), (1, 2, 0, w))):
        sel = face == f
        ext = (w, l, h)
        pts[sel, ax_u] = u[sel] * ext[ax_u]
        pts[sel, ax_v] = v[sel] * ext[ax_v]
        pts[sel, fixed_ax] = fixed_val
    return pts + lo


def generate_scene(seed: int, spec: Optional[SceneSpec] = None, scene_id: Optional[str] = None) -> Scene:
    """Place non-overlapping boxes on the floor and scan their surfaces.

    Every object gets ``spec.min_points`` surface points; floor and wall
    clutter then makes up ``clutter_fraction`` of the scene. Deterministic in
    ``(seed, spec)``.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    rx, ry, rz = spec.room_size
    lo_n, hi_n = spec.object_count
    count = int(rng.integers(lo_n, hi_n + 1))
    for _layout in range(spec.max_layouts):
        boxes, labels = _place(rng, count, spec)
        if boxes is not None:
            break
    else:
        raise RuntimeError(f"could not place {count} objects in a {rx} x {ry} room "
                           f"after {spec.max_layouts} layouts")

    parts = [_sample_box_surface(rng, b, spec.min_points(b.size)) for b in boxes]
    n_obj = sum(len(p) for p in parts)
    frac = spec.clutter_fraction
    n_clutter = int(round(frac / (1 - frac) * n_obj)) if n_obj else int(round(spec.density * rx * ry * frac))
    parts.append(_clutter(rng, n_clutter, spec, boxes))
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    points = points[rng.permutation(len(points))]
    return Scene(points, boxes, labels, scene_id or f"scene_{seed:06d}")


def _place(rng, count: int, spec: SceneSpec):
    """One layout attempt: draw classes and sizes, then rejection-sample positions."""
    rx, ry, rz = spec.room_size
    boxes: List[Box3D] = []
    labels: List[int] = []
    for _ in range(count):
        label = int(rng.integers(len(spec.class_sizes)))
        size = np.asarray(spec.class_sizes[label]) * (1 + spec.size_jitter * rng.uniform(-1, 1, 3))
        if size[0] + 2 * spec.margin > rx or size[1] + 2 * spec.margin > ry or size[2] > rz:
            return None, None
        for _attempt in range(spec.max_retries):
            cx = rng.uniform(size[0] / 2 + spec.margin, rx - size[0] / 2 - spec.margin)
            cy = rng.uniform(size[1] / 2 + spec.margin, ry - size[1] / 2 - spec.margin)
            if all(abs(cx - b.center[0]) >= (size[0] + b.size[0]) / 2 + spec.margin
                   or abs(cy - b.center[1]) >= (size[1] + b.size[1]) / 2 + spec.margin for b in boxes):
                break
        else:
            return None, None
        boxes.append(Box3D((cx, cy, size[2] / 2), size))
        labels.append(label)
    return boxes, labels


def _clutter(rng, n: int, spec: SceneSpec, boxes: Sequence[Box3D]) -> np.ndarray:
    """Floor points outside every box footprint plus points on two walls."""
    rx, ry, rz = spec.room_size
    n_floor = n // 2
    floor = []
    pad = 0.05
    while sum(len(f) for f in floor) < n_floor:
        cand = np.column_stack([rng.uniform(0, rx, n_floor), rng.uniform(0, ry, n_floor), np.zeros(n_floor)])
        ok = np.ones(len(cand), dtype=bool)
        for b in boxes:
            ok &= ~np.all(np.abs(cand[:, :2] - np.asarray(b.center[:2])) <= np.asarray(b.size[:2]) / 2 + pad, axis=1)
        floor.append(cand[ok])
    floor = np.concatenate(floor)[:n_floor] if n_floor else np.zeros((0, 3))
    n_wall = n - n_floor
    u, v = rng.random(n_wall), rng.random(n_wall)
    side = rng.random(n_wall) < rx / (rx + ry)
    wall = np.where(side[:, None],
                    np.column_stack([u * rx, np.full(n_wall, ry), v * rz]),
                    np.column_stack([np.full(n_wall, rx), u * ry, v * rz]))
    return np.concatenate([floor, wall])


def fixed_size(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Deterministically subsample (or pad by resampling) to exactly ``n`` points."""
    rng = np.random.default_rng(seed)
    m = len(points)
    if m == n:
        return points
    if m > n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(m), rng.choice(m, size=n - m, replace=True)])
    return points[idx]


# -- PLY --------------------------------------------------------------------

_PLY_TYPES = {"float": np.float32, "float32": np.float32, "double": np.float64, "float64": np.float64,
              "int": np.int32, "int32": np.int32, "uchar": np.uint8, "uint8": np.uint8}


def write_ply(path: PathLike, elements: Dict[str, Dict[str, np.ndarray]]) -> None:
    """ASCII PLY with any number of elements; each element maps property name -> 1-D array."""
    header = ["ply", "format ascii 1.0"]
    body = []
    for name, props in elements.items():
        cols = list(props.items())
        n = len(cols[0][1]) if cols else 0
        header.append(f"element {name} {n}")
        for prop, arr in cols:
            kind = "int" if np.asarray(arr).dtype.kind in "iu" else "float"
            header.append(f"property {kind} {prop}")
        fmts = ["%d" if np.asarray(a).dtype.kind in "iu" else "%.9g" for _, a in cols]
        for i in range(n):
            body.append(" ".join(f % np.asarray(a)[i] for f, (_, a) in zip(fmts, cols)))
    header.append("end_header")
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path: PathLike) -> Dict[str, Dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise SceneFormatError(f"{path}:1: missing 'ply' magic")
    elements: List[Tuple[str, int, List[Tuple[str, type]]]] = []
    i = 1
    while True:
        if i >= len(lines):
            raise SceneFormatError(f"{path}: header has no end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise SceneFormatError(f"{path}:{i}: only ascii PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise SceneFormatError(f"{path}:{i}: malformed element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES or not elements:
                raise SceneFormatError(f"{path}:{i}: unsupported property line {lines[i - 1]!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
        else:
            raise SceneFormatError(f"{path}:{i}: unexpected header line {lines[i - 1]!r}")
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            if i >= len(lines):
                raise SceneFormatError(f"{path}: file ends inside element {name!r}")
            tok = lines[i].split()
            i += 1
            if len(tok) != len(props):
                raise SceneFormatError(f"{path}:{i}: expected {len(props)} values, got {len(tok)}")
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise SceneFormatError(f"{path}:{i}: non-numeric value") from None
        table = np.asarray(rows, dtype=np.float64).reshape(count, len(props))
        out[name] = {p: table[:, j].astype(t) for j, (p, t) in enumerate(props)}
    return out


# -- scenes on disk -------------------------------------------------------------

def sidecar_path(ply_path: PathLike) -> Path:
    return Path(ply_path).with_suffix(".txt")


def save_scene(scene: Scene, path: PathLike) -> Path:
    """Write ``<path>.ply`` plus its annotation sidecar; returns the PLY path."""
    ply = Path(path).with_suffix(".ply")
    p = scene.points
    write_ply(ply, {"vertex": {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2]}})
    lines = [f"scene {scene.scene_id}", "classes " + " ".join(scene.classes)]
    for box, label in zip(scene.boxes, scene.labels):
        lines.append("box %d %s" % (label, " ".join(repr(v) for v in box.center + box.size)))
    sidecar_path(ply).write_text("\n".join(lines) + "\n")
    return ply


def load_scene(path: PathLike) -> Scene:
    ply = Path(path).with_suffix(".ply")
    vertex = read_ply(ply).get("vertex")
    if vertex is None or not {"x", "y", "z"} <= set(vertex):
        raise SceneFormatError(f"{ply}: no vertex x/y/z element")
    points = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float32)
    scene_id, classes, boxes, labels = ply.stem, CLASS_NAMES, [], []
    side = sidecar_path(ply)
    if side.exists():
        for lineno, raw in enumerate(side.read_text().splitlines(), 1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            try:
                if tok[0] == "scene":
                    scene_id = tok[1]
                elif tok[0] == "classes":
                    classes = tuple(tok[1:])
                elif tok[0] == "box":
                    if len(tok) != 8:
                        raise ValueError("expected 'box <class> cx cy cz w l h'")
                    vals = [float(t) for t in tok[2:]]
                    boxes.append(Box3D(vals[:3], vals[3:]))
                    labels.append(int(tok[1]))
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (ValueError, IndexError) as exc:
                raise SceneFormatError(f"{side}:{lineno}: {exc}") from None
    return Scene(points, boxes, labels, scene_id, classes)


def save_dataset(scenes: Sequence[Scene], directory: PathLike) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_scene(s, directory / s.scene_id) for s in scenes]


def load_dataset(directory: PathLike) -> List[Scene]:
    directory = Path(directory)
    plys = sorted(directory.glob("*.ply"))
    plys = [p for p in plys if not p.name.endswith(".votes.ply")]
    if not plys:
        raise FileNotFoundError(f"no .ply scenes under {directory}")
    return [load_scene(p) for p in plys]


def save_detections(dets: Sequence[Detection], path: PathLike) -> None:
    lines = ["det %d %r %s" % (d.label, d.score, " ".join(repr(v) for v in d.box.center + d.box.size))
             for d in dets]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_detections(path: PathLike) -> List[Detection]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] != "det" or len(tok) != 9:
            raise SceneFormatError(f"{path}:{lineno}: expected 'det <class> <score> cx cy cz w l h'")
        try:
            vals = [float(t) for t in tok[3:]]
            out.append(Detection(Box3D(vals[:3], vals[3:]), int(tok[1]), float(tok[2])))
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
    return out
