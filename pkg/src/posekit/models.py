"""Object models: mesh/point-cloud loading, surface sampling, diameter,
symmetry declarations, and procedural test shapes.

Meshes are plain numpy arrays: vertices (N, 3) float64 in meters, triangles
(M, 3) int64 (empty for point clouds). OFF and ascii PLY are supported;
binary PLY is refused. Polygon faces are fan-triangulated on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from posekit.pose import Rotation


class ParseError(ValueError):
    """Malformed model file; carries the 1-based line number."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsupportedFormat(ValueError):
    """Recognized but unsupported encoding (e.g. binary PLY)."""


class EmptyModel(ValueError):
    """Model has no vertices."""


@dataclass(frozen=True)
class SymmetrySpec:
    """Declared shape symmetry.

    kind "none": no symmetry. kind "discrete": a finite list of model-frame
    rotations that leave the shape invariant (identity need not be listed).
    kind "axis": continuous rotational symmetry about a model-frame axis.
    """

    kind: str = "none"
    rotations: tuple = ()
    axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("none", "discrete", "axis"):
            raise ValueError(f"unknown symmetry kind: {self.kind!r}")

    @classmethod
    def none(cls) -> "SymmetrySpec":
        return cls("none")

    @classmethod
    def discrete(cls, rotations) -> "SymmetrySpec":
        return cls("discrete", rotations=tuple(rotations))

    @classmethod
    def about_axis(cls, axis) -> "SymmetrySpec":
        axis = np.asarray(axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise ValueError("symmetry axis must be nonzero")
        return cls("axis", axis=tuple(axis / n))

    def to_dict(self) -> dict:
        if self.kind == "discrete":
            return {"kind": "discrete",
                    "rotations": [[float(c) for c in r.q]
                                  for r in self.rotations]}
        if self.kind == "axis":
            return {"kind": "axis", "axis": [float(c) for c in self.axis]}
        return {"kind": "none"}

    @classmethod
    def from_dict(cls, obj: dict) -> "SymmetrySpec":
        kind = obj.get("kind", "none")
        if kind == "discrete":
            return cls.discrete([Rotation(q) for q in obj["rotations"]])
        if kind == "axis":
            return cls.about_axis(obj["axis"])
        if kind == "none":
            return cls.none()
        raise ValueError(f"unknown symmetry kind: {kind!r}")


@dataclass
class ObjectModel:
    """A rigid object: geometry plus evaluation metadata."""

    vertices: np.ndarray
    triangles: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    symmetry: SymmetrySpec = field(default_factory=SymmetrySpec.none)
    name: str = ""
    convex: bool = False  # hint: silhouette == hull of projected vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0:
            raise EmptyModel("model has no vertices")
        if len(self.triangles) and (self.triangles.min() < 0 or
                                    self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_point_cloud(self) -> bool:
        return len(self.triangles) == 0


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_eval_points(model: ObjectModel, n: int, seed: int = 0) -> np.ndarray:
    """Sample n surface points, area-weighted over triangles (uniform over
    vertices for point clouds). Deterministic in seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if model.is_point_cloud:
        idx = rng.integers(0, len(model.vertices), size=n)
        return model.vertices[idx].copy()
    areas = _triangle_areas(model.vertices, model.triangles)
    total = areas.sum()
    if total <= 0.0:
        idx = rng.integers(0, len(model.vertices), size=n)
        return model.vertices[idx].copy()
    tri = rng.choice(len(model.triangles), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = model.triangles[tri]
    a = model.vertices[t[:, 0]]
    b = model.vertices[t[:, 1]]
    c = model.vertices[t[:, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def compute_diameter(model: ObjectModel, mode: str = "max_pairwise",
                     eval_points: np.ndarray | None = None,
                     chunk: int = 512) -> float:
    """Object diameter over eval points united with the vertices.

    mode "max_pairwise": exact brute-force max pairwise distance (chunked).
    mode "extents": axis-aligned bounding-box diagonal (cheap upper proxy).
    """
    pts = model.vertices
    if eval_points is not None and len(eval_points):
        pts = np.vstack([np.asarray(eval_points, dtype=np.float64), pts])
    if mode == "extents":
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if mode != "max_pairwise":
        raise ValueError(f"unknown diameter mode: {mode!r}")
    best = 0.0
    for i in range(0, len(pts), chunk):
        block = pts[i:i + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


# ---------------------------------------------------------------------------
# file formats

def _data_lines(path: Path):
    """Yield (line_number, stripped_text) skipping blanks and # comments."""
    with open(path, "r") as fh:
        for i, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield i, text


def _fan_triangulate(indices: list[int], line: int) -> list[tuple[int, int, int]]:
    if len(indices) < 3:
        raise ParseError("face with fewer than 3 vertices", line)
    return [(indices[0], indices[k], indices[k + 1])
            for k in range(1, len(indices) - 1)]


def load_off(path, unit_scale: float = 1.0) -> ObjectModel:
    """Load an OFF mesh. Counts may share the header line ("OFF 8 6 12")."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    counts = None
    if header.startswith("OFF"):
        rest = header[3:].split()
        if rest:
            counts = (line_no, rest)
    else:
        # headerless variants start directly with the counts
        counts = (line_no, header.split())
    if counts is None:
        try:
            line_no, text = next(lines)
        except StopIteration:
            raise ParseError("missing element counts", line_no) from None
        counts = (line_no, text.split())
    line_no, fields = counts
    try:
        nv, nf = int(fields[0]), int(fields[1])
    except (IndexError, ValueError):
        raise ParseError("expected vertex/face counts", line_no) from None
    if nv == 0:
        raise EmptyModel(f"{path.name}: no vertices")
    verts = np.empty((nv, 3))
    for k in range(nv):
        try:
            line_no, text = next(lines)
        except StopIteration:
            raise ParseError("unexpected end of file in vertex list",
                             line_no) from None
        parts = text.split()
        try:
            verts[k] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except (IndexError, ValueError):
            raise ParseError("bad vertex line", line_no) from None
    tris: list[tuple[int, int, int]] = []
    for _ in range(nf):
        try:
            line_no, text = next(lines)
        except StopIteration:
            raise ParseError("unexpected end of file in face list",
                             line_no) from None
        parts = text.split()
        try:
            k = int(parts[0])
            idx = [int(p) for p in parts[1:1 + k]]
            if len(idx) != k:
                raise ValueError
        except ValueError:
            raise ParseError("bad face line", line_no) from None
        tris.extend(_fan_triangulate(idx, line_no))
    return ObjectModel(verts * float(unit_scale),
                       np.array(tris, dtype=np.int64).reshape(-1, 3),
                       name=path.stem)


def load_ply(path, unit_scale: float = 1.0) -> ObjectModel:
    """Load an ascii PLY mesh or point cloud; binary PLY is refused."""
    path = Path(path)
    with open(path, "r", errors="replace") as fh:
        raw = fh.readlines()
    if not raw or raw[0].strip() != "ply":
        raise ParseError("not a PLY file (missing 'ply' magic)", 1)
    elements: list[tuple[str, int]] = []
    properties: dict[str, list[str]] = {}
    fmt = None
    body_start = None
    for i, line in enumerate(raw[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2])))
            except (IndexError, ValueError):
                raise ParseError("bad element declaration", i) from None
            properties[parts[1]] = []
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", i)
            properties[elements[-1][0]].append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i
            break
    if fmt is None or body_start is None:
        raise ParseError("incomplete PLY header", len(raw))
    if fmt != "ascii":
        raise UnsupportedFormat(f"{path.name}: PLY format {fmt!r} "
                                "not supported (ascii only)")
    counts = dict(elements)
    if counts.get("vertex", 0) == 0:
        raise EmptyModel(f"{path.name}: no vertices")
    verts = None
    tris: list[tuple[int, int, int]] = []
    cursor = body_start  # 0-based index into raw == 1-based line of header end
    for name, count in elements:
        if name == "vertex":
            props = properties[name]
            try:
                ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
            except ValueError:
                raise ParseError("vertex element lacks x/y/z", body_start) from None
            verts = np.empty((count, 3))
            for k in range(count):
                line_no = cursor + 1 + k
                try:
                    parts = raw[cursor + k].split()
                    verts[k] = [float(parts[ix]), float(parts[iy]),
                                float(parts[iz])]
                except (IndexError, ValueError):
                    raise ParseError("bad vertex line", line_no) from None
        elif name == "face":
            for k in range(count):
                line_no = cursor + 1 + k
                try:
                    parts = raw[cursor + k].split()
                    n = int(parts[0])
                    idx = [int(p) for p in parts[1:1 + n]]
                    if len(idx) != n:
                        raise ValueError
                except (IndexError, ValueError):
                    raise ParseError("bad face line", line_no) from None
                tris.extend(_fan_triangulate(idx, line_no))
        cursor += count
    return ObjectModel(verts * float(unit_scale),
                       np.array(tris, dtype=np.int64).reshape(-1, 3),
                       name=path.stem)


def sidecar_path(mesh_path) -> Path:
    """Metadata file convention: '<mesh file name>.json' next to the mesh."""
    p = Path(mesh_path)
    return p.with_name(p.name + ".json")


def load_model(path, sidecar: dict | None = None) -> tuple[ObjectModel, str]:
    """Load a mesh plus its optional sidecar metadata.

    Returns (model, diameter_mode). The sidecar may set unit_scale,
    symmetry, diameter_mode, and convex.
    """
    path = Path(path)
    meta = sidecar
    if meta is None:
        sc = sidecar_path(path)
        meta = json.loads(sc.read_text()) if sc.exists() else {}
    unit_scale = float(meta.get("unit_scale", 1.0))
    suffix = path.suffix.lower()
    if suffix == ".off":
        model = load_off(path, unit_scale)
    elif suffix == ".ply":
        model = load_ply(path, unit_scale)
    else:
        raise UnsupportedFormat(f"unknown mesh extension {suffix!r}")
    model.symmetry = SymmetrySpec.from_dict(meta.get("symmetry",
                                                     {"kind": "none"}))
    model.convex = bool(meta.get("convex", False))
    return model, str(meta.get("diameter_mode", "max_pairwise"))


def write_off(model: ObjectModel, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(model.vertices)} {len(model.triangles)} 0\n")
        for v in model.vertices:
            fh.write("%.17g %.17g %.17g\n" % tuple(v))
        for t in model.triangles:
            fh.write("3 %d %d %d\n" % tuple(t))


def write_sidecar(path, *, unit_scale: float = 1.0,
                  symmetry: SymmetrySpec | None = None,
                  diameter_mode: str = "max_pairwise",
                  convex: bool = False) -> Path:
    """Write the metadata sidecar for a mesh file; returns the sidecar path."""
    sc = sidecar_path(path)
    obj = {"unit_scale": unit_scale,
           "symmetry": (symmetry or SymmetrySpec.none()).to_dict(),
           "diameter_mode": diameter_mode,
           "convex": convex}
    sc.write_text(json.dumps(obj, indent=1))
    return sc


# ---------------------------------------------------------------------------
# procedural shapes used by the synthetic benchmarks

def make_unit_cube(side: float = 1.0) -> ObjectModel:
    s = side / 2.0
    verts = np.array([[x, y, z] for x in (-s, s) for y in (-s, s)
                      for z in (-s, s)])
    # 12 triangles, two per face, consistent outward winding not required
    # (rasterization does not cull)
    tris = np.array([
        [0, 1, 3], [0, 3, 2],  # x = -s
        [4, 6, 7], [4, 7, 5],  # x = +s
        [0, 4, 5], [0, 5, 1],  # y = -s
        [2, 3, 7], [2, 7, 6],  # y = +s
        [0, 2, 6], [0, 6, 4],  # z = -s
        [1, 5, 7], [1, 7, 3],  # z = +s
    ], dtype=np.int64)
    return ObjectModel(verts, tris, name="unit_cube", convex=True)


def make_icosphere(subdivisions: int = 2, radius: float = 0.5) -> ObjectModel:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vlist = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.array(vlist[i]) + np.array(vlist[j])
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    verts = np.array(vlist) * float(radius)
    return ObjectModel(verts, np.array(faces, dtype=np.int64),
                       name="icosphere", convex=True)


def make_ring(n: int = 1024, radius: float = 1.0) -> ObjectModel:
    """Planar circle point cloud in the xy-plane, symmetric about z."""
    ang = 2.0 * np.pi * np.arange(n) / n
    verts = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                      np.zeros(n)], axis=1)
    return ObjectModel(verts, symmetry=SymmetrySpec.about_axis((0, 0, 1)),
                       name="ring")
