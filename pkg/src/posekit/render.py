"""Deterministic software rasterizer producing silhouette masks and depth.

Conventions:

- Pixel (i, j) samples the continuous image point (j + 0.5, i + 0.5).
- Triangles cover a pixel if its center is strictly inside, or on a top/left
  edge (the shared-edge tie-break), so adjacent triangles never double-cover
  and never leave seams.
- Depth is interpolated perspective-correctly (linear in 1/z) with a z-buffer;
  both faces are kept (no back-face culling).
- Point-cloud models splat one pixel per projected point.
- Near-plane clipping is not implemented: triangles touching z <= 0 are
  skipped whole. Poses are expected to keep the object fully in front of the
  camera (desk-scale scenes); the object center must satisfy z > 0.

Images travel as PGM: masks as 8-bit P5 (0/255), depth as 16-bit P5 in
millimeters (big-endian, the PGM byte order for maxval > 255).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from posekit.pose import CameraIntrinsics, NonPositiveDepth, Pose

_Z_EPS = 1e-9


@dataclass
class MaskImage:
    """Binary silhouette image, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())

    @property
    def is_empty(self) -> bool:
        return not self.data.any()

    def bounds(self):
        """(left, right, top, bottom) in continuous pixel-edge coordinates of
        the occupied region, or None when empty."""
        if self.is_empty:
            return None
        rows = np.flatnonzero(self.data.any(axis=1))
        cols = np.flatnonzero(self.data.any(axis=0))
        return (float(cols[0]), float(cols[-1] + 1),
                float(rows[0]), float(rows[-1] + 1))

    def iou(self, other: "MaskImage") -> float:
        union = np.logical_or(self.data, other.data).sum()
        if union == 0:
            return 0.0
        inter = np.logical_and(self.data, other.data).sum()
        return float(inter) / float(union)

    def to_pgm(self, path) -> None:
        write_pgm(path, np.where(self.data, 255, 0).astype(np.uint8))

    @classmethod
    def from_pgm(cls, path) -> "MaskImage":
        data, maxval = read_pgm(path)
        return cls(data > maxval // 2)


@dataclass
class DepthImage:
    """Per-pixel depth in meters; 0 marks background."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("depth must be 2-D")

    @property
    def mask(self) -> MaskImage:
        return MaskImage(self.data > 0.0)

    def to_pgm(self, path) -> None:
        mm = np.floor(self.data * 1000.0 + 0.5)  # round half away from zero
        write_pgm(path, np.clip(mm, 0, 65535).astype(">u2"), maxval=65535)

    @classmethod
    def from_pgm(cls, path) -> "DepthImage":
        data, maxval = read_pgm(path)
        if maxval <= 255:
            raise ValueError("depth PGM must be 16-bit")
        return cls(data.astype(np.float64) / 1000.0)


def write_pgm(path, data: np.ndarray, maxval: int | None = None) -> None:
    data = np.asarray(data)
    if maxval is None:
        maxval = 255 if data.dtype == np.uint8 else 65535
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            fh.write(data.astype(">u2").tobytes())
        else:
            fh.write(data.astype(np.uint8).tobytes())


def read_pgm(path):
    """Read a binary PGM; returns (array, maxval)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    # header: magic, width, height, maxval; # comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).copy(), maxval


# ---------------------------------------------------------------------------
# rasterization

def _camera_vertices(model, pose: Pose) -> np.ndarray:
    if pose.translation[2] <= 0.0:
        raise NonPositiveDepth("object center must be in front of the camera")
    return pose.transform(model.vertices)


def _project_cam(cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    pts = np.empty((len(cam), 2))
    z = cam[:, 2]
    pts[:, 0] = intr.fx * cam[:, 0] / z + intr.cx
    pts[:, 1] = intr.fy * cam[:, 1] / z + intr.cy
    return pts


def projected_bounds(model, pose: Pose, intr: CameraIntrinsics):
    """(left, right, top, bottom) continuous bounds of the projected model.

    Exact silhouette bounds for meshes: projection maps triangles to
    triangles, so extremes occur at projected vertices.
    """
    cam = _camera_vertices(model, pose)
    keep = cam[:, 2] > _Z_EPS
    if not keep.any():
        return None
    px = _project_cam(cam[keep], intr)
    return (float(px[:, 0].min()), float(px[:, 0].max()),
            float(px[:, 1].min()), float(px[:, 1].max()))


def _edge_qualifies(ax, ay, bx, by) -> bool:
    """Top-left tie-break for pixels exactly on the edge a->b (y down)."""
    dy = by - ay
    dx = bx - ax
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


def rasterize(model, pose: Pose, intr: CameraIntrinsics,
              mask_only: bool = False) -> tuple[MaskImage, DepthImage]:
    """Render the model silhouette and depth at a pose.

    Returns (mask, depth); an off-screen object yields an empty mask (a
    detectable condition, not an error). With mask_only=True the depth image
    is left empty and per-pixel depth interpolation is skipped.
    """
    cam = _camera_vertices(model, pose)
    H, W = intr.height, intr.width
    depth_buf = np.full((H, W), np.inf)
    covered = np.zeros((H, W), dtype=bool)

    if model.is_point_cloud:
        keep = cam[:, 2] > _Z_EPS
        pts = cam[keep]
        if len(pts):
            px = _project_cam(pts, intr)
            xs = np.floor(px[:, 0]).astype(np.int64)
            ys = np.floor(px[:, 1]).astype(np.int64)
            ok = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
            xs, ys, zs = xs[ok], ys[ok], pts[ok, 2]
            covered[ys, xs] = True
            np.minimum.at(depth_buf, (ys, xs), zs)
    else:
        px = np.zeros((len(cam), 2))
        front = cam[:, 2] > _Z_EPS
        px[front] = _project_cam(cam[front], intr)
        inv_z = np.zeros(len(cam))
        inv_z[front] = 1.0 / cam[front, 2]
        for tri in model.triangles:
            if not (front[tri[0]] and front[tri[1]] and front[tri[2]]):
                continue
            _fill_triangle(px[tri], inv_z[tri], covered, depth_buf, W, H,
                           mask_only)

    mask = MaskImage(covered)
    depth = np.where(covered & np.isfinite(depth_buf), depth_buf, 0.0)
    return mask, DepthImage(depth)


def _fill_triangle(p: np.ndarray, inv_z: np.ndarray, covered: np.ndarray,
                   depth_buf: np.ndarray, W: int, H: int,
                   mask_only: bool) -> None:
    v0, v1, v2 = p
    area2 = ((v1[0] - v0[0]) * (v2[1] - v0[1])
             - (v1[1] - v0[1]) * (v2[0] - v0[0]))
    if area2 == 0.0:
        return
    if area2 < 0.0:
        v1, v2 = v2, v1
        inv_z = inv_z[[0, 2, 1]]
        area2 = -area2
    xs_min = max(0, int(np.ceil(min(v0[0], v1[0], v2[0]) - 0.5)))
    xs_max = min(W - 1, int(np.floor(max(v0[0], v1[0], v2[0]) - 0.5)))
    ys_min = max(0, int(np.ceil(min(v0[1], v1[1], v2[1]) - 0.5)))
    ys_max = min(H - 1, int(np.floor(max(v0[1], v1[1], v2[1]) - 0.5)))
    if xs_min > xs_max or ys_min > ys_max:
        return
    xs = np.arange(xs_min, xs_max + 1) + 0.5
    ys = np.arange(ys_min, ys_max + 1) + 0.5
    gx = xs[None, :]
    gy = ys[:, None]
    inside = None
    edges = ((v0, v1), (v1, v2), (v2, v0))
    evals = []
    for a, b in edges:
        e = (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])
        ok = (e > 0.0) | ((e == 0.0) & _edge_qualifies(a[0], a[1], b[0], b[1]))
        evals.append(e)
        inside = ok if inside is None else (inside & ok)
    if not inside.any():
        return
    sub_cov = covered[ys_min:ys_max + 1, xs_min:xs_max + 1]
    if mask_only:
        np.logical_or(sub_cov, inside, out=sub_cov)
        return
    # barycentric weights: evals[1] is opposite v0, evals[2] opposite v1,
    # evals[0] opposite v2
    w0 = evals[1] / area2
    w1 = evals[2] / area2
    w2 = evals[0] / area2
    interp = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]
    sub_depth = depth_buf[ys_min:ys_max + 1, xs_min:xs_max + 1]
    with np.errstate(divide="ignore"):
        z = np.where(inside & (interp > 0.0), 1.0 / interp, np.inf)
    np.minimum(sub_depth, z, out=sub_depth)
    np.logical_or(sub_cov, inside, out=sub_cov)


def render_mask(model, pose: Pose, intr: CameraIntrinsics) -> MaskImage:
    mask, _ = rasterize(model, pose, intr, mask_only=True)
    return mask


def render_silhouette_hull(model, pose: Pose,
                           intr: CameraIntrinsics) -> MaskImage:
    """Fast silhouette for convex models: fill the convex hull of the
    projected vertices (exact for convex geometry, same pixel rules)."""
    cam = _camera_vertices(model, pose)
    H, W = intr.height, intr.width
    out = np.zeros((H, W), dtype=bool)
    keep = cam[:, 2] > _Z_EPS
    if not keep.any():
        return MaskImage(out)
    px = _project_cam(cam[keep], intr)
    hull = _convex_hull_2d(px)
    if len(hull) < 3:
        return MaskImage(out)
    xs_min = max(0, int(np.ceil(hull[:, 0].min() - 0.5)))
    xs_max = min(W - 1, int(np.floor(hull[:, 0].max() - 0.5)))
    ys_min = max(0, int(np.ceil(hull[:, 1].min() - 0.5)))
    ys_max = min(H - 1, int(np.floor(hull[:, 1].max() - 0.5)))
    if xs_min > xs_max or ys_min > ys_max:
        return MaskImage(out)
    gx = (np.arange(xs_min, xs_max + 1) + 0.5)[None, :]
    gy = (np.arange(ys_min, ys_max + 1) + 0.5)[:, None]
    inside = np.ones((ys_max - ys_min + 1, xs_max - xs_min + 1), dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        e = (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])
        ok = (e > 0.0) | ((e == 0.0) & _edge_qualifies(a[0], a[1], b[0], b[1]))
        inside &= ok
    out[ys_min:ys_max + 1, xs_min:xs_max + 1] = inside
    return MaskImage(out)


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain in y-down screen coords, positive orientation
    (matches the rasterizer's inside-test sign convention)."""
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return ((a[0] - o[0]) * (b[1] - o[1])
                - (a[1] - o[1]) * (b[0] - o[0]))

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])
