"""Pose-error losses, accuracy metrics, symmetry handling, and summaries.

All metrics take ground-truth and estimated poses plus model-frame points
(meters, float64). Pass/fail threshold comparisons are inclusive (<=).
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from posekit.pose import (
    CameraIntrinsics,
    Pose,
    Rotation,
    angular_distance,
    project,
)


class SubgradientWarning(RuntimeWarning):
    """The loss gradient was evaluated at (or within 1e-10 of) an L1 kink."""


KINK_EPS = 1e-10


def point_matching_loss(gt: Pose, est: Pose, points,
                        norm: str = "l1") -> float:
    """Mean per-point norm of (gt-transformed - est-transformed) points.

    norm "l1" sums absolute coordinate differences per point (the training
    loss); "l2" uses the Euclidean norm per point. The two are never mixed:
    pick one explicitly.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = gt.transform(points) - est.transform(points)
    if norm == "l1":
        return float(np.abs(d).sum(axis=1).mean())
    if norm == "l2":
        return float(np.linalg.norm(d, axis=1).mean())
    raise ValueError(f"unknown norm: {norm!r}")


@dataclass(frozen=True)
class PointLossGradient:
    """Analytic gradient of point_matching_loss wrt the estimated pose."""

    value: float
    wrt_quat: np.ndarray      # (4,) d loss / d (w, x, y, z)
    wrt_translation: np.ndarray  # (3,)
    at_kink: bool


def _rotate_jacobian(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """d(R(u) x)/du for unit quaternion u, per point: (n, 3, 4)."""
    w, v = q[0], q[1:]
    n = len(pts)
    jac = np.empty((n, 3, 4))
    cross_vx = np.cross(np.broadcast_to(v, (n, 3)), pts)
    jac[:, :, 0] = 2.0 * (w * pts + cross_vx)
    vdotx = pts @ v
    eye = np.eye(3)
    # d/dv [ (w^2 - v.v) x + 2 (v.x) v + 2 w (v cross x) ]
    for i in range(n):
        x = pts[i]
        skew_x = np.array([[0, -x[2], x[1]],
                           [x[2], 0, -x[0]],
                           [-x[1], x[0], 0]])
        jac[i, :, 1:] = 2.0 * (np.outer(v, x) - np.outer(x, v)
                               + vdotx[i] * eye - w * skew_x)
    return jac


def point_matching_loss_grad(gt: Pose, est: Pose, points,
                             norm: str = "l1") -> PointLossGradient:
    """Gradient wrt the estimated quaternion (through renormalization) and
    translation. Warns with SubgradientWarning at L1 kinks (any coordinate
    difference within 1e-10 of zero) where only a subgradient exists."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    q = est.rotation.q
    d = est.transform(points) - gt.transform(points)
    if norm == "l1":
        at_kink = bool(np.any(np.abs(d) < KINK_EPS))
        outer = np.sign(d)
        value = float(np.abs(d).sum(axis=1).mean())
    elif norm == "l2":
        norms = np.linalg.norm(d, axis=1)
        at_kink = bool(np.any(norms < KINK_EPS))
        safe = np.where(norms < KINK_EPS, 1.0, norms)
        outer = d / safe[:, None]
        outer[norms < KINK_EPS] = 0.0
        value = float(norms.mean())
    else:
        raise ValueError(f"unknown norm: {norm!r}")
    if at_kink:
        warnings.warn("loss gradient evaluated at a non-smooth point",
                      SubgradientWarning, stacklevel=2)
    grad_t = outer.sum(axis=0) / n
    jac = _rotate_jacobian(q, points)  # (n, 3, 4)
    grad_u = np.einsum("nik,ni->k", jac, outer) / n
    # chain through q -> q/|q| normalization (|q| == 1 at input)
    grad_q = grad_u - q * float(np.dot(q, grad_u))
    return PointLossGradient(value=value, wrt_quat=grad_q,
                             wrt_translation=grad_t, at_kink=at_kink)


# ---------------------------------------------------------------------------
# accuracy metrics

def add(gt: Pose, est: Pose, points) -> float:
    """Average Euclidean distance between correspondingly transformed points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = gt.transform(points) - est.transform(points)
    return float(np.linalg.norm(d, axis=1).mean())


def _min_dists_brute(gt_pts: np.ndarray, est_pts: np.ndarray,
                     chunk: int = 256) -> np.ndarray:
    out = np.empty(len(gt_pts))
    for i in range(0, len(gt_pts), chunk):
        block = gt_pts[i:i + chunk]
        d = np.linalg.norm(block[:, None, :] - est_pts[None, :, :], axis=2)
        out[i:i + chunk] = d.min(axis=1)
    return out


def add_s(gt: Pose, est: Pose, points, method: str = "brute") -> float:
    """Average distance from each gt-transformed point to the closest
    est-transformed point (tolerates symmetric ambiguity).

    method "brute" is the reference route. method "kdtree" accelerates the
    neighbor search but recomputes the distances with the brute expression,
    so both routes agree bitwise.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    gt_pts = gt.transform(points)
    est_pts = est.transform(points)
    if method == "brute":
        mins = _min_dists_brute(gt_pts, est_pts)
    elif method == "kdtree":
        k = min(4, len(est_pts))
        _, idx = cKDTree(est_pts).query(gt_pts, k=k)
        idx = idx.reshape(len(gt_pts), k)
        cand = np.linalg.norm(gt_pts[:, None, :] - est_pts[idx], axis=2)
        mins = cand.min(axis=1)
    else:
        raise ValueError(f"unknown method: {method!r}")
    return float(mins.mean())


def proj2d(gt: Pose, est: Pose, points, intr: CameraIntrinsics) -> float:
    """Mean pixel distance between projections under both poses."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a = project(points, gt, intr)
    b = project(points, est, intr)
    return float(np.linalg.norm(a - b, axis=1).mean())


def rotation_error_deg(gt: Pose, est: Pose) -> float:
    return float(np.rad2deg(angular_distance(gt.rotation, est.rotation)))


def translation_error(gt: Pose, est: Pose) -> float:
    return float(np.linalg.norm(gt.translation - est.translation))


def n_deg_n_cm(gt: Pose, est: Pose, max_deg: float, max_cm: float) -> bool:
    """Inclusive joint rotation/translation accuracy test."""
    return (rotation_error_deg(gt, est) <= max_deg
            and translation_error(gt, est) <= max_cm / 100.0)


# ---------------------------------------------------------------------------
# symmetry

def _axis_orbit_pose(gt: Pose, axis, theta: float) -> Pose:
    return Pose(gt.rotation @ Rotation.from_axis_angle(axis, theta),
                gt.translation)


def closest_symmetric_pose(gt: Pose, ref: Pose, symmetry) -> Pose:
    """Member of gt's symmetry orbit with minimal angular distance to ref.

    Discrete symmetry enumerates the declared rotations. Axis symmetry does a
    coarse scan over the turn angle followed by golden-section refinement to
    below 1e-6 rad. Translation is never modified (the orbit shares it).
    """
    if symmetry is None or symmetry.kind == "none":
        return gt
    if symmetry.kind == "discrete":
        best, best_d = gt, angular_distance(gt.rotation, ref.rotation)
        for s in symmetry.rotations:
            cand = Pose(gt.rotation @ s, gt.translation)
            d = angular_distance(cand.rotation, ref.rotation)
            if d < best_d:
                best, best_d = cand, d
        return best
    axis = np.asarray(symmetry.axis, dtype=np.float64)

    def f(theta: float) -> float:
        return angular_distance(
            gt.rotation @ Rotation.from_axis_angle(axis, theta), ref.rotation)

    n = 256
    grid = np.linspace(-np.pi, np.pi, n, endpoint=False)
    vals = np.array([f(t) for t in grid])
    k = int(np.argmin(vals))
    step = 2.0 * np.pi / n
    lo, hi = grid[k] - step, grid[k] + step
    # golden-section: unimodal inside the bracket around the coarse minimum
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > 1e-7:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    theta = 0.5 * (a + b)
    return _axis_orbit_pose(gt, axis, theta)


def symmetric_metric(metric: str, gt: Pose, est: Pose, symmetry, *,
                     points=None, intr: CameraIntrinsics | None = None,
                     max_deg: float | None = None,
                     max_cm: float | None = None):
    """Symmetry-aware variant of a metric: the minimum (or any-pass, for the
    joint threshold test) over gt's symmetry orbit.

    metric is one of "add", "add_s", "proj2d", "n_deg_n_cm". Axis orbits are
    reduced to the rotation-closest member via closest_symmetric_pose.
    """

    def plain(g: Pose):
        if metric == "add":
            return add(g, est, points)
        if metric == "add_s":
            return add_s(g, est, points)
        if metric == "proj2d":
            return proj2d(g, est, points, intr)
        if metric == "n_deg_n_cm":
            return n_deg_n_cm(g, est, max_deg, max_cm)
        raise ValueError(f"unknown metric: {metric!r}")

    if symmetry is None or symmetry.kind == "none":
        return plain(gt)
    if symmetry.kind == "axis":
        # the orbit always contains gt itself; evaluating it alongside the
        # rotation-closest member keeps "symmetric <= plain" exact even when
        # rotation-closest is not metric-minimal
        results = [plain(closest_symmetric_pose(gt, est, symmetry)),
                   plain(gt)]
        if metric == "n_deg_n_cm":
            return any(results)
        return min(results)
    members = [gt] + [Pose(gt.rotation @ s, gt.translation)
                      for s in symmetry.rotations]
    results = [plain(g) for g in members]
    if metric == "n_deg_n_cm":
        return any(results)
    return min(results)


# ---------------------------------------------------------------------------
# aggregation

def auc(distances, max_threshold: float) -> float:
    """Exact normalized area under the accuracy-vs-threshold curve on
    [0, max_threshold] with inclusive thresholds.

    The accuracy curve is a step function of the threshold; its exact
    integral divided by max_threshold is mean(clip(1 - d / max, 0, 1)).
    """
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(d) == 0:
        raise ValueError("no distances")
    if max_threshold <= 0.0:
        raise ValueError("max_threshold must be positive")
    return float(np.clip(1.0 - d / max_threshold, 0.0, 1.0).mean())


@dataclass
class MetricReport:
    """Per-sample (or per-iteration) pose accuracy record."""

    add: float
    add_s: float
    proj2d: float
    rot_err_deg: float
    trans_err_m: float

    def to_dict(self) -> dict:
        return {"add": self.add, "add_s": self.add_s, "proj2d": self.proj2d,
                "rot_err_deg": self.rot_err_deg,
                "trans_err_m": self.trans_err_m}

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        return cls(add=float(obj["add"]), add_s=float(obj["add_s"]),
                   proj2d=float(obj["proj2d"]),
                   rot_err_deg=float(obj["rot_err_deg"]),
                   trans_err_m=float(obj["trans_err_m"]))


def evaluate_pose(gt: Pose, est: Pose, points, intr: CameraIntrinsics,
                  symmetry=None, add_s_method: str = "brute") -> MetricReport:
    """Build a MetricReport, applying symmetry-aware variants when the model
    declares a symmetry (rotation/translation errors then use the
    rotation-closest orbit member)."""
    if symmetry is not None and symmetry.kind != "none":
        g_add = symmetric_metric("add", gt, est, symmetry, points=points)
        g_proj = symmetric_metric("proj2d", gt, est, symmetry, points=points,
                                  intr=intr)
        closest = (closest_symmetric_pose(gt, est, symmetry)
                   if symmetry.kind == "axis" else
                   min(([gt] + [Pose(gt.rotation @ s, gt.translation)
                                for s in symmetry.rotations]),
                       key=lambda g: angular_distance(g.rotation,
                                                      est.rotation)))
        rot_err = rotation_error_deg(closest, est)
    else:
        g_add = add(gt, est, points)
        g_proj = proj2d(gt, est, points, intr)
        rot_err = rotation_error_deg(gt, est)
    return MetricReport(add=g_add,
                        add_s=add_s(gt, est, points, method=add_s_method),
                        proj2d=g_proj,
                        rot_err_deg=rot_err,
                        trans_err_m=translation_error(gt, est))


DEG_CM_THRESHOLDS = ((2.0, 2.0), (5.0, 5.0), (10.0, 10.0))
ADD_FRACTIONS = (0.02, 0.05, 0.10)
PROJ2D_THRESHOLDS_PX = (2.0, 5.0, 10.0)
AUC_MAX_M = 0.10


@dataclass
class AccuracySummary:
    """Pass rates at the standard threshold grid, plus ADD/ADD-S AUC."""

    rows: list = field(default_factory=list)  # (metric, threshold, pass_rate)

    def rate(self, metric: str, threshold: str) -> float:
        for m, t, r in self.rows:
            if m == metric and t == threshold:
                return r
        raise KeyError((metric, threshold))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "threshold", "pass_rate"])
        for m, t, r in self.rows:
            w.writerow([m, t, "%.6f" % r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracySummary":
        rows = []
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != ["metric", "threshold", "pass_rate"]:
            raise ValueError("unexpected CSV header")
        for m, t, r in reader:
            rows.append((m, t, float(r)))
        return cls(rows=rows)


def summarize(reports, diameter: float) -> AccuracySummary:
    """Aggregate MetricReports into the standard threshold grid.

    Joint rotation/translation thresholds at (2, 5, 10) deg/cm; average
    point distance at (2, 5, 10)% of the object diameter; projection error
    at (2, 5, 10) px; plus AUC of add and add_s over [0, 0.10 m].
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to summarize")
    rows = []
    for deg, cm in DEG_CM_THRESHOLDS:
        ok = [r.rot_err_deg <= deg and r.trans_err_m <= cm / 100.0
              for r in reports]
        rows.append(("deg_cm", "%gdeg%gcm" % (deg, cm), float(np.mean(ok))))
    for frac in ADD_FRACTIONS:
        ok = [r.add <= frac * diameter for r in reports]
        rows.append(("add", "%.2fd" % frac, float(np.mean(ok))))
    for frac in ADD_FRACTIONS:
        ok = [r.add_s <= frac * diameter for r in reports]
        rows.append(("add_s", "%.2fd" % frac, float(np.mean(ok))))
    for px in PROJ2D_THRESHOLDS_PX:
        ok = [r.proj2d <= px for r in reports]
        rows.append(("proj2d", "%gpx" % px, float(np.mean(ok))))
    rows.append(("add", "auc_%.2fm" % AUC_MAX_M,
                 auc([r.add for r in reports], AUC_MAX_M)))
    rows.append(("add_s", "auc_%.2fm" % AUC_MAX_M,
                 auc([r.add_s for r in reports], AUC_MAX_M)))
    return AccuracySummary(rows=rows)
