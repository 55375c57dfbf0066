"""Iterative render-and-compare pose refinement and frame-to-frame tracking.

Each refinement iteration crops the observed mask and a render of the
current estimate to a shared zoom window, hands both to a matcher that
produces an image-space pose delta, and applies that delta under the
configured delta representation. Matchers are plain callables taking a
MatchContext; they never see ground truth unless they were constructed
with it.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .models import ObjectModel
from .pose import (
    CameraIntrinsics,
    Pose,
    Rotation,
    UntangledDelta,
    angular_distance,
    apply_model_frame,
    apply_untangled,
    compute_untangled,
    project_center,
)
from .render import (
    DepthImage,
    MaskImage,
    projected_bounds,
    rasterize,
    render_mask,
    render_silhouette_hull,
)
from .zoom import (
    CropWindow,
    compute_crop,
    crop_resample,
    resample_mask,
    zoomed_intrinsics,
)

REPRESENTATIONS = ("untangled", "camera", "model")

TRACK_SENTINEL_ROT_DEG = 180.0
TRACK_SENTINEL_TRANS_M = 1.0


class RefineError(RuntimeError):
    """Base for refinement failures; carries the trace built so far."""

    def __init__(self, message: str, trace: list | None = None) -> None:
        super().__init__(message)
        self.trace = trace if trace is not None else []


class RenderOffscreen(RefineError):
    """The current estimate projects entirely outside the image."""


class MatcherFailure(RefineError):
    """The matcher could not produce a delta."""


class DegenerateMask(MatcherFailure):
    """A silhouette had too few pixels to match against."""


@dataclass
class MatchContext:
    """Everything a matcher may look at for one iteration.

    Images live in crop space: the observed and rendered masks have been
    resampled / rendered into the zoom window, and `intrinsics` is the
    virtual camera of that window, so pixel offsets measured here decode
    directly through the image-space delta equations.
    """

    observed_mask: MaskImage
    rendered_mask: MaskImage
    rendered_depth: DepthImage | None
    window: CropWindow
    intrinsics: CameraIntrinsics
    pose: Pose
    iteration: int


Matcher = Callable[[MatchContext], UntangledDelta]


class OracleMatcher:
    """Emits the exact delta from the current estimate to a target pose."""

    def __init__(self, target: Pose) -> None:
        self.target = target

    def __call__(self, ctx: MatchContext) -> UntangledDelta:
        return compute_untangled(ctx.pose, self.target, ctx.intrinsics)


class NoisyOracleMatcher:
    """Oracle scaled toward the target by a contraction factor, plus noise.

    With contraction c and no noise the residual error shrinks by (1 - c)
    each iteration, which is the geometric convergence profile an imperfect
    but unbiased matcher exhibits.
    """

    def __init__(self, target: Pose, contraction: float = 0.5,
                 rot_noise_deg: float = 0.0,
                 v_noise: tuple = (0.0, 0.0, 0.0), seed: int = 0) -> None:
        self.target = target
        self.contraction = float(contraction)
        self.rot_noise_deg = float(rot_noise_deg)
        self.v_noise = np.asarray(v_noise, dtype=np.float64).reshape(3)
        self.rng = np.random.default_rng(seed)

    def __call__(self, ctx: MatchContext) -> UntangledDelta:
        delta = compute_untangled(ctx.pose, self.target, ctx.intrinsics)
        delta = delta.scaled(self.contraction)
        rot = delta.rotation
        if self.rot_noise_deg > 0.0:
            wobble = self.rng.normal(0.0, np.radians(self.rot_noise_deg), 3)
            rot = Rotation.from_rotvec(wobble) @ rot
        v = delta.v + self.rng.normal(0.0, 1.0, 3) * self.v_noise
        return UntangledDelta(rot, v)


class SilhouetteMatcher:
    """Classical mask aligner: centroid/area translation, then a derivative-
    free search over rotation.

    The translation stage reads the pixel offset between mask centroids and
    the log area ratio (area scales with inverse squared depth, hence the
    0.5 factor). The rotation stage minimizes 1 - IoU over an axis-angle
    perturbation at a coarse resolution, re-fitting the centroid/area
    translation for every candidate so the score measures orientation
    alone; without the refit, orientation-dependent silhouette area leaks
    into the depth estimate. Convex models render through the hull fast
    path. The winning rotation gets a last translation refit at full crop
    resolution.
    """

    def __init__(self, model: ObjectModel, *, max_evals: int = 90,
                 coarse: int = 4, min_pixels: int = 8,
                 simplex_deg: float = 12.0) -> None:
        self.model = model
        self.max_evals = int(max_evals)
        self.coarse = int(coarse)
        self.min_pixels = int(min_pixels)
        self.simplex_deg = float(simplex_deg)

    def _render(self, pose: Pose, intr: CameraIntrinsics) -> MaskImage:
        if self.model.convex:
            return render_silhouette_hull(self.model, pose, intr)
        return render_mask(self.model, pose, intr)

    @staticmethod
    def _stats(mask: MaskImage):
        n = mask.count()
        if n == 0:
            return 0, 0.0, 0.0
        ii, jj = np.nonzero(mask.data)
        return n, float(jj.mean()), float(ii.mean())

    def _refit(self, obs_stats, pose: Pose, intr: CameraIntrinsics,
               want_mask: bool = True) -> tuple:
        """Render pose, align centroid/area against obs_stats.

        Returns (corrected pose, corrected mask, ok flag). The correction
        is an identity-rotation image-space delta, so it never disturbs
        the candidate orientation being scored.
        """
        obs_n, obs_cx, obs_cy = obs_stats
        try:
            mask = self._render(pose, intr)
        except Exception:
            return pose, None, False
        n, cx, cy = self._stats(mask)
        if n < self.min_pixels:
            return pose, None, False
        v = np.array([obs_cx - cx, obs_cy - cy, 0.5 * np.log(obs_n / n)])
        fixed = apply_untangled(UntangledDelta(Rotation.identity(), v),
                                pose, intr)
        if not want_mask:
            return fixed, None, True
        try:
            fixed_mask = self._render(fixed, intr)
        except Exception:
            return pose, None, False
        return fixed, fixed_mask, True

    def __call__(self, ctx: MatchContext) -> UntangledDelta:
        obs = ctx.observed_mask
        rend = ctx.rendered_mask
        n_obs = obs.count()
        n_rend = rend.count()
        if n_obs < self.min_pixels or n_rend < self.min_pixels:
            raise DegenerateMask(
                f"silhouette too small to match ({n_obs} vs {n_rend} px)")

        oi, oj = np.nonzero(obs.data)
        ri, rj = np.nonzero(rend.data)
        vx = (oj.mean() - rj.mean())
        vy = (oi.mean() - ri.mean())
        vz = 0.5 * np.log(n_obs / n_rend)
        v = np.array([vx, vy, vz])

        shifted = apply_untangled(UntangledDelta(Rotation.identity(), v),
                                  ctx.pose, ctx.intrinsics)

        c = self.coarse
        coarse_intr = CameraIntrinsics(
            fx=ctx.intrinsics.fx / c, fy=ctx.intrinsics.fy / c,
            cx=ctx.intrinsics.cx / c, cy=ctx.intrinsics.cy / c,
            width=ctx.intrinsics.width // c,
            height=ctx.intrinsics.height // c)
        full_window = CropWindow(cx=ctx.intrinsics.width / 2.0,
                                 cy=ctx.intrinsics.height / 2.0,
                                 width=float(ctx.intrinsics.width),
                                 height=float(ctx.intrinsics.height))
        obs_coarse = resample_mask(obs, full_window,
                                   out_hw=(coarse_intr.height,
                                           coarse_intr.width))
        obs_coarse_stats = self._stats(obs_coarse)

        def objective(rotvec: np.ndarray) -> float:
            cand = Pose(Rotation.from_rotvec(rotvec) @ shifted.rotation,
                        shifted.translation)
            _, cand_mask, ok = self._refit(obs_coarse_stats, cand,
                                           coarse_intr)
            if not ok:
                return 1.0
            return 1.0 - obs_coarse.iou(cand_mask)

        f0 = objective(np.zeros(3))
        # Iteration 1 carries the large rotation; later rounds only polish,
        # so they run on a third of the budget.
        budget = self.max_evals if ctx.iteration <= 1 \
            else max(24, self.max_evals // 3)
        s = np.radians(self.simplex_deg)
        simplex = np.array([[0.0, 0.0, 0.0], [s, 0, 0], [0, s, 0], [0, 0, s]])
        result = minimize(objective, np.zeros(3), method="Nelder-Mead",
                          options={"maxfev": budget,
                                   "initial_simplex": simplex,
                                   "xatol": 2e-3, "fatol": 1e-4})
        rotvec = result.x if result.fun < f0 else np.zeros(3)

        best = Pose(Rotation.from_rotvec(rotvec) @ shifted.rotation,
                    shifted.translation)
        final, _, ok = self._refit((n_obs, float(oj.mean()),
                                    float(oi.mean())),
                                   best, ctx.intrinsics, want_mask=False)
        if not ok:
            final = best
        return compute_untangled(ctx.pose, final, ctx.intrinsics)


def apply_delta(delta: UntangledDelta, pose: Pose, intr: CameraIntrinsics,
                representation: str = "untangled") -> Pose:
    """Apply a matcher delta under one of the delta representations.

    untangled: rotation about the object center in camera-parallel axes,
    translation decoded from (vx, vy, vz). camera: the same rotation pivots
    at the camera origin instead, and the translation delta is the raw
    offset between the decoded target and the source center, so the
    rotation's drag on the center goes uncompensated. model: rotation in
    object axes, translation as in untangled.
    """
    if representation == "untangled":
        return apply_untangled(delta, pose, intr)
    if representation == "camera":
        decoded = apply_untangled(
            UntangledDelta(Rotation.identity(), delta.v), pose, intr)
        t_offset = decoded.translation - pose.translation
        return Pose(delta.rotation @ pose.rotation,
                    delta.rotation.apply(pose.translation) + t_offset)
    if representation == "model":
        return apply_model_frame(delta.rotation, delta.v, pose, intr)
    raise ValueError(f"unknown representation: {representation}")


@dataclass
class RefineResult:
    pose: Pose
    trace: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps(rec) for rec in self.trace)


def _pose_dict(pose: Pose) -> dict:
    return json.loads(pose.to_json())


def refine(model: ObjectModel, observed_mask: MaskImage, init_pose: Pose,
           intr: CameraIntrinsics, matcher: Matcher, *, iters: int = 4,
           representation: str = "untangled", early_stop=None,
           render_full_frame: bool = False, out_hw=(480, 640),
           expand: float = 1.4) -> RefineResult:
    """Run iters rounds of crop, render, match, apply.

    early_stop, if given, is (min_rot_deg, min_trans_m): stop once an
    iteration moves the pose by less than both. render_full_frame renders
    at the native intrinsics and resamples into the window instead of
    rendering directly with the window's virtual camera; the direct path
    is equivalent for the matchers here and much cheaper.
    """
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown representation: {representation}")
    pose = init_pose
    obs_bounds = observed_mask.bounds()
    trace: list = [{"iteration": 0, "pose": _pose_dict(pose),
                    "rot_delta_deg": None, "trans_delta_m": None,
                    "window": None}]
    for i in range(1, iters + 1):
        rend_bounds = projected_bounds(model, pose, intr)
        if rend_bounds is None or rend_bounds[1] <= 0.0 \
                or rend_bounds[0] >= intr.width \
                or rend_bounds[3] <= 0.0 or rend_bounds[2] >= intr.height:
            raise RenderOffscreen("estimate projects outside the image",
                                  trace)
        center = project_center(pose, intr)
        window = compute_crop((float(center[0]), float(center[1])),
                              obs_bounds, rend_bounds,
                              aspect=out_hw[1] / out_hw[0], expand=expand)
        zi = zoomed_intrinsics(intr, window, out_hw)
        obs_crop = resample_mask(observed_mask, window, out_hw)
        if render_full_frame:
            full_mask, full_depth = rasterize(model, pose, intr)
            rend_mask = resample_mask(full_mask, window, out_hw)
            rend_depth = DepthImage(np.where(
                rend_mask.data,
                crop_resample(full_depth.data, window, out_hw), 0.0))
        else:
            rend_mask, rend_depth = rasterize(model, pose, zi)
        if rend_mask.is_empty:
            raise RenderOffscreen("estimate renders no pixels in the window",
                                  trace)
        ctx = MatchContext(observed_mask=obs_crop, rendered_mask=rend_mask,
                           rendered_depth=rend_depth, window=window,
                           intrinsics=zi, pose=pose, iteration=i)
        try:
            delta = matcher(ctx)
        except MatcherFailure as err:
            err.trace = trace
            raise
        new_pose = apply_delta(delta, pose, zi, representation)
        rot_step = np.degrees(angular_distance(pose.rotation,
                                               new_pose.rotation))
        trans_step = float(np.linalg.norm(
            new_pose.translation - pose.translation))
        pose = new_pose
        trace.append({"iteration": i, "pose": _pose_dict(pose),
                      "rot_delta_deg": rot_step, "trans_delta_m": trans_step,
                      "window": window.to_dict()})
        if early_stop is not None:
            min_rot, min_trans = early_stop
            if rot_step < min_rot and trans_step < min_trans:
                break
    return RefineResult(pose=pose, trace=trace)


@dataclass
class TrackRecord:
    frame: int
    pose_dict: dict
    rot_delta_deg: float
    trans_delta_m: float
    lost: bool
    failed: bool


@dataclass
class TrackResult:
    poses: list
    records: list
    lost_events: list

    def trace_jsonl(self) -> str:
        rows = []
        for r in self.records:
            rows.append(json.dumps({
                "frame": r.frame, "pose": r.pose_dict,
                "rot_delta_deg": r.rot_delta_deg,
                "trans_delta_m": r.trans_delta_m,
                "lost": r.lost, "failed": r.failed}))
        return "\n".join(rows)


def track(frames: Sequence[MaskImage], init_pose: Pose,
          make_matcher: Callable[[int], Matcher],
          reinit: Callable[[int], Pose], *, model: ObjectModel,
          intr: CameraIntrinsics, iters_per_frame: int = 2,
          representation: str = "untangled", rot_thresh_deg: float = 10.0,
          trans_thresh_m: float = 0.01, buffer_len: int = 10,
          render_full_frame: bool = False) -> TrackResult:
    """Refine through a frame sequence, declaring loss of track when the
    last-iteration deltas of the last buffer_len frames average above the
    rotation or translation threshold.

    The rolling buffer must be full before a loss can fire; a frame whose
    refinement fails outright contributes a large sentinel delta instead of
    stalling the detector. On loss the pose is reinitialized and the buffer
    cleared.
    """
    pose = init_pose
    buffer: deque = deque(maxlen=buffer_len)
    poses: list = []
    records: list = []
    lost_events: list = []
    for k, frame_mask in enumerate(frames):
        matcher = make_matcher(k)
        failed = False
        try:
            result = refine(model, frame_mask, pose, intr, matcher,
                            iters=iters_per_frame,
                            representation=representation,
                            render_full_frame=render_full_frame)
            pose = result.pose
            last = result.trace[-1]
            rot_step = float(last["rot_delta_deg"])
            trans_step = float(last["trans_delta_m"])
        except RefineError:
            failed = True
            rot_step = TRACK_SENTINEL_ROT_DEG
            trans_step = TRACK_SENTINEL_TRANS_M
        buffer.append((rot_step, trans_step))
        lost = False
        if len(buffer) == buffer_len:
            rots = np.array([b[0] for b in buffer])
            trans = np.array([b[1] for b in buffer])
            if rots.mean() > rot_thresh_deg or trans.mean() > trans_thresh_m:
                lost = True
                lost_events.append(k)
                pose = reinit(k)
                buffer.clear()
        poses.append(pose)
        records.append(TrackRecord(frame=k, pose_dict=_pose_dict(pose),
                                   rot_delta_deg=rot_step,
                                   trans_delta_m=trans_step,
                                   lost=lost, failed=failed))
    return TrackResult(poses=poses, records=records, lost_events=lost_events)
