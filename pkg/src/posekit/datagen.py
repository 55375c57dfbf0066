"""Synthetic benchmark data: pose noise, mask dilation, scene sampling.

Initial poses are ground truth disturbed by per-axis Euler rotation noise,
rejection-resampled until the total angular offset fits under a cap, plus
anisotropic Gaussian translation noise (depth noisier than the image-plane
axes). Observed masks can be randomly dilated to mimic segmentation slop.
Generation is pure per sample: every sample derives its own generator from
(master seed, sample index), so sets are reproducible and order-independent.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .models import ObjectModel
from .pose import CameraIntrinsics, Pose, Rotation
from .render import MaskImage, rasterize, render_mask

REJECTION_BUDGET = 10_000


class RejectionBudgetExceeded(RuntimeError):
    """Noise cap rejected every draw; the noise model is misconfigured."""


@dataclass(frozen=True)
class NoiseModel:
    """Initial-pose noise: per-axis Euler sigma, translation sigma, angle cap."""

    euler_sigma_deg: float = 15.0
    trans_sigma_m: tuple = (0.01, 0.01, 0.05)
    max_angle_deg: float = 45.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_angle_deg <= 0.0:
            raise ValueError("max_angle_deg must be positive")
        if self.euler_sigma_deg < 0.0 or any(s < 0.0
                                             for s in self.trans_sigma_m):
            raise ValueError("noise sigmas must be nonnegative")

    def to_dict(self) -> dict:
        return {"euler_sigma_deg": self.euler_sigma_deg,
                "trans_sigma_m": list(self.trans_sigma_m),
                "max_angle_deg": self.max_angle_deg, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(euler_sigma_deg=float(d["euler_sigma_deg"]),
                   trans_sigma_m=tuple(d["trans_sigma_m"]),
                   max_angle_deg=float(d["max_angle_deg"]),
                   seed=int(d.get("seed", 0)))


def perturb_pose(gt: Pose, noise: NoiseModel, rng) -> Pose:
    """Disturb gt by the noise model; the angular offset never exceeds the cap.

    Rotation noise is resampled on rejection; translation noise is drawn once
    afterwards and never rejected, so the cap constrains angle only.
    """
    for _ in range(REJECTION_BUDGET):
        angles = rng.normal(0.0, noise.euler_sigma_deg, 3)
        wobble = Rotation.from_euler_deg(*angles)
        if np.degrees(wobble.angle()) <= noise.max_angle_deg:
            break
    else:
        raise RejectionBudgetExceeded(
            f"no draw under {noise.max_angle_deg} deg in "
            f"{REJECTION_BUDGET} attempts")
    shift = rng.normal(0.0, 1.0, 3) * np.asarray(noise.trans_sigma_m)
    return Pose(wobble @ gt.rotation, gt.translation + shift)


_DILATE_STRUCTURE = np.ones((3, 3), dtype=bool)


def dilate_mask_by(mask: MaskImage, radius: int) -> MaskImage:
    """Morphological dilation with a 3x3 square element applied radius times."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius == 0 or mask.is_empty:
        return MaskImage(mask.data.copy())
    grown = binary_dilation(mask.data, structure=_DILATE_STRUCTURE,
                            iterations=radius)
    return MaskImage(grown)


def dilate_mask(mask: MaskImage, max_px: int, rng) -> MaskImage:
    """Dilate by a radius drawn uniformly from {0..max_px}."""
    if max_px < 0:
        raise ValueError("max_px must be nonnegative")
    radius = int(rng.integers(0, max_px + 1)) if max_px > 0 else 0
    return dilate_mask_by(mask, radius)


def bounding_radius(model: ObjectModel) -> float:
    return float(np.linalg.norm(model.vertices, axis=1).max())


def _tangent_extent(offset: float, z: float, radius: float,
                    focal: float) -> float:
    """Largest |projected coordinate| of a sphere at (offset, z), pre-center.

    Tangent-line construction in the plane through the optical axis; valid
    while the sphere is strictly in front of the camera.
    """
    d2 = offset * offset + z * z
    if d2 <= radius * radius:
        return float("inf")
    root = np.sqrt(d2 - radius * radius)
    hi = focal * (offset * z + radius * root) / (z * z - radius * radius)
    lo = focal * (offset * z - radius * root) / (z * z - radius * radius)
    return max(abs(hi), abs(lo))


def sample_gt_pose(model: ObjectModel, rng, intr: CameraIntrinsics, *,
                   z_range=(3.0, 4.0), margin_px: float = 24.0,
                   rotation_filter: Callable[[Rotation], bool] | None = None,
                   ) -> Pose:
    """Uniform rotation and an in-frustum translation keeping the whole
    bounding sphere at least margin_px inside the image."""
    radius = bounding_radius(model)
    z = rng.uniform(*z_range)
    if z <= radius:
        raise ValueError("z_range puts the object inside the camera")
    r_px = max(intr.fx, intr.fy) * radius / (z - radius)
    du_lim = max(0.0, intr.cx - margin_px - r_px)
    dv_lim = max(0.0, intr.cy - margin_px - r_px)
    x = y = 0.0
    for _ in range(100):
        du = rng.uniform(-du_lim, du_lim)
        dv = rng.uniform(-dv_lim, dv_lim)
        x = du * z / intr.fx
        y = dv * z / intr.fy
        if (_tangent_extent(x, z, radius, intr.fx) <= intr.cx - margin_px
                and _tangent_extent(y, z, radius, intr.fy)
                <= intr.cy - margin_px):
            break
        x = y = 0.0
    rotation = Rotation.random(rng)
    if rotation_filter is not None:
        for _ in range(REJECTION_BUDGET):
            if rotation_filter(rotation):
                break
            rotation = Rotation.random(rng)
        else:
            raise RejectionBudgetExceeded("rotation filter rejected all draws")
    return Pose(rotation, (x, y, z))


@dataclass
class ScenePlacement:
    model_index: int
    pose: Pose
    full_mask: MaskImage
    visible_mask: MaskImage

    @property
    def visible_fraction(self) -> float:
        full = self.full_mask.count()
        return self.visible_mask.count() / full if full else 0.0


@dataclass
class Scene:
    placements: list

    def union_visible(self) -> MaskImage:
        acc = np.zeros_like(self.placements[0].visible_mask.data)
        for p in self.placements:
            acc |= p.visible_mask.data
        return MaskImage(acc)

    def union_full(self) -> MaskImage:
        acc = np.zeros_like(self.placements[0].full_mask.data)
        for p in self.placements:
            acc |= p.full_mask.data
        return MaskImage(acc)


def composite_scene(items: Sequence[tuple[ObjectModel, Pose]],
                    intr: CameraIntrinsics,
                    indices: Sequence[int] | None = None) -> Scene:
    """Render each (model, pose) and composite by depth: nearer surfaces win
    pixels, so each placement gets its full mask and the part that survives
    occlusion."""
    if not items:
        raise ValueError("need at least one placement")
    masks = []
    depths = []
    for model, pose in items:
        mask, depth = rasterize(model, pose, intr)
        masks.append(mask)
        depths.append(np.where(mask.data, depth.data, np.inf))
    nearest = np.stack(depths).min(axis=0)
    if indices is None:
        indices = range(len(items))
    placements = []
    for k, (_, pose), mask, depth in zip(indices, items, masks, depths):
        visible = mask.data & np.isfinite(nearest) & (depth <= nearest)
        placements.append(ScenePlacement(model_index=k, pose=pose,
                                         full_mask=mask,
                                         visible_mask=MaskImage(visible)))
    return Scene(placements)


def sample_scene(models: Sequence[ObjectModel], rng, intr: CameraIntrinsics,
                 *, count_range=(3, 8), z_range=(3.0, 4.0),
                 margin_px: float = 24.0,
                 rotation_filter=None) -> Scene:
    """Drop several objects into the frustum and composite by depth."""
    if not models:
        raise ValueError("need at least one model")
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    picks = [int(rng.integers(0, len(models))) for _ in range(n)]
    poses = [sample_gt_pose(models[k], rng, intr, z_range=z_range,
                            margin_px=margin_px,
                            rotation_filter=rotation_filter)
             for k in picks]
    return composite_scene([(models[k], p) for k, p in zip(picks, poses)],
                           intr, indices=picks)


@dataclass
class SampleRecord:
    index: int
    model_name: str
    gt: Pose
    init: Pose
    dilate_radius: int
    mask_path: str | None = None
    mask: MaskImage | None = None

    def load_mask(self) -> MaskImage:
        if self.mask is not None:
            return self.mask
        if self.mask_path is None:
            raise ValueError("sample has neither mask nor mask path")
        return MaskImage.from_pgm(self.mask_path)

    def manifest(self, intr: CameraIntrinsics) -> dict:
        return {"index": self.index, "model": self.model_name,
                "gt": json.loads(self.gt.to_json()),
                "init": json.loads(self.init.to_json()),
                "dilate_radius": self.dilate_radius,
                "intrinsics": json.loads(intr.to_json())}


@dataclass
class SampleSet:
    records: list
    noise: NoiseModel
    intrinsics: CameraIntrinsics
    master_seed: int
    model_names: list = field(default_factory=list)

    def validate(self) -> None:
        """Re-assert the generation constraint on every stored init pose."""
        from .pose import angular_distance

        for rec in self.records:
            off = np.degrees(angular_distance(rec.gt.rotation,
                                              rec.init.rotation))
            if off > self.noise.max_angle_deg + 1e-9:
                raise ValueError(
                    f"sample {rec.index}: init {off:.3f} deg from gt "
                    f"exceeds the {self.noise.max_angle_deg} deg cap")


def sample_rng(master_seed: int, index: int):
    return np.random.default_rng([master_seed, index])


def make_sample_set(out_dir, named_models, n_per_model: int,
                    intr: CameraIntrinsics, noise: NoiseModel, *,
                    master_seed: int = 0, dilate_max_px: int = 0,
                    z_range=(3.0, 4.0), margin_px: float = 24.0,
                    write: bool = True) -> SampleSet:
    """Generate n_per_model single-object samples for each named model.

    Layout: {out_dir}/{index:06d}/obs_mask.pgm + manifest.json per sample,
    plus a set-level manifest.json. Sample index runs over models first
    (model m occupies indices [m * n_per_model, (m+1) * n_per_model)).
    """
    out = pathlib.Path(out_dir)
    records = []
    for m, (name, model) in enumerate(named_models):
        for s in range(n_per_model):
            index = m * n_per_model + s
            rng = sample_rng(master_seed, index)
            gt = sample_gt_pose(model, rng, intr, z_range=z_range,
                                margin_px=margin_px)
            init = perturb_pose(gt, noise, rng)
            radius = (int(rng.integers(0, dilate_max_px + 1))
                      if dilate_max_px > 0 else 0)
            mask = dilate_mask_by(render_mask(model, gt, intr), radius)
            rec = SampleRecord(index=index, model_name=name, gt=gt,
                               init=init, dilate_radius=radius, mask=mask)
            if write:
                sample_dir = out / f"{index:06d}"
                sample_dir.mkdir(parents=True, exist_ok=True)
                mask.to_pgm(sample_dir / "obs_mask.pgm")
                (sample_dir / "manifest.json").write_text(
                    json.dumps(rec.manifest(intr), indent=1))
                rec.mask_path = str(sample_dir / "obs_mask.pgm")
            records.append(rec)
    sset = SampleSet(records=records, noise=noise, intrinsics=intr,
                     master_seed=master_seed,
                     model_names=[name for name, _ in named_models])
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps({
            "samples": len(records),
            "n_per_model": n_per_model,
            "models": sset.model_names,
            "noise": noise.to_dict(),
            "master_seed": master_seed,
            "dilate_max_px": dilate_max_px,
            "z_range": list(z_range),
            "margin_px": margin_px,
            "intrinsics": json.loads(intr.to_json())}, indent=1))
    return sset


def write_track_sequence(out_dir, model_name: str, init: Pose,
                         gt_poses: Sequence[Pose],
                         masks: Sequence[MaskImage],
                         intr: CameraIntrinsics) -> None:
    """Write an ordered frame sequence: {k:06d}.pgm masks plus a manifest
    carrying the initial pose and the per-frame ground truth."""
    if len(gt_poses) != len(masks):
        raise ValueError("one mask per ground-truth pose required")
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, mask in enumerate(masks):
        mask.to_pgm(out / f"{k:06d}.pgm")
    (out / "manifest.json").write_text(json.dumps({
        "frames": len(masks),
        "model": model_name,
        "init": json.loads(init.to_json()),
        "gt": [json.loads(p.to_json()) for p in gt_poses],
        "intrinsics": json.loads(intr.to_json())}, indent=1))


def load_track_sequence(seq_dir):
    """Read back a write_track_sequence directory.

    Returns (model_name, init pose, gt poses, intrinsics, mask paths).
    """
    root = pathlib.Path(seq_dir)
    man = json.loads((root / "manifest.json").read_text())
    gt = [Pose.from_json(json.dumps(p)) for p in man["gt"]]
    init = Pose.from_json(json.dumps(man["init"]))
    intr = CameraIntrinsics.from_json(json.dumps(man["intrinsics"]))
    paths = [root / f"{k:06d}.pgm" for k in range(int(man["frames"]))]
    return man["model"], init, gt, intr, paths


def load_sample_set(set_dir) -> SampleSet:
    root = pathlib.Path(set_dir)
    top = json.loads((root / "manifest.json").read_text())
    intr = CameraIntrinsics.from_json(json.dumps(top["intrinsics"]))
    noise = NoiseModel.from_dict(top["noise"])
    records = []
    for index in range(int(top["samples"])):
        sample_dir = root / f"{index:06d}"
        man = json.loads((sample_dir / "manifest.json").read_text())
        records.append(SampleRecord(
            index=index, model_name=man["model"],
            gt=Pose.from_json(json.dumps(man["gt"])),
            init=Pose.from_json(json.dumps(man["init"])),
            dilate_radius=int(man["dilate_radius"]),
            mask_path=str(sample_dir / "obs_mask.pgm")))
    return SampleSet(records=records, noise=noise, intrinsics=intr,
                     master_seed=int(top["master_seed"]),
                     model_names=list(top["models"]))
