"""Benchmark command line: generate sample sets, run refinement sweeps,
aggregate reports, and track frame sequences.

Configuration is a JSON file merged over defaults, with --set key=value
(dotted paths) and the dedicated flags applied on top, in that order.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pathlib
import sys
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy

import numpy as np

from .datagen import (
    NoiseModel,
    load_sample_set,
    load_track_sequence,
    make_sample_set,
)
from .metrics import MetricReport, evaluate_pose, summarize
from .models import (
    ObjectModel,
    compute_diameter,
    load_model,
    make_icosphere,
    make_unit_cube,
    sample_eval_points,
)
from .pose import CameraIntrinsics, Pose
from .refine import (
    NoisyOracleMatcher,
    OracleMatcher,
    RefineError,
    SilhouetteMatcher,
    refine,
    track,
)
from .render import MaskImage

log = logging.getLogger("posekit")

MATCHERS = ("oracle", "noisy", "silhouette")

DEFAULTS = {
    "intrinsics": {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0,
                   "width": 640, "height": 480},
    "models": [{"name": "cube", "builtin": "cube", "side": 1.0}],
    "samples_per_model": 50,
    "noise": {"euler_sigma_deg": 15.0, "trans_sigma_m": [0.01, 0.01, 0.05],
              "max_angle_deg": 45.0, "seed": 0},
    "dilate_max_px": 0,
    "z_range": [3.0, 4.0],
    "margin_px": 24.0,
    "seed": 0,
    "matcher": "oracle",
    "matcher_params": {},
    "representation": "untangled",
    "iterations": [4],
    "eval_points": 3000,
    "workers": None,
    "set_dir": None,
    "out": None,
    "track": {"frames_dir": None, "iters_per_frame": 2,
              "rot_thresh_deg": 10.0, "trans_thresh_m": 0.01,
              "buffer_len": 10},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError("--set", f"expected key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = _parse_set_value(raw)


def load_config(path: str | None, sets=(), flags: dict | None = None) -> dict:
    cfg = deepcopy(DEFAULTS)
    if path is not None:
        p = pathlib.Path(path)
        if not p.is_file():
            raise ConfigError("config", f"no such file: {path}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError("config", f"invalid JSON: {err}") from err
        if not isinstance(file_cfg, dict):
            raise ConfigError("config", "top level must be an object")
        cfg = _merge(cfg, file_cfg)
    for assignment in sets or ():
        _apply_set(cfg, assignment)
    for key, value in (flags or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _build_model(entry: dict, index: int) -> tuple[str, ObjectModel]:
    field = f"models[{index}]"
    if not isinstance(entry, dict) or "name" not in entry:
        raise ConfigError(field, "each model needs a name")
    name = entry["name"]
    if "builtin" in entry:
        kind = entry["builtin"]
        if kind == "cube":
            model = make_unit_cube(side=float(entry.get("side", 1.0)))
        elif kind in ("icosphere", "sphere"):
            model = make_icosphere(
                subdivisions=int(entry.get("subdivisions", 2)),
                radius=float(entry.get("radius", 0.5)))
        else:
            raise ConfigError(f"{field}.builtin", f"unknown builtin: {kind}")
    elif "path" in entry:
        path = pathlib.Path(entry["path"])
        if not path.is_file():
            raise ConfigError(f"{field}.path", f"no such file: {path}")
        model, _ = load_model(path)
    else:
        raise ConfigError(field, "model needs either builtin or path")
    scale = float(entry.get("unit_scale", 1.0))
    if scale <= 0.0:
        raise ConfigError(f"{field}.unit_scale", "must be positive")
    if scale != 1.0:
        model = ObjectModel(model.vertices * scale, model.triangles,
                            symmetry=model.symmetry, name=model.name,
                            convex=model.convex)
    return name, model


def _iterations(cfg: dict) -> list:
    its = cfg["iterations"]
    if isinstance(its, int):
        its = [its]
    try:
        its = sorted({int(k) for k in its})
    except (TypeError, ValueError):
        raise ConfigError("iterations", "must be an int or list of ints")
    if not its or its[0] < 1:
        raise ConfigError("iterations", "iteration counts must be >= 1")
    return its


def _intrinsics(cfg: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.from_json(json.dumps(cfg["intrinsics"]))
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError("intrinsics", str(err)) from err


def _noise(cfg: dict) -> NoiseModel:
    try:
        return NoiseModel.from_dict(cfg["noise"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError("noise", str(err)) from err


def _models(cfg: dict) -> list:
    entries = cfg["models"]
    if not isinstance(entries, list) or not entries:
        raise ConfigError("models", "need a nonempty model list")
    named = [_build_model(e, i) for i, e in enumerate(entries)]
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise ConfigError("models", "model names must be unique")
    return named

def _validate_enum(cfg: dict, key: str, allowed) -> str:
    value = cfg[key]
    if value not in allowed:
        raise ConfigError(key,
                          f"must be one of {', '.join(allowed)}; got {value}")
    return value


def _out_dir(cfg: dict) -> pathlib.Path:
    if not cfg.get("out"):
        raise ConfigError("out", "output directory is required")
    out = pathlib.Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(cfg: dict) -> int:
    w = cfg.get("workers")
    if w is None:
        return os.cpu_count() or 1
    w = int(w)
    if w < 1:
        raise ConfigError("workers", "must be >= 1")
    return w


def _make_matcher(kind: str, params: dict, gt: Pose, model: ObjectModel,
                  seed) -> object:
    if kind == "oracle":
        return OracleMatcher(gt)
    if kind == "noisy":
        return NoisyOracleMatcher(
            gt, contraction=float(params.get("contraction", 0.5)),
            rot_noise_deg=float(params.get("rot_noise_deg", 0.0)),
            v_noise=tuple(params.get("v_noise", (0.0, 0.0, 0.0))),
            seed=seed)
    if kind == "silhouette":
        return SilhouetteMatcher(
            model, max_evals=int(params.get("max_evals", 120)),
            coarse=int(params.get("coarse", 4)),
            min_pixels=int(params.get("min_pixels", 8)),
            simplex_deg=float(params.get("simplex_deg", 8.0)))
    raise ConfigError("matcher", f"unknown matcher: {kind}")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: dict) -> int:
    out = _out_dir(cfg)
    intr = _intrinsics(cfg)
    noise = _noise(cfg)
    named = _models(cfg)
    n = int(cfg["samples_per_model"])
    if n < 1:
        raise ConfigError("samples_per_model", "must be >= 1")
    log.info("generating %d samples (%d models) into %s",
             n * len(named), len(named), out)
    sset = make_sample_set(out, named, n, intr, noise,
                           master_seed=int(cfg["seed"]),
                           dilate_max_px=int(cfg["dilate_max_px"]),
                           z_range=tuple(cfg["z_range"]),
                           margin_px=float(cfg["margin_px"]))
    sset.validate()
    log.info("wrote %d samples", len(sset.records))
    return 0


# ---------------------------------------------------------------------------
# refine


def _refine_sample(payload: dict):
    """Run one sample end to end; must stay importable for worker pickling."""
    record_gt = Pose.from_json(payload["gt"])
    record_init = Pose.from_json(payload["init"])
    intr = CameraIntrinsics.from_json(payload["intrinsics"])
    model: ObjectModel = payload["model"]
    points = payload["points"]
    kmax = payload["kmax"]
    matcher = _make_matcher(payload["matcher"], payload["matcher_params"],
                            record_gt, model,
                            seed=[payload["seed"], payload["index"]])
    observed = MaskImage.from_pgm(payload["mask_path"])
    failed = False
    error = None
    try:
        result = refine(model, observed, record_init, intr, matcher,
                        iters=kmax, representation=payload["representation"])
        trace = result.trace
    except RefineError as err:
        failed = True
        error = f"{type(err).__name__}: {err}"
        trace = err.trace
    reports = {}
    symmetry = model.symmetry if model.symmetry.kind != "none" else None
    for rec in trace:
        pose_k = Pose.from_json(json.dumps(rec["pose"]))
        rep = evaluate_pose(record_gt, pose_k, points, intr,
                            symmetry=symmetry, add_s_method="kdtree")
        reports[str(rec["iteration"])] = rep.to_dict()
    trace_lines = "\n".join(json.dumps(r) for r in trace)
    entry = {"index": payload["index"], "model": payload["model_name"],
             "failed": failed, "error": error, "reports": reports}
    return payload["index"], trace_lines, entry


def cmd_refine(cfg: dict) -> int:
    out = _out_dir(cfg)
    if not cfg.get("set_dir"):
        raise ConfigError("set_dir", "sample set directory is required")
    set_dir = pathlib.Path(cfg["set_dir"])
    if not (set_dir / "manifest.json").is_file():
        raise ConfigError("set_dir", f"no sample set at {set_dir}")
    sset = load_sample_set(set_dir)
    named = dict(_models(cfg))
    missing = sorted({r.model_name for r in sset.records} - set(named))
    if missing:
        raise ConfigError("models",
                          f"sample set references unknown models: {missing}")
    matcher = _validate_enum(cfg, "matcher", MATCHERS)
    representation = _validate_enum(cfg, "representation",
                                    ("untangled", "camera", "model"))
    its = _iterations(cfg)
    kmax = its[-1]
    n_points = int(cfg["eval_points"])
    points = {name: sample_eval_points(model, n_points, seed=0)
              for name, model in named.items()}
    diameters = {name: compute_diameter(model)
                 for name, model in named.items()}
    intr_json = sset.intrinsics.to_json()

    payloads = []
    for rec in sset.records:
        payloads.append({
            "index": rec.index, "model_name": rec.model_name,
            "model": named[rec.model_name],
            "points": points[rec.model_name],
            "gt": rec.gt.to_json(), "init": rec.init.to_json(),
            "mask_path": rec.mask_path, "intrinsics": intr_json,
            "matcher": matcher, "matcher_params": cfg["matcher_params"],
            "representation": representation, "kmax": kmax,
            "seed": int(cfg["seed"])})

    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    workers = _workers(cfg)
    entries = {}
    log.info("refining %d samples (%s matcher, %s repr, %d iters, "
             "%d workers)", len(payloads), matcher, representation, kmax,
             workers)
    if workers == 1:
        results = map(_refine_sample, payloads)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_refine_sample, payloads, chunksize=8)
    done = 0
    for index, trace_lines, entry in results:
        (traces_dir / f"{index:06d}.jsonl").write_text(trace_lines + "\n")
        entries[index] = entry
        done += 1
        if done % 100 == 0:
            log.info("  %d / %d", done, len(payloads))
    if workers > 1:
        pool.shutdown()

    ordered = [entries[k] for k in sorted(entries)]
    failures = sum(1 for e in ordered if e["failed"])
    header = {"matcher": matcher, "representation": representation,
              "iterations": its, "seed": int(cfg["seed"]),
              "models": {name: {"diameter": diameters[name]}
                         for name in sorted(named)}}
    (out / "metrics.json").write_text(json.dumps(
        dict(header, samples=ordered), indent=1))
    for k in its:
        slim = [{"index": e["index"], "model": e["model"],
                 "failed": e["failed"],
                 "report": e["reports"].get(str(k))} for e in ordered]
        (out / f"metrics_iter{k}.json").write_text(json.dumps(
            dict(header, iteration=k, samples=slim), indent=1))
    log.info("refined %d samples, %d failed", len(ordered), failures)
    if failures * 2 > len(ordered):
        log.error("more than half the samples failed")
        return 1
    return 0


# ---------------------------------------------------------------------------
# report


def _collect_metric_files(root: pathlib.Path) -> list:
    if (root / "metrics.json").is_file():
        return [root / "metrics.json"]
    return sorted(root.glob("*/metrics.json"))


def cmd_report(cfg: dict) -> int:
    out = _out_dir(cfg)
    files = _collect_metric_files(out)
    if not files:
        raise ConfigError("out", f"no metrics.json under {out}")
    rows = []  # (object, matcher, representation, iteration, summary)
    for path in files:
        data = json.loads(path.read_text())
        matcher = data["matcher"]
        representation = data["representation"]
        diameters = {name: info["diameter"]
                     for name, info in data["models"].items()}
        its = [0] + [int(k) for k in data["iterations"]]
        by_object = {}
        for entry in data["samples"]:
            by_object.setdefault(entry["model"], []).append(entry)
        for k in its:
            for obj in sorted(by_object):
                reports = [MetricReport.from_dict(e["reports"][str(k)])
                           for e in by_object[obj]
                           if str(k) in e["reports"]]
                if not reports:
                    continue
                summary = summarize(reports, diameters[obj])
                rows.append((obj, matcher, representation, k, summary))

    # unweighted mean across objects within each (matcher, repr, iteration)
    groups = {}
    for obj, matcher, representation, k, summary in rows:
        groups.setdefault((matcher, representation, k), []).append(summary)
    mean_rows = []
    for (matcher, representation, k), summaries in sorted(groups.items()):
        labels = [(m, t) for m, t, _ in summaries[0].rows]
        mean = [(m, t, float(np.mean([s.rate(m, t) for s in summaries])))
                for m, t in labels]
        mean_rows.append(("MEAN", matcher, representation, k, mean))

    lines = ["object,matcher,representation,iterations,metric,threshold,"
             "pass_rate"]
    payload = []
    for obj, matcher, representation, k, summary in rows:
        for metric, threshold, rate in summary.rows:
            lines.append(f"{obj},{matcher},{representation},{k},{metric},"
                         f"{threshold},{rate:.6f}")
        payload.append({"object": obj, "matcher": matcher,
                        "representation": representation, "iterations": k,
                        "rates": {f"{m}/{t}": r for m, t, r in summary.rows}})
    for obj, matcher, representation, k, summary_rows in mean_rows:
        for metric, threshold, rate in summary_rows:
            lines.append(f"{obj},{matcher},{representation},{k},{metric},"
                         f"{threshold},{rate:.6f}")
        payload.append({"object": obj, "matcher": matcher,
                        "representation": representation, "iterations": k,
                        "rates": {f"{m}/{t}": r
                                  for m, t, r in summary_rows}})
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    (out / "report.json").write_text(json.dumps(payload, indent=1))
    log.info("report over %d files -> %s", len(files), out / "report.csv")
    return 0


# ---------------------------------------------------------------------------
# track


def cmd_track(cfg: dict) -> int:
    out = _out_dir(cfg)
    frames_dir = cfg["track"].get("frames_dir")
    if not frames_dir:
        raise ConfigError("track.frames_dir", "frame sequence dir required")
    frames_dir = pathlib.Path(frames_dir)
    if not (frames_dir / "manifest.json").is_file():
        raise ConfigError("track.frames_dir",
                          f"no frame manifest at {frames_dir}")
    model_name, init, gt_poses, intr, mask_paths = \
        load_track_sequence(frames_dir)
    named = dict(_models(cfg))
    if model_name not in named:
        raise ConfigError("models",
                          f"sequence references unknown model: {model_name}")
    model = named[model_name]
    matcher_kind = _validate_enum(cfg, "matcher", MATCHERS)
    representation = _validate_enum(cfg, "representation",
                                    ("untangled", "camera", "model"))
    params = cfg["matcher_params"]
    seed = int(cfg["seed"])

    def make_matcher(k: int):
        return _make_matcher(matcher_kind, params, gt_poses[k], model,
                             seed=[seed, k])

    frames = [MaskImage.from_pgm(p) for p in mask_paths]
    t = cfg["track"]
    result = track(frames, init, make_matcher, lambda k: gt_poses[k],
                   model=model, intr=intr,
                   iters_per_frame=int(t["iters_per_frame"]),
                   representation=representation,
                   rot_thresh_deg=float(t["rot_thresh_deg"]),
                   trans_thresh_m=float(t["trans_thresh_m"]),
                   buffer_len=int(t["buffer_len"]))
    (out / "track.jsonl").write_text(result.trace_jsonl() + "\n")
    (out / "events.json").write_text(json.dumps(
        {"frames": len(frames), "lost_events": result.lost_events},
        indent=1))
    log.info("tracked %d frames, %d lost events", len(frames),
             len(result.lost_events))
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--matcher", choices=MATCHERS)
    parser.add_argument("--repr", dest="representation",
                        choices=("untangled", "camera", "model"))
    parser.add_argument("--iters", help="iteration count or comma list")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posekit",
        description="pose refinement benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    p_gen = sub.add_parser("generate", help="write a synthetic sample set")
    p_ref = sub.add_parser("refine", help="refine a sample set")
    p_ref.add_argument("--set-dir", help="sample set directory")
    p_rep = sub.add_parser("report", help="aggregate metrics into CSV/JSON")
    p_trk = sub.add_parser("track", help="track a frame sequence")
    p_trk.add_argument("--frames", help="frame sequence directory")
    for p in (p_gen, p_ref, p_rep, p_trk):
        _add_common(p)
    return parser


def _flags_from_args(args: argparse.Namespace) -> dict:
    flags = {"out": args.out, "seed": args.seed, "workers": args.workers,
             "matcher": args.matcher, "representation": args.representation}
    if args.iters is not None:
        try:
            flags["iterations"] = [int(k) for k in
                                   str(args.iters).split(",") if k]
        except ValueError:
            raise ConfigError("iters", f"bad iteration list: {args.iters}")
    if getattr(args, "set_dir", None):
        flags["set_dir"] = args.set_dir
    return flags


def _setup_logging() -> None:
    level = os.environ.get("POSEKIT_LOG", "info").lower()
    chosen = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}.get(level, logging.INFO)
    logging.basicConfig(level=chosen, stream=sys.stderr,
                        format="%(levelname)s %(message)s")


COMMANDS = {"generate": cmd_generate, "refine": cmd_refine,
            "report": cmd_report, "track": cmd_track}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, sets=args.set,
                          flags=_flags_from_args(args))
        if args.command == "track" and getattr(args, "frames", None):
            cfg["track"]["frames_dir"] = args.frames
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        log.error("config error: %s", err)
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure: report and signal exit 1
        log.error("%s", err, exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
