"""Command-line pipeline: synth / extract / build-dataset / train /
localize / evaluate.

Exit codes: 0 success (including a recorded localization failure, which is
data rather than a crash), 2 configuration or input-file error, 3 pipeline
error. Every artifact embeds the effective configuration for provenance
(JSON field or binary trailer).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dataset as dataset_mod
from . import geometry, image, matcher, pointcloud, report, synthetic
from .errors import CloudLocError, ConfigError, LocalizationFailed, ParseError, UnsupportedFormat
from .pose import MlesacSettings, localize

FORMAT_VERSIONS = {
    "C3DF": 1,
    "C2DF": 1,
    "CDS1": 1,
    "CDM1": 1,
    "poses.json": 1,
}


def _load_run_config(args) -> config_mod.RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return config_mod.load_config(getattr(args, "config", None), overrides)


def _cmd_synth(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec_data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scene spec: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene spec is not valid JSON: {exc}") from exc
    if not isinstance(spec_data, dict):
        raise ConfigError("scene spec must be a JSON object")
    run = dict(spec_data)
    n_train = int(run.pop("n_train", 8))
    n_query = int(run.pop("n_query", 2))
    seed = int(run.pop("seed", 0))
    width = int(run.pop("width", 320))
    height = int(run.pop("height", 240))
    splat = int(run.pop("splat_radius_px", 3))
    try:
        spec = synthetic.SceneSpec(**run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene spec: {exc}") from exc
    synthetic.make_benchmark(
        spec, n_train=n_train, n_query=n_query, seed=seed, out_dir=args.out,
        width=width, height=height, splat_radius_px=splat,
        extra_manifest={"spec_file": str(args.spec)},
    )
    print(f"bundle written to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    cfg = _load_run_config(args)
    src = Path(args.input)
    if args.kind == "3d":
        if src.suffix.lower() != ".ply":
            raise ConfigError(f"extract 3d expects a .ply input, got {src.name}")
        cloud = pointcloud.load_ply(src)
        feats = pointcloud.extract_features_3d(cloud, cfg.detector3d, cfg.descriptor3d)
        pointcloud.save_features_3d(feats, args.out, trailer={"config": cfg.to_dict()})
        print(f"{feats.count} 3D features -> {args.out}")
    else:
        if src.suffix.lower() not in (".pgm", ".ppm"):
            raise ConfigError(f"extract 2d expects a .pgm/.ppm input, got {src.name}")
        img = image.load_image(src)
        feats = image.extract_features_2d(img, cfg.detector2d)
        image.save_features_2d(feats, args.out, trailer={"config": cfg.to_dict()})
        print(f"{feats.count} 2D features -> {args.out}")
    return 0


def _load_bundle(bundle_dir):
    bundle = Path(bundle_dir)
    poses_path = bundle / "poses.json"
    manifest_path = bundle / "manifest.json"
    cloud_path = bundle / "cloud.ply"
    for path in (poses_path, manifest_path, cloud_path):
        if not path.exists():
            raise ConfigError(f"bundle is missing {path.name}")
    views = {v.image_id: v for v in geometry.load_poses(poses_path)}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cloud = pointcloud.load_ply(cloud_path)
    return bundle, views, manifest, cloud


def _cmd_build_dataset(args) -> int:
    cfg = _load_run_config(args)
    bundle, views, manifest, cloud = _load_bundle(args.bundle)
    feats3d = None
    if args.cloud_features:
        feats3d = pointcloud.load_features_3d(args.cloud_features)
    images = []
    for image_id in manifest["train"]:
        if image_id not in views:
            raise ConfigError(f"train image {image_id} has no pose record")
        img = image.load_image(bundle / "images" / f"{image_id:03d}.pgm")
        images.append((img, views[image_id]))
    ds = dataset_mod.assemble_dataset(images, cloud, cfg, feats3d=feats3d)
    dataset_mod.save_dataset(ds, args.out, trailer={"config": cfg.to_dict()})
    print(f"dataset: {ds.n_pos} positives, {ds.n_neg} negatives -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    ds = dataset_mod.load_dataset(args.dataset)
    model = matcher.grid_search(ds, cfg.grid, rng_seed=cfg.seed)
    model.metadata["config"] = cfg.to_dict()
    matcher.save_model(model, args.out)
    winner = model.metadata["grid_search"]["winner"]
    print(f"model trained ({winner}) -> {args.out}")
    return 0


def _read_intrinsics_record(path, image_id=None):
    """Accept a single record or a poses.json array (selected by image id).
    Returns (Intrinsics, width, height, gt_pose_or_None, image_id)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(data, list):
        match = [r for r in data if image_id is None or int(r.get("image_id", -1)) == image_id]
        if not match:
            raise ConfigError(f"{path}: no record for image id {image_id}")
        data = match[0]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    try:
        k = geometry.Intrinsics(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            skew=float(data.get("skew", 0.0)),
        )
        width = int(data["width"])
        height = int(data["height"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad intrinsics record: {exc}") from exc
    gt = None
    if "rotation" in data and "translation" in data:
        gt = geometry.Pose(
            np.array(data["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(data["translation"], dtype=np.float64),
        )
    rec_id = int(data.get("image_id", -1))
    return k, width, height, gt, rec_id


def _cmd_localize(args) -> int:
    cfg = _load_run_config(args)
    model = matcher.load_model(args.model)
    feats3d = pointcloud.load_features_3d(args.cloud_features)
    img = image.load_image(args.image)
    k, width, height, gt, rec_id = _read_intrinsics_record(args.intrinsics, args.image_id)
    image_id = args.image_id if args.image_id is not None else rec_id

    feats2d = image.extract_features_2d(img, cfg.detector2d)
    mlesac_cfg = MlesacSettings(
        iterations=cfg.mlesac.iterations,
        inlier_threshold_px=cfg.mlesac.inlier_threshold_px,
        sigma_px=cfg.mlesac.sigma_px,
        seed=cfg.mlesac.seed,
    )
    record = {"image_id": image_id, "success": False, "config": cfg.to_dict()}
    try:
        result = localize(feats2d, feats3d, model, k, mlesac_cfg, image_size=(width, height))
    except LocalizationFailed as exc:
        record["failure_stage"] = exc.stage
        record["failure_reason"] = str(exc.cause)
    else:
        est = result.estimate
        record.update({
            "success": True,
            "rotation": [float(x) for x in est.pose.rotation.reshape(9)],
            "translation": [float(x) for x in est.pose.translation],
            "n_matches": result.n_matches,
            "n_inliers": result.n_inliers,
            "mean_reproj_px": est.mean_reprojection_error,
        })
        if gt is not None:
            record["position_error"] = geometry.position_error(
                gt.camera_center(), est.pose.camera_center())
            record["rotation_error_deg"] = geometry.rotation_error_deg(gt, est.pose)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    status = "ok" if record["success"] else f"failed ({record.get('failure_stage')})"
    print(f"localize image {image_id}: {status} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    results_dir = Path(args.results)
    if not results_dir.is_dir():
        raise ConfigError(f"{results_dir} is not a directory")
    records = []
    for path in sorted(results_dir.glob("*.json")):
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        records.append(report.EvalRecord(
            image_id=int(data.get("image_id", -1)),
            success=bool(data.get("success", False)) and "position_error" in data,
            position_error=data.get("position_error"),
            rotation_error_deg=data.get("rotation_error_deg"),
        ))
    if not records:
        raise ConfigError(f"no result JSONs in {results_dir}")
    rep = report.summarize_or_null(records)
    fmt = args.format
    if fmt is None:
        suffix = Path(args.out).suffix.lower()
        fmt = {"json": "json", "csv": "csv", "txt": "text"}.get(suffix.lstrip("."), "json")
    data = report.emit_table(rep, fmt)
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"report over {rep.n_total} records (rate {rep.rate:.3f}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudloc",
        description="Localize 2D images in 3D point clouds via 2D-3D descriptor matching.",
    )
    parser.add_argument("--version", action="store_true", help="print file-format magics and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic benchmark bundle")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract", help="extract keypoints + descriptors")
    p.add_argument("kind", choices=["2d", "3d"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("build-dataset", help="generate the 2D-3D correspondence dataset")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--cloud-features", help="reuse a C3DF file instead of re-extracting")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("train", help="grid-search and train the descriptor matcher")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("localize", help="estimate the 6-DOF pose of one query image")
    p.add_argument("--model", required=True)
    p.add_argument("--cloud-features", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--intrinsics", required=True,
                   help="JSON intrinsics record or poses.json array (with --image-id)")
    p.add_argument("--image-id", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("evaluate", help="summarize localization results")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["text", "csv", "json"])
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        for name, version in FORMAT_VERSIONS.items():
            print(f"{name} v{version}")
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ConfigError, ParseError, UnsupportedFormat, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CloudLocError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
