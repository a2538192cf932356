"""Command-line pipeline: datagen, fit, evaluate, stitch, simulate, compare.

Every command reads its section of a JSON config, writes plain-file
artifacts plus a manifest.json (config hash, input/output hashes, stage
timings) into --out-dir, and populates the output directory atomically.
All numeric output states its units. The PINNA_MODEL_DIR environment
variable provides the default directory for model containers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .acoustics import (
    DEFAULT_AZIMUTHS,
    DEFAULT_FIELD_RADIUS,
    DEFAULT_FREQUENCIES,
    HrtfResult,
    export_polar,
    mesh_mm_to_m,
    simulate_hrtf,
    spl_error,
)
from .fitting import FitConfig, FitDivergenceError, fit_batch, fit_image
from .losses import LandmarkSet2D, LossWeights, load_landmarks, save_landmarks
from .manifest import RunManifest, StageTimer, atomic_output_dir, canonical_json, sha256_bytes
from .meshes import PointCloud, sample_points_on_mesh
from .meshio import load_mesh, load_pointcloud, save_mesh, save_pointcloud
from .morphable import (
    decode_shape,
    decode_texture,
    decode_vertices,
    landmark_positions,
    load_shape_model,
    load_texture_model,
)
from .registration import (
    RegistrationConfig,
    evaluate_dataset,
    write_report_csv,
    write_report_json,
)
from .render import CameraParams, project_orthographic, rasterize, save_depth_tiff, save_png
from .stitching import StitchConfig, stitch, suggest_ear_transform
from .transforms import SimilarityTransform

MODEL_DIR_ENV = "PINNA_MODEL_DIR"


class CliError(RuntimeError):
    pass


def _resolve_model(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists() or path.is_absolute():
        return path
    model_dir = os.environ.get(MODEL_DIR_ENV)
    if model_dir and (Path(model_dir) / path).exists():
        return Path(model_dir) / path
    return path


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from exc


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be an object")
    return section


def _fit_config(section: dict, seed: int) -> FitConfig:
    weights = LossWeights(**section.get("weights", {}))
    fields = {
        k: v for k, v in section.items() if k not in ("weights",)
    }
    fields.setdefault("seed", seed)
    if "lr_decay_points" in fields:
        fields["lr_decay_points"] = tuple(fields["lr_decay_points"])
    return FitConfig(weights=weights, **fields)


def _registration_config(section: dict, seed: int) -> RegistrationConfig:
    fields = dict(section)
    fields.setdefault("seed", seed)
    for key in ("mesh_key_vertices", "scan_key_indices"):
        if fields.get(key) is not None and key in fields:
            fields[key] = tuple(fields[key])
    return RegistrationConfig(**fields)


def _spawn_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


# ---------------------------------------------------------------------------
# datagen


def cmd_datagen(args, config) -> int:
    section = _section(config, "datagen")
    shape_model = load_shape_model(_resolve_model(section["shape_model"]))
    texture_model = (
        load_texture_model(_resolve_model(section["texture_model"]))
        if section.get("texture_model")
        else None
    )
    count = int(section.get("count", 10))
    resolution = tuple(section.get("resolution", (128, 128)))
    shape_sigma = float(section.get("shape_sigma", 0.7))
    texture_sigma = float(section.get("texture_sigma", 0.5))
    with_scans = bool(section.get("with_scans", False))
    scan_points = int(section.get("scan_points", 4000))

    manifest = RunManifest(
        command="datagen", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    timer = StageTimer(manifest)
    seeds = _spawn_seeds(args.seed, count)

    def generate(idx_seed):
        idx, sample_seed = idx_seed
        rng = np.random.default_rng(sample_seed)
        beta = rng.normal(0.0, shape_sigma, shape_model.n_components)
        theta = (
            rng.normal(0.0, texture_sigma, texture_model.n_components)
            if texture_model is not None
            else np.zeros(0)
        )
        cam = _sample_camera(rng, shape_model, beta, resolution)
        verts = decode_vertices(shape_model, beta)
        mesh = decode_shape(shape_model, beta)
        lm2d = project_orthographic(landmark_positions(shape_model, verts), cam)
        landmarks = LandmarkSet2D(lm2d, shape_model.landmarks.groups)
        render = None
        if texture_model is not None:
            texture = decode_texture(texture_model, theta)
            render = rasterize(mesh, cam, texture, resolution)
        scan = None
        if with_scans:
            pts, _, _ = sample_points_on_mesh(mesh, scan_points, rng)
            scan = PointCloud(pts)
        return idx, beta, theta, cam, landmarks, render, scan, mesh

    with atomic_output_dir(args.out_dir, args.force) as out:
        with timer.stage("datagen"):
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                results = list(pool.map(generate, enumerate(seeds)))
        for idx, beta, theta, cam, landmarks, render, scan, mesh in results:
            d = out / f"sample_{idx:04d}"
            d.mkdir()
            (d / "latents.json").write_text(
                json.dumps(
                    {
                        "beta": beta.tolist(),
                        "theta": theta.tolist(),
                        "camera": {
                            "scale": cam.scale,
                            "rotation": cam.rotation.tolist(),
                            "translation": cam.translation.tolist(),
                        },
                    },
                    indent=2,
                )
                + "\n"
            )
            save_landmarks(landmarks, d / "landmarks.json")
            if render is not None:
                save_png(render.rgb, d / "rgb.png")
                save_depth_tiff(render.depth, d / "depth.tif")
            if scan is not None:
                save_pointcloud(scan, d / "scan.ply")
                save_mesh(mesh, d / "mesh.obj")
        manifest.add_outputs(out)
        manifest.write(out)
    print(f"datagen: wrote {count} samples to {args.out_dir}")
    return 0


def _sample_camera(rng, shape_model, beta, resolution) -> CameraParams:
    rotation = np.array(
        [
            rng.uniform(-0.15, 0.15),
            rng.uniform(-1.3, -0.7),
            rng.uniform(-0.15, 0.15),
        ]
    )
    base = CameraParams(scale=1.0, rotation=rotation, translation=np.zeros(2))
    verts = decode_vertices(shape_model, beta)
    pred0 = project_orthographic(landmark_positions(shape_model, verts), base)
    extent = float(np.linalg.norm(np.ptp(pred0, axis=0)))
    target = 0.6 * min(resolution)
    scale = float(np.clip(target / extent, 0.5, 4.0))
    center = np.array([resolution[1] / 2.0, resolution[0] / 2.0])
    translation = center - scale * pred0.mean(axis=0)
    return CameraParams(scale=scale, rotation=rotation, translation=translation)


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args, config) -> int:
    section = _section(config, "fit")
    shape_model = load_shape_model(_resolve_model(section["shape_model"]))
    texture_model = (
        load_texture_model(_resolve_model(section["texture_model"]))
        if section.get("texture_model")
        else None
    )
    fit_cfg = _fit_config(section.get("config", {}), args.seed)
    inputs = Path(section["inputs"])
    landmark_files = sorted(inputs.glob("**/landmarks.json"))
    if not landmark_files:
        print(f"fit: no landmark files under {inputs}; nothing to do", file=sys.stderr)
        return 0

    manifest = RunManifest(
        command="fit", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    timer = StageTimer(manifest)

    problems = []
    errors = []
    for path in landmark_files:
        manifest.add_input(str(path), path)
        try:
            lms = load_landmarks(path)
        except ValueError as exc:
            errors.append(str(exc))
            continue
        image = None
        rgb = path.parent / "rgb.png"
        if fit_cfg.weights.photo > 0 and rgb.exists():
            from .render import load_png

            image = load_png(rgb)
        problems.append((path, lms, image))
    if errors:
        for e in errors:
            print(f"fit: schema violation: {e}", file=sys.stderr)
        return 2

    batch_mode = bool(section.get("batch", False))
    with atomic_output_dir(args.out_dir, args.force) as out:
        with timer.stage("fit"):
            if batch_mode:
                results = fit_batch(
                    [p[1] for p in problems],
                    [p[2] for p in problems],
                    shape_model,
                    texture_model,
                    fit_cfg,
                )
            else:
                seeds = _spawn_seeds(args.seed, len(problems))

                def run_one(item):
                    (path, lms, image), sample_seed = item
                    cfg = replace(fit_cfg, seed=sample_seed)
                    return fit_image(lms, image, shape_model, texture_model, cfg)

                with ThreadPoolExecutor(max_workers=args.workers) as pool:
                    results = list(pool.map(run_one, zip(problems, seeds)))
        for (path, _, _), result in zip(problems, results):
            name = path.parent.name if path.parent != inputs else path.stem
            d = out / name
            d.mkdir(parents=True, exist_ok=True)
            (d / "fit_result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
            save_mesh(decode_shape(shape_model, result.latent.shape), d / "fitted_mesh.obj")
        manifest.add_outputs(out)
        manifest.write(out)
    print(f"fit: fitted {len(results)} samples to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args, config) -> int:
    section = _section(config, "evaluate")
    pairs_path = Path(section["pairs"])
    pairs = json.loads(pairs_path.read_text())
    missing = [p for p in pairs if not (Path(p["prediction"]).exists() and Path(p["scan"]).exists())]
    if missing:
        for p in missing:
            print(f"evaluate: unpaired or missing sample {p.get('id')}", file=sys.stderr)
        return 2
    reg_cfg = _registration_config(section.get("config", {}), args.seed)

    manifest = RunManifest(
        command="evaluate", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    timer = StageTimer(manifest)
    predictions, scans, lateralities, ids = [], [], [], []
    for p in pairs:
        manifest.add_input(p["prediction"], p["prediction"])
        manifest.add_input(p["scan"], p["scan"])
        predictions.append(load_mesh(p["prediction"]))
        scans.append(load_pointcloud(p["scan"]))
        lateralities.append(p.get("laterality", "right"))
        ids.append(str(p.get("id", len(ids))))

    with atomic_output_dir(args.out_dir, args.force) as out:
        with timer.stage("evaluate"):
            report = evaluate_dataset(predictions, scans, lateralities, reg_cfg, ids)
        write_report_csv(report, out / "report.csv")
        write_report_json(report, out / "report.json")
        manifest.add_outputs(out)
        manifest.write(out)
    print(
        f"evaluate: {len(report.rows)} samples, mean S2M {report.mean_s2m_mm:.4f} mm, "
        f"median {report.median_s2m_mm:.4f} mm"
    )
    return 0


# ---------------------------------------------------------------------------
# stitch


def cmd_stitch(args, config) -> int:
    section = _section(config, "stitch")
    ear = load_mesh(section["ear"])
    body = load_mesh(section["body"])
    hole = section.get("body_hole", "longest")
    t = section.get("transform", "auto")
    if t == "auto":
        transform = suggest_ear_transform(ear, body, hole)
    else:
        transform = SimilarityTransform(
            scale=float(t.get("scale", 1.0)),
            rotation=np.asarray(t.get("rotation", [0.0, 0.0, 0.0]), dtype=float),
            translation=np.asarray(t.get("translation", [0.0, 0.0, 0.0]), dtype=float),
        )
    smoothing = section.get("smoothing", {})
    stitch_cfg = StitchConfig(
        transform=transform,
        body_hole=hole,
        smoothing_iterations=int(smoothing.get("iterations", 3)),
        smoothing_step=float(smoothing.get("step", 0.5)),
        smoothing_rings=int(smoothing.get("rings", 2)),
        sliver_threshold_deg=float(section.get("sliver_threshold_deg", 10.0)),
    )
    manifest = RunManifest(
        command="stitch", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    manifest.add_input(section["ear"], section["ear"])
    manifest.add_input(section["body"], section["body"])
    timer = StageTimer(manifest)
    with atomic_output_dir(args.out_dir, args.force) as out:
        with timer.stage("stitch"):
            merged, report = stitch(ear, body, stitch_cfg)
        save_mesh(merged, out / "stitched.obj")
        (out / "quality.json").write_text(
            json.dumps(
                {
                    "min_angle_deg": report.min_angle,
                    "max_angle_deg": report.max_angle,
                    "sliver_count": report.sliver_count,
                    "boundary_edge_count": report.boundary_edge_count,
                },
                indent=2,
            )
            + "\n"
        )
        manifest.add_outputs(out)
        manifest.write(out)
    print(
        f"stitch: seam min angle {report.min_angle:.2f} deg, "
        f"{report.sliver_count} slivers, {report.boundary_edge_count} boundary edges"
    )
    return 0


# ---------------------------------------------------------------------------
# simulate / compare


def cmd_simulate(args, config) -> int:
    section = _section(config, "simulate")
    mesh = load_mesh(section["mesh"])
    units = section.get("units", "mm")
    if units == "mm":
        mesh = mesh_mm_to_m(mesh)  # explicit mm -> m conversion (factor 1/1000)
        receiver = np.asarray(section["receiver"], dtype=float) / 1000.0
    elif units == "m":
        receiver = np.asarray(section["receiver"], dtype=float)
    else:
        raise CliError(f"units must be 'mm' or 'm', got {units!r}")
    freqs = section.get("frequencies_hz", list(DEFAULT_FREQUENCIES))
    manifest = RunManifest(
        command="simulate", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    manifest.add_input(section["mesh"], section["mesh"])
    timer = StageTimer(manifest)
    with atomic_output_dir(args.out_dir, args.force) as out:
        with timer.stage("simulate"):
            result = simulate_hrtf(
                mesh,
                receiver,
                frequencies=freqs,
                field_radius=float(section.get("field_radius_m", DEFAULT_FIELD_RADIUS)),
                azimuth_count=int(section.get("azimuths", DEFAULT_AZIMUTHS)),
                speed_of_sound=float(section.get("speed_of_sound", 343.0)),
            )
        (out / "hrtf.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
        export_polar(result, out / "hrtf.csv")
        manifest.add_outputs(out)
        manifest.write(out)
    print(
        f"simulate: {len(freqs)} frequencies (Hz) x {len(result.azimuths)} azimuths (deg), "
        f"SPL range [{result.spl.min():.2f}, {result.spl.max():.2f}] dB -> {args.out_dir}"
    )
    return 0


def _load_hrtf_json(path) -> HrtfResult:
    d = json.loads(Path(path).read_text())
    return HrtfResult(
        azimuths=np.asarray(d["azimuths_deg"], dtype=float),
        frequencies=np.asarray(d["frequencies_hz"], dtype=float),
        spl=np.asarray(d["spl_db"], dtype=float),
        receiver=np.asarray(d["receiver_m"], dtype=float),
        field_radius=float(d["field_radius_m"]),
    )


def cmd_compare(args, config) -> int:
    section = _section(config, "compare")
    pairs = section["pairs"]
    manifest = RunManifest(
        command="compare", seed=args.seed, config_hash=sha256_bytes(canonical_json(section).encode())
    )
    timer = StageTimer(manifest)
    with atomic_output_dir(args.out_dir, args.force) as out:
        rows = []
        with timer.stage("compare"):
            for pair in pairs:
                pid = str(pair.get("id", len(rows)))
                manifest.add_input(pair["pred"], pair["pred"])
                manifest.add_input(pair["gt"], pair["gt"])
                report = spl_error(_load_hrtf_json(pair["pred"]), _load_hrtf_json(pair["gt"]))
                rows.append({"id": pid, **report.to_dict()})
                export_polar(report, out / f"spl_error_{pid}.csv")
        (out / "spl_error.json").write_text(json.dumps(rows, indent=2) + "\n")
        with open(out / "spl_error.csv", "w", encoding="ascii") as fh:
            fh.write("id,frequency_hz,mean_abs_db,std_abs_db,mean_abs_db_x10,std_abs_db_x10\n")
            for row in rows:
                for i, f in enumerate(row["frequencies_hz"]):
                    fh.write(
                        f"{row['id']},{f:.9g},{row['mean_abs_error_db'][i]:.9g},"
                        f"{row['std_abs_error_db'][i]:.9g},"
                        f"{row['mean_abs_error_db_x10'][i]:.9g},"
                        f"{row['std_abs_error_db_x10'][i]:.9g}\n"
                    )
        manifest.add_outputs(out)
        manifest.write(out)
    for row in rows:
        for i, f in enumerate(row["frequencies_hz"]):
            print(
                f"compare[{row['id']}] f={f:.1f} Hz: "
                f"{row['mean_abs_error_db_x10'][i]:.2f}+-{row['std_abs_error_db_x10'][i]:.2f} (dBx10) "
                f"= {row['mean_abs_error_db'][i]:.3f}+-{row['std_abs_error_db'][i]:.3f} dB"
            )
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pinna",
        description="Ear reconstruction, evaluation, stitching, and HRTF simulation pipeline",
    )
    parser.add_argument("--version", action="version", version=f"pinna {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=False, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--force", action="store_true", help="overwrite an existing out-dir")
        p.add_argument("--verbose", action="store_true")
        p.set_defaults(func=fn)
    return parser


COMMANDS = {
    "datagen": cmd_datagen,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "stitch": cmd_stitch,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        return args.func(args, config)
    except (CliError, FitDivergenceError, FileExistsError, KeyError) as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        if getattr(args, "verbose", False):
            traceback.print_exc()
        return 1
    except Exception as exc:  # noqa: BLE001 - attribute the failing stage
        print(f"{args.command}: unexpected error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
