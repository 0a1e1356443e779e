"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 localization-failure budget exceeded.

A scene directory (as written by ``synth``) looks like:

    <scene>/
      intrinsics.txt      fx fy cx cy width height
      scene.yaml          the fully resolved configuration
      train/              dataset dir: poses.txt, maps/, keypoints/
      query/              dataset dir with the held-out query views
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from .config import Config, ConfigError, apply_overrides, load_config
from .evaluate import (
    oracle_similarity_sweep,
    rendered_similarity_sweep,
    run_eval,
    write_inlier_table,
    write_report,
    write_sweep,
)
from .exceptions import MapFormatError, VoxLocError
from .geometry import Pose, rotation_angle_deg, rotation_from_axis_angle
from .mapstore import file_size, load_map, save_map
from .pipeline import (
    create_voxels,
    tracks_from_views,
    train_voxels,
    triangulate_tracks,
)
from .synthetic import gen_scene, orbit_pose
from .textio import fnum
from .tracking import dump_tracks
from .voxel import VoxelMap

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BUDGET = 4


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class BudgetExceeded(click.ClickException):
    exit_code = EXIT_BUDGET


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="YAML configuration file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key, e.g. training.epochs=500.")
@click.pass_context
def main(ctx, config_path, overrides):
    """Sparse voxel descriptor rendering for camera relocalization."""
    try:
        cfg = load_config(config_path)
        apply_overrides(cfg, list(overrides))
        if any(o.startswith("seed=") for o in overrides) and not any(
                o.startswith("scene.seed=") for o in overrides):
            cfg.scene.seed = cfg.seed
    except ConfigError as e:
        raise click.UsageError(str(e))
    ctx.obj = cfg


def _load_views(path, what: str):
    try:
        return ds.read_views(path)
    except (OSError, ValueError, MapFormatError) as e:
        raise DataError(f"cannot read {what} views from {path}: {e}") from e


def _load_intrinsics(scene_dir: Path):
    try:
        return ds.read_intrinsics(scene_dir / "intrinsics.txt")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read intrinsics: {e}") from e


def _load_map(path):
    try:
        return load_map(path)
    except (MapFormatError, VoxLocError) as e:
        raise DataError(f"cannot load map {path}: {e}") from e


@main.command()
@click.option("--out", required=True, type=click.Path(),
              help="Scene directory to create.")
@click.pass_obj
def synth(cfg: Config, out):
    """Generate a synthetic scene: train and query datasets plus metadata."""
    gen = gen_scene(cfg.scene)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    ds.write_views(root / "train", gen.train_views)
    ds.write_views(root / "query", gen.query_views)
    ds.write_intrinsics(gen.intrinsics, root / "intrinsics.txt")
    cfg.to_yaml(root / "scene.yaml")
    click.echo(f"wrote {len(gen.train_views)} train and "
               f"{len(gen.query_views)} query views to {root}")


@main.command()
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, type=click.Path(),
              help="Output tracks file (default <scene>/tracks.npz).")
@click.option("--dump", default=None, type=click.Path(),
              help="Also write a human-readable track dump.")
@click.pass_obj
def track(cfg: Config, scene_dir, out, dump):
    """Track keypoints across the training views."""
    scene_dir = Path(scene_dir)
    views = _load_views(scene_dir / "train", "train")
    tracks = tracks_from_views(views, cfg.build_config())
    if not tracks:
        raise DataError("no track passed the minimum-length gate")
    out = Path(out) if out else scene_dir / "tracks.npz"
    ds.save_tracks(tracks, out)
    if dump:
        dump_tracks(tracks, dump)
    click.echo(f"wrote {len(tracks)} tracks to {out}")


@main.command()
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--tracks", "tracks_path", default=None, type=click.Path())
@click.option("--out", default=None, type=click.Path(),
              help="Output landmarks file (default <scene>/landmarks.txt).")
@click.pass_obj
def triangulate(cfg: Config, scene_dir, tracks_path, out):
    """Triangulate tracked landmarks."""
    scene_dir = Path(scene_dir)
    views = _load_views(scene_dir / "train", "train")
    intr = _load_intrinsics(scene_dir)
    tracks_path = Path(tracks_path) if tracks_path else scene_dir / "tracks.npz"
    if not tracks_path.exists():
        raise DataError(f"tracks file {tracks_path} not found (run 'track' first)")
    tracks = ds.load_tracks(tracks_path, views)
    pairs = triangulate_tracks(tracks, intr, cfg.triangulation_config())
    if not pairs:
        raise DataError("all tracks were degenerate")
    out = Path(out) if out else scene_dir / "landmarks.txt"
    ds.write_landmarks([lm for _, lm in pairs], out)
    click.echo(f"wrote {len(pairs)} landmarks to {out}")


@main.command()
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--tracks", "tracks_path", default=None, type=click.Path())
@click.option("--landmarks", "landmarks_path", default=None, type=click.Path())
@click.option("--out", default=None, type=click.Path(),
              help="Output map file (default <scene>/map.fvor).")
@click.option("--workers", default=None, type=int,
              help="Parallel training workers (default from config).")
@click.option("--history-dir", default=None, type=click.Path(),
              help="Also dump per-voxel loss histories into this directory.")
@click.pass_obj
def train(cfg: Config, scene_dir, tracks_path, landmarks_path, out, workers,
          history_dir):
    """Create and train the voxel map from tracks and landmarks."""
    scene_dir = Path(scene_dir)
    views = _load_views(scene_dir / "train", "train")
    intr = _load_intrinsics(scene_dir)
    tracks_path = Path(tracks_path) if tracks_path else scene_dir / "tracks.npz"
    landmarks_path = (Path(landmarks_path) if landmarks_path
                      else scene_dir / "landmarks.txt")
    for p, cmd in ((tracks_path, "track"), (landmarks_path, "triangulate")):
        if not p.exists():
            raise DataError(f"{p} not found (run '{cmd}' first)")
    tracks = ds.load_tracks(tracks_path, views)
    landmarks = {lm.track_id: lm for lm in ds.read_landmarks(landmarks_path)}
    pairs = [(t, landmarks[t.id]) for t in tracks if t.id in landmarks]
    if not pairs:
        raise DataError("no (track, landmark) pair to train")
    voxel_tracks = create_voxels(pairs, intr, cfg.build_config())
    voxels, histories = train_voxels(
        voxel_tracks, cfg.train_config(), intr,
        workers if workers is not None else cfg.workers)
    if history_dir:
        from .trainer import dump_history

        hdir = Path(history_dir)
        hdir.mkdir(parents=True, exist_ok=True)
        for tid, history in histories.items():
            dump_history(history, hdir / f"{tid}.txt")
    vmap = VoxelMap(voxels=voxels, intrinsics=intr,
                    channels=views[0].descriptor_map.channels,
                    patch_size=cfg.voxel.patch_size)
    out = Path(out) if out else scene_dir / "map.fvor"
    nbytes = save_map(vmap, out)
    click.echo(f"wrote {len(voxels)} trained voxels ({nbytes} bytes) to {out}")


def _make_priors(cfg: Config, mode, query_views, train_views, rot_deg, trans):
    if mode == "gt":
        return [v.pose for v in query_views]
    if mode == "constant":
        return [train_views[0].pose for _ in query_views]
    if mode == "nearest":
        priors = []
        for q in query_views:
            angles = [rotation_angle_deg(q.pose.rotation, t.pose.rotation)
                      for t in train_views]
            priors.append(train_views[int(np.argmin(angles))].pose)
        return priors
    if mode == "offset":
        priors = []
        for i, q in enumerate(query_views):
            rng = np.random.default_rng([cfg.seed, 0x9101, i])
            axis = rng.standard_normal(3)
            axis *= np.radians(rot_deg) / np.linalg.norm(axis)
            dt = rng.standard_normal(3)
            dt *= trans / np.linalg.norm(dt)
            priors.append(Pose(rotation_from_axis_angle(axis) @ q.pose.rotation,
                               q.pose.translation + dt))
        return priors
    raise click.UsageError(f"unknown prior mode '{mode}'")


_PRIOR_MODES = ["gt", "constant", "nearest", "offset"]


@main.command()
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--prior", "prior_mode", default="nearest",
              type=click.Choice(_PRIOR_MODES))
@click.option("--prior-rot-deg", default=30.0, show_default=True,
              help="Rotation offset for --prior offset.")
@click.option("--prior-trans", default=0.25, show_default=True,
              help="Translation offset in meters for --prior offset.")
@click.option("--out", default=None, type=click.Path(),
              help="Output poses file (default <scene>/query_poses.txt).")
@click.option("--max-failures", default=None, type=int)
@click.pass_obj
def localize(cfg: Config, map_path, scene_dir, prior_mode, prior_rot_deg,
             prior_trans, out, max_failures):
    """Localize the query views against a trained map."""
    from .exceptions import LocalizationFailed
    from .relocalizer import iterative_localize

    scene_dir = Path(scene_dir)
    vmap = _load_map(map_path)
    queries = _load_views(scene_dir / "query", "query")
    train_views = _load_views(scene_dir / "train", "train")
    priors = _make_priors(cfg, prior_mode, queries, train_views,
                          prior_rot_deg, prior_trans)
    loc_cfg = cfg.localize_config()
    out = Path(out) if out else scene_dir / "query_poses.txt"
    failures = 0
    with open(out, "w") as f:
        for i, (view, prior) in enumerate(zip(queries, priors)):
            try:
                est = iterative_localize(vmap, (view.keypoints,
                                                view.descriptor_map),
                                         prior, cfg.localize.iterations, loc_cfg)
            except LocalizationFailed:
                failures += 1
                click.echo(f"query {i}: localization failed", err=True)
                continue
            row = est.pose.matrix34().reshape(-1)
            f.write(f"{i} " + " ".join(fnum(x) for x in row) + "\n")
    click.echo(f"localized {len(queries) - failures}/{len(queries)} queries "
               f"to {out}")
    budget = max_failures if max_failures is not None else cfg.eval.max_failures
    if failures > budget:
        raise BudgetExceeded(f"{failures} failures exceed budget {budget}")


@main.command("eval")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--prior", "prior_mode", default="nearest",
              type=click.Choice(_PRIOR_MODES))
@click.option("--prior-rot-deg", default=30.0, show_default=True)
@click.option("--prior-trans", default=0.25, show_default=True)
@click.option("--out-dir", default=None, type=click.Path())
@click.option("--sweep/--no-sweep", default=False,
              help="Also write the viewing-angle similarity sweep data.")
@click.option("--max-failures", default=None, type=int)
@click.option("--workers", default=None, type=int,
              help="Parallel query workers (default from config).")
@click.pass_obj
def eval_cmd(cfg: Config, map_path, scene_dir, prior_mode, prior_rot_deg,
             prior_trans, out_dir, sweep, max_failures, workers):
    """Evaluate localization on the query split and emit metric tables."""
    scene_dir = Path(scene_dir)
    vmap = _load_map(map_path)
    queries = _load_views(scene_dir / "query", "query")
    train_views = _load_views(scene_dir / "train", "train")
    priors = _make_priors(cfg, prior_mode, queries, train_views,
                          prior_rot_deg, prior_trans)
    report = run_eval(vmap, queries, priors, cfg.localize.iterations,
                      cfg.localize_config(),
                      translation_threshold=cfg.eval.success_translation,
                      rotation_threshold_deg=cfg.eval.success_rotation_deg,
                      workers=workers if workers is not None else cfg.workers)
    out_dir = Path(out_dir) if out_dir else scene_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / "report.txt")
    write_inlier_table(report, out_dir / "inliers_per_iteration.txt")
    click.echo(f"median errors: {report.median_translation_error:.6f} m, "
               f"{report.median_rotation_error_deg:.4f} deg; "
               f"failures {report.failure_count}/{report.query_count}")

    if sweep:
        angles = np.arange(-30.0, 30.0 + 1e-9, 5.0)
        poses = [(a, orbit_pose(cfg.scene, a)) for a in angles]
        rows = rendered_similarity_sweep(vmap, poses,
                                         cfg.rendering.samples_per_ray,
                                         cfg.voxel.density_shift)
        write_sweep(rows, out_dir / "angle_similarity.txt")
        from .descriptors import SyntheticScene

        scene = SyntheticScene.random(
            cfg.scene.landmark_count, cfg.scene.scene_extent,
            cfg.scene.channels, cfg.scene.seed,
            view_dependence=cfg.scene.view_dependence,
            falloff_sigma=cfg.scene.falloff_sigma)
        write_sweep(oracle_similarity_sweep(scene, poses),
                    out_dir / "angle_similarity_oracle.txt")

    budget = max_failures if max_failures is not None else cfg.eval.max_failures
    if report.failure_count > budget:
        raise BudgetExceeded(
            f"{report.failure_count} failures exceed budget {budget}")


@main.command()
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
def inspect(map_path):
    """Print map statistics including the serialized-size report."""
    vmap = _load_map(map_path)
    n = len(vmap.voxels)
    res = vmap.voxels[0].resolution if n else 0
    actual = Path(map_path).stat().st_size
    analytic = file_size(n, res, vmap.channels)
    click.echo(f"voxels {n}")
    click.echo(f"channels {vmap.channels}")
    click.echo(f"resolution {res}")
    click.echo(f"patch_size {vmap.patch_size}")
    click.echo(f"intrinsics fx={vmap.intrinsics.fx} fy={vmap.intrinsics.fy} "
               f"cx={vmap.intrinsics.cx} cy={vmap.intrinsics.cy} "
               f"size={vmap.intrinsics.width}x{vmap.intrinsics.height}")
    click.echo(f"file_bytes {actual}")
    click.echo(f"analytic_bytes {analytic}")
    if n:
        sides = np.array([v.side for v in vmap.voxels])
        centers = np.stack([v.center for v in vmap.voxels])
        extent = centers.max(axis=0) - centers.min(axis=0)
        click.echo(f"per_voxel_bytes {(analytic - 72) // max(n, 1)}")
        click.echo(f"mean_side_m {fnum(sides.mean())}")
        click.echo(f"extent_m {fnum(extent[0])} {fnum(extent[1])} "
                   f"{fnum(extent[2])}")


if __name__ == "__main__":
    sys.exit(main())
