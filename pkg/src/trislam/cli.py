"""Command-line entry point.

Exit codes: 0 success, 1 input error (bad config, missing files), 2 runtime
failure. Errors print as a single machine-parseable line on stderr:
``error: <subcommand>: <message>``. On failure, artifacts created by the
invocation are removed. One invocation at a time per output directory,
enforced with a lock file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_RUNTIME = 2
LOCK_NAME = ".trislam.lock"


class _Artifacts:
    """Tracks files created by a command so failures can clean them up."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths = []

    def path(self, name):
        os.makedirs(self.out_dir, exist_ok=True)
        p = os.path.join(self.out_dir, name)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if os.path.isfile(p):
                os.remove(p)


class _Lock:
    def __init__(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, LOCK_NAME)

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another invocation ({self.path})")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.remove(self.path)


def _load(args):
    from .config import load_config

    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _timestamps(dataset):
    return [f.timestamp for f in dataset.frames]


# -- subcommand handlers --------------------------------------------------

def cmd_run(args, art: _Artifacts) -> int:
    from . import slam
    from .config import build_dataset, build_encoding_config, build_slam_config
    from .dataio import write_trajectory

    cfg = _load(args)
    dataset = build_dataset(cfg)
    result = slam.run(dataset, build_slam_config(cfg),
                      enc_config=build_encoding_config(cfg),
                      variant=cfg["encoding"]["variant"])
    write_trajectory(result.poses, _timestamps(dataset), art.path("trajectory.txt"))
    result.model.save(art.path("checkpoint.ckpt"))
    with open(art.path("diagnostics.jsonl"), "w") as f:
        for record in result.diagnostics:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    n_kf = len(result.keyframes)
    print(f"run: {len(result.poses)} frames, {n_kf} keyframes")
    return EXIT_OK


def cmd_synth(args, art: _Artifacts) -> int:
    from .config import build_dataset
    from .dataio import save_tum, write_trajectory

    cfg = _load(args)
    cfg["dataset"]["type"] = "synthetic"
    dataset = build_dataset(cfg)
    save_tum(dataset, art.out_dir)
    write_trajectory([f.gt_pose for f in dataset.frames], _timestamps(dataset),
                     os.path.join(art.out_dir, "trajectory_gt.txt"))
    print(f"synth: wrote {len(dataset)} frames to {art.out_dir}")
    return EXIT_OK


def cmd_mesh(args, art: _Artifacts) -> int:
    from .config import load_config
    from .evalmesh import extract_mesh, write_ply
    from .model import SceneModel

    cfg = _load(args)
    model = SceneModel.load(args.checkpoint)
    mesh = extract_mesh(model.query_sdf, model.enc_config.scene_bounds,
                        cell_size=cfg["mesh"]["cell_size"],
                        color_fn=model.query_color)
    write_ply(mesh, art.path("mesh.ply"))
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return EXIT_OK


def cmd_eval_traj(args, art: _Artifacts) -> int:
    from .dataio import read_trajectory
    from .evalmesh import MetricsReport, ate_rmse

    est, _ = read_trajectory(args.estimate)
    gt, _ = read_trajectory(args.reference)
    report = MetricsReport(ate_rmse_cm=ate_rmse(est, gt))
    text = report.format()
    with open(art.path("traj_metrics.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_eval_mesh(args, art: _Artifacts) -> int:
    from .config import load_config
    from .evalmesh import MetricsReport, mesh_metrics, read_ply

    cfg = _load(args)
    rec = read_ply(args.mesh)
    ref = read_ply(args.reference)
    acc, comp, ratio = mesh_metrics(rec, ref,
                                    n_samples=cfg["eval"]["n_samples"],
                                    threshold=cfg["eval"]["threshold"],
                                    seed=cfg["seed"])
    report = MetricsReport(acc_cm=acc, comp_cm=comp, comp_ratio_pct=ratio)
    text = report.format()
    with open(art.path("mesh_metrics.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_params(args, art: _Artifacts) -> int:
    from dataclasses import replace

    from .config import build_encoding_config
    from .encoding import analytic_param_count

    cfg = _load(args)
    sparse_cfg = build_encoding_config(cfg)
    dense_cfg = replace(sparse_cfg, levels=1, finest_resolution=512,
                        features_per_level=32)
    rows = [
        ("sparse_triplane", analytic_param_count(sparse_cfg, "sparse_triplane")),
        ("hash_grid_3d", analytic_param_count(sparse_cfg, "hash_grid_3d")),
        ("dense_triplane_512_f32", analytic_param_count(dense_cfg, "dense_triplane")),
    ]
    print("backend entries bytes megabytes")
    for name, pc in rows:
        print(f"{name} {pc.total_entries} {pc.total_bytes} {pc.megabytes:.3f}")
    sparse_b = rows[0][1].total_bytes
    dense_b = rows[2][1].total_bytes
    print(f"ratio {sparse_b / dense_b:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, art: _Artifacts) -> int:
    from .gradcheck import TOLERANCE, run_all

    cfg = _load(args)
    results = run_all(n_cases=args.cases, base_seed=cfg["seed"])
    ok = True
    for name, (worst, passed) in results.items():
        print(f"{name} max_rel_error={worst:.3e} {'PASS' if passed else 'FAIL'}")
        ok = ok and passed
    if not ok:
        raise RuntimeError(f"gradient check exceeded tolerance {TOLERANCE}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trislam",
        description="Neural implicit RGB-D SLAM with a sparse tri-plane map.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable, dotted keys)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="rng seed override")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common],
                   help="run SLAM, write trajectory/checkpoint/diagnostics")
    sub.add_parser("synth", parents=[common],
                   help="materialize the synthetic dataset as a TUM directory")
    p = sub.add_parser("mesh", parents=[common],
                       help="extract a PLY mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval-traj", parents=[common],
                       help="ATE RMSE between two trajectory files")
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p = sub.add_parser("eval-mesh", parents=[common],
                       help="accuracy/completion metrics between two meshes")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", required=True)
    sub.add_parser("params", parents=[common],
                   help="parameter-count table for the configured backends")
    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient suites")
    p.add_argument("--cases", type=int, default=100)
    return parser


HANDLERS = {
    "run": cmd_run,
    "synth": cmd_synth,
    "mesh": cmd_mesh,
    "eval-traj": cmd_eval_traj,
    "eval-mesh": cmd_eval_mesh,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TRISLAM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    art = _Artifacts(args.out)
    try:
        with _Lock(args.out):
            try:
                return HANDLERS[args.command](args, art)
            except Exception:
                art.cleanup()
                raise
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
