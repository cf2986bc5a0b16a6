"""Mesh extraction and reconstruction metrics on analytic geometry.

Extracts marching-cubes meshes from analytic SDFs, compares them with
accuracy / completion / completion-ratio metrics, and demonstrates the
depth-render L1 metric, all without any learned model in the loop.

Run: python demos/04_mesh_and_metrics.py
"""

import numpy as np

from trislam.dataio import make_room_scene, orbit_trajectory, synth_generate
from trislam.encoding import Bounds
from trislam.evalmesh import (ate_rmse, depth_l1, extract_mesh, mesh_metrics,
                              write_ply)
from trislam.geometry import CameraIntrinsics


def sphere(radius):
    return lambda p: np.linalg.norm(p, axis=-1) - radius


def main():
    bounds = Bounds(lo=(-1, -1, -1), hi=(1, 1, 1))

    print("=== marching cubes on an analytic sphere ===")
    mesh = extract_mesh(sphere(0.5), bounds, cell_size=0.04)
    r = np.linalg.norm(mesh.vertices, axis=1)
    print(f"vertices: {len(mesh.vertices)}, faces: {len(mesh.faces)}")
    print(f"vertex radius: mean {r.mean():.4f}, max dev {np.abs(r - .5).max():.4f}")

    print("\n=== accuracy / completion between two spheres (2 cm apart) ===")
    other = extract_mesh(sphere(0.52), bounds, cell_size=0.04)
    acc, comp, ratio = mesh_metrics(mesh, other, n_samples=5000)
    print(f"acc {acc:.2f} cm   comp {comp:.2f} cm   ratio {ratio:.1f} %")

    print("\n=== depth L1 against rendered ground truth ===")
    K = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5,
                         width=64, height=48)
    scene = make_room_scene()
    traj = orbit_trajectory(2, yaw_range=0.1)
    frames = synth_generate(scene, traj, K)
    room_mesh = extract_mesh(scene.sdf, Bounds(lo=(-2, -2, -1.3), hi=(2, 2, 1.3)),
                             cell_size=0.04)
    err = depth_l1(traj, K, frames.frames, mesh=room_mesh)
    print(f"room mesh vs sphere-traced depth: {err:.2f} cm "
          f"(bounded by the 4 cm marching-cubes cells)")

    print("\n=== trajectory error ===")
    gt = orbit_trajectory(50)
    wobble = [type(p)(p.rotation,
                      p.translation + np.array([0.005, 0, 0]) * (i % 2))
              for i, p in enumerate(gt)]
    print(f"5 mm wobble on alternating frames: {ate_rmse(wobble, gt):.3f} cm")

    out = "/tmp/demo_sphere.ply"
    write_ply(mesh, out)
    print(f"\nwrote {out}")


if __name__ == "__main__":
    main()
