"""Shared fixtures for expensive artifacts (built once per session)."""

import numpy as np
import pytest

from trislam.dataio import make_room_scene, orbit_trajectory, synth_generate
from trislam.encoding import EncodingConfig
from trislam.geometry import CameraIntrinsics
from trislam.model import SceneModel
from trislam.rendering import TruncationConfig
from trislam.slam import SlamConfig, init_first_frame


@pytest.fixture(scope="session")
def converged_map():
    """A 500-iteration single-frame map of the synthetic room at 64x48.

    Shared by the tracking-recovery example and the bundle-adjustment
    convergence checks; building it takes a couple of minutes, so it is
    session-scoped. Returns (model, dataset, intrinsics, slam config).
    """
    w, h = 64, 48
    K = CameraIntrinsics(fx=0.9 * w, fy=0.9 * w, cx=(w - 1) / 2,
                         cy=(h - 1) / 2, width=w, height=h)
    scene = make_room_scene()
    traj = orbit_trajectory(1, yaw_range=2 * np.pi / 100)
    ds = synth_generate(scene, traj, K)
    cfg = SlamConfig(rays_mapping=1024, first_frame_iters=500,
                     trunc=TruncationConfig(samples_per_ray=32))
    enc = EncodingConfig(seed=0, levels=8, coarsest_resolution=16,
                         finest_resolution=100)
    model = SceneModel(enc, seed=0)
    init_first_frame(ds[0], model, cfg, K, np.random.default_rng(0))
    return model, ds, K, cfg
