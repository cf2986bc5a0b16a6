"""Run configuration: YAML schema with pre-filled defaults, strict
validation (unknown keys rejected), and dotted-key overrides.

The schema mirrors the dataclass defaults in encoding, rendering, and slam;
every numeric default lives here, command handlers only plumb values.
"""

from __future__ import annotations

import copy

import numpy as np
import yaml

from .encoding import Bounds, EncodingConfig
from .rendering import LossWeights, TruncationConfig
from .slam import SlamConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "type": "synthetic",  # or "tum"
        "path": None,
        "max_frames": None,
        "frames": 100,
        "width": 640,
        "height": 480,
        "noise_sigma": 0.0,
        "room_half": [1.8, 1.8, 1.2],
        "orbit_radius": 0.3,
        # full-circle frame count; `frames` below it yields a partial orbit
        # at the same angular velocity (None: `frames` spans the circle)
        "orbit_span": None,
        "depth_scale": 5000.0,
        "association_window": 0.02,
    },
    "encoding": {
        "variant": "sparse_triplane",
        "levels": 16,
        "hash_exponent": 18,
        "features_per_level": 2,
        "coarsest_resolution": 16,
        "finest_cell_size": 0.02,
        "finest_resolution": None,
        "bounds_lo": [-2.0, -2.0, -2.0],
        "bounds_hi": [2.0, 2.0, 2.0],
    },
    "truncation": {
        "truncation": 0.10,
        "near": 0.01,
        "far": 8.0,
        "samples_per_ray": 64,
    },
    "loss_weights": {
        "color": 5.0,
        "depth": 1.0,
        "sdf": 10000.0,
        "free_space": 10.0,
    },
    "slam": {
        "rays_tracking": 1024,
        "rays_mapping": 2048,
        "iters_tracking": 10,
        "iters_mapping": 10,
        "window_size": 20,
        "keyframe_overlap_threshold": 0.8,
        "global_ray_fraction": 0.10,
        "first_frame_iters": 500,
        "lr_pose": 0.005,
        "lr_decoder": 0.010,
        "lr_encoding": 0.010,
        "render_mode": "normalized",
    },
    "mesh": {
        "cell_size": 0.02,
    },
    "eval": {
        "n_samples": 200000,
        "threshold": 0.05,
    },
}


def _validate(value, default, path):
    """Recursively check `value` against the default schema."""
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValueError(f"config key {path or '<root>'}: expected a mapping")
        merged = {}
        for key, dval in default.items():
            sub = f"{path}.{key}" if path else key
            if key in value:
                merged[key] = _validate(value[key], dval, sub)
            else:
                merged[key] = copy.deepcopy(dval)
        unknown = set(value) - set(default)
        if unknown:
            raise ValueError(
                f"unknown config key(s): "
                + ", ".join(f"{path}.{k}" if path else k for k in sorted(unknown)))
        return merged
    if value is None or default is None:
        return value
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ValueError(f"config key {path}: expected a boolean")
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        raise ValueError(f"config key {path}: expected a number")
    if isinstance(default, str) and not isinstance(value, str):
        raise ValueError(f"config key {path}: expected a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ValueError(f"config key {path}: expected a list")
    return value


def load_config(path=None, overrides=()) -> dict:
    """Load a YAML config (or the defaults) and apply key=value overrides.

    Override keys use dots for nesting, e.g. slam.iters_tracking=15; values
    are parsed as YAML scalars.
    """
    if path is None:
        raw = {}
    else:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    cfg = _validate(raw, DEFAULT_CONFIG, "")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        value = yaml.safe_load(text)
        node = cfg
        parts = key.split(".")
        probe = DEFAULT_CONFIG
        for part in parts[:-1]:
            if not isinstance(probe, dict) or part not in probe:
                raise ValueError(f"unknown config key: {key}")
            probe = probe[part]
            node = node[part]
        if not isinstance(probe, dict) or parts[-1] not in probe:
            raise ValueError(f"unknown config key: {key}")
        node[parts[-1]] = _validate(value, probe[parts[-1]], key)
    return cfg


def save_config(cfg: dict, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=False)


# -- builders -------------------------------------------------------------

def build_encoding_config(cfg: dict) -> EncodingConfig:
    e = cfg["encoding"]
    return EncodingConfig(
        levels=e["levels"],
        hash_exponent=e["hash_exponent"],
        features_per_level=e["features_per_level"],
        coarsest_resolution=e["coarsest_resolution"],
        finest_cell_size=e["finest_cell_size"],
        finest_resolution=e["finest_resolution"],
        scene_bounds=Bounds(np.array(e["bounds_lo"], dtype=float),
                            np.array(e["bounds_hi"], dtype=float)),
        seed=cfg["seed"],
    )


def build_slam_config(cfg: dict) -> SlamConfig:
    s = cfg["slam"]
    t = cfg["truncation"]
    w = cfg["loss_weights"]
    return SlamConfig(
        rays_tracking=s["rays_tracking"],
        rays_mapping=s["rays_mapping"],
        iters_tracking=s["iters_tracking"],
        iters_mapping=s["iters_mapping"],
        window_size=s["window_size"],
        keyframe_overlap_threshold=s["keyframe_overlap_threshold"],
        global_ray_fraction=s["global_ray_fraction"],
        first_frame_iters=s["first_frame_iters"],
        lr_pose=s["lr_pose"],
        lr_decoder=s["lr_decoder"],
        lr_encoding=s["lr_encoding"],
        trunc=TruncationConfig(
            truncation=t["truncation"], near=t["near"], far=t["far"],
            samples_per_ray=t["samples_per_ray"]),
        weights=LossWeights(color=w["color"], depth=w["depth"], sdf=w["sdf"],
                            free_space=w["free_space"]),
        render_mode=s["render_mode"],
        seed=cfg["seed"],
    )


def build_dataset(cfg: dict):
    """Materialize the configured dataset (synthetic orbit or TUM path)."""
    from .dataio import load_tum, make_room_scene, orbit_trajectory, synth_generate
    from .geometry import CameraIntrinsics

    d = cfg["dataset"]
    if d["type"] == "tum":
        if not d["path"]:
            raise ValueError("dataset.type is tum but dataset.path is unset")
        K = synthetic_intrinsics(d)
        return load_tum(d["path"], K, association_window=d["association_window"],
                        max_frames=d["max_frames"])
    if d["type"] == "synthetic":
        K = synthetic_intrinsics(d)
        scene = make_room_scene(tuple(d["room_half"]))
        span = d["orbit_span"] or d["frames"]
        traj = orbit_trajectory(d["frames"], radius=d["orbit_radius"],
                                yaw_range=2.0 * np.pi * d["frames"] / span)
        return synth_generate(scene, traj, K, noise_sigma=d["noise_sigma"],
                              seed=cfg["seed"])
    raise ValueError(f"unknown dataset.type {d['type']!r}")


def synthetic_intrinsics(d: dict):
    from .geometry import CameraIntrinsics

    w, h = d["width"], d["height"]
    f = 0.9 * w  # moderate field of view
    return CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                            width=w, height=h, depth_scale=d["depth_scale"])
