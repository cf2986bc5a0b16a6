"""Scene model: geometry/appearance encodings, SDF/color decoders, and
checkpoint (de)serialization.

Checkpoint layout (little-endian throughout):
  bytes 0..15   magic b"TRISLAM-CKPT\\x00\\x00\\x00\\x00"
  bytes 16..19  uint32 format version (currently 1)
  bytes 20..27  uint64 JSON header length H
  bytes 28..28+H  UTF-8 JSON: model config + ordered array manifest
  remainder     the manifest's arrays as raw float32, concatenated
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .decoder import MLPDecoder
from .encoding import Bounds, EncodingConfig, make_encoding

CHECKPOINT_MAGIC = b"TRISLAM-CKPT\x00\x00\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class QueryContext:
    geo_ctx: object
    app_ctx: object
    sdf_cache: object
    color_cache: object
    n_points: int


class SceneModel:
    """Two encodings (geometry, appearance) with their tiny decoders.

    The SDF decoder reads only the geometry encoding; the color decoder reads
    only the appearance encoding. Neither receives raw coordinates.
    """

    def __init__(self, enc_config: EncodingConfig, variant: str = "sparse_triplane",
                 seed: int = 0):
        self.enc_config = enc_config
        self.variant = variant
        self.seed = int(seed)
        geo_cfg = _with_seed(enc_config, seed)
        app_cfg = _with_seed(enc_config, seed + 1)
        self.geo_enc = make_encoding(variant, geo_cfg)
        self.app_enc = make_encoding(variant, app_cfg)
        self.sdf_dec = MLPDecoder.sdf(self.geo_enc.feature_dim, seed=seed + 2)
        self.color_dec = MLPDecoder.color(self.app_enc.feature_dim, seed=seed + 3)

    # -- queries -----------------------------------------------------------

    def query(self, points: np.ndarray):
        """Predict (sdf (N,), color (N, 3)) plus the backward context."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        geo_feat, geo_ctx = self.geo_enc.encode(points)
        app_feat, app_ctx = self.app_enc.encode(points)
        s, sdf_cache = self.sdf_dec.forward(geo_feat)
        c, color_cache = self.color_dec.forward(app_feat)
        ctx = QueryContext(geo_ctx, app_ctx, sdf_cache, color_cache, points.shape[0])
        return s[:, 0], c, ctx

    def query_sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        feat, _ = self.geo_enc.encode(points)
        s, _ = self.sdf_dec.forward(feat)
        return s[:, 0]

    def query_color(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        feat, _ = self.app_enc.encode(points)
        c, _ = self.color_dec.forward(feat)
        return c

    def backward(self, ctx: QueryContext, d_sdf: np.ndarray, d_color: np.ndarray,
                 accumulate: bool = True) -> np.ndarray:
        """Backpropagate through decoders and encodings.

        With accumulate=False the map parameter gradients are left untouched
        (pose-only optimization); the returned (N, 3) position gradient is
        computed either way.
        """
        d_geo = self.sdf_dec.backward(ctx.sdf_cache, d_sdf[:, None], accumulate=accumulate)
        d_app = self.color_dec.backward(ctx.color_cache, d_color, accumulate=accumulate)
        dp = self.geo_enc.encode_backward(ctx.geo_ctx, d_geo, accumulate=accumulate)
        dp += self.app_enc.encode_backward(ctx.app_ctx, d_app, accumulate=accumulate)
        return dp

    def zero_grad(self):
        self.geo_enc.zero_grad()
        self.app_enc.zero_grad()
        self.sdf_dec.zero_grad()
        self.color_dec.zero_grad()

    # -- parameter registry ------------------------------------------------

    def named_arrays(self):
        """Deterministic (name, param, grad) ordering shared by the optimizer
        and the checkpoint writer."""
        for prefix, enc in (("geo", self.geo_enc), ("app", self.app_enc)):
            for name, table, grad in enc.named_tables():
                yield f"{prefix}.{name}", table, grad, True
        for prefix, dec in (("sdf_dec", self.sdf_dec), ("color_dec", self.color_dec)):
            for name, p, g in dec.named_params():
                yield f"{prefix}.{name}", p, g, False

    # -- checkpoint IO -----------------------------------------------------

    def save(self, path):
        manifest = []
        blobs = []
        for name, param, _, _ in self.named_arrays():
            manifest.append({"name": name, "shape": list(param.shape)})
            blobs.append(np.ascontiguousarray(param, dtype="<f4").tobytes())
        b = self.enc_config.scene_bounds
        header = {
            "variant": self.variant,
            "seed": self.seed,
            "encoding": {
                "levels": self.enc_config.levels,
                "hash_exponent": self.enc_config.hash_exponent,
                "features_per_level": self.enc_config.features_per_level,
                "coarsest_resolution": self.enc_config.coarsest_resolution,
                "finest_cell_size": self.enc_config.finest_cell_size,
                "finest_resolution": self.enc_config.finest_resolution,
                "seed": self.enc_config.seed,
                "bounds_lo": b.lo.tolist(),
                "bounds_hi": b.hi.tolist(),
            },
            "arrays": manifest,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
            f.write(np.uint64(len(header_bytes)).tobytes())
            f.write(header_bytes)
            for blob in blobs:
                f.write(blob)

    @staticmethod
    def load(path) -> "SceneModel":
        with open(path, "rb") as f:
            magic = f.read(16)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError("not a model checkpoint (bad magic)")
            version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            hlen = int(np.frombuffer(f.read(8), dtype="<u8")[0])
            header = json.loads(f.read(hlen).decode("utf-8"))
            enc = header["encoding"]
            cfg = EncodingConfig(
                levels=enc["levels"],
                hash_exponent=enc["hash_exponent"],
                features_per_level=enc["features_per_level"],
                coarsest_resolution=enc["coarsest_resolution"],
                finest_cell_size=enc["finest_cell_size"],
                finest_resolution=enc["finest_resolution"],
                seed=enc["seed"],
                scene_bounds=Bounds(np.array(enc["bounds_lo"]), np.array(enc["bounds_hi"])),
            )
            model = SceneModel(cfg, variant=header["variant"], seed=header["seed"])
            arrays = {name: param for name, param, _, _ in model.named_arrays()}
            for entry in header["arrays"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape)
                if entry["name"] not in arrays:
                    raise ValueError(f"checkpoint array {entry['name']!r} unknown")
                target = arrays[entry["name"]]
                if target.shape != shape:
                    raise ValueError(f"checkpoint array {entry['name']!r} shape mismatch")
                target[:] = data.astype(np.float64)
        return model


def _with_seed(cfg: EncodingConfig, seed: int) -> EncodingConfig:
    return EncodingConfig(
        levels=cfg.levels,
        hash_exponent=cfg.hash_exponent,
        features_per_level=cfg.features_per_level,
        coarsest_resolution=cfg.coarsest_resolution,
        finest_cell_size=cfg.finest_cell_size,
        scene_bounds=cfg.scene_bounds,
        finest_resolution=cfg.finest_resolution,
        seed=seed,
    )
