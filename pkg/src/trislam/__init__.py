"""Neural implicit RGB-D SLAM with a multi-resolution sparse tri-plane map.

Submodules:
  geometry   rigid-body math, camera model, reprojection
  encoding   sparse tri-plane / dense tri-plane / 3D hash-grid backends
  decoder    tiny MLP decoders with hand-derived gradients
  nnopt      Adam over dense and sparse parameter groups, FD checking
  rendering  depth-guided sampling, SDF-weighted rendering, 4-term loss
  model      scene model (encodings + decoders) and checkpointing
  slam       tracking, keyframe selection, hierarchical bundle adjustment
  dataio     TUM IO, synthetic scenes, trajectories
  evalmesh   mesh extraction and trajectory/mesh/depth metrics
  config     YAML run configuration
  cli        command-line entry point
"""

__version__ = "0.1.0"

from .encoding import Bounds, EncodingConfig, make_encoding
from .geometry import CameraIntrinsics, SE3Pose, Twist
from .model import SceneModel
from .rendering import LossWeights, TruncationConfig
from .slam import SlamConfig

__all__ = [
    "Bounds", "CameraIntrinsics", "EncodingConfig", "LossWeights",
    "SE3Pose", "SceneModel", "SlamConfig", "TruncationConfig", "Twist",
    "make_encoding", "__version__",
]
