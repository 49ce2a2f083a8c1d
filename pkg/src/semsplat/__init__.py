"""Differentiable semantic Gaussian splatting at desk scale.

Scenes of anisotropic 3D gaussians carry per-primitive semantic logit vectors
alongside geometry and appearance. A differentiable CPU rasterizer blends
RGB, depth, normals and semantics; distillation and semantics-guided geometry
losses drive a deterministic first-order optimizer; TSDF fusion and point
metrics evaluate the reconstructed surfaces.
"""

__version__ = "0.1.0"

from .scene import (  # noqa: F401
    Camera,
    GaussianPrimitive,
    GaussianScene,
    TrainConfig,
    activate,
    dominant_class,
    edit_scene,
)
