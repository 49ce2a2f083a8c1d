"""Optimizable scene representation.

A scene is a struct-of-arrays collection of anisotropic 3D Gaussians. Raw
parameters live in unconstrained domains (log scales, logit opacity/color,
raw semantic logits); `activate` maps them to physical quantities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractViolationError, InvalidParameterError
from .utils import class_palette, inverse_sigmoid, quat_to_rotmat, sigmoid

HIGHLIGHT_BLEND = 0.7


@dataclass
class GaussianPrimitive:
    """One splat: position, log-scales, quaternion, logits, semantic logits."""

    position: np.ndarray      # (3,) world units
    log_scale: np.ndarray     # (3,) log of per-axis std-dev
    rotation: np.ndarray      # (4,) quaternion wxyz, renormalized before use
    opacity_logit: float
    color_logit: np.ndarray   # (3,) pre-sigmoid RGB
    semantic: np.ndarray      # (C,) raw logits


@dataclass
class ActivatedGaussian:
    position: np.ndarray
    scales: np.ndarray        # exp(log_scale), strictly positive
    rotation: np.ndarray      # unit quaternion
    opacity: float            # in (0, 1)
    color: np.ndarray         # in (0, 1)^3
    semantic: np.ndarray      # raw logits, blended as-is


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rotation/translation plus intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) orthonormal, world -> camera
    translation: np.ndarray   # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("camera focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ConfigError(f"camera rotation not orthonormal (err={err:.3g})")

    def world_to_camera(self, points):
        return points @ self.rotation.T + self.translation

    @property
    def intrinsics(self):
        K = np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )
        return K

    def scaled(self, factor: int) -> "Camera":
        """Integer downscale of the image plane (fx, cx, width all divided)."""
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            rotation=self.rotation.copy(),
            translation=self.translation.copy(),
            width=self.width // factor,
            height=self.height // factor,
        )


class GaussianScene:
    """Ordered collection of gaussians stored as arrays (IDs are indices)."""

    def __init__(self, positions, log_scales, rotations, opacity_logits,
                 color_logits, semantics, class_count=None, palette=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        self.color_logits = np.ascontiguousarray(color_logits, dtype=np.float64)
        self.semantics = np.ascontiguousarray(semantics, dtype=np.float64)
        n = len(self.positions)
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n,), "color_logits": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ContractViolationError(f"{name} must have shape {shape}")
        if self.semantics.ndim != 2 or self.semantics.shape[0] != n:
            raise ContractViolationError("semantics must have shape (n, C)")
        self.class_count = int(class_count if class_count is not None
                               else self.semantics.shape[1])
        if self.semantics.shape[1] != self.class_count:
            raise ContractViolationError(
                f"semantic width {self.semantics.shape[1]} != "
                f"class_count {self.class_count}")
        self.class_palette = (np.asarray(palette, dtype=np.float64)
                              if palette is not None
                              else class_palette(self.class_count))

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls, class_count=150, palette=None):
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
            np.zeros((0,)), np.zeros((0, 3)), np.zeros((0, class_count)),
            class_count=class_count, palette=palette,
        )

    @classmethod
    def from_primitives(cls, primitives, class_count=None, palette=None):
        if not primitives:
            return cls.empty(class_count or 150, palette)
        return cls(
            np.stack([p.position for p in primitives]),
            np.stack([p.log_scale for p in primitives]),
            np.stack([p.rotation for p in primitives]),
            np.array([p.opacity_logit for p in primitives]),
            np.stack([p.color_logit for p in primitives]),
            np.stack([p.semantic for p in primitives]),
            class_count=class_count, palette=palette,
        )

    def primitive(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color_logit=self.color_logits[i].copy(),
            semantic=self.semantics[i].copy(),
        )

    def copy(self):
        return GaussianScene(
            self.positions.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.color_logits.copy(),
            self.semantics.copy(), self.class_count, self.class_palette.copy(),
        )

    def select(self, index):
        """Sub-scene keeping rows of a boolean mask or index array."""
        return GaussianScene(
            self.positions[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.color_logits[index],
            self.semantics[index], self.class_count, self.class_palette.copy(),
        )

    def raw_bytes(self):
        """Concatenated little-endian f32 of all parameters, declaration order."""
        n = len(self)
        rec = np.empty((n, 14 + self.class_count), dtype="<f4")
        rec[:, 0:3] = self.positions
        rec[:, 3:6] = self.log_scales
        rec[:, 6:10] = self.rotations
        rec[:, 10] = self.opacity_logits
        rec[:, 11:14] = self.color_logits
        rec[:, 14:] = self.semantics
        return rec.tobytes()

    def validate_finite(self):
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "color_logits", "semantics"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise InvalidParameterError(
                    f"non-finite {name} at primitive {idx}")


def activate(primitive: GaussianPrimitive) -> ActivatedGaussian:
    """Map raw parameters of one splat to physical quantities."""
    arrs = [primitive.position, primitive.log_scale, primitive.rotation,
            np.atleast_1d(primitive.opacity_logit), primitive.color_logit,
            primitive.semantic]
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise InvalidParameterError("non-finite parameter in primitive")
    q = np.asarray(primitive.rotation, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return ActivatedGaussian(
        position=np.asarray(primitive.position, dtype=np.float64).copy(),
        scales=np.exp(np.asarray(primitive.log_scale, dtype=np.float64)),
        rotation=q,
        opacity=float(sigmoid(primitive.opacity_logit)),
        color=sigmoid(primitive.color_logit),
        semantic=np.asarray(primitive.semantic, dtype=np.float64).copy(),
    )


@dataclass
class ActivatedArrays:
    """Vectorized activation of a whole scene (used by the rasterizer)."""

    positions: np.ndarray   # (N, 3)
    scales: np.ndarray      # (N, 3)
    rot_unit: np.ndarray    # (N, 4) unit quaternions
    rotmats: np.ndarray     # (N, 3, 3)
    opacities: np.ndarray   # (N,)
    colors: np.ndarray      # (N, 3)
    semantics: np.ndarray   # (N, C)


def activate_scene(scene: GaussianScene) -> ActivatedArrays:
    scene.validate_finite()
    norms = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        idx = int(np.argwhere(norms[:, 0] < 1e-12)[0][0])
        raise InvalidParameterError(f"zero-norm quaternion at primitive {idx}")
    rot_unit = scene.rotations / norms
    return ActivatedArrays(
        positions=scene.positions,
        scales=np.exp(scene.log_scales),
        rot_unit=rot_unit,
        rotmats=quat_to_rotmat(rot_unit),
        opacities=sigmoid(scene.opacity_logits),
        colors=sigmoid(scene.color_logits),
        semantics=scene.semantics,
    )


def dominant_class(primitive: GaussianPrimitive) -> int:
    """Argmax of the semantic logits; ties break to the lowest index."""
    return int(np.argmax(primitive.semantic))


def dominant_classes(scene: GaussianScene) -> np.ndarray:
    return np.argmax(scene.semantics, axis=1)


def edit_scene(scene: GaussianScene, mode: str, class_set,
               highlight_color=None) -> GaussianScene:
    """Semantic editing: extract / delete by dominant class, or highlight.

    Highlight blends the activated color 70% toward highlight_color for
    matching primitives and writes the result back through the inverse
    sigmoid; all other parameters stay untouched.
    """
    class_set = set(int(c) for c in class_set)
    for c in class_set:
        if not (0 <= c < scene.class_count):
            raise ConfigError(f"class {c} outside [0, {scene.class_count})")
    labels = dominant_classes(scene)
    match = np.isin(labels, sorted(class_set))
    if mode == "extract":
        out = scene.select(match)
        if len(out) == 0:
            warnings.warn("extract produced an empty scene", stacklevel=2)
        return out
    if mode == "delete":
        return scene.select(~match)
    if mode == "highlight":
        if highlight_color is None:
            raise ConfigError("highlight mode needs a highlight_color")
        target = np.asarray(highlight_color, dtype=np.float64)
        if target.shape != (3,):
            raise ConfigError("highlight_color must be an RGB triple")
        out = scene.copy()
        current = sigmoid(out.color_logits[match])
        blended = (1.0 - HIGHLIGHT_BLEND) * current + HIGHLIGHT_BLEND * target
        out.color_logits[match] = inverse_sigmoid(blended)
        return out
    raise ConfigError(f"unknown edit mode {mode!r}")


@dataclass
class TrainConfig:
    """Every loss weight, schedule boundary and learning rate in one record."""

    lambda_sem: float = 1.0
    lambda_guide: float = 1.0
    lambda_soft: float = 1.0
    lambda_hard: float = 0.1
    lambda_ssim: float = 0.2
    omega_d: float = 0.5
    omega_ng: float = 0.05
    omega_nb: float = 0.01
    alpha_sigmoid_scale: float = 100.0
    total_iters: int = 7000
    guidance_start_iter: int = 1500
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_semantic: float = 2.5e-3
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 300
    densify_start_iter: int = 500
    densify_end_iter: int = 5000
    densify_scale_fraction: float = 0.01   # of scene extent; clone/split split
    split_scale_factor: float = 1.6
    prune_opacity: float = 0.005
    prune_floor: int = 16
    edge_mask_dilation: int = 2
    checkpoint_interval: int = 1000
    eval_interval: int = 500
    seed: int = 0

    _WEIGHT_FIELDS = ("lambda_sem", "lambda_guide", "lambda_soft", "lambda_hard",
                      "lambda_ssim", "omega_d", "omega_ng", "omega_nb",
                      "alpha_sigmoid_scale")

    def validate(self):
        for name in self._WEIGHT_FIELDS:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.guidance_start_iter > self.total_iters:
            raise ConfigError("guidance_start_iter must be <= total_iters")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        for name in ("lr_position", "lr_position_final", "lr_rotation",
                     "lr_log_scale", "lr_opacity", "lr_color", "lr_semantic"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.prune_floor < 0 or self.densify_interval <= 0:
            raise ConfigError("bad density-control settings")
        return self

    def replace(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals).validate()

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}
