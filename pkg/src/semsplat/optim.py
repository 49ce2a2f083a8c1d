"""First-order training loop with simplified adaptive density control.

Per-iteration flow: render one view, compose the losses, run the rasterizer
backward, apply a bias-corrected adaptive-moment update per parameter group.
Every few hundred iterations primitives with large screen-space position
gradients are cloned or split and nearly transparent ones pruned. The whole
loop is deterministic given the seed and independent of kernel thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .losses import LossReport, PriorBundle, total_loss
from .rasterizer import SceneGradients, render, render_backward
from .scene import Camera, GaussianScene, TrainConfig
from .utils import sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits",
                "color_logits", "semantics")


@dataclass
class TrainView:
    camera: Camera
    image: np.ndarray
    priors: PriorBundle
    index: int = 0


class OptimizerState:
    """First/second moment accumulators tracking the primitive list."""

    def __init__(self, scene: GaussianScene, config: TrainConfig):
        self.config = config
        self.step = 0
        self.m = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}

    def learning_rate(self, group: str) -> float:
        cfg = self.config
        if group == "positions":
            total = max(1, cfg.total_iters)
            frac = min(1.0, self.step / total)
            return cfg.lr_position * (cfg.lr_position_final
                                      / cfg.lr_position) ** frac
        return {
            "log_scales": cfg.lr_log_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "color_logits": cfg.lr_color,
            "semantics": cfg.lr_semantic,
        }[group]

    def remap(self, src_index):
        """Rebuild moments after densify/prune; src -1 rows start at zero."""
        src_index = np.asarray(src_index, dtype=np.int64)
        old_rows = src_index >= 0
        for g in PARAM_GROUPS:
            for store in (self.m, self.v):
                old = store[g]
                new = np.zeros((len(src_index),) + old.shape[1:])
                new[old_rows] = old[src_index[old_rows]]
                store[g] = new

    def export(self) -> dict:
        out = {"step": np.array([self.step], dtype=np.float64)}
        for g in PARAM_GROUPS:
            out[f"m_{g}"] = self.m[g]
            out[f"v_{g}"] = self.v[g]
        return out


def adam_step(state: OptimizerState, grads: SceneGradients,
              scene: GaussianScene):
    """Bias-corrected adaptive-moment update; renormalizes moved quaternions."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for group in PARAM_GROUPS:
        g = getattr(grads, group)
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient in {group} at step {t}")
        m = state.m[group]
        v = state.v[group]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        lr = state.learning_rate(group)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        getattr(scene, group)[...] -= update
        if group == "rotations":
            moved = np.abs(g).sum(axis=1) > 0
            if moved.any():
                rows = scene.rotations[moved]
                scene.rotations[moved] = rows / np.linalg.norm(
                    rows, axis=1, keepdims=True)
    return scene, state


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient magnitudes between densify events."""

    grad_accum: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def update(self, grads: SceneGradients):
        self.grad_accum += np.linalg.norm(grads.mean2d, axis=1)
        self.counts += grads.visible.astype(np.int64)


def densify_and_prune(scene: GaussianScene, stats: DensifyStats,
                      state: OptimizerState, config: TrainConfig,
                      scene_extent: float, rng):
    """Clone small / split large high-gradient primitives, prune transparent.

    Returns (scene, src_index) where src_index maps new rows to old ones
    (-1 for fresh rows); the optimizer moments are remapped accordingly.
    """
    n = len(scene)
    mean_grad = stats.grad_accum / np.maximum(stats.counts, 1)
    hot = mean_grad > config.densify_grad_threshold
    max_scale = np.exp(scene.log_scales).max(axis=1)
    small = max_scale < config.densify_scale_fraction * scene_extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    parts = [np.flatnonzero(keep)]
    src = [np.flatnonzero(keep)]

    if len(clone_idx):
        parts.append(clone_idx)
        src.append(np.full(len(clone_idx), -1, dtype=np.int64))

    pieces = {g: [getattr(scene, g)[idx] for idx in parts]
              for g in PARAM_GROUPS}
    if len(split_idx):
        from .utils import quat_to_rotmat

        parents = scene.select(split_idx)
        scales = np.exp(parents.log_scales)
        R = quat_to_rotmat(parents.rotations / np.linalg.norm(
            parents.rotations, axis=1, keepdims=True))
        for _ in range(2):
            xi = rng.normal(size=(len(split_idx), 3))
            offs = np.einsum("nij,nj->ni", R, scales * xi)
            pieces["positions"].append(parents.positions + offs)
            pieces["log_scales"].append(
                parents.log_scales - np.log(config.split_scale_factor))
            pieces["rotations"].append(parents.rotations.copy())
            pieces["opacity_logits"].append(parents.opacity_logits.copy())
            pieces["color_logits"].append(parents.color_logits.copy())
            pieces["semantics"].append(parents.semantics.copy())
        src.append(np.full(2 * len(split_idx), -1, dtype=np.int64))

    merged = GaussianScene(
        np.concatenate(pieces["positions"]),
        np.concatenate(pieces["log_scales"]),
        np.concatenate(pieces["rotations"]),
        np.concatenate(pieces["opacity_logits"]),
        np.concatenate(pieces["color_logits"]),
        np.concatenate(pieces["semantics"]),
        class_count=scene.class_count, palette=scene.class_palette,
    )
    src_index = np.concatenate(src)

    opacity = sigmoid(merged.opacity_logits)
    keep2 = opacity >= config.prune_opacity
    if keep2.sum() < config.prune_floor:
        order = np.argsort(-opacity, kind="stable")
        keep2 = np.zeros(len(merged), dtype=bool)
        keep2[order[:min(config.prune_floor, len(merged))]] = True
    merged = merged.select(keep2)
    src_index = src_index[keep2]
    state.remap(src_index)
    return merged, src_index


@dataclass
class TrainLog:
    """Append-only per-iteration scalars plus periodic held-out metrics."""

    rows: list = field(default_factory=list)        # (iter, LossReport, n)
    eval_rows: list = field(default_factory=list)   # (iter, psnr, ssim)
    wall_clock: float = 0.0

    def add(self, iteration: int, report: LossReport, n_primitives: int):
        self.rows.append((iteration, report, n_primitives))

    def to_csv(self) -> str:
        lines = [LossReport.CSV_HEADER + ",n_primitives"]
        for it, rep, n in self.rows:
            lines.append(rep.csv_row(it) + f",{n}")
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = ["iter,psnr,ssim"]
        for it, p, s in self.eval_rows:
            lines.append(f"{it},{p!r},{s!r}")
        return "\n".join(lines) + "\n"


def train(scene: GaussianScene, views, config: TrainConfig, heldout=None,
          checkpoint_cb=None, progress_cb=None):
    """Optimize the scene against the given views.

    `views` is a list of TrainView; `heldout` (optional) is evaluated every
    config.eval_interval iterations. `checkpoint_cb(iteration, scene, state)`
    fires on the checkpoint schedule and after the final iteration.
    Deterministic for a fixed seed, including across kernel thread counts.
    """
    config.validate()
    if len(views) < 1:
        raise NumericalError("train needs at least one view")
    scene = scene.copy()
    state = OptimizerState(scene, config)
    log = TrainLog()
    rng = np.random.default_rng(config.seed)
    stats = DensifyStats.zeros(len(scene))
    extent = _scene_extent(scene)
    n_views = len(views)
    order = None
    started = time.perf_counter()

    for it in range(config.total_iters):
        if it % n_views == 0:
            order = rng.permutation(n_views)
        view = views[order[it % n_views]]
        out = render(scene, view.camera)
        rep = total_loss(out, view.image, view.priors, config, it)
        if not np.isfinite(rep.total):
            if checkpoint_cb is not None:
                checkpoint_cb(it, scene, state)
            raise NumericalError(f"non-finite loss at iteration {it}")
        grads = render_backward(scene, view.camera, rep.grads,
                                out.blend_cache)
        stats.update(grads)
        adam_step(state, grads, scene)

        if (config.densify_start_iter <= it <= config.densify_end_iter
                and it > 0 and it % config.densify_interval == 0):
            scene, _ = densify_and_prune(scene, stats, state, config,
                                         extent, rng)
            stats = DensifyStats.zeros(len(scene))

        log.add(it, rep, len(scene))
        if heldout and (it + 1) % config.eval_interval == 0:
            log.eval_rows.append((it,) + evaluate_views(scene, heldout))
        if checkpoint_cb is not None and config.checkpoint_interval > 0 \
                and (it + 1) % config.checkpoint_interval == 0:
            checkpoint_cb(it + 1, scene, state)
        if progress_cb is not None:
            progress_cb(it, rep, len(scene))

    log.wall_clock = time.perf_counter() - started
    if checkpoint_cb is not None:
        checkpoint_cb(config.total_iters, scene, state)
    return scene, log


def evaluate_views(scene: GaussianScene, views):
    """Mean PSNR / SSIM of renders against the views' ground-truth images."""
    from .losses import ssim as ssim_fn
    from .mesh import psnr as psnr_fn

    ps, ss = [], []
    for view in views:
        out = render(scene, view.camera)
        ps.append(psnr_fn(view.image, out.rgb))
        ss.append(ssim_fn(out.rgb, view.image)[0])
    return float(np.mean(ps)), float(np.mean(ss))


def _scene_extent(scene: GaussianScene) -> float:
    if len(scene) == 0:
        return 1.0
    span = scene.positions.max(axis=0) - scene.positions.min(axis=0)
    return float(np.linalg.norm(span))
