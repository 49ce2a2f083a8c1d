"""On-disk experiment datasets: synthesis, loading, downscaling, scene init.

A dataset directory holds per-view files (view_%03d.png/.pfm/.semf/.cam plus
view_%03d_gtdepth.pfm with the oracle depth), an init point cloud points.ply,
the oracle mesh gt_mesh.ply and a split.txt naming train/held-out views.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats, priors
from .errors import ConfigError, DataError
from .losses import PriorBundle
from .mesh import TriangleMesh
from .optim import TrainView
from .scene import Camera, GaussianScene
from .utils import inverse_sigmoid


@dataclass
class Dataset:
    train_views: list          # [TrainView]
    heldout_views: list        # [TrainView] (priors may be None)
    class_count: int
    points: np.ndarray | None
    point_colors: np.ndarray | None
    point_classes: np.ndarray | None
    gt_mesh: TriangleMesh | None
    gt_depths: dict            # view index -> oracle depth (downscaled)
    directory: Path


def write_synth_dataset(out_dir, seed=0, n_views=12, train_views=8,
                        width=640, height=480, box_count=3, class_count=8,
                        n_points=4000, noise_sigma=None, teacher_peak=8.0,
                        teacher_softness=1, base_noise=0.01,
                        band_noise_factor=10.0, band_halfwidth=3):
    """Generate and write a full synthetic dataset; deterministic in seed."""
    if train_views >= n_views:
        raise ConfigError("need at least one held-out view")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    room = priors.generate_room(seed, box_count=box_count,
                                class_count=class_count)
    cams = priors.ring_cameras(room, n_views, width=width, height=height)
    for idx, cam in enumerate(cams):
        view = priors.raycast_view(room, cam)
        priors.attach_priors(view, class_count, seed=seed * 1000 + idx,
                             peak=teacher_peak, softness=teacher_softness,
                             base_noise=base_noise,
                             band_noise_factor=band_noise_factor,
                             band_halfwidth=band_halfwidth)
        paths = formats.resolve_view_paths(out, idx)
        formats.write_png(paths["image"], view.image)
        formats.write_pfm(paths["depth"], view.priors.prior_depth)
        formats.write_semf(paths["logits"], view.priors.teacher_logits)
        formats.write_camera(paths["camera"], cam)
        formats.write_pfm(paths["gt_depth"], view.depth)

    pts, cols, classes = priors.init_point_cloud(
        room, n_points, noise_sigma=noise_sigma, seed=seed + 17)
    formats.write_ply_points(out / "points.ply", pts, cols, classes)

    verts = room.triangles.reshape(-1, 3)
    faces = np.arange(len(verts)).reshape(-1, 3)
    formats.write_ply_mesh(out / "gt_mesh.ply", verts, faces)

    train_ids = list(range(train_views))
    held_ids = list(range(train_views, n_views))
    with open(out / "split.txt", "w") as f:
        f.write("train " + " ".join(f"{i:03d}" for i in train_ids) + "\n")
        f.write("heldout " + " ".join(f"{i:03d}" for i in held_ids) + "\n")
    with open(out / "meta.txt", "w") as f:
        f.write(f"class_count {class_count}\n")
        f.write(f"box_count {box_count}\n")
        f.write(f"seed {seed}\n")
    return out


def _avg_pool(arr, factor):
    h, w = arr.shape[:2]
    if h % factor or w % factor:
        raise DataError(f"image size {w}x{h} not divisible by {factor}")
    shape = (h // factor, factor, w // factor, factor) + arr.shape[2:]
    return arr.reshape(shape).mean(axis=(1, 3))


def _read_split(path):
    split = {"train": [], "heldout": []}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] not in split:
            raise DataError(f"bad split line: {line!r}")
        split[parts[0]] = [int(v) for v in parts[1:]]
    return split


def load_dataset(directory, downscale=1, mask_dilation=2) -> Dataset:
    """Load a dataset directory, optionally average-pooled by `downscale`."""
    directory = Path(directory)
    if not (directory / "split.txt").exists():
        raise DataError(f"{directory}: missing split.txt")
    split = _read_split(directory / "split.txt")
    class_count = None
    meta = directory / "meta.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            parts = line.split()
            if parts and parts[0] == "class_count":
                class_count = int(parts[1])

    def load_view(idx, with_priors):
        paths = formats.resolve_view_paths(directory, idx)
        for key in ("image", "camera"):
            if not paths[key].exists():
                raise DataError(f"view {idx}: missing {key} file")
        image = formats.read_png(paths["image"]).astype(np.float64)
        h, w = image.shape[:2]
        camera = formats.read_camera(paths["camera"], width=w, height=h)
        gt_depth = None
        if paths["gt_depth"].exists():
            gt_depth = formats.read_pfm(paths["gt_depth"]).astype(np.float64)
        if downscale > 1:
            image = _avg_pool(image, downscale)
            camera = camera.scaled(downscale)
            if gt_depth is not None:
                gt_depth = _avg_pool(gt_depth, downscale)
        bundle = None
        if with_priors:
            for key in ("depth", "logits"):
                if not paths[key].exists():
                    raise DataError(f"view {idx}: missing {key} file")
            depth = formats.read_pfm(paths["depth"]).astype(np.float64)
            logits = formats.read_semf(paths["logits"]).astype(np.float64)
            if depth.shape != (h, w) or logits.shape[:2] != (h, w):
                raise DataError(f"view {idx}: prior shapes do not match image")
            if downscale > 1:
                depth = _avg_pool(depth, downscale)
                logits = _avg_pool(logits, downscale)
            bundle = PriorBundle.from_teacher(logits, depth,
                                              dilation=mask_dilation)
        return TrainView(camera=camera, image=image, priors=bundle,
                         index=idx), gt_depth

    train_views = []
    gt_depths = {}
    for idx in split["train"]:
        view, gtd = load_view(idx, with_priors=True)
        train_views.append(view)
        if gtd is not None:
            gt_depths[idx] = gtd
    heldout_views = []
    for idx in split["heldout"]:
        view, gtd = load_view(idx, with_priors=False)
        heldout_views.append(view)
        if gtd is not None:
            gt_depths[idx] = gtd

    if class_count is None and train_views:
        class_count = train_views[0].priors.teacher_logits.shape[2]

    points = colors = classes = None
    if (directory / "points.ply").exists():
        ply = formats.read_ply(directory / "points.ply")
        points, colors, classes = ply["points"], ply["colors"], ply["classes"]

    gt_mesh = None
    if (directory / "gt_mesh.ply").exists():
        ply = formats.read_ply(directory / "gt_mesh.ply")
        if ply["faces"] is None:
            raise DataError("gt_mesh.ply has no faces")
        gt_mesh = TriangleMesh(vertices=ply["points"], faces=ply["faces"])

    return Dataset(train_views=train_views, heldout_views=heldout_views,
                   class_count=class_count, points=points,
                   point_colors=colors, point_classes=classes,
                   gt_mesh=gt_mesh, gt_depths=gt_depths, directory=directory)


def knn_mean_distance(points, k=3):
    """Mean distance to the k nearest neighbors (self excluded), per point."""
    n = len(points)
    k = min(k, n - 1)
    out = np.empty(n)
    block = max(1, int(2e7 // max(n, 1)))
    for i0 in range(0, n, block):
        d2 = np.sum((points[i0:i0 + block, None, :]
                     - points[None, :, :]) ** 2, axis=2)
        part = np.partition(d2, kth=k, axis=1)[:, 1:k + 1]
        out[i0:i0 + block] = np.sqrt(part).mean(axis=1)
    return out


def init_scene_from_points(points, colors, classes, class_count,
                           seed=0, init_opacity=0.1,
                           semantic_peak=2.0) -> GaussianScene:
    """One isotropic primitive per point, scaled by mean 3-NN distance.

    Semantic logits start as one-hot * semantic_peak when per-point classes
    are available (synthetic clouds) and as zeros otherwise (real clouds
    carry no semantics). Rotations are random unit quaternions so the normal
    field starts diverse.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 1:
        raise DataError("point cloud is empty")
    rng = np.random.default_rng(seed)
    mean_nn = knn_mean_distance(points, k=3)
    log_scales = np.log(np.maximum(mean_nn, 1e-4))[:, None].repeat(3, axis=1)
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = np.full(n, inverse_sigmoid(init_opacity))
    if colors is None:
        colors = np.full((n, 3), 0.5)
    color_logits = inverse_sigmoid(np.clip(colors, 0.01, 0.99))
    semantics = np.zeros((n, class_count))
    if classes is not None:
        valid = (classes >= 0) & (classes < class_count)
        semantics[np.flatnonzero(valid), classes[valid]] = semantic_peak
    return GaussianScene(points, log_scales, rot, opacity, color_logits,
                         semantics, class_count=class_count)
