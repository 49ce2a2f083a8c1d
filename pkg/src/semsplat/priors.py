"""Synthetic supervision oracle and real-prior ingestion.

Generates box-in-room scenes with exact ray-cast ground truth, then derives
the perturbed pseudo-priors the optimizer trains against: softened teacher
logits, affine-skewed monocular-style depth with corrupted boundary bands,
and noisy init point clouds. The ray caster is deliberately independent of
the splatting rasterizer so oracle buffers cannot inherit its bugs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from .errors import ConfigError, DataError, NumericalError
from .losses import PriorBundle, semantic_edge_mask
from .scene import Camera
from .utils import class_palette, normalize_rows

RAY_EPS = 1e-9
AMBIENT = 0.2
LIGHT_DIR = np.array([0.35, -0.45, 0.82])
TEACHER_PEAK = 8.0
TEACHER_SOFTNESS = 1


@dataclass
class SyntheticScene:
    """Triangle soup with per-triangle class and albedo; axis-aligned shell."""

    triangles: np.ndarray   # (T, 3, 3) vertices, world units
    classes: np.ndarray     # (T,) int
    albedo: np.ndarray      # (T, 3) in [0, 1]
    shell_lo: np.ndarray    # (3,)
    shell_hi: np.ndarray    # (3,)
    boxes: np.ndarray       # (K, 2, 3) lo/hi corners of the interior boxes
    class_count: int

    @property
    def extent(self) -> float:
        return float(np.linalg.norm(self.shell_hi - self.shell_lo))

    def normals(self):
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return normalize_rows(n)


@dataclass
class ViewSupervision:
    """Exact per-view buffers plus the derived training priors."""

    camera: Camera
    image: np.ndarray        # (H, W, 3) shaded colors in [0, 1]
    depth: np.ndarray        # (H, W) camera-space z at the hit
    labels: np.ndarray       # (H, W) triangle classes
    normals: np.ndarray      # (H, W, 3) camera frame, facing the camera
    priors: PriorBundle | None = None


def _box_triangles(lo, hi, inward=False):
    """Twelve triangles of an axis-aligned box, consistently oriented."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    # outward-facing quads (viewed from outside, counter-clockwise)
    quads = [
        (0, 3, 2, 1),   # bottom, -z
        (4, 5, 6, 7),   # top, +z
        (0, 1, 5, 4),   # -y
        (2, 3, 7, 6),   # +y
        (0, 4, 7, 3),   # -x
        (1, 2, 6, 5),   # +x
    ]
    tris = []
    for a, b, c, d in quads:
        if inward:
            a, b, c, d = a, d, c, b
        tris.append(corners[[a, b, c]])
        tris.append(corners[[a, c, d]])
    return np.stack(tris)


def generate_room(seed, box_count=3, class_count=8) -> SyntheticScene:
    """Axis-aligned room shell plus `box_count` boxes resting on the floor.

    Classes: 0 walls, 1 floor, 2 ceiling, 3+i for box i. Deterministic in
    the seed.
    """
    if box_count < 0:
        raise ConfigError("box_count must be >= 0")
    if class_count < 3 + box_count:
        raise ConfigError(
            f"class_count {class_count} too small for {box_count} boxes")
    rng = np.random.default_rng(seed)
    size = np.array([rng.uniform(3.6, 4.4), rng.uniform(3.0, 3.6),
                     rng.uniform(2.3, 2.7)])
    lo = np.zeros(3)
    hi = size
    shell = _box_triangles(lo, hi, inward=True)
    # face order above: bottom, top, -y, +y, -x, +x (2 triangles each)
    shell_classes = np.array([1, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0])

    tris = [shell]
    classes = [shell_classes]
    boxes = []
    for i in range(box_count):
        ext = rng.uniform(0.35, 0.65, size=3)
        margin = 0.35 * size[:2]
        cx = rng.uniform(margin[0], size[0] - margin[0])
        cy = rng.uniform(margin[1], size[1] - margin[1])
        blo = np.array([cx - ext[0] / 2, cy - ext[1] / 2, 0.0])
        bhi = np.array([cx + ext[0] / 2, cy + ext[1] / 2, ext[2]])
        tris.append(_box_triangles(blo, bhi, inward=False))
        classes.append(np.full(12, 3 + i))
        boxes.append(np.stack([blo, bhi]))

    triangles = np.concatenate(tris)
    class_arr = np.concatenate(classes)
    palette = class_palette(class_count)
    return SyntheticScene(
        triangles=triangles,
        classes=class_arr.astype(np.int32),
        albedo=palette[class_arr],
        shell_lo=lo, shell_hi=hi,
        boxes=(np.stack(boxes) if boxes
               else np.zeros((0, 2, 3))),
        class_count=class_count,
    )


def raycast_view(scene: SyntheticScene, camera: Camera) -> ViewSupervision:
    """Nearest-hit ray casting of every pixel; exact depth/label/normal/color."""
    h, w = camera.height, camera.width
    origin = -camera.rotation.T @ camera.translation
    u = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(h) + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.empty((h, w, 3))
    dirs_cam[..., 0] = u[None, :]
    dirs_cam[..., 1] = v[:, None]
    dirs_cam[..., 2] = 1.0
    d_world = dirs_cam.reshape(-1, 3) @ camera.rotation  # R^T per row
    n_pix = h * w

    best_t = np.full(n_pix, np.inf)
    best_tri = np.full(n_pix, -1, dtype=np.int64)
    v0 = scene.triangles[:, 0]
    e1 = scene.triangles[:, 1] - v0
    e2 = scene.triangles[:, 2] - v0
    for ti in range(len(scene.triangles)):
        pvec = np.cross(d_world, e2[ti])
        det = pvec @ e1[ti]
        ok = np.abs(det) > RAY_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0[ti]
        bu = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1[ti])
        bv = (d_world @ qvec) * inv
        t = (e2[ti] @ qvec) * inv
        hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1.0) & (t > RAY_EPS)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        best_tri[closer] = ti

    if np.any(best_tri < 0):
        miss = int(np.flatnonzero(best_tri < 0)[0])
        raise NumericalError(
            f"ray escaped the watertight shell at pixel {miss % w},{miss // w}")

    tri_n = scene.normals()
    hit_n = tri_n[best_tri]
    shade = hit_n @ LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    intensity = np.maximum(shade, 0.0) + AMBIENT
    image = np.clip(scene.albedo[best_tri] * intensity[:, None], 0.0, 1.0)

    n_cam = hit_n @ camera.rotation.T
    facing = np.sum(n_cam * dirs_cam.reshape(-1, 3), axis=1)
    n_cam = np.where(facing[:, None] > 0, -n_cam, n_cam)

    return ViewSupervision(
        camera=camera,
        image=image.reshape(h, w, 3),
        depth=best_t.reshape(h, w),
        labels=scene.classes[best_tri].reshape(h, w).astype(np.int32),
        normals=n_cam.reshape(h, w, 3),
    )


def make_teacher_logits(exact_labels, class_count, peak=TEACHER_PEAK,
                        softness=TEACHER_SOFTNESS):
    """One-hot logits at `peak`, box-blurred to imitate soft teacher edges."""
    if peak <= 0:
        raise ConfigError("teacher peak must be positive")
    labels = np.asarray(exact_labels)
    logits = (labels[..., None] == np.arange(class_count)) * float(peak)
    if softness > 0:
        size = 2 * int(softness) + 1
        logits = ndimage.uniform_filter(
            logits, size=(size, size, 1), mode="reflect")
    return logits


def perturb_depth(exact_depth, seed, labels=None, base_noise=0.01,
                  band_noise_factor=10.0, band_halfwidth=3):
    """Monocular-style depth prior: affine remap plus noise.

    D_p = a * exact + b + n with a in [0.5, 2], b in [-0.5, 0.5]; the noise is
    sigma = base_noise * a * median(exact), amplified by band_noise_factor in
    a +-band_halfwidth px band around label boundaries (the failure mode the
    edge mask is built to reject). Labels None disables the band.
    """
    rng = np.random.default_rng(seed)
    d = np.asarray(exact_depth, dtype=np.float64)
    a = rng.uniform(0.5, 2.0)
    b = rng.uniform(-0.5, 0.5)
    sigma = base_noise * a * float(np.median(d))
    noise = rng.normal(size=d.shape) * sigma
    band_noise = rng.normal(size=d.shape) * (band_noise_factor * sigma)
    out = a * d + b
    if labels is not None and band_halfwidth >= 0:
        band = semantic_edge_mask(labels, dilation=band_halfwidth)
        out = out + np.where(band, band_noise, noise)
    else:
        out = out + noise
    return out


def init_point_cloud(scene: SyntheticScene, n, noise_sigma=None, seed=0):
    """Area-weighted surface samples with isotropic jitter.

    Returns (points (n,3), colors (n,3), classes (n,)). Deterministic in seed.
    """
    if n < 16:
        raise ConfigError("need at least 16 points")
    rng = np.random.default_rng(seed)
    if noise_sigma is None:
        noise_sigma = 0.01 * scene.extent
    t = scene.triangles
    areas = 0.5 * np.linalg.norm(
        np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
    tri = rng.choice(len(t), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = t[tri, 0], t[tri, 1], t[tri, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b \
        + (r1 * r2)[:, None] * c
    if noise_sigma > 0:
        pts = pts + rng.normal(size=pts.shape) * noise_sigma
    return pts, scene.albedo[tri].copy(), scene.classes[tri].copy()


def attach_priors(view: ViewSupervision, class_count, seed,
                  peak=TEACHER_PEAK, softness=TEACHER_SOFTNESS,
                  mask_dilation=2, base_noise=0.01,
                  band_noise_factor=10.0, band_halfwidth=3):
    """Derive the PriorBundle of a supervised view from its exact buffers."""
    logits = make_teacher_logits(view.labels, class_count, peak, softness)
    d_p = perturb_depth(view.depth, seed, labels=view.labels,
                        base_noise=base_noise,
                        band_noise_factor=band_noise_factor,
                        band_halfwidth=band_halfwidth)
    view.priors = PriorBundle.from_teacher(logits, d_p, dilation=mask_dilation)
    return view


def ring_cameras(scene: SyntheticScene, n_views, width, height, fx=None):
    """Deterministic ring of inward-looking cameras inside the shell."""
    size = scene.shell_hi - scene.shell_lo
    center = scene.shell_lo + 0.5 * size
    if fx is None:
        fx = 0.47 * width
    radius = 0.36 * min(size[0], size[1])
    cams = []
    for k in range(n_views):
        yaw = 2.0 * np.pi * k / n_views
        eye = center + np.array([radius * np.cos(yaw), radius * np.sin(yaw),
                                 (0.12 + 0.08 * (k % 3)) * size[2]])
        for blo, bhi in scene.boxes:
            inside = np.all(eye > blo - 0.05) and np.all(eye < bhi + 0.05)
            if inside:
                eye[2] = bhi[2] + 0.15
        eye[2] = min(eye[2], scene.shell_hi[2] - 0.2)
        tz = (0.12, 0.5, 0.85)[k % 3] * size[2] + scene.shell_lo[2]
        target = center + np.array([-0.8 * radius * np.cos(yaw),
                                    -0.8 * radius * np.sin(yaw), 0.0])
        target[2] = tz
        cams.append(look_at(eye, target, width=width, height=height,
                            fx=fx, fy=fx))
    return cams


def look_at(eye, target, width, height, fx, fy=None, up=(0.0, 0.0, 1.0)):
    """Pinhole camera at `eye` looking toward `target` (x right, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # exact orthonormalization guard for the 1e-9 camera invariant
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = -R @ eye
    return Camera(fx=fx, fy=fy if fy is not None else fx,
                  cx=width / 2.0, cy=height / 2.0,
                  rotation=R, translation=t, width=width, height=height)


def load_prior_bundle(directory, mask_dilation=2):
    """Load externally produced per-view priors.

    Expects view_%03d.{png,pfm,semf,cam} files; masks and boundary pairs are
    derived on load. Returns a list of (camera, image, PriorBundle, index).
    """
    directory = Path(directory)
    indices = sorted(
        int(p.stem.split("_")[1]) for p in directory.glob("view_*.png")
        if p.stem.split("_")[1].isdigit())
    if not indices:
        raise DataError(f"{directory}: no view_*.png files found")
    out = []
    for idx in indices:
        paths = formats.resolve_view_paths(directory, idx)
        for key in ("image", "depth", "logits", "camera"):
            if not paths[key].exists():
                raise DataError(f"view {idx}: missing {key} file "
                                f"{paths[key].name}")
        image = formats.read_png(paths["image"])
        h, w = image.shape[:2]
        depth = formats.read_pfm(paths["depth"])
        if depth.shape != (h, w):
            raise DataError(f"view {idx}: depth shape {depth.shape} != "
                            f"image {h}x{w}")
        logits = formats.read_semf(paths["logits"])
        if logits.shape[:2] != (h, w):
            raise DataError(f"view {idx}: logits shape {logits.shape[:2]} != "
                            f"image {h}x{w}")
        camera = formats.read_camera(paths["camera"], width=w, height=h)
        bundle = PriorBundle.from_teacher(logits, depth,
                                          dilation=mask_dilation)
        out.append((camera, image, bundle, idx))
    return out
