"""Differentiable projection and front-to-back alpha compositing.

The forward pass projects activated gaussians through a pinhole camera with a
first-order (EWA) covariance mapping, sorts them by camera-space depth and
composites RGB, depth, normal and semantic-logit buffers per 16x16 tile. The
backward pass is hand-derived reverse-mode through the entire chain back to
the raw primitive parameters; sorting order and footprints are treated as
constants, as is standard for splatting.

Depth is the alpha-blended camera-space z of primitive centers, normalized by
the accumulated alpha, so an isolated opaque splat renders its own depth at
every covered pixel. RGB, normals and semantic logits are blended without
normalization; the background contributes zero.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend
from .errors import ContractViolationError, RenderError
from .scene import ActivatedGaussian, Camera, GaussianScene, activate_scene
from .utils import quat_normalize_vjp, quat_rotmat_vjp, quat_to_rotmat

TILE_SIZE = 16
NEAR_PLANE = 0.01
COV2D_REG = 0.3
FOOTPRINT_SIGMA = 3.0
ALPHA_SKIP_SCALE = 255.0


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray       # (2,) pixels
    cov2d: np.ndarray        # (2, 2) SPD, pixels^2 (regularized)
    view_depth: float        # camera-space z, world units
    normal_cam: np.ndarray   # unit, camera frame, z <= 0
    footprint: tuple         # (x0, x1, y0, y1), half-open pixel box


class BlendCache:
    """Ordered per-pixel contribution records kept for the backward pass.

    Pixel p owns rows [starts[p], starts[p] + counts[p]) of the id/alpha/
    transmittance arrays, in front-to-back traversal order; rows outside
    those ranges are allocation slack. `ids` holds original primitive
    indices and is materialized lazily from the kernel-local indices.
    """

    def __init__(self, starts, counts, local_ids, id_lut, alphas, trans,
                 shape, n_primitives, class_count, checksum,
                 gauss_counts=None):
        self.starts = starts
        self.counts = counts
        self.alphas = alphas
        self.trans = trans
        self.shape = shape
        self.n_primitives = n_primitives
        self.class_count = class_count
        self.checksum = checksum
        self._local_ids = local_ids
        self._id_lut = id_lut        # local sorted index -> original id
        self._gauss_counts = gauss_counts
        self._ids = None

    @property
    def ids(self):
        if self._ids is None:
            if len(self._local_ids) == 0:
                self._ids = self._local_ids
            else:
                # gap rows hold -1, which indexes the -1 sentinel at the end
                self._ids = self._id_lut[self._local_ids]
        return self._ids

    def records(self, pixel_index):
        """(ids, alphas, transmittances) of one flat pixel index."""
        a = int(self.starts[pixel_index])
        b = a + int(self.counts[pixel_index])
        return self.ids[a:b], self.alphas[a:b], self.trans[a:b]

    def total_records(self) -> int:
        return int(self.counts.sum())


@dataclass
class RenderOutput:
    rgb: np.ndarray              # (H, W, 3)
    depth: np.ndarray            # (H, W)
    normal: np.ndarray           # (H, W, 3), camera frame, norm <= 1
    semantic_logits: np.ndarray  # (H, W, C)
    accum_alpha: np.ndarray      # (H, W) in [0, 1]
    blend_cache: BlendCache
    camera: Optional[Camera] = None


@dataclass
class BufferGrads:
    """Gradients of a scalar loss with respect to the rendered buffers."""

    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    accum_alpha: Optional[np.ndarray] = None


@dataclass
class SceneGradients:
    """Per-primitive gradients in the raw parameter domains."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    semantics: np.ndarray
    mean2d: np.ndarray           # screen-space position gradient, for density control
    visible: np.ndarray          # bool, contributed to at least one pixel


def covariance3d(act: ActivatedGaussian) -> np.ndarray:
    """World covariance R diag(scales)^2 R^T of one activated gaussian."""
    R = quat_to_rotmat(act.rotation)
    return R @ np.diag(act.scales ** 2) @ R.T


def _scene_fingerprint(scene: GaussianScene, camera: Camera) -> int:
    h = zlib.crc32(scene.raw_bytes())
    cam = np.concatenate([
        [camera.fx, camera.fy, camera.cx, camera.cy],
        camera.rotation.ravel(), camera.translation,
        [camera.width, camera.height],
    ]).astype(np.float64)
    return zlib.crc32(cam.tobytes(), h)


class _Projection:
    """Vectorized projection intermediates for the surviving gaussians."""

    __slots__ = ("surv", "order", "mean2d", "icov", "cov2d", "covc", "jac",
                 "xcam", "depth", "normal", "sign", "axis", "bbox", "rotmats",
                 "scales", "opac", "color", "sem", "rot_unit", "qskip")


def _project_scene(act, camera: Camera):
    N = len(act.positions)
    W = camera.rotation
    xcam = act.positions @ W.T + camera.translation
    z = xcam[:, 2]
    alive = z > NEAR_PLANE

    pr = _Projection()
    fx, fy = camera.fx, camera.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        mx = fx * xcam[:, 0] / z + camera.cx
        my = fy * xcam[:, 1] / z + camera.cy

    # world covariance and its camera-frame counterpart
    s2 = act.scales ** 2
    R = act.rotmats
    cov3d = np.einsum("nij,nj,nkj->nik", R, s2, R)
    covc = np.einsum("ij,njk,lk->nil", W, cov3d, W)

    jac = np.zeros((N, 2, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        jac[:, 0, 0] = fx / z
        jac[:, 0, 2] = -fx * xcam[:, 0] / (z * z)
        jac[:, 1, 1] = fy / z
        jac[:, 1, 2] = -fy * xcam[:, 1] / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, covc, jac)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    # alpha can only pass the 1/255 skip test while q <= 2 ln(255 * opacity),
    # so the 3-sigma footprint is intersected with that exact iso-contour;
    # gaussians too transparent to ever contribute are culled outright.
    opac = act.opacities
    alive &= opac * ALPHA_SKIP_SCALE > 1.0
    qskip = 2.0 * np.log(np.maximum(opac * ALPHA_SKIP_SCALE, 1.0))
    sx = np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
    sy = np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
    rq = np.sqrt(qskip)
    rx = np.minimum(FOOTPRINT_SIGMA * sx, rq * sx + 0.5)
    ry = np.minimum(FOOTPRINT_SIGMA * sy, rq * sy + 0.5)
    x0 = np.maximum(np.floor(mx - rx), 0.0)
    x1 = np.minimum(np.ceil(mx + rx), camera.width)
    y0 = np.maximum(np.floor(my - ry), 0.0)
    y1 = np.minimum(np.ceil(my + ry), camera.height)
    alive &= np.isfinite(mx) & np.isfinite(my)
    alive &= (x1 > x0) & (y1 > y0)

    surv = np.flatnonzero(alive)
    pr.surv = surv
    pr.xcam = xcam[surv]
    pr.depth = z[surv]
    pr.mean2d = np.stack([mx[surv], my[surv]], axis=1)
    pr.covc = covc[surv]
    pr.jac = jac[surv]
    pr.cov2d = cov2d[surv]
    det = (pr.cov2d[:, 0, 0] * pr.cov2d[:, 1, 1]
           - pr.cov2d[:, 0, 1] * pr.cov2d[:, 1, 0])
    icov = np.empty((len(surv), 3))
    icov[:, 0] = pr.cov2d[:, 1, 1] / det
    icov[:, 1] = -pr.cov2d[:, 0, 1] / det
    icov[:, 2] = pr.cov2d[:, 0, 0] / det
    pr.icov = icov
    pr.bbox = np.stack([x0[surv], x1[surv], y0[surv], y1[surv]],
                       axis=1).astype(np.int32)
    pr.qskip = qskip[surv]

    # splat normal: rotated shortest-scale axis, flipped to face the camera
    axis = np.argmin(act.scales[surv], axis=1)
    n_world = R[surv][np.arange(len(surv)), :, axis]
    n_cam = n_world @ W.T
    sign = np.where(n_cam[:, 2] > 0.0, -1.0, 1.0)
    pr.normal = n_cam * sign[:, None]
    pr.sign = sign
    pr.axis = axis
    pr.rotmats = R[surv]
    pr.scales = act.scales[surv]
    pr.rot_unit = act.rot_unit[surv]
    pr.opac = opac[surv]
    pr.color = act.colors[surv]
    pr.sem = act.semantics[surv]

    pr.order = np.argsort(pr.depth, kind="stable")
    return pr


def project(act: ActivatedGaussian, camera: Camera):
    """Project one activated gaussian; returns None when culled."""
    acts = _single_activated_arrays(act)
    pr = _project_scene(acts, camera)
    if len(pr.surv) == 0:
        return None
    return ProjectedGaussian(
        mean2d=pr.mean2d[0],
        cov2d=pr.cov2d[0],
        view_depth=float(pr.depth[0]),
        normal_cam=pr.normal[0],
        footprint=tuple(int(v) for v in pr.bbox[0]),
    )


def _single_activated_arrays(act: ActivatedGaussian):
    from .scene import ActivatedArrays

    q = act.rotation[None, :]
    return ActivatedArrays(
        positions=act.position[None, :],
        scales=act.scales[None, :],
        rot_unit=q,
        rotmats=quat_to_rotmat(q),
        opacities=np.array([act.opacity]),
        colors=act.color[None, :],
        semantics=act.semantic[None, :],
    )


def _bin_tiles(bbox_sorted, H, W):
    """Assign depth-sorted gaussians to the 16x16 tiles their boxes touch."""
    ntx = (W + TILE_SIZE - 1) // TILE_SIZE
    nty = (H + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = ntx * nty
    M = len(bbox_sorted)
    if M == 0:
        return (np.zeros(0, dtype=np.int32),
                np.zeros(n_tiles + 1, dtype=np.int64), ntx, nty)
    tx0 = (bbox_sorted[:, 0] // TILE_SIZE).astype(np.int64)
    tx1 = ((bbox_sorted[:, 1] - 1) // TILE_SIZE).astype(np.int64)
    ty0 = (bbox_sorted[:, 2] // TILE_SIZE).astype(np.int64)
    ty1 = ((bbox_sorted[:, 3] - 1) // TILE_SIZE).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    pair_gauss = np.repeat(np.arange(M, dtype=np.int32), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_rep = np.repeat(nx, counts)
    dy, dx = np.divmod(rank, nx_rep)
    pair_tile = (np.repeat(ty0, counts) + dy) * ntx + np.repeat(tx0, counts) + dx
    order = np.lexsort((pair_gauss, pair_tile))
    pair_tile = pair_tile[order]
    pair_gauss = pair_gauss[order]
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair_tile, minlength=n_tiles), out=tile_offsets[1:])
    return pair_gauss, tile_offsets, ntx, nty


def _empty_output(H, W, C, n_primitives, checksum, camera):
    cache = BlendCache(
        starts=np.zeros(H * W, dtype=np.int64),
        counts=np.zeros(H * W, dtype=np.int64),
        local_ids=np.zeros(0, dtype=np.int32),
        id_lut=np.full(1, -1, dtype=np.int32),
        alphas=np.zeros(0), trans=np.zeros(0),
        shape=(H, W), n_primitives=n_primitives, class_count=C,
        checksum=checksum,
    )
    return RenderOutput(
        rgb=np.zeros((H, W, 3)), depth=np.zeros((H, W)),
        normal=np.zeros((H, W, 3)), semantic_logits=np.zeros((H, W, C)),
        accum_alpha=np.zeros((H, W)), blend_cache=cache, camera=camera,
    )


def _record_capacity(bbox_sorted, H, W):
    """Per-pixel record capacity: how many sorted boxes cover each pixel.

    Corner difference trick: +-1 at clipped box corners, then 2D prefix sums.
    Capacity bounds the true record count (early stopping only removes rows).
    """
    diff = np.zeros((H + 1, W + 1), dtype=np.int64)
    if len(bbox_sorted):
        x0, x1 = bbox_sorted[:, 0], bbox_sorted[:, 1]
        y0, y1 = bbox_sorted[:, 2], bbox_sorted[:, 3]
        np.add.at(diff, (y0, x0), 1)
        np.add.at(diff, (y0, x1), -1)
        np.add.at(diff, (y1, x0), -1)
        np.add.at(diff, (y1, x1), 1)
    cap = np.ascontiguousarray(
        diff.cumsum(axis=0).cumsum(axis=1)[:H, :W].ravel())
    starts = np.zeros(H * W, dtype=np.int64)
    np.cumsum(cap[:-1], out=starts[1:])
    total = int(starts[-1] + cap[-1]) if len(cap) else 0
    return starts, cap, total


def render(scene: GaussianScene, camera: Camera, threads=None) -> RenderOutput:
    """Rasterize the scene into RGB/depth/normal/semantic/alpha buffers."""
    threads = backend.resolve_threads(threads)
    H, W, C = camera.height, camera.width, scene.class_count
    checksum = _scene_fingerprint(scene, camera)
    if len(scene) == 0:
        return _empty_output(H, W, C, 0, checksum, camera)
    act = activate_scene(scene)
    pr = _project_scene(act, camera)
    if len(pr.surv) == 0:
        return _empty_output(H, W, C, len(scene), checksum, camera)
    o = pr.order
    bbox_s = pr.bbox[o]
    tile_gauss, tile_offsets, _, _ = _bin_tiles(bbox_s, H, W)
    starts, caps, capacity = _record_capacity(bbox_s, H, W)
    ids = np.empty(capacity, dtype=np.int32)
    alphas = np.empty(capacity)
    trans = np.empty(capacity)
    kern = backend.active()
    rgb, dep, nrm, semb, alpha, counts, gauss_counts = kern.forward(
        np.ascontiguousarray(pr.mean2d[o]), np.ascontiguousarray(pr.icov[o]),
        np.ascontiguousarray(pr.opac[o]), np.ascontiguousarray(pr.qskip[o]),
        np.ascontiguousarray(pr.depth[o]),
        np.ascontiguousarray(pr.normal[o]), np.ascontiguousarray(pr.color[o]),
        np.ascontiguousarray(pr.sem[o]), bbox_s,
        tile_gauss, tile_offsets, starts, caps, ids, alphas, trans,
        H, W, TILE_SIZE, threads,
    )
    for name, buf in (("rgb", rgb), ("depth", dep), ("normal", nrm),
                      ("semantic", semb), ("alpha", alpha)):
        if not np.all(np.isfinite(buf)):
            flat = np.argwhere(~np.isfinite(buf.reshape(H * W, -1)))[0]
            pix = int(flat[0])
            py, px = divmod(pix, W)
            culprit = (int(pr.surv[o[ids[starts[pix]]]])
                       if counts[pix] > 0 else -1)
            raise RenderError(
                f"non-finite {name} at pixel ({px}, {py}), "
                f"primitive {culprit}")
    id_lut = np.append(pr.surv[o], -1).astype(np.int32)
    cache = BlendCache(
        starts=starts, counts=counts, local_ids=ids, id_lut=id_lut,
        alphas=alphas, trans=trans,
        shape=(H, W), n_primitives=len(scene), class_count=C,
        checksum=checksum, gauss_counts=gauss_counts,
    )
    return RenderOutput(rgb=rgb, depth=dep, normal=nrm, semantic_logits=semb,
                        accum_alpha=alpha, blend_cache=cache, camera=camera)


def render_backward(scene: GaussianScene, camera: Camera,
                    output_grads: BufferGrads,
                    blend_cache: BlendCache, threads=None) -> SceneGradients:
    """Reverse-mode gradients of the render with respect to raw parameters."""
    threads = backend.resolve_threads(threads)
    H, W, C = camera.height, camera.width, scene.class_count
    N = len(scene)
    checksum = _scene_fingerprint(scene, camera)
    if blend_cache.checksum != checksum or blend_cache.shape != (H, W) \
            or blend_cache.n_primitives != N or blend_cache.class_count != C:
        raise ContractViolationError(
            "blend cache does not match this scene/camera")

    def buf(x, shape):
        if x is None:
            return np.zeros(shape)
        x = np.asarray(x, dtype=np.float64)
        if x.shape != shape:
            raise ContractViolationError(
                f"gradient buffer shape {x.shape} != {shape}")
        return x

    g_rgb = buf(output_grads.rgb, (H, W, 3))
    g_dep = buf(output_grads.depth, (H, W))
    g_nrm = buf(output_grads.normal, (H, W, 3))
    g_sem = buf(output_grads.semantic, (H, W, C))
    g_alpha = (None if output_grads.accum_alpha is None
               else buf(output_grads.accum_alpha, (H, W)))

    zero = SceneGradients(
        positions=np.zeros((N, 3)), log_scales=np.zeros((N, 3)),
        rotations=np.zeros((N, 4)), opacity_logits=np.zeros(N),
        color_logits=np.zeros((N, 3)), semantics=np.zeros((N, C)),
        mean2d=np.zeros((N, 2)), visible=np.zeros(N, dtype=bool),
    )
    if N == 0:
        return zero
    act = activate_scene(scene)
    pr = _project_scene(act, camera)
    if len(pr.surv) == 0:
        return zero
    o = pr.order
    bbox_s = pr.bbox[o]
    tile_gauss, tile_offsets, _, _ = _bin_tiles(bbox_s, H, W)

    # kernels use sorted-local indices; the cache keeps them alongside ids
    local_ids = blend_cache._local_ids

    kern = backend.active()
    g_mean, g_icov, g_op, g_z, g_normal, g_color, g_semv = kern.backward(
        np.ascontiguousarray(pr.mean2d[o]), np.ascontiguousarray(pr.icov[o]),
        np.ascontiguousarray(pr.opac[o]), np.ascontiguousarray(pr.depth[o]),
        np.ascontiguousarray(pr.normal[o]), np.ascontiguousarray(pr.color[o]),
        np.ascontiguousarray(pr.sem[o]), bbox_s,
        tile_gauss, tile_offsets,
        blend_cache.starts, blend_cache.counts, local_ids,
        blend_cache.alphas, blend_cache.trans,
        g_rgb, g_dep, g_nrm, g_sem, g_alpha,
        H, W, TILE_SIZE, threads,
    )

    # undo the depth sort: per-survivor gradients in projection order
    inv = np.empty_like(o)
    inv[o] = np.arange(len(o))
    g_mean = g_mean[inv]
    g_icov = g_icov[inv]
    g_op = g_op[inv]
    g_z = g_z[inv]
    g_normal = g_normal[inv]
    g_color = g_color[inv]
    g_semv = g_semv[inv]

    grads = _chain_to_parameters(pr, camera, scene.rotations, g_mean, g_icov,
                                 g_op, g_z, g_normal, g_color, g_semv, N, C)
    gauss_counts = getattr(blend_cache, "_gauss_counts", None)
    visible = np.zeros(N, dtype=bool)
    if gauss_counts is not None:
        visible[pr.surv[o]] = gauss_counts > 0
    else:
        seen = np.zeros(len(o), dtype=bool)
        inside = local_ids >= 0
        seen[local_ids[inside]] = True
        visible[pr.surv[o]] = seen
    grads.visible = visible
    return grads


def _chain_to_parameters(pr, camera, raw_rotations, g_mean, g_icov, g_op, g_z,
                         g_normal, g_color, g_semv, N, C):
    """Chain projected-space gradients back to the raw parameter domains."""
    Wc = camera.rotation
    fx, fy = camera.fx, camera.fy
    M = len(pr.surv)
    xc, yc, zc = pr.xcam[:, 0], pr.xcam[:, 1], pr.xcam[:, 2]

    # inverse covariance -> covariance
    Ginv = np.empty((M, 2, 2))
    Ginv[:, 0, 0] = g_icov[:, 0]
    Ginv[:, 0, 1] = 0.5 * g_icov[:, 1]
    Ginv[:, 1, 0] = 0.5 * g_icov[:, 1]
    Ginv[:, 1, 1] = g_icov[:, 2]
    inv = np.empty((M, 2, 2))
    inv[:, 0, 0] = pr.icov[:, 0]
    inv[:, 0, 1] = pr.icov[:, 1]
    inv[:, 1, 0] = pr.icov[:, 1]
    inv[:, 1, 1] = pr.icov[:, 2]
    Gcov = -np.einsum("nij,njk,nkl->nil", inv, Ginv, inv)

    # cov2d = J covc J^T (+ const): gradients to covc and J
    GJ = 2.0 * np.einsum("nij,njk,nkl->nil", Gcov, pr.jac, pr.covc)
    Gcovc = np.einsum("nji,njk,nkl->nil", pr.jac, Gcov, pr.jac)

    # J entries depend on the camera-space position
    g_xcam = np.zeros((M, 3))
    inv_z2 = 1.0 / (zc * zc)
    g_xcam[:, 0] += GJ[:, 0, 2] * (-fx * inv_z2)
    g_xcam[:, 1] += GJ[:, 1, 2] * (-fy * inv_z2)
    g_xcam[:, 2] += (GJ[:, 0, 0] * (-fx * inv_z2)
                     + GJ[:, 1, 1] * (-fy * inv_z2)
                     + GJ[:, 0, 2] * (2.0 * fx * xc * inv_z2 / zc)
                     + GJ[:, 1, 2] * (2.0 * fy * yc * inv_z2 / zc))

    # pixel mean and blended view depth
    g_xcam[:, 0] += g_mean[:, 0] * fx / zc
    g_xcam[:, 1] += g_mean[:, 1] * fy / zc
    g_xcam[:, 2] += (-g_mean[:, 0] * fx * xc * inv_z2
                     - g_mean[:, 1] * fy * yc * inv_z2)
    g_xcam[:, 2] += g_z

    # camera covariance -> world covariance -> rotation / scales
    Gcov3 = np.einsum("ji,njk,kl->nil", Wc, Gcovc, Wc)
    s2 = pr.scales ** 2
    RD = pr.rotmats * s2[:, None, :]
    GR = 2.0 * np.einsum("nij,njk->nik", Gcov3, RD)
    RtGR = np.einsum("nji,njk,nkl->nil", pr.rotmats, Gcov3, pr.rotmats)
    g_s2 = np.einsum("nii->ni", RtGR)
    g_log_scale_surv = g_s2 * 2.0 * s2

    # splat normal -> rotation column of the shortest axis
    g_nworld = (pr.sign[:, None] * g_normal) @ Wc
    GR[np.arange(M), :, pr.axis] += g_nworld

    # rotation matrix -> unit quaternion -> raw quaternion
    g_qunit = quat_rotmat_vjp(pr.rot_unit, GR)

    # positions
    g_pos_surv = g_xcam @ Wc

    # activations
    g_opacity_logit_surv = g_op * pr.opac * (1.0 - pr.opac)
    g_color_logit_surv = g_color * pr.color * (1.0 - pr.color)

    out = SceneGradients(
        positions=np.zeros((N, 3)), log_scales=np.zeros((N, 3)),
        rotations=np.zeros((N, 4)), opacity_logits=np.zeros(N),
        color_logits=np.zeros((N, 3)), semantics=np.zeros((N, C)),
        mean2d=np.zeros((N, 2)), visible=np.zeros(N, dtype=bool),
    )
    surv = pr.surv
    out.positions[surv] = g_pos_surv
    out.log_scales[surv] = g_log_scale_surv
    out.rotations[surv] = quat_normalize_vjp(raw_rotations[surv], g_qunit)
    out.opacity_logits[surv] = g_opacity_logit_surv
    out.color_logits[surv] = g_color_logit_surv
    out.semantics[surv] = g_semv
    out.mean2d[surv] = g_mean
    return out
