"""Training losses over rendered buffers and per-view priors.

Every loss returns its scalar together with gradients with respect to the
rendered buffers it consumes, for chaining into the rasterizer backward pass.
The composition is

    total = l_rgb + lambda_sem * l_sem + lambda_guide * l_guide
    l_sem = lambda_soft * l_soft + lambda_hard * l_hard
    l_guide = omega_d * l_d + omega_ng * l_ng + omega_nb * l_nb

with the guidance block reported but excluded from total and gradients before
the guidance start iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ContractViolationError, DegenerateMaskError
from .rasterizer import BufferGrads, RenderOutput
from .scene import Camera, TrainConfig
from .utils import sigmoid

VARIANCE_FLOOR = 1e-12
NORMAL_EPS = 1e-8


# ------------------------------------------------------------------- priors

@dataclass
class PriorBundle:
    """Per-view supervision: teacher logits, prior depth, mask, pairs."""

    teacher_logits: np.ndarray    # (H, W, C)
    prior_depth: np.ndarray       # (H, W), affine-related units
    edge_mask: np.ndarray         # (H, W) bool, True = unreliable
    boundary_pairs: np.ndarray    # (K, 2) flat pixel indices, row-major
    teacher_labels: np.ndarray    # (H, W) int, argmax of teacher_logits

    def __post_init__(self):
        # the teacher is fixed per view; cache its distribution once
        self._teacher_logp = _log_softmax(self.teacher_logits)
        self._teacher_p = np.exp(self._teacher_logp)

    @classmethod
    def from_teacher(cls, teacher_logits, prior_depth, dilation=2):
        teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
        prior_depth = np.asarray(prior_depth, dtype=np.float64)
        if teacher_logits.shape[:2] != prior_depth.shape:
            raise ContractViolationError("teacher logits / prior depth mismatch")
        labels = np.argmax(teacher_logits, axis=2).astype(np.int32)
        mask = semantic_edge_mask(labels, dilation)
        if (~mask).sum() < 2:
            raise DegenerateMaskError("fewer than 2 unmasked pixels")
        return cls(
            teacher_logits=teacher_logits,
            prior_depth=prior_depth,
            edge_mask=mask,
            boundary_pairs=boundary_pairs(labels),
            teacher_labels=labels,
        )


@dataclass
class LossReport:
    l_rgb: float = 0.0
    l_soft: float = 0.0
    l_hard: float = 0.0
    l_sem: float = 0.0
    l_d: float = 0.0
    l_ng: float = 0.0
    l_nb: float = 0.0
    l_guide: float = 0.0
    total: float = 0.0
    guidance_active: bool = False
    depth_degenerate: bool = False
    grads: Optional[BufferGrads] = None

    CSV_HEADER = "iter,l_rgb,l_soft,l_hard,l_d,l_ng,l_nb,total"

    def csv_row(self, iteration: int) -> str:
        return (f"{iteration},{self.l_rgb!r},{self.l_soft!r},{self.l_hard!r},"
                f"{self.l_d!r},{self.l_ng!r},{self.l_nb!r},{self.total!r}")


# --------------------------------------------------------------- distillation

def softmax_channels(logits):
    """Per-pixel softmax over the last axis, max-subtracted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def soft_distill_loss(teacher_logits, rendered_logits):
    """Mean per-pixel KL(softmax(teacher) || softmax(rendered))."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    rendered_logits = np.asarray(rendered_logits, dtype=np.float64)
    if teacher_logits.shape != rendered_logits.shape:
        raise ContractViolationError(
            f"logit shapes differ: {teacher_logits.shape} vs "
            f"{rendered_logits.shape}")
    n_px = teacher_logits.shape[0] * teacher_logits.shape[1]
    lp = _log_softmax(teacher_logits)
    lq = _log_softmax(rendered_logits)
    p = np.exp(lp)
    loss = float(np.sum(p * (lp - lq)) / n_px)
    grad = (np.exp(lq) - p) / n_px
    return loss, grad


def _distill_losses(priors, rendered_logits, want_soft, want_hard):
    """Soft and hard distillation sharing one student log-softmax pass."""
    lq = _log_softmax(np.asarray(rendered_logits, dtype=np.float64))
    h, w, c = rendered_logits.shape
    n_px = h * w
    l_soft = l_hard = 0.0
    g_soft = g_hard = None
    q = np.exp(lq)
    if want_soft:
        p = priors._teacher_p
        l_soft = float(np.sum(p * (priors._teacher_logp - lq)) / n_px)
        g_soft = (q - p) / n_px
    if want_hard:
        labels = priors.teacher_labels
        iy, ix = np.indices((h, w), sparse=True)
        l_hard = float(-lq[iy, ix, labels].sum() / n_px)
        g_hard = q.copy() if want_soft else q
        g_hard[iy, ix, labels] -= 1.0
        g_hard = g_hard / n_px
    return l_soft, g_soft, l_hard, g_hard


def hard_distill_loss(teacher_labels, rendered_logits):
    """Mean negative log-probability of the teacher's argmax label."""
    rendered_logits = np.asarray(rendered_logits, dtype=np.float64)
    labels = np.asarray(teacher_labels)
    h, w, c = rendered_logits.shape
    if labels.shape != (h, w):
        raise ContractViolationError("label map does not match logits")
    n_px = h * w
    lq = _log_softmax(rendered_logits)
    iy, ix = np.indices((h, w))
    loss = float(-lq[iy, ix, labels].sum() / n_px)
    grad = np.exp(lq)
    grad[iy, ix, labels] -= 1.0
    return loss, grad / n_px


# ------------------------------------------------------- masks and boundaries

def semantic_edge_mask(teacher_labels, dilation=2):
    """True within Chebyshev distance `dilation` of a 4-neighbor label change."""
    labels = np.asarray(teacher_labels)
    edge = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    dy = labels[1:, :] != labels[:-1, :]
    edge[1:, :] |= dy
    edge[:-1, :] |= dy
    if dilation > 0 and edge.any():
        edge = ndimage.maximum_filter(edge, size=2 * dilation + 1,
                                      mode="constant", cval=False)
    return edge


def boundary_pairs(teacher_labels):
    """4-neighbor pixel pairs with differing labels, each listed once.

    Returns (K, 2) flat row-major pixel indices with pair[0] < pair[1].
    """
    labels = np.asarray(teacher_labels)
    h, w = labels.shape
    flat = np.arange(h * w).reshape(h, w)
    out = []
    dx = labels[:, 1:] != labels[:, :-1]
    if dx.any():
        a = flat[:, :-1][dx]
        out.append(np.stack([a, a + 1], axis=1))
    dy = labels[1:, :] != labels[:-1, :]
    if dy.any():
        a = flat[:-1, :][dy]
        out.append(np.stack([a, a + w], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out, axis=0).astype(np.int64)


# ------------------------------------------------------------------ depth

def pearson(x, y):
    """Centered correlation of two samples; (rho, degenerate flag)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractViolationError("pearson inputs must match in size")
    if x.size < 2:
        raise DegenerateMaskError("pearson needs at least 2 samples")
    xt = x - x.mean()
    yt = y - y.mean()
    sxx = float(np.dot(xt, xt))
    syy = float(np.dot(yt, yt))
    if sxx < VARIANCE_FLOOR or syy < VARIANCE_FLOOR:
        return 0.0, True
    rho = float(np.dot(xt, yt) / np.sqrt(sxx * syy))
    return rho, False


def depth_loss(rendered_depth, prior_depth, edge_mask):
    """1 - pearson over unmasked pixels; returns (loss, grad, degenerate).

    Invariant under positive affine maps of either depth; masked pixels get
    exactly zero gradient.
    """
    d_r = np.asarray(rendered_depth, dtype=np.float64)
    d_p = np.asarray(prior_depth, dtype=np.float64)
    mask = np.asarray(edge_mask, dtype=bool)
    if d_r.shape != d_p.shape or d_r.shape != mask.shape:
        raise ContractViolationError("depth/mask shapes differ")
    sel = ~mask
    n = int(sel.sum())
    if n < 2:
        raise DegenerateMaskError("fewer than 2 unmasked pixels")
    x = d_r[sel]
    y = d_p[sel]
    xt = x - x.mean()
    yt = y - y.mean()
    sxx = float(np.dot(xt, xt))
    syy = float(np.dot(yt, yt))
    grad = np.zeros_like(d_r)
    if sxx < VARIANCE_FLOOR or syy < VARIANCE_FLOOR:
        return 1.0, grad, True
    denom = np.sqrt(sxx * syy)
    rho = float(np.dot(xt, yt) / denom)
    # d rho / d x_i = yt_i / denom - rho * xt_i / sxx
    grad[sel] = -(yt / denom - rho * xt / sxx)
    return 1.0 - rho, grad, False


# ----------------------------------------------------------- normals chains

@dataclass
class DepthNormalChain:
    """Forward products kept for the reverse chain of normals_from_depth."""

    dirs: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    raw: np.ndarray
    norm: np.ndarray
    normals: np.ndarray
    valid: np.ndarray


def _diff_x(P):
    out = np.empty_like(P)
    out[:, 1:-1] = (P[:, 2:] - P[:, :-2]) * 0.5
    out[:, 0] = P[:, 1] - P[:, 0]
    out[:, -1] = P[:, -1] - P[:, -2]
    return out


def _diff_x_adjoint(g):
    out = np.zeros_like(g)
    out[:, 2:] += 0.5 * g[:, 1:-1]
    out[:, :-2] -= 0.5 * g[:, 1:-1]
    out[:, 1] += g[:, 0]
    out[:, 0] -= g[:, 0]
    out[:, -1] += g[:, -1]
    out[:, -2] -= g[:, -1]
    return out


def _diff_y(P):
    out = np.empty_like(P)
    out[1:-1] = (P[2:] - P[:-2]) * 0.5
    out[0] = P[1] - P[0]
    out[-1] = P[-1] - P[-2]
    return out


def _diff_y_adjoint(g):
    out = np.zeros_like(g)
    out[2:] += 0.5 * g[1:-1]
    out[:-2] -= 0.5 * g[1:-1]
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return out


def normals_from_depth(depth, camera: Camera):
    """Unit normals of the back-projected depth map, camera frame, z <= 0.

    Central differences in the interior, one-sided at borders. Pixels whose
    difference stencil touches zero depth are flagged invalid and must be
    excluded from losses. Returns (normals, valid, chain) where `chain` feeds
    normals_from_depth_vjp.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    if (h, w) != (camera.height, camera.width):
        raise ContractViolationError("depth map does not match camera size")
    u = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(h) + 0.5 - camera.cy) / camera.fy
    dirs = np.empty((h, w, 3))
    dirs[..., 0] = u[None, :]
    dirs[..., 1] = v[:, None]
    dirs[..., 2] = 1.0
    P = d[..., None] * dirs
    tx = _diff_x(P)
    ty = _diff_y(P)
    raw = np.cross(ty, tx)
    norm = np.linalg.norm(raw, axis=-1)
    safe = np.maximum(norm, NORMAL_EPS)
    normals = raw / safe[..., None]

    pos = d > 0
    left = np.empty_like(pos)
    left[:, 1:] = pos[:, :-1]
    left[:, 0] = pos[:, 0]
    right = np.empty_like(pos)
    right[:, :-1] = pos[:, 1:]
    right[:, -1] = pos[:, -1]
    up = np.empty_like(pos)
    up[1:] = pos[:-1]
    up[0] = pos[0]
    down = np.empty_like(pos)
    down[:-1] = pos[1:]
    down[-1] = pos[-1]
    valid = pos & left & right & up & down

    chain = DepthNormalChain(dirs=dirs, tx=tx, ty=ty, raw=raw, norm=norm,
                             normals=normals, valid=valid)
    return normals, valid, chain


def normals_from_depth_vjp(chain: DepthNormalChain, grad_normals):
    """Backprop grad wrt the normals onto the depth map."""
    g = np.asarray(grad_normals, dtype=np.float64)
    safe = np.maximum(chain.norm, NORMAL_EPS)[..., None]
    n = chain.normals
    on_sphere = (chain.norm >= NORMAL_EPS)[..., None]
    inner = np.sum(n * g, axis=-1, keepdims=True)
    g_raw = np.where(on_sphere, (g - n * inner) / safe, g / NORMAL_EPS)
    # raw = ty x tx
    g_ty = np.cross(chain.tx, g_raw)
    g_tx = np.cross(g_raw, chain.ty)
    g_P = _diff_x_adjoint(g_tx) + _diff_y_adjoint(g_ty)
    return np.sum(g_P * chain.dirs, axis=-1)


def _renormalize(field):
    norm = np.linalg.norm(field, axis=-1)
    safe = np.maximum(norm, NORMAL_EPS)
    return field / safe[..., None], norm, safe


def _renormalize_vjp(field, norm, safe, unit, grad_unit):
    on = (norm >= NORMAL_EPS)[..., None]
    inner = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return np.where(on, (grad_unit - unit * inner) / safe[..., None],
                    grad_unit / NORMAL_EPS)


def geometric_normal_loss(rendered_normals, depth_normals, valid):
    """Mean cosine distance between unit-renormalized N_r and N_d.

    Returns (loss, grad_wrt_rendered, grad_wrt_depth_normals).
    """
    n_r = np.asarray(rendered_normals, dtype=np.float64)
    n_d = np.asarray(depth_normals, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if n_r.shape != n_d.shape or n_r.shape[:2] != valid.shape:
        raise ContractViolationError("normal buffers do not match")
    cnt = int(valid.sum())
    if cnt == 0:
        return 0.0, np.zeros_like(n_r), np.zeros_like(n_d)
    unit, norm, safe = _renormalize(n_r)
    dots = np.sum(unit * n_d, axis=-1)
    loss = float(np.sum(1.0 - dots[valid]) / cnt)
    g_unit = np.where(valid[..., None], -n_d / cnt, 0.0)
    g_nr = _renormalize_vjp(n_r, norm, safe, unit, g_unit)
    g_nd = np.where(valid[..., None], -unit / cnt, 0.0)
    return loss, g_nr, g_nd


def boundary_normal_loss(rendered_normals, pairs, alpha_sigmoid_scale):
    """Mean over boundary pairs of 1 - sigmoid(alpha * (1 - n_u . n_v)).

    Encourages normals across semantic boundaries to diverge. Empty pair set
    gives loss 0 with zero gradient. Returns (loss, grad_wrt_rendered).
    """
    n_r = np.asarray(rendered_normals, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    grad = np.zeros_like(n_r)
    if len(pairs) == 0:
        return 0.0, grad
    h, w, _ = n_r.shape
    unit, norm, safe = _renormalize(n_r)
    flat_unit = unit.reshape(h * w, 3)
    nu = flat_unit[pairs[:, 0]]
    nv = flat_unit[pairs[:, 1]]
    dots = np.sum(nu * nv, axis=1)
    t = alpha_sigmoid_scale * (1.0 - dots)
    s = sigmoid(t)
    loss = float(np.mean(1.0 - s))
    coef = (alpha_sigmoid_scale * s * (1.0 - s) / len(pairs))[:, None]
    g_unit_flat = np.zeros((h * w, 3))
    cu = coef * nv
    cv = coef * nu
    for axis in range(3):
        g_unit_flat[:, axis] = (
            np.bincount(pairs[:, 0], weights=cu[:, axis], minlength=h * w)
            + np.bincount(pairs[:, 1], weights=cv[:, axis], minlength=h * w))
    g_unit = g_unit_flat.reshape(h, w, 3)
    return loss, _renormalize_vjp(n_r, norm, safe, unit, g_unit)


# ----------------------------------------------------------------- appearance

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _ssim_kernel():
    half = _SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL_1D = _ssim_kernel()


def _blur(img):
    """Separable gaussian window with symmetric padding; self-adjoint.

    Works on (H, W) or (H, W, C) arrays; channels blur independently.
    """
    out = ndimage.correlate1d(img, _KERNEL_1D, axis=0, mode="reflect")
    return ndimage.correlate1d(out, _KERNEL_1D, axis=1, mode="reflect")


def ssim(img_a, img_b):
    """Single-scale SSIM, 11x11 gaussian window; (value, grad_wrt_img_a)."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolationError("ssim inputs must have the same shape")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]
    scale = 1.0 / a.size
    mu_x = _blur(a)
    mu_y = _blur(b)
    sxx = _blur(a * a) - mu_x * mu_x
    syy = _blur(b * b) - mu_y * mu_y
    sxy = _blur(a * b) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _SSIM_C1
    a2 = 2.0 * sxy + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = sxx + syy + _SSIM_C2
    denom = b1 * b2
    smap = a1 * a2 / denom
    total = float(smap.sum() * scale)
    g_a1 = scale * a2 / denom
    g_a2 = scale * a1 / denom
    g_b1 = -scale * smap / b1
    g_b2 = -scale * smap / b2
    g_sxy = 2.0 * g_a2
    g_sxx = g_b2
    g_mu_x = (2.0 * mu_y * g_a1 + 2.0 * mu_x * g_b1
              - 2.0 * mu_x * g_sxx - mu_y * g_sxy)
    grad = _blur(g_mu_x) + 2.0 * a * _blur(g_sxx) + b * _blur(g_sxy)
    if squeeze:
        grad = grad[..., 0]
    return total, grad


def photometric_loss(gt_image, rendered_image, lambda_ssim):
    """(1 - l) * mean|gt - rendered| + l * (1 - SSIM); grad wrt rendered."""
    gt = np.asarray(gt_image, dtype=np.float64)
    img = np.asarray(rendered_image, dtype=np.float64)
    if gt.shape != img.shape:
        raise ContractViolationError("image shapes differ")
    diff = img - gt
    l1 = float(np.abs(diff).mean())
    grad = np.sign(diff) * ((1.0 - lambda_ssim) / diff.size)
    if lambda_ssim > 0.0:
        s, g_s = ssim(img, gt)
        loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * g_s
    else:
        loss = l1
    return loss, grad


# ---------------------------------------------------------------- composition

def total_loss(render_output: RenderOutput, gt_image, priors: PriorBundle,
               config: TrainConfig, iteration: int) -> LossReport:
    """Compose all losses for one view at a given iteration.

    Guidance terms are evaluated (for logging) from the first iteration but
    contribute to the total and to gradients only once
    iteration >= config.guidance_start_iter.
    """
    out = render_output
    h, w = out.depth.shape
    gt = np.asarray(gt_image, dtype=np.float64)
    if gt.shape != (h, w, 3):
        raise ContractViolationError("ground-truth image mismatch")
    if priors.teacher_logits.shape != out.semantic_logits.shape:
        raise ContractViolationError("teacher logits mismatch")
    if priors.prior_depth.shape != (h, w):
        raise ContractViolationError("prior depth mismatch")

    rep = LossReport()
    rep.guidance_active = iteration >= config.guidance_start_iter
    g_rgb = np.zeros((h, w, 3))
    g_dep = np.zeros((h, w))
    g_nrm = np.zeros((h, w, 3))
    g_sem = np.zeros(out.semantic_logits.shape)

    rep.l_rgb, g = photometric_loss(gt, out.rgb, config.lambda_ssim)
    g_rgb += g

    if config.lambda_sem > 0.0:
        want_soft = config.lambda_soft > 0.0
        want_hard = config.lambda_hard > 0.0
        if priors.teacher_logits.shape != out.semantic_logits.shape:
            raise ContractViolationError("teacher logits mismatch")
        l_soft, g_soft, l_hard, g_hard = _distill_losses(
            priors, out.semantic_logits, want_soft, want_hard)
        if want_soft:
            rep.l_soft = l_soft
            g_sem += (config.lambda_sem * config.lambda_soft) * g_soft
        if want_hard:
            rep.l_hard = l_hard
            g_sem += (config.lambda_sem * config.lambda_hard) * g_hard
        rep.l_sem = (config.lambda_soft * rep.l_soft
                     + config.lambda_hard * rep.l_hard)

    if config.lambda_guide > 0.0:
        guide_scale = config.lambda_guide if rep.guidance_active else 0.0
        if config.omega_d > 0.0:
            rep.l_d, g, rep.depth_degenerate = depth_loss(
                out.depth, priors.prior_depth, priors.edge_mask)
            g_dep += (guide_scale * config.omega_d) * g
        if config.omega_ng > 0.0:
            if out.camera is None:
                raise ContractViolationError(
                    "render output carries no camera; required for normals")
            n_d, valid, chain = normals_from_depth(out.depth, out.camera)
            rep.l_ng, g_nr, g_nd = geometric_normal_loss(out.normal, n_d, valid)
            if guide_scale > 0.0:
                g_nrm += (guide_scale * config.omega_ng) * g_nr
                g_dep += (guide_scale * config.omega_ng) * \
                    normals_from_depth_vjp(chain, g_nd)
        if config.omega_nb > 0.0:
            rep.l_nb, g = boundary_normal_loss(
                out.normal, priors.boundary_pairs, config.alpha_sigmoid_scale)
            g_nrm += (guide_scale * config.omega_nb) * g
        rep.l_guide = (config.omega_d * rep.l_d + config.omega_ng * rep.l_ng
                       + config.omega_nb * rep.l_nb)

    rep.total = rep.l_rgb + config.lambda_sem * rep.l_sem
    if rep.guidance_active:
        rep.total += config.lambda_guide * rep.l_guide
    rep.grads = BufferGrads(rgb=g_rgb, depth=g_dep, normal=g_nrm,
                            semantic=g_sem)
    return rep

