"""Differentiable 3D Gaussian rasterizer with a hand-written backward pass.

Two Gaussian containers are supported:

* :class:`GaussianSet` -- pixel-aligned Gaussians, one per reference pixel,
  positioned at ``origin + softplus(d) * direction`` of the pixel's ray under
  the *current* reference cameras and shared intrinsics;
* :class:`GaussianCloud` -- free-standing Gaussians with explicit world means,
  used for authored synthetic scenes.

Rendering is tile based (16x16 by default).  :func:`render_bruteforce` is an
untiled per-pixel oracle that shares only the projection step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import NonFiniteInput, ShapeError
from ..geometry import CameraIntrinsics, CameraPose, _camera_dirs, quat_to_rot_batch
from . import backend
from .sh import num_coeffs, sh_basis, sh_basis_jacobian


@dataclass(frozen=True)
class RenderOptions:
    tile_size: int = 16
    kappa: float = 0.3  # screen-space low-pass dilation, px^2
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    near: float = 0.01
    # the EWA Jacobian is evaluated with x/z, y/z clamped to this multiple of
    # the half field of view, so splats grazing the near plane stay bounded
    jacobian_clamp: float = 1.3


DEFAULT_OPTIONS = RenderOptions()


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Gaussians with explicit world-space means."""

    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4), need not be unit
    sh: np.ndarray  # (N, ncoef, 3)
    scale_raw: np.ndarray  # (N, 3), log standard deviations
    opacity_raw: np.ndarray  # (N,), logits
    sh_degree: int = 0

    def __len__(self):
        return self.means.shape[0]

    def world_means(self, k: CameraIntrinsics) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Pixel-aligned Gaussians: ``k_ref * height * width`` of them, one per reference pixel."""

    d_raw: np.ndarray  # (N,), softplus -> distance along the source ray
    quats: np.ndarray
    sh: np.ndarray
    scale_raw: np.ndarray
    opacity_raw: np.ndarray
    source_view: np.ndarray  # (N,) int, index into ref_poses
    source_pixel: np.ndarray  # (N, 2) int, (u, v)
    k_ref: int
    height: int
    width: int
    ref_poses: tuple = field(default_factory=tuple)
    sh_degree: int = 0

    def __post_init__(self):
        n = self.d_raw.shape[0]
        if n != self.k_ref * self.height * self.width:
            raise ShapeError(f"GaussianSet needs k_ref*H*W = "
                             f"{self.k_ref * self.height * self.width} Gaussians, got {n}")
        if len(self.ref_poses) != self.k_ref:
            raise ShapeError(f"expected {self.k_ref} reference poses, got {len(self.ref_poses)}")

    def __len__(self):
        return self.d_raw.shape[0]

    @property
    def depth(self) -> np.ndarray:
        return softplus(self.d_raw)

    def with_poses(self, poses) -> "GaussianSet":
        return replace(self, ref_poses=tuple(poses))

    def with_params(self, **kw) -> "GaussianSet":
        return replace(self, **kw)

    def _ray_parts(self, k: CameraIntrinsics):
        Rs = np.stack([p.R for p in self.ref_poses])
        cs = np.stack([p.center for p in self.ref_poses])
        sv = np.asarray(self.source_view)
        n_cam = _camera_dirs(k, self.source_pixel[:, 0], self.source_pixel[:, 1])
        Rsrc = Rs[sv]
        dirs = np.einsum("nji,nj->ni", Rsrc, n_cam)
        return Rsrc, cs[sv], n_cam, dirs

    def world_means(self, k: CameraIntrinsics) -> np.ndarray:
        _, origins, _, dirs = self._ray_parts(k)
        return origins + self.depth[:, None] * dirs


@dataclass(eq=False)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    ctx: object = None


@dataclass(eq=False)
class GradientBundle:
    """Adjoints of a scalar loss.  Extrinsic entries are 6-vectors ``(v, w)``
    in the left tangent of the corresponding pose."""

    quat: np.ndarray
    sh: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    pose: np.ndarray
    intrinsics: np.ndarray  # d/d(fx, fy, cx, cy)
    d: np.ndarray | None = None
    means: np.ndarray | None = None
    ref_poses: np.ndarray | None = None  # (k_ref, 6)

    def arrays(self):
        out = {"quat": self.quat, "sh": self.sh, "scale": self.scale,
               "opacity": self.opacity, "pose": self.pose, "intrinsics": self.intrinsics}
        for name in ("d", "means", "ref_poses"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out


def build_covariance(q, scale) -> np.ndarray:
    """``R(q) diag(scale^2) R(q)^T`` for one Gaussian."""
    return _covariances(np.asarray(q, dtype=np.float64)[None],
                        np.asarray(scale, dtype=np.float64)[None])[0]


def _covariances(quats, scales):
    Rq = quat_to_rot_batch(quats)
    M = Rq * scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def _project(k, R, t, means, cov_world, opts):
    p = means @ R.T + t
    z = p[:, 2]
    valid = z > opts.near
    zs = np.where(valid, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    lim_x = opts.jacobian_clamp * 0.5 * k.width / k.fx
    lim_y = opts.jacobian_clamp * 0.5 * k.height / k.fy
    clamped = np.stack([np.abs(x / zs) > lim_x, np.abs(y / zs) > lim_y], -1)
    xj = np.clip(x / zs, -lim_x, lim_x) * zs
    yj = np.clip(y / zs, -lim_y, lim_y) * zs
    J = np.zeros((len(means), 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * xj / zs**2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * yj / zs**2
    cov_cam = R @ cov_world @ R.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += opts.kappa
    cov2d[:, 1, 1] += opts.kappa
    mean2d = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=-1)
    return p, zs, valid, J, cov_cam, cov2d, mean2d, clamped


def project_gaussian(k: CameraIntrinsics, pose: CameraPose, mean, cov, opts: RenderOptions = DEFAULT_OPTIONS):
    """Screen-space mean, dilated 2D covariance and depth of one Gaussian.

    Returns ``(mean2d, cov2d, depth, culled)``.  Culled Gaussians (depth at or
    behind the near plane) still report their camera-frame depth.
    """
    mean = np.asarray(mean, dtype=np.float64)[None]
    cov = np.asarray(cov, dtype=np.float64)[None]
    p, _, valid, _, _, cov2d, mean2d, _ = _project(k, pose.R, pose.trans, mean, cov, opts)
    return mean2d[0], cov2d[0], float(p[0, 2]), not bool(valid[0])


def _check_finite(g):
    for name in ("means", "d_raw", "quats", "sh", "scale_raw", "opacity_raw"):
        a = getattr(g, name, None)
        if a is None:
            continue
        a = np.asarray(a)
        bad = ~np.isfinite(a.reshape(a.shape[0], -1 if a.shape[0] else 1)).all(axis=1)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise NonFiniteInput(f"Gaussian {idx} has a non-finite {name}")


@dataclass(eq=False)
class _Context:
    g: object
    k: CameraIntrinsics
    pose: CameraPose
    opts: RenderOptions
    means: np.ndarray
    quats: np.ndarray
    Rq: np.ndarray
    scales: np.ndarray
    cov_world: np.ndarray
    p: np.ndarray
    zs: np.ndarray
    valid: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    color_mask: np.ndarray
    basis: np.ndarray
    viewvec: np.ndarray | None
    clamped: np.ndarray
    offsets: np.ndarray | None = None
    ids: np.ndarray | None = None
    order: np.ndarray | None = None


def _prepare(g, k: CameraIntrinsics, pose: CameraPose, opts: RenderOptions) -> _Context:
    if not isinstance(g, (GaussianSet, GaussianCloud)):
        raise TypeError(f"cannot render {type(g).__name__}")
    _check_finite(g)
    n = len(g)
    ncoef = num_coeffs(g.sh_degree)
    sh = np.asarray(g.sh, dtype=np.float64)
    if sh.size != n * ncoef * 3:
        raise ShapeError(f"SH degree {g.sh_degree} needs {ncoef} coefficients per channel, "
                         f"got array of shape {sh.shape}")
    sh = sh.reshape(n, ncoef, 3)
    R, t = pose.R, pose.trans
    means = g.world_means(k) if n else np.zeros((0, 3))
    quats = np.asarray(g.quats, dtype=np.float64).reshape(n, 4)
    scales = np.exp(np.asarray(g.scale_raw, dtype=np.float64).reshape(n, 3))
    Rq = quat_to_rot_batch(quats) if n else np.zeros((0, 3, 3))
    M = Rq * scales[:, None, :]
    cov_world = M @ np.swapaxes(M, 1, 2)
    p, zs, valid, J, cov_cam, cov2d, mean2d, clamped = _project(k, R, t, means, cov_world, opts)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(valid, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    opac = sigmoid(np.asarray(g.opacity_raw, dtype=np.float64).reshape(n))
    if g.sh_degree == 0:
        basis = np.full((n, 1), sh_basis(np.zeros((1, 3)), 0)[0, 0])
        viewvec = None
    else:
        viewvec = means - pose.center
        norm = np.linalg.norm(viewvec, axis=1, keepdims=True)
        basis = sh_basis(viewvec / np.where(norm > 0, norm, 1.0), g.sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, sh)
    colors = np.clip(raw, 0.0, 1.0)
    color_mask = (raw >= 0.0) & (raw <= 1.0)
    return _Context(g, k, pose, opts, means, quats, Rq, scales, cov_world, p, zs, valid,
                    J, cov_cam, cov2d, conic, mean2d, opac, colors, color_mask, basis, viewvec,
                    clamped)


def _depth_order(ctx, mask):
    idx = np.flatnonzero(mask)
    return idx[np.lexsort((idx, ctx.zs[idx]))]


def _bin_tiles(ctx: _Context):
    """Depth-sorted CSR tile lists.

    A Gaussian can only produce ``alpha >= alpha_min`` where its Mahalanobis
    distance is at most ``sqrt(2 ln(opacity / alpha_min))``; the tile footprint
    is the bounding box of that ellipse, so no contribution is ever dropped.
    """
    opts, k = ctx.opts, ctx.k
    ts = opts.tile_size
    ntx = (k.width + ts - 1) // ts
    nty = (k.height + ts - 1) // ts
    ratio = np.where(ctx.opac >= opts.alpha_min, ctx.opac / opts.alpha_min, 1.0)
    radius = np.sqrt(2.0 * np.log(ratio)) + 1e-6
    hx = radius * np.sqrt(np.maximum(ctx.cov2d[:, 0, 0], 0.0))
    hy = radius * np.sqrt(np.maximum(ctx.cov2d[:, 1, 1], 0.0))
    mx, my = ctx.mean2d[:, 0], ctx.mean2d[:, 1]
    finite = np.isfinite(mx) & np.isfinite(my) & np.isfinite(hx) & np.isfinite(hy)
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(np.where(finite, mx - hx - 0.5, 0.0))
        x1 = np.floor(np.where(finite, mx + hx - 0.5, -1.0))
        y0 = np.ceil(np.where(finite, my - hy - 0.5, 0.0))
        y1 = np.floor(np.where(finite, my + hy - 0.5, -1.0))
    x0 = np.clip(x0, 0, k.width)
    x1 = np.clip(x1, -1, k.width - 1)
    y0 = np.clip(y0, 0, k.height)
    y1 = np.clip(y1, -1, k.height - 1)
    drawn = ctx.valid & finite & (ctx.opac >= opts.alpha_min) & (x0 <= x1) & (y0 <= y1)
    order = _depth_order(ctx, drawn)
    tx0 = (x0[order] // ts).astype(np.int64)
    tx1 = (x1[order] // ts).astype(np.int64)
    ty0 = (y0[order] // ts).astype(np.int64)
    ty1 = (y1[order] // ts).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    rep = np.repeat(np.arange(order.size), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(rep.size) - first
    tile_id = (ty0[rep] + local // nx[rep]) * ntx + tx0[rep] + local % nx[rep]
    perm = np.argsort(tile_id, kind="stable")
    ids = order[rep][perm].astype(np.int64)
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(tile_id, minlength=ntx * nty))
    return offsets, ids, order


def render(g, k: CameraIntrinsics, pose: CameraPose, opts: RenderOptions = DEFAULT_OPTIONS,
           backend_name: str | None = None) -> RenderOutput:
    """Render Gaussians into camera ``(k, pose)``; the result carries the
    forward context needed by :func:`render_backward`."""
    ctx = _prepare(g, k, pose, opts)
    ctx.offsets, ctx.ids, ctx.order = _bin_tiles(ctx)
    kern = backend.kernels(backend_name)
    rgb, alpha, depth = kern.composite_forward(
        ctx.mean2d, ctx.conic, ctx.opac, ctx.colors, ctx.zs, ctx.offsets, ctx.ids,
        k.height, k.width, opts.tile_size, opts.alpha_max, opts.alpha_min)
    return RenderOutput(rgb, alpha, depth, ctx)


def render_bruteforce(g, k: CameraIntrinsics, pose: CameraPose,
                      opts: RenderOptions = DEFAULT_OPTIONS) -> RenderOutput:
    """Untiled reference renderer: every pixel visits every Gaussian in front
    of the near plane, in depth order."""
    ctx = _prepare(g, k, pose, opts)
    order = _depth_order(ctx, ctx.valid)
    H, W = k.height, k.width
    py, px = np.mgrid[0:H, 0:W]
    fx, fy = px + 0.5, py + 0.5
    T = np.ones((H, W))
    rgb = np.zeros((H, W, 3))
    dsum = np.zeros((H, W))
    for i in order:
        dx = fx - ctx.mean2d[i, 0]
        dy = fy - ctx.mean2d[i, 1]
        A, B, C = ctx.conic[i]
        a = ctx.opac[i] * np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
        a = np.minimum(a, opts.alpha_max)
        a = np.where(a < opts.alpha_min, 0.0, a)
        w = a * T
        rgb += w[..., None] * ctx.colors[i]
        dsum += w * ctx.zs[i]
        T = T * (1.0 - a)
    alpha = 1.0 - T
    depth = np.where(alpha > 0, dsum / np.where(alpha > 0, alpha, 1.0), 0.0)
    return RenderOutput(rgb, alpha, depth, None)


def _quat_rot_derivs(qn):
    """``dR/dq_k`` for unit quaternions, shape ``(N, 4, 3, 3)``."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([o, -z, y, z, o, -x, -y, x, o], -1)
    dx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], -1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def render_backward(ctx, grad_rgb, grad_depth=None, backend_name: str | None = None) -> GradientBundle:
    """Reverse-mode adjoints of ``sum(grad_rgb * rgb) + sum(grad_depth * depth)``."""
    if isinstance(ctx, RenderOutput):
        ctx = ctx.ctx
    if not isinstance(ctx, _Context) or ctx.ids is None:
        raise ShapeError("render_backward needs the context of a tiled render() call")
    k, opts, g = ctx.k, ctx.opts, ctx.g
    H, W = k.height, k.width
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (H, W, 3):
        raise ShapeError(f"grad_rgb has shape {grad_rgb.shape}, expected {(H, W, 3)}")
    use_depth = grad_depth is not None
    if use_depth:
        grad_depth = np.asarray(grad_depth, dtype=np.float64)
        if grad_depth.shape != (H, W):
            raise ShapeError(f"grad_depth has shape {grad_depth.shape}, expected {(H, W)}")
    else:
        grad_depth = np.zeros((1, 1))
    n = len(g)
    kern = backend.kernels(backend_name)
    egrad = kern.composite_backward(
        ctx.mean2d, ctx.conic, ctx.opac, ctx.colors, ctx.zs, ctx.offsets, ctx.ids,
        H, W, opts.tile_size, opts.alpha_max, opts.alpha_min,
        grad_rgb, grad_depth, use_depth)
    # fixed-order reduction of per-tile entries into per-Gaussian adjoints
    G = np.zeros((n, egrad.shape[1]))
    if ctx.ids.size:
        for c in range(egrad.shape[1]):
            G[:, c] = np.bincount(ctx.ids, weights=egrad[:, c], minlength=n)
    G[~ctx.valid] = 0.0
    return _chain(ctx, G)


def _chain(ctx: _Context, G) -> GradientBundle:
    g, k, pose = ctx.g, ctx.k, ctx.pose
    n = len(g)
    R = pose.R
    g_color, g_op, g_mu, g_conic, g_z = G[:, 0:3], G[:, 3], G[:, 4:6], G[:, 6:9], G[:, 9].copy()
    g_means = np.zeros((n, 3))
    g_pose = np.zeros(6)
    g_K = np.zeros(4)

    # color -> SH coefficients and view direction
    g_raw = g_color * ctx.color_mask
    sh = np.asarray(g.sh, dtype=np.float64).reshape(n, -1, 3)
    g_sh = ctx.basis[:, :, None] * g_raw[:, None, :]
    if ctx.viewvec is not None:
        g_basis = np.einsum("nkc,nc->nk", sh, g_raw)
        norm = np.linalg.norm(ctx.viewvec, axis=1, keepdims=True)
        norm = np.where(norm > 0, norm, 1.0)
        dirs = ctx.viewvec / norm
        g_dir = np.einsum("nk,nkj->nj", g_basis, sh_basis_jacobian(dirs, g.sh_degree))
        g_vec = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / norm
        g_means += g_vec
        # camera center c = -R^T t moves by -R^T v under a left perturbation
        g_pose[:3] += R @ np.sum(g_vec, axis=0)

    g_op_raw = g_op * ctx.opac * (1.0 - ctx.opac)

    # conic -> 2D covariance
    Q = np.stack([np.stack([ctx.conic[:, 0], ctx.conic[:, 1]], -1),
                  np.stack([ctx.conic[:, 1], ctx.conic[:, 2]], -1)], 1)
    Gq = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], 1)
    G_cov2d = -Q @ Gq @ Q
    J = ctx.J
    Jt = np.swapaxes(J, 1, 2)
    G_cc = Jt @ G_cov2d @ J
    G_J = 2.0 * G_cov2d @ J @ ctx.cov_cam

    # camera-frame covariance -> world covariance and target rotation
    G_sigma = R.T @ G_cc @ R
    Mx = ctx.cov_cam @ np.swapaxes(G_cc, 1, 2) - np.swapaxes(G_cc, 1, 2) @ ctx.cov_cam
    g_pose[3:] += np.stack([Mx[:, 1, 2] - Mx[:, 2, 1], Mx[:, 2, 0] - Mx[:, 0, 2],
                            Mx[:, 0, 1] - Mx[:, 1, 0]], -1).sum(axis=0)

    # world covariance -> scale and rotation of the Gaussian
    Mm = ctx.Rq * ctx.scales[:, None, :]
    G_M = 2.0 * G_sigma @ Mm
    g_s = np.sum(G_M * ctx.Rq, axis=1)
    g_scale_raw = g_s * ctx.scales
    G_Rq = G_M * ctx.scales[:, None, :]
    qnorm = np.linalg.norm(ctx.quats, axis=1, keepdims=True)
    qn = ctx.quats / qnorm
    g_qn = np.einsum("nkij,nij->nk", _quat_rot_derivs(qn), G_Rq)
    g_quat = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / qnorm

    # projection -> camera-frame point and intrinsics
    x, y, zs = ctx.p[:, 0], ctx.p[:, 1], ctx.zs
    fx, fy = k.fx, k.fy
    # J[:, i, 2] = -f * clamp(x/z) / z: with the clamp active it depends on z only
    # (f * limit is fixed by the image size), otherwise on x, z and f
    free = ~ctx.clamped
    gj02 = G_J[:, 0, 2] * J[:, 0, 2]
    gj12 = G_J[:, 1, 2] * J[:, 1, 2]
    g_p = np.zeros((n, 3))
    g_p[:, 0] = g_mu[:, 0] * fx / zs - free[:, 0] * G_J[:, 0, 2] * fx / zs**2
    g_p[:, 1] = g_mu[:, 1] * fy / zs - free[:, 1] * G_J[:, 1, 2] * fy / zs**2
    g_p[:, 2] = (g_z - g_mu[:, 0] * fx * x / zs**2 - g_mu[:, 1] * fy * y / zs**2
                 - G_J[:, 0, 0] * fx / zs**2 - np.where(free[:, 0], 2.0, 1.0) * gj02 / zs
                 - G_J[:, 1, 1] * fy / zs**2 - np.where(free[:, 1], 2.0, 1.0) * gj12 / zs)
    g_K[0] += np.sum(g_mu[:, 0] * x / zs) + np.sum(G_J[:, 0, 0] * J[:, 0, 0] + free[:, 0] * gj02) / fx
    g_K[1] += np.sum(g_mu[:, 1] * y / zs) + np.sum(G_J[:, 1, 1] * J[:, 1, 1] + free[:, 1] * gj12) / fy
    g_K[2] += np.sum(g_mu[:, 0])
    g_K[3] += np.sum(g_mu[:, 1])
    g_p[~ctx.valid] = 0.0

    # camera-frame point -> world mean and target extrinsics
    g_means += g_p @ R
    g_pose[:3] += g_p.sum(axis=0)
    g_pose[3:] += np.cross(ctx.p, g_p).sum(axis=0)

    bundle = GradientBundle(quat=g_quat, sh=g_sh, scale=g_scale_raw, opacity=g_op_raw,
                            pose=g_pose, intrinsics=g_K)
    if isinstance(g, GaussianCloud):
        bundle.means = g_means
        return bundle

    # pixel-aligned means -> ray distance, reference cameras and intrinsics
    Rsrc, _, n_cam, dirs = g._ray_parts(k)
    d = g.depth
    bundle.d = np.sum(g_means * dirs, axis=1) * sigmoid(g.d_raw)
    Rg = np.einsum("nij,nj->ni", Rsrc, g_means)
    sv = np.asarray(g.source_view)
    g_ref = np.zeros((g.k_ref, 6))
    np.add.at(g_ref[:, :3], sv, -Rg)
    np.add.at(g_ref[:, 3:], sv, -d[:, None] * np.cross(n_cam, Rg))
    bundle.ref_poses = g_ref
    g_ncam = d[:, None] * Rg
    u = g.source_pixel[:, 0] + 0.5
    v = g.source_pixel[:, 1] + 0.5
    r = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(n)], -1)
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    g_r = (g_ncam - n_cam * np.sum(n_cam * g_ncam, axis=1, keepdims=True)) / rn
    g_K[0] += np.sum(g_r[:, 0] * -(u - k.cx) / k.fx**2)
    g_K[1] += np.sum(g_r[:, 1] * -(v - k.cy) / k.fy**2)
    g_K[2] += np.sum(g_r[:, 0] * -1.0 / k.fx)
    g_K[3] += np.sum(g_r[:, 1] * -1.0 / k.fy)
    return bundle
