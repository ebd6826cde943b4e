"""Central finite-difference check of every analytic adjoint of the renderer.

Scenes are drawn so the loss is smooth at the sample point: every
pixel/Gaussian alpha stays clear of the ``alpha_min`` cutoff and the
``alpha_max`` clamp, colors stay inside (0, 1), and depths are well separated
so no perturbation can reorder the compositing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, CameraPose, perturb_left
from .raster import (DEFAULT_OPTIONS, GaussianSet, RenderOptions, _prepare, render,
                     render_backward)
from .sh import num_coeffs

_MARGIN = 0.02
_PARAMS = ("d_raw", "quats", "sh", "scale_raw", "opacity_raw")
_BUNDLE_NAME = {"d_raw": "d", "quats": "quat", "sh": "sh", "scale_raw": "scale",
                "opacity_raw": "opacity"}


@dataclass
class SceneCheck:
    seed: int
    precision: str
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def _is_smooth(g, k, pose, opts):
    ctx = _prepare(g, k, pose, opts)
    if not ctx.valid.all():
        return False
    z = np.sort(ctx.zs)
    if np.min(np.diff(z)) < 0.05:
        return False
    raw = ctx.colors
    if np.any(raw < _MARGIN) or np.any(raw > 1 - _MARGIN):
        return False
    py, px = np.mgrid[0:k.height, 0:k.width]
    for i in range(len(g)):
        dx = px + 0.5 - ctx.mean2d[i, 0]
        dy = py + 0.5 - ctx.mean2d[i, 1]
        A, B, C = ctx.conic[i]
        a = ctx.opac[i] * np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
        if np.any(a < opts.alpha_min * 3) or np.any(a > opts.alpha_max - _MARGIN):
            return False
    return True


def random_scene(rng, size=16, n_gauss=8, sh_degree=0, dtype=np.float64,
                 opts: RenderOptions = DEFAULT_OPTIONS, max_tries=500):
    """A smooth random pixel-aligned scene: two reference cameras, one target.

    Returns ``(gaussians, intrinsics, target_pose)``.
    """
    k_ref = 2
    per_view = n_gauss // k_ref
    side = int(np.sqrt(per_view))
    if k_ref * side * side != n_gauss:
        raise ValueError("n_gauss must be 2 * a square number")
    ncoef = num_coeffs(sh_degree)
    for _ in range(max_tries):
        f = rng.uniform(0.9, 1.3) * size
        k = CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), size / 2 + rng.uniform(-1, 1),
                             size / 2 + rng.uniform(-1, 1), size, size)
        refs = tuple(perturb_left(CameraPose(), np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3)])
                     for _ in range(k_ref))
        target = perturb_left(CameraPose(), np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3)])
        pix = rng.integers(3, size - 3, size=(n_gauss, 2))
        sh = np.zeros((n_gauss, ncoef, 3))
        sh[:, 0] = rng.uniform(0.3, 0.7, (n_gauss, 3)) / 0.28209479177387814
        if ncoef > 1:
            sh[:, 1:] = rng.normal(0, 0.05, (n_gauss, ncoef - 1, 3))
        g = GaussianSet(
            d_raw=rng.uniform(1.2, 3.0, n_gauss).astype(dtype),
            quats=rng.normal(size=(n_gauss, 4)).astype(dtype),
            sh=sh.astype(dtype),
            scale_raw=np.log(rng.uniform(0.7, 1.4, (n_gauss, 3))).astype(dtype),
            opacity_raw=rng.uniform(-1.0, 1.0, n_gauss).astype(dtype),
            source_view=np.repeat(np.arange(k_ref), per_view),
            source_pixel=pix, k_ref=k_ref, height=side, width=side,
            ref_poses=refs, sh_degree=sh_degree)
        if _is_smooth(g, k, target, opts):
            return g, k, target
    raise RuntimeError("could not draw a smooth scene")


def _loss(g, k, pose, w_rgb, w_depth, opts):
    out = render(g, k, pose, opts)
    return float(np.sum(w_rgb * out.rgb) + np.sum(w_depth * out.depth))


def _rel(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def check_scene(g, k, pose, rng, eps=1e-4, opts: RenderOptions = DEFAULT_OPTIONS,
                with_depth=True) -> dict:
    """Relative error of each adjoint block against central differences."""
    H, W = k.height, k.width
    w_rgb = rng.normal(size=(H, W, 3))
    w_depth = rng.normal(size=(H, W)) if with_depth else np.zeros((H, W))
    out = render(g, k, pose, opts)
    bundle = render_backward(out, w_rgb, w_depth if with_depth else None)
    errors = {}
    for name in _PARAMS:
        base = np.asarray(getattr(g, name))
        numeric = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] = base[idx] + eps
            minus[idx] = base[idx] - eps
            # steps are taken on the stored precision; divide by the realized step
            step = float(plus[idx]) - float(minus[idx])
            lp = _loss(g.with_params(**{name: plus}), k, pose, w_rgb, w_depth, opts)
            lm = _loss(g.with_params(**{name: minus}), k, pose, w_rgb, w_depth, opts)
            numeric[idx] = (lp - lm) / step
        errors[_BUNDLE_NAME[name]] = _rel(getattr(bundle, _BUNDLE_NAME[name]), numeric)

    numeric = np.zeros(6)
    for j, e in enumerate(np.eye(6)):
        lp = _loss(g, k, perturb_left(pose, eps * e), w_rgb, w_depth, opts)
        lm = _loss(g, k, perturb_left(pose, -eps * e), w_rgb, w_depth, opts)
        numeric[j] = (lp - lm) / (2 * eps)
    errors["pose"] = _rel(bundle.pose, numeric)

    numeric = np.zeros((g.k_ref, 6))
    for r in range(g.k_ref):
        for j, e in enumerate(np.eye(6)):
            ps = list(g.ref_poses)
            ps[r] = perturb_left(g.ref_poses[r], eps * e)
            lp = _loss(g.with_poses(ps), k, pose, w_rgb, w_depth, opts)
            ps[r] = perturb_left(g.ref_poses[r], -eps * e)
            lm = _loss(g.with_poses(ps), k, pose, w_rgb, w_depth, opts)
            numeric[r, j] = (lp - lm) / (2 * eps)
    errors["ref_poses"] = _rel(bundle.ref_poses, numeric)

    numeric = np.zeros(4)
    for j, e in enumerate(np.eye(4)):
        lp = _loss(g, k.with_vector(k.vector + eps * e), pose, w_rgb, w_depth, opts)
        lm = _loss(g, k.with_vector(k.vector - eps * e), pose, w_rgb, w_depth, opts)
        numeric[j] = (lp - lm) / (2 * eps)
    errors["intrinsics"] = _rel(bundle.intrinsics, numeric)
    return errors


TOLERANCE = {"f32": 1e-3, "f64": 1e-5}


def run_gradcheck(n_scenes=20, eps=1e-4, precisions=("f64", "f32"), seed=0,
                  size=16, n_gauss=8, sh_degrees=(0, 1)) -> dict:
    """Run the finite-difference suite; returns a JSON-ready report."""
    results = []
    for precision in precisions:
        dtype = np.float32 if precision == "f32" else np.float64
        for s in range(n_scenes):
            rng = np.random.default_rng([seed, s])
            degree = sh_degrees[s % len(sh_degrees)]
            g, k, pose = random_scene(rng, size=size, n_gauss=n_gauss, sh_degree=degree, dtype=dtype)
            check = SceneCheck(seed=s, precision=precision,
                               errors=check_scene(g, k, pose, rng, eps=eps))
            results.append(check)
    worst = {p: max((c.max_error for c in results if c.precision == p), default=0.0)
             for p in precisions}
    passed = all(worst[p] < TOLERANCE[p] for p in precisions)
    return {
        "passed": passed,
        "eps": eps,
        "n_scenes": n_scenes,
        "tolerance": {p: TOLERANCE[p] for p in precisions},
        "max_relative_error": worst,
        "scenes": [{"seed": c.seed, "precision": c.precision, "sh_degree": sh_degrees[c.seed % len(sh_degrees)],
                    "errors": c.errors} for c in results],
    }
