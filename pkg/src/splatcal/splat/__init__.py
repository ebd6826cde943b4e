"""Differentiable Gaussian splatting: forward rendering and analytic adjoints."""

from .backend import get_backend, set_backend, set_num_threads
from .raster import (
    DEFAULT_OPTIONS,
    GaussianCloud,
    GaussianSet,
    GradientBundle,
    RenderOptions,
    RenderOutput,
    build_covariance,
    logit,
    project_gaussian,
    render,
    render_backward,
    render_bruteforce,
    sigmoid,
    softplus,
    softplus_inv,
)
from .io import load_checkpoint, save_checkpoint
from .sh import eval_sh, num_coeffs, rgb_to_dc, sh_basis

__all__ = [
    "DEFAULT_OPTIONS", "GaussianCloud", "GaussianSet", "GradientBundle", "RenderOptions",
    "RenderOutput", "build_covariance", "eval_sh", "get_backend", "load_checkpoint", "logit",
    "num_coeffs",
    "project_gaussian", "render", "render_backward", "render_bruteforce", "rgb_to_dc",
    "save_checkpoint", "set_backend", "set_num_threads", "sh_basis", "sigmoid", "softplus", "softplus_inv",
]
