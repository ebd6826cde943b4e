"""Self-supervised joint optimization of cameras and pixel-aligned Gaussians.

Each window of frames is split into reference and target views.  Gaussians
are spawned from the reference pixels (placed along the rays of the current
reference cameras), rendered into the target cameras, and every quantity in
that chain -- Gaussian parameters, all extrinsics and the shared intrinsics --
is updated from the photometric loss on the targets.

Gauge: the first frame of each window keeps its current pose (frame 0 of the
sequence is the identity), and after every step the mean Gaussian depth is
renormalized to 1 by rescaling depths, Gaussian sizes and all camera
translations together.  Both leave the rendered images unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .curriculum import CurriculumSchedule, OverlapProfile, label_profile, sample_window
from .errors import ConfigError, NonFiniteLoss
from .geometry import CameraIntrinsics, CameraPose, compose, perturb_left
from .photometric import DEFAULT_LAMBDA, LossValue, photometric_loss
from .splat import GaussianSet, render, render_backward, rgb_to_dc, set_num_threads, softplus, softplus_inv

log = logging.getLogger(__name__)

GROUPS = ("gaussians", "extrinsics", "intrinsics")
_GAUSS_FIELDS = ("d_raw", "quats", "sh", "scale_raw", "opacity_raw")
_BUNDLE_FIELD = {"d_raw": "d", "quats": "quat", "sh": "sh", "scale_raw": "scale",
                 "opacity_raw": "opacity"}


@dataclass
class FitConfig:
    views: int = 10
    k_ref: int = 5
    lam: float = DEFAULT_LAMBDA
    windows: int = 1
    steps_per_window: int = 300
    lr_gaussians: float = 2.0
    lr_extrinsics: float = 1e-2
    lr_intrinsics: float = 1e-4
    lr_final_frac: float = 0.1  # cosine decay floor within each window
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-12
    clip_norm: float = 1.0
    skip_norm: float = 5.0
    curriculum: str = "overlap"  # "overlap", "none" or "interval"
    # overlap floor; None picks 0.75 for semantic-overlap curricula, else 0.5
    o_min: float | None = None
    o_max: float = 1.0
    warm_frac: float = 0.8  # fraction of windows over which progress goes 0 -> 1
    max_interval: float = 8.0
    seed: int = 0
    width: int | None = None
    height: int | None = None
    init_depth: float = 1.0
    init_fov_deg: float = 60.0
    optimize_intrinsics: bool = True
    warm_start: bool = False
    # SH colors stay at their reference-pixel values for this fraction of each
    # window, so early alignment must come from geometry and cameras
    color_freeze_frac: float = 0.5
    # cameras stay fixed for this leading fraction of each window while the
    # constant-depth initialization settles
    camera_freeze_frac: float = 0.1
    # coarse-to-fine: both images are blurred with a Gaussian whose sigma (px)
    # decays linearly to zero over this fraction of each window (0 disables)
    blur_sigma: float = 0.0
    blur_frac: float = 0.5
    perceptual: str = "proxy"
    threads: int = 1
    precision: str = "f64"  # storage type of the Gaussian parameters

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.k_ref < 2:
            raise ConfigError(f"k_ref must be at least 2, got {self.k_ref}")
        if not self.k_ref < self.views:
            raise ConfigError(f"need k_ref < views, got {self.k_ref} and {self.views}")
        for name in ("lr_gaussians", "lr_extrinsics", "lr_intrinsics"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.clip_norm < self.skip_norm:
            raise ConfigError("need 0 < clip_norm < skip_norm")
        if self.curriculum not in ("overlap", "none", "interval"):
            raise ConfigError(f"unknown curriculum {self.curriculum!r}")
        if self.windows < 0 or self.steps_per_window < 0:
            raise ConfigError("step counts must be non-negative")
        if not self.init_depth > 0:
            raise ConfigError("init_depth must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    @property
    def steps(self) -> int:
        return self.windows * self.steps_per_window

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def lr(self, group: str) -> float:
        return getattr(self, f"lr_{group}")

    def schedule(self, provider: str = "geometric") -> CurriculumSchedule:
        warm = max(1, int(round(self.warm_frac * max(self.windows - 1, 1))))
        o_min = self.o_min
        if o_min is None:
            o_min = 0.75 if provider == "semantic" and self.curriculum == "overlap" else 0.5
        return CurriculumSchedule(o_min, self.o_max, warm, self.curriculum, self.max_interval)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "FitConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            d = tomllib.loads(text)
            d = d.get("fit", d)
        else:
            d = json.loads(text)
        return cls.from_dict(d)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(eq=False)
class FitState:
    gaussians: GaussianSet
    cameras: list  # CameraPose per sequence frame
    intrinsics: CameraIntrinsics
    frames: list  # window frame indices, ascending
    ref: list  # positions into ``frames``
    tgt: list
    opt: AdamState = field(default_factory=AdamState)
    step: int = 0
    s: float = 0.0
    lr_scale: float = 1.0
    frozen: frozenset = frozenset()
    blur: float = 0.0

    @property
    def anchor(self) -> int:
        return self.frames[0]

    def window_poses(self) -> list:
        return [self.cameras[f] for f in self.frames]

    def synced(self) -> "FitState":
        """Refresh the Gaussians' reference cameras from ``cameras``."""
        self.gaussians = self.gaussians.with_poses([self.cameras[self.frames[r]] for r in self.ref])
        return self


@dataclass
class StepInfo:
    step: int
    loss: float
    grad_norm: float
    skipped: bool
    group_norms: dict
    update_norms: dict
    gauge_scale: float


@dataclass
class FitResult:
    state: FitState | None
    cameras: list
    intrinsics: CameraIntrinsics
    history: list
    diagnostics: list
    windows: list  # (frames, ref, tgt) per window
    visited: list
    wall_clock: float = 0.0

    def to_json(self, with_timing: bool = False) -> dict:
        out = {
            "loss_history": [float(x) for x in self.history],
            "skipped_steps": [d.step for d in self.diagnostics if d.skipped],
            "intrinsics": self.intrinsics.to_json(),
            "cameras": [p.to_json() for p in self.cameras],
            "visited": sorted(int(v) for v in self.visited),
            "windows": [{"frames": list(map(int, f)), "ref": list(map(int, r)), "tgt": list(map(int, t))}
                        for f, r, t in self.windows],
        }
        if with_timing:
            out["wall_clock"] = self.wall_clock
        return out


# -- building blocks -----------------------------------------------------------

def split_ref_tgt(indices, k_ref: int, rng):
    """Random disjoint reference/target partition; both window endpoints are references."""
    idx = list(indices)
    if k_ref < 2:
        raise ConfigError(f"k_ref must be at least 2, got {k_ref}")
    if k_ref >= len(idx):
        raise ConfigError(f"k_ref={k_ref} leaves no target among {len(idx)} views")
    middle = idx[1:-1]
    pick = rng.permutation(len(middle))[:k_ref - 2]
    chosen = {middle[i] for i in pick}
    ref = [idx[0]] + [x for x in middle if x in chosen] + [idx[-1]]
    tgt = [x for x in middle if x not in chosen]
    return ref, tgt


def init_gaussians(ref_images, k: CameraIntrinsics, poses, init_depth: float = 1.0,
                   dtype=np.float64) -> GaussianSet:
    """One Gaussian per reference pixel at constant depth, colored by its pixel."""
    imgs = np.asarray(ref_images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[0] != len(poses):
        raise ConfigError(f"expected {len(poses)} reference images, got shape {imgs.shape}")
    kr, H, W, _ = imgs.shape
    n = kr * H * W
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu.ravel(), vv.ravel()], -1)
    scale = init_depth * 2.0 / (k.fx + k.fy)
    return GaussianSet(
        d_raw=np.full(n, float(softplus_inv(init_depth)), dtype=dtype),
        quats=np.tile(np.array([1.0, 0.0, 0.0, 0.0], dtype=dtype), (n, 1)),
        sh=rgb_to_dc(imgs[..., :3].reshape(n, 3))[:, None, :].astype(dtype),
        scale_raw=np.full((n, 3), math.log(scale), dtype=dtype),
        opacity_raw=np.zeros(n, dtype=dtype),
        source_view=np.repeat(np.arange(kr), H * W),
        source_pixel=np.tile(pix, (kr, 1)),
        k_ref=kr, height=H, width=W, ref_poses=tuple(poses))


def intrinsics_to_unit(k: CameraIntrinsics) -> np.ndarray:
    return k.vector / np.array([k.width, k.height, k.width, k.height], dtype=np.float64)


def intrinsics_from_unit(theta, like: CameraIntrinsics) -> CameraIntrinsics:
    return like.with_vector(np.asarray(theta) * np.array([like.width, like.height,
                                                          like.width, like.height]))


def _cosine(frac: float, floor: float) -> float:
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, max(0.0, frac))))


def _adam_direction(opt: AdamState, name, grad, beta1, beta2, eps):
    m = opt.m.get(name)
    if m is None:
        m = np.zeros_like(grad)
        opt.v[name] = np.zeros_like(grad)
    v = opt.v[name]
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    opt.m[name], opt.v[name] = m, v
    mhat = m / (1.0 - beta1**opt.step)
    vhat = v / (1.0 - beta2**opt.step)
    return mhat / (np.sqrt(vhat) + eps)


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Row-normalized 1D Gaussian blur operator (truncated at 3 sigma)."""
    if sigma <= 0:
        return np.eye(n)
    x = np.arange(n)
    B = np.exp(-0.5 * ((x[:, None] - x[None, :]) / sigma) ** 2)
    B[np.abs(x[:, None] - x[None, :]) > 3 * sigma] = 0.0
    return B / B.sum(axis=1, keepdims=True)


def _blurred(img, Bh, Bw):
    return np.einsum("ij,jkc,lk->ilc", Bh, img, Bw)


def _blurred_adjoint(g, Bh, Bw):
    return np.einsum("ji,jkc,kl->ilc", Bh, g, Bw)


def _render_losses(state: FitState, tgt_imgs, config: FitConfig):
    """Loss averaged over target views plus the matching raw adjoints."""
    g, k = state.gaussians, state.intrinsics
    grads = {name: np.zeros(np.shape(getattr(g, name))) for name in _GAUSS_FIELDS}
    g_pose = {f: np.zeros(6) for f in state.frames}
    g_k = np.zeros(4)
    total = mse = percep = 0.0
    # fixed target order keeps the reduction deterministic
    for pos, img in zip(state.tgt, tgt_imgs):
        frame = state.frames[pos]
        out = render(g, k, state.cameras[frame])
        if state.blur > 0:
            Bh, Bw = blur_matrix(k.height, state.blur), blur_matrix(k.width, state.blur)
            lv = photometric_loss(_blurred(out.rgb, Bh, Bw), _blurred(img, Bh, Bw),
                                  config.lam, config.perceptual)
            lv.grad_image = _blurred_adjoint(lv.grad_image, Bh, Bw)
        else:
            lv = photometric_loss(out.rgb, img, config.lam, config.perceptual)
        w = 1.0 / len(state.tgt)
        if not np.isfinite(lv.total):
            raise NonFiniteLoss(f"non-finite loss on frame {frame}",
                                {"step": state.step, "frame": frame, "mse": lv.mse_term,
                                 "perceptual": lv.percep_term})
        total += w * lv.total
        mse += w * lv.mse_term
        percep += w * lv.percep_term
        b = render_backward(out, w * lv.grad_image)
        for name in _GAUSS_FIELDS:
            grads[name] += np.asarray(getattr(b, _BUNDLE_FIELD[name])).reshape(grads[name].shape)
        g_pose[frame] += b.pose
        for r, gr in zip(state.ref, b.ref_poses):
            g_pose[state.frames[r]] += gr
        g_k += b.intrinsics
    return LossValue(total, mse, percep, None), grads, g_pose, g_k


def _gauge_scale(state: FitState) -> float:
    """Rescale so the mean Gaussian depth is 1; returns the factor applied."""
    g = state.gaussians
    depth = softplus(g.d_raw)
    c = 1.0 / float(np.mean(depth))
    if abs(c - 1.0) < 1e-15:
        return 1.0
    dt = np.asarray(g.d_raw).dtype
    state.cameras = [CameraPose(p.quat, c * p.trans) for p in state.cameras]
    state.gaussians = g.with_params(d_raw=softplus_inv(c * depth).astype(dt),
                                    scale_raw=(np.asarray(g.scale_raw, dtype=np.float64) + math.log(c)).astype(dt))
    state.synced()
    return c


def fit_step(state: FitState, ref_imgs, tgt_imgs, config: FitConfig):
    """One clipped, skip-guarded Adam step on every parameter group.

    ``ref_imgs`` is accepted for interface symmetry; the reference colors are
    already baked into the Gaussians.  Returns ``(state, loss, info)``.
    """
    state.synced()
    loss, grads, g_pose, g_k = _render_losses(state, tgt_imgs, config)
    movable = [f for f in state.frames if f != state.anchor]
    k = state.intrinsics
    for name in _GAUSS_FIELDS:
        if name in state.frozen:
            grads[name] = np.zeros_like(grads[name])
    g_ext = np.stack([g_pose[f] for f in movable]) if movable else np.zeros((0, 6))
    g_unit = g_k * np.array([k.width, k.height, k.width, k.height])
    if "extrinsics" in state.frozen:
        g_ext = np.zeros_like(g_ext)
    if "intrinsics" in state.frozen or not config.optimize_intrinsics:
        g_unit = np.zeros(4)
    groups = {"gaussians": grads, "extrinsics": {"poses": g_ext}, "intrinsics": {"unit": g_unit}}
    group_norms = {gname: float(math.sqrt(sum(float(np.sum(a * a)) for a in arrs.values())))
                   for gname, arrs in groups.items()}
    norm = math.sqrt(sum(v * v for v in group_norms.values()))
    info = StepInfo(state.step, loss.total, norm, False, group_norms, {}, 1.0)
    if not math.isfinite(norm):
        raise NonFiniteLoss("non-finite gradient", {"step": state.step, "group_norms": group_norms})
    if norm > config.skip_norm:
        # skipped: no parameter change, no moment update, no bias-correction advance
        info.skipped = True
        state.step += 1
        return state, loss, info
    clip = min(1.0, config.clip_norm / norm) if norm > 0 else 1.0
    state.opt.step += 1
    updates = {}
    for gname, arrs in groups.items():
        eta = config.lr(gname) * state.lr_scale
        dirs = {name: _adam_direction(state.opt, f"{gname}.{name}", clip * a,
                                      config.beta1, config.beta2, config.adam_eps)
                for name, a in arrs.items()}
        raw = math.sqrt(sum(float(np.sum(d * d)) for d in dirs.values()))
        cap = eta * config.clip_norm
        factor = eta if eta * raw <= cap else cap / raw
        updates[gname] = {name: -factor * d for name, d in dirs.items()}
        info.update_norms[gname] = factor * raw

    g = state.gaussians
    new = {}
    for name in _GAUSS_FIELDS:
        cur = np.asarray(getattr(g, name))
        new[name] = (cur + updates["gaussians"][name].reshape(cur.shape)).astype(cur.dtype)
    state.gaussians = g.with_params(**new)
    cams = list(state.cameras)
    for f, xi in zip(movable, updates["extrinsics"]["poses"]):
        cams[f] = perturb_left(cams[f], xi)
    state.cameras = cams
    if config.optimize_intrinsics:
        theta = intrinsics_to_unit(k) + updates["intrinsics"]["unit"]
        state.intrinsics = intrinsics_from_unit(theta, k)
    state.synced()
    info.gauge_scale = _gauge_scale(state)
    state.step += 1
    return state, loss, info


# -- the outer loop ------------------------------------------------------------

def _load_frames(seq, config: FitConfig):
    n = len(seq)
    W = config.width or seq.width
    H = config.height or seq.height
    frames = []
    for i in range(n):
        img = seq.image(i) if hasattr(seq, "image") else np.asarray(seq[i], dtype=np.float64)
        if img.shape[:2] != (H, W):
            pil = Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
            img = np.asarray(pil.resize((W, H), Image.BOX), dtype=np.float64) / 255.0
        frames.append(img[..., :3])
    return frames, W, H


def coarse_to_fine(i: int, config: FitConfig) -> float:
    span = config.blur_frac * config.steps_per_window
    if config.blur_sigma <= 0 or span <= 0:
        return 0.0
    return config.blur_sigma * max(0.0, 1.0 - i / span)


def _nearest_known(frame, known) -> int | None:
    if not known:
        return None
    return min(known, key=lambda f: (abs(f - frame), f))


def regauge(poses) -> list:
    """Express poses relative to the first one (which becomes the identity)."""
    inv0 = poses[0].inverse()
    return [CameraPose(p.quat, p.trans) for p in (compose(q, inv0) for q in poses)]


def fit(seq, config: FitConfig, profile: OverlapProfile | None = None, init_poses=None,
        init_intrinsics: CameraIntrinsics | None = None, callback=None) -> FitResult:
    """Optimize cameras over windows drawn by the curriculum.

    ``init_poses`` (one per frame, any gauge) and ``init_intrinsics`` seed the
    cameras; without them frame 0 is the identity, other frames start from
    the pose of the nearest already-visited frame, and intrinsics from
    ``config.init_fov_deg``.
    """
    t0 = time.perf_counter()
    set_num_threads(config.threads)
    frames, W, H = _load_frames(seq, config)
    n = len(frames)
    if n < 2:
        raise ConfigError("sequence needs at least two frames")
    V = min(config.views, n)
    if config.k_ref >= V:
        raise ConfigError(f"k_ref={config.k_ref} needs more than {V} views")
    if init_intrinsics is not None:
        k = init_intrinsics.scaled(W, H) if (init_intrinsics.width, init_intrinsics.height) != (W, H) \
            else init_intrinsics
    else:
        k = CameraIntrinsics.from_fov(W, H, config.init_fov_deg)
    if init_poses is not None:
        if len(init_poses) != n:
            raise ConfigError(f"init_poses has {len(init_poses)} entries for {n} frames")
        cameras = regauge(list(init_poses))
        known = set(range(n))
    else:
        cameras = [CameraPose() for _ in range(n)]
        known = {0}
    if config.curriculum != "interval" and V < n and profile is None:
        profile = label_profile(frames, _semantic(frames), name=getattr(seq, "name", "sequence"),
                                seed=config.seed)
    schedule = config.schedule(profile.provider if profile is not None else "geometric")
    rng = np.random.default_rng(config.seed)
    history, diags, windows = [], [], []
    visited = set()
    state = None
    for w in range(config.windows):
        s = schedule.progress(w)
        if V == n:
            window = list(range(n))
        else:
            window = sample_window(n, profile, schedule, s, V, rng)
        ref_pos, tgt_pos = split_ref_tgt(range(V), config.k_ref, rng)
        for f in window:
            if f not in known:
                src = _nearest_known(f, known)
                cameras[f] = cameras[src] if src is not None else CameraPose()
        known.update(window)
        ref_imgs = [frames[window[r]] for r in ref_pos]
        tgt_imgs = [frames[window[t]] for t in tgt_pos]
        ref_poses = [cameras[window[r]] for r in ref_pos]
        if config.warm_start and state is not None and state.gaussians.k_ref == len(ref_pos):
            g = state.gaussians
        else:
            g = init_gaussians(ref_imgs, k, ref_poses, config.init_depth, dtype=config.dtype)
        state = FitState(g, cameras, k, window, ref_pos, tgt_pos, AdamState(),
                         state.step if state else 0, s)
        state.cameras = list(cameras)
        state.synced()
        for i in range(config.steps_per_window):
            state.lr_scale = _cosine(i / max(1, config.steps_per_window - 1), config.lr_final_frac)
            frozen = set()
            if i < config.color_freeze_frac * config.steps_per_window:
                frozen.add("sh")
            if i < config.camera_freeze_frac * config.steps_per_window:
                frozen.update(("extrinsics", "intrinsics"))
            state.frozen = frozenset(frozen)
            state.blur = coarse_to_fine(i, config)
            state, loss, info = fit_step(state, ref_imgs, tgt_imgs, config)
            history.append(loss.total)
            diags.append(info)
            if callback is not None:
                callback(state, loss, info)
        cameras, k = state.cameras, state.intrinsics
        visited.update(window)
        windows.append((window, [window[r] for r in ref_pos], [window[t] for t in tgt_pos]))
    return FitResult(state, list(cameras), k, history, diags, windows, sorted(visited),
                     time.perf_counter() - t0)


def _semantic(frames):
    from .curriculum import SemanticOverlap

    return SemanticOverlap(frames)


def render_views(state_or_gaussians, k: CameraIntrinsics, poses) -> list:
    g = state_or_gaussians.gaussians if isinstance(state_or_gaussians, FitState) else state_or_gaussians
    return [render(g, k, p).rgb for p in poses]
