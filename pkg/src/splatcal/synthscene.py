"""Synthetic ground-truth scenes and on-disk image sequences.

A :class:`SyntheticScene` holds authored Gaussians, intrinsics and an orbit
trajectory.  :func:`render_dataset` writes it as PNG frames plus an eval-only
ground-truth sidecar (cameras JSON and float32 depth maps), and
:func:`load_sequence` reads such a directory back.  Directories holding only
PNG frames are accepted too, with no ground truth attached.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .curriculum import GeometricOverlap, SemanticOverlap
from .errors import ConfigError, ManifestError, MissingGroundTruth
from .geometry import CameraIntrinsics, CameraPose, quat_to_rot, rot_to_quat
from .splat import GaussianCloud, logit, render, rgb_to_dc

PRESETS = ("box", "textured-plane", "cluster")
MANIFEST = "manifest.json"
GT_CAMERAS = "gt_cameras.json"
DEPTH_MAGIC = b"DPTH"
MIN_DEPTH_ALPHA = 0.5


@dataclass(eq=False)
class SyntheticScene:
    gaussians: GaussianCloud
    intrinsics: CameraIntrinsics
    poses: list
    preset: str
    seed: int
    span_deg: float = 0.0

    def __len__(self):
        return len(self.poses)


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> CameraPose:
    """World-to-camera pose at ``center`` looking at ``target`` (camera y points down)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose.from_rt(R, -R @ center)


def orbit(n_views, span_deg, radius, look=(0.0, 0.0, 0.0), height=0.0) -> list:
    """Cameras on a horizontal arc around ``look``, evenly spaced in angle."""
    look = np.asarray(look, dtype=np.float64)
    if n_views == 1:
        angles = np.zeros(1)
    else:
        angles = np.deg2rad(np.linspace(-span_deg / 2, span_deg / 2, n_views))
    return [look_at(look + np.array([radius * np.sin(a), height, -radius * np.cos(a)]), look)
            for a in angles]


def _axis_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return np.r_[np.cos(angle / 2), np.sin(angle / 2) * axis]


def _texture(a, b, rng, phase, base):
    """Smooth bands plus per-splat jitter, kept inside (0.05, 0.95)."""
    f = rng.uniform(1.5, 4.0, 2)
    pat = (0.22 * np.sin(2 * np.pi * f[0] * a + phase[0])[:, None] * np.array([1.0, 0.6, 0.2])
           + 0.22 * np.cos(2 * np.pi * f[1] * b + phase[1])[:, None] * np.array([0.2, 0.7, 1.0]))
    checker = ((np.floor(a * 6) + np.floor(b * 6)) % 2)[:, None] * 0.12
    rgb = base + pat + checker + rng.normal(0, 0.06, (a.size, 3))
    return np.clip(rgb, 0.05, 0.95)


def _panel(rng, n, half, center, normal_axis, sign, scale_frac=0.6, thin=0.004, flat=None):
    """An ``n x n`` grid of flat splats on the face ``x[normal_axis] = center``."""
    g = (np.arange(n) + 0.5) / n * 2 * half - half
    a, b = [x.ravel() for x in np.meshgrid(g, g)]
    pts = np.zeros((a.size, 3))
    tang = [ax for ax in range(3) if ax != normal_axis]
    pts[:, tang[0]] = a
    pts[:, tang[1]] = b
    pts[:, normal_axis] = center
    spacing = 2 * half / n
    # rotate the splat's thin local z axis onto the face normal
    if normal_axis == 2:
        q = np.array([1.0, 0, 0, 0])
    elif normal_axis == 0:
        q = _axis_quat([0, 1, 0], np.pi / 2)
    else:
        q = _axis_quat([1, 0, 0], np.pi / 2)
    if flat is None:
        rgb = _texture(a, b, rng, rng.uniform(0, 2 * np.pi, 2), rng.uniform(0.3, 0.6, 3))
    else:
        rgb = np.tile(np.asarray(flat, dtype=np.float64), (a.size, 1))
    scale = np.tile([scale_frac * spacing, scale_frac * spacing, thin], (a.size, 1))
    return pts, np.tile(q, (a.size, 1)), rgb, scale


def _cloud(parts, opacity, dtype=np.float64) -> GaussianCloud:
    pts, quats, rgb, scale = (np.concatenate(x) for x in zip(*parts))
    n = pts.shape[0]
    return GaussianCloud(
        means=pts.astype(dtype), quats=quats.astype(dtype),
        sh=rgb_to_dc(rgb)[:, None, :].astype(dtype),
        scale_raw=np.log(scale).astype(dtype),
        opacity_raw=np.full(n, float(logit(opacity)), dtype=dtype))


def _box(rng, half=0.6, n=18):
    parts = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            # the ceiling is deliberately flat and low-texture
            flat = (0.75, 0.74, 0.70) if (axis == 1 and sign < 0) else None
            parts.append(_panel(rng, n, half, sign * half, axis, sign, flat=flat))
    return _cloud(parts, 0.98)


def _plane(rng, half=1.5, n=48, z=0.6):
    return _cloud([_panel(rng, n, half, z, 2, 1.0)], 0.98)


def _blobs(rng, count=500, radius=0.35):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * radius * rng.uniform(0, 1, (count, 1)) ** (1 / 3)
    q = rng.normal(size=(count, 4))
    rgb = rng.uniform(0.1, 0.9, (count, 3))
    scale = np.exp(rng.normal(np.log(0.035), 0.3, (count, 3)))
    return _cloud([(pts, q, rgb, scale)], 0.9)


_PRESET_CAMERA = {
    # (orbit radius, default angular span in degrees, camera height, look-at z)
    "box": (0.95, 40.0, -0.05, 0.6),
    "textured-plane": (0.4, 30.0, 0.0, 0.0),
    "cluster": (1.0, 60.0, -0.1, 0.0),
}


def gen_scene(preset: str, n_views: int, seed: int = 0, span_deg: float | None = None,
              width: int = 64, height: int = 64, fov_deg: float = 60.0) -> SyntheticScene:
    """Author a preset scene with a uniform orbit of ``n_views`` cameras.

    ``box`` is the inside of a room of six textured walls (one flat), seen
    from an arc centered on the far wall,
    ``textured-plane`` a single large wall, ``cluster`` 500 random blobs.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    if n_views < 2:
        raise ConfigError(f"need at least 2 views, got {n_views}")
    rng = np.random.default_rng(seed)
    g = {"box": _box, "textured-plane": _plane, "cluster": _blobs}[preset](rng)
    radius, span0, cam_h, look_z = _PRESET_CAMERA[preset]
    span = span0 if span_deg is None else float(span_deg)
    poses = orbit(n_views, span, radius, look=(0.0, 0.0, look_z), height=cam_h)
    k = CameraIntrinsics.from_fov(width, height, fov_deg)
    for i, p in enumerate(poses):
        if not np.any(p.apply(g.means)[:, 2] > 0):
            raise ConfigError(f"view {i} sees no Gaussian")
    return SyntheticScene(g, k, poses, preset, seed, span)


# -- binary depth maps -------------------------------------------------------

def write_depth(path, depth) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<II", h, w))
        f.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12 or head[:4] != DEPTH_MAGIC:
            raise ManifestError(f"{path}: not a depth map (bad magic)")
        h, w = struct.unpack("<II", head[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w:
        raise ManifestError(f"{path}: expected {h * w} depth values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_png(path, rgb) -> None:
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# -- sequences -----------------------------------------------------------------

@dataclass
class GroundTruth:
    """Eval-only sidecar: never consumed by the fitting code."""

    intrinsics: CameraIntrinsics
    poses: list
    depth_paths: list = field(default_factory=list)

    def depth(self, i) -> np.ndarray:
        if not self.depth_paths:
            raise MissingGroundTruth("sequence has no ground-truth depth")
        return read_depth(self.depth_paths[i])


class _LazyFrames:
    def __init__(self, load, n):
        self._load, self._n = load, n

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        return self._load(i)


@dataclass(eq=False)
class SceneSequence:
    frames: list  # image paths in index order
    width: int
    height: int
    gt: GroundTruth | None = None
    manifest_path: Path | None = None
    name: str = "sequence"
    preset: str | None = None
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.frames)

    def image(self, i) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = read_png(self.frames[i])
        return self._cache[i]

    @property
    def images(self):
        return _LazyFrames(self.image, len(self))

    def require_gt(self) -> GroundTruth:
        if self.gt is None:
            raise MissingGroundTruth(f"sequence {self.name!r} has no ground-truth sidecar")
        return self.gt

    def semantic_provider(self, embeddings=None) -> SemanticOverlap:
        return SemanticOverlap(self.images, embeddings)

    def geometric_provider(self) -> GeometricOverlap:
        gt = self.require_gt()
        if not gt.depth_paths:
            raise MissingGroundTruth(f"sequence {self.name!r} has no ground-truth depth")
        return GeometricOverlap(gt.intrinsics, gt.poses, _LazyFrames(gt.depth, len(self)))


def write_cameras(path, k: CameraIntrinsics, poses) -> None:
    doc = {"eval_only": True, "intrinsics": k.to_json(), "poses": [p.to_json() for p in poses]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_cameras(path):
    doc = json.loads(Path(path).read_text())
    try:
        return (CameraIntrinsics.from_json(doc["intrinsics"]),
                [CameraPose.from_json(p) for p in doc["poses"]])
    except KeyError as e:
        raise ManifestError(f"{path}: camera file lacks field {e.args[0]!r}") from None


def render_dataset(scene: SyntheticScene, out_dir) -> SceneSequence:
    """Render every trajectory view and write frames, depth maps and sidecars."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    frames, depths = [], []
    k = scene.intrinsics
    for i, pose in enumerate(scene.poses):
        r = render(scene.gaussians, k, pose)
        fname, dname = f"frame_{i:05d}.png", f"depth_{i:05d}.bin"
        depth = np.where(r.alpha >= MIN_DEPTH_ALPHA, r.depth, 0.0)
        try:
            write_png(out / fname, r.rgb)
            write_depth(out / dname, depth)
        except OSError as e:
            raise OSError(f"writing view {i} to {out}: {e}") from e
        frames.append(fname)
        depths.append(dname)
    write_cameras(out / GT_CAMERAS, k, scene.poses)
    manifest = {"frames": frames, "width": k.width, "height": k.height,
                "gt_cameras": GT_CAMERAS, "gt_depth": depths,
                "preset": scene.preset, "seed": scene.seed}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return load_sequence(out)


def _field(manifest, name, path, kind):
    if name not in manifest:
        raise ManifestError(f"{path}: manifest lacks field {name!r}")
    if not isinstance(manifest[name], kind):
        raise ManifestError(f"{path}: manifest field {name!r} has the wrong type")
    return manifest[name]


def load_sequence(directory) -> SceneSequence:
    """Read a sequence directory written by :func:`render_dataset`, or a bare
    directory of PNG frames (sorted by name, no ground truth)."""
    root = Path(directory)
    mpath = root / MANIFEST
    if not mpath.exists():
        pngs = sorted(root.glob("*.png"))
        if len(pngs) < 2:
            raise ManifestError(f"{root}: no manifest and fewer than two PNG frames")
        with Image.open(pngs[0]) as im:
            w, h = im.size
        return SceneSequence(pngs, w, h, None, None, root.name)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{mpath}: invalid JSON ({e})") from None
    names = _field(manifest, "frames", mpath, list)
    width = _field(manifest, "width", mpath, int)
    height = _field(manifest, "height", mpath, int)
    if len(names) < 2:
        raise ManifestError(f"{mpath}: field 'frames' lists {len(names)} frames, need at least 2")
    frames = [root / n for n in names]
    missing = [str(f.name) for f in frames if not f.exists()]
    on_disk = len(list(root.glob("*.png")))
    if missing or on_disk != len(frames):
        raise ManifestError(f"{mpath}: field 'frames' lists {len(frames)} frames but "
                            f"{on_disk} PNGs are on disk" + (f" (missing {missing[:3]})" if missing else ""))
    gt = None
    if manifest.get("gt_cameras"):
        cpath = root / manifest["gt_cameras"]
        if not cpath.exists():
            raise ManifestError(f"{mpath}: field 'gt_cameras' points to missing {cpath.name}")
        k, poses = read_cameras(cpath)
        if len(poses) != len(frames):
            raise ManifestError(f"{mpath}: field 'gt_cameras' has {len(poses)} poses for {len(frames)} frames")
        if (k.width, k.height) != (width, height):
            raise ManifestError(f"{mpath}: fields 'width'/'height' disagree with the camera file")
        dpaths = [root / d for d in manifest.get("gt_depth") or []]
        if dpaths and len(dpaths) != len(frames):
            raise ManifestError(f"{mpath}: field 'gt_depth' has {len(dpaths)} maps for {len(frames)} frames")
        gt = GroundTruth(k, poses, dpaths)
    return SceneSequence(frames, width, height, gt, mpath, root.name,
                         manifest.get("preset"), manifest.get("seed"))


def rotation_between(a: CameraPose, b: CameraPose) -> np.ndarray:
    """Relative rotation taking camera ``a``'s frame to camera ``b``'s."""
    return quat_to_rot(b.quat) @ quat_to_rot(a.quat).T


__all__ = ["PRESETS", "SyntheticScene", "SceneSequence", "GroundTruth", "gen_scene",
           "render_dataset", "load_sequence", "look_at", "orbit", "read_depth", "write_depth",
           "read_png", "write_png", "read_cameras", "write_cameras", "rot_to_quat"]
