"""Visual-overlap curriculum: triplet labeling, spacing profiles and window sampling.

A sequence is labeled once with an :class:`OverlapProfile` mapping frame
spacing to mean triplet overlap.  During fitting, training progress ``s``
sets a target overlap, the profile converts it into a (real-valued) frame
spacing, and a window of ``V`` frames with that spacing is drawn.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyProfile, MissingGroundTruth, SequenceTooShort

log = logging.getLogger(__name__)

DEFAULT_TRIPLETS = 8
DEPTH_CONSISTENCY = 0.05


# -- providers -----------------------------------------------------------------

def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


def _area_resize(x, out_h, out_w):
    h, w = x.shape
    rows = np.minimum((np.arange(h) * out_h) // h, out_h - 1)
    cols = np.minimum((np.arange(w) * out_w) // w, out_w - 1)
    acc = np.zeros((out_h, out_w))
    cnt = np.zeros((out_h, out_w))
    np.add.at(acc, (rows[:, None], cols[None, :]), x)
    np.add.at(cnt, (rows[:, None], cols[None, :]), 1.0)
    return acc / np.maximum(cnt, 1.0)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def semantic_descriptor(img, grid=16, bins=8) -> np.ndarray:
    """Pooled luminance (grid x grid) plus a magnitude-weighted gradient
    orientation histogram; each part and the concatenation are L2-normalized."""
    lum = luminance(img)
    pooled = _area_resize(lum, grid, grid).ravel()
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    idx = np.minimum((ang / (2 * np.pi) * bins).astype(int), bins - 1)
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)
    return _unit(np.concatenate([_unit(pooled), _unit(hist)]))


def cosine_overlap(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if (na == 0 and nb == 0) else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


class SemanticOverlap:
    """Descriptor cosine similarity, clamped to [0, 1].

    ``frames`` is anything indexable by frame number returning an image;
    ``embeddings`` (``(count, dim)``) replaces the built-in descriptor.
    """

    tag = "semantic"

    def __init__(self, frames=None, embeddings=None):
        if frames is None and embeddings is None:
            raise ValueError("need frames or embeddings")
        self.frames = frames
        self.embeddings = None if embeddings is None else np.asarray(embeddings, dtype=np.float64)
        self._cache = {}

    def descriptor(self, i):
        if self.embeddings is not None:
            return self.embeddings[i]
        if i not in self._cache:
            self._cache[i] = semantic_descriptor(self.frames[i])
        return self._cache[i]

    def __call__(self, i, j) -> float:
        if i == j:
            return 1.0
        return cosine_overlap(self.descriptor(i), self.descriptor(j))


class GeometricOverlap:
    """Ground-truth covisibility: fraction of frame ``i``'s valid pixels whose
    3D point lands inside frame ``j`` with consistent depth."""

    tag = "geometric"

    def __init__(self, intrinsics, poses, depths, tol=DEPTH_CONSISTENCY):
        if intrinsics is None or poses is None or depths is None:
            raise MissingGroundTruth("geometric overlap needs GT intrinsics, poses and depth")
        self.k = intrinsics
        self.poses = poses
        self.depths = depths
        self.tol = tol

    def __call__(self, i, j) -> float:
        if i == j:
            return 1.0
        k = self.k
        di = np.asarray(self.depths[i], dtype=np.float64)
        dj = np.asarray(self.depths[j], dtype=np.float64)
        v, u = np.nonzero(di > 0)
        if u.size == 0:
            return 0.0
        z = di[v, u]
        cam = np.stack([(u + 0.5 - k.cx) / k.fx * z, (v + 0.5 - k.cy) / k.fy * z, z], -1)
        Pi, Pj = self.poses[i], self.poses[j]
        world = (cam - Pi.trans) @ Pi.R
        pj = world @ Pj.R.T + Pj.trans
        zj = pj[:, 2]
        ok = zj > 1e-9
        zsafe = np.where(ok, zj, 1.0)
        uj = np.floor(k.fx * pj[:, 0] / zsafe + k.cx)
        vj = np.floor(k.fy * pj[:, 1] / zsafe + k.cy)
        ok &= (uj >= 0) & (uj < k.width) & (vj >= 0) & (vj < k.height)
        hit = np.zeros(u.size, dtype=bool)
        ui, vi = uj[ok].astype(int), vj[ok].astype(int)
        ref = dj[vi, ui]
        hit[ok] = (ref > 0) & (np.abs(zj[ok] - ref) < self.tol * np.where(ref > 0, ref, 1.0))
        return float(hit.mean())


def pairwise_overlap(provider, frame_i: int, frame_j: int) -> float:
    return float(np.clip(provider(frame_i, frame_j), 0.0, 1.0))


def write_embeddings(path, embeddings) -> None:
    """Sidecar: little-endian ``uint32 count, uint32 dim`` then float32 rows."""
    e = np.ascontiguousarray(embeddings, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *e.shape))
        f.write(e.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        count, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * dim:
        raise ValueError(f"{path}: expected {count * dim} floats, found {data.size}")
    return data.reshape(count, dim).astype(np.float64)


# -- profiles ------------------------------------------------------------------

@dataclass
class OverlapProfile:
    sequence: str
    grid: list
    values: list
    provider: str = "semantic"
    n_triplets: int = DEFAULT_TRIPLETS
    seed: int = 0
    raw_values: list = field(default_factory=list)

    def __post_init__(self):
        if list(self.grid) != sorted(set(self.grid)):
            raise ValueError("spacing grid must be strictly increasing")
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values differ in length")

    def isotonized(self) -> "OverlapProfile":
        vals = np.minimum.accumulate(np.asarray(self.values, dtype=np.float64)).tolist()
        return OverlapProfile(self.sequence, list(self.grid), vals, self.provider,
                              self.n_triplets, self.seed, list(self.raw_values or self.values))

    def to_json(self) -> dict:
        return {"sequence": self.sequence, "provider": self.provider,
                "grid": [int(g) for g in self.grid], "values": [float(v) for v in self.values],
                "n_triplets": int(self.n_triplets), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, d: dict) -> "OverlapProfile":
        return cls(d["sequence"], [int(g) for g in d["grid"]], [float(v) for v in d["values"]],
                   d.get("provider", "semantic"), int(d.get("n_triplets", DEFAULT_TRIPLETS)),
                   int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "OverlapProfile":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_spacings(length: int) -> list:
    """Powers of two ``1, 2, 4, ...`` up to ``length / 2``."""
    if length < 2:
        return [1]
    return [2**k for k in range(int(np.floor(np.log2(length / 2))) + 1)]


def triplet_overlap(o_first: float, o_second: float) -> float:
    """Mean of the two consecutive pairwise overlaps of a frame triplet."""
    return 0.5 * (o_first + o_second)


def label_profile(seq, provider, spacings=None, n_triplets: int = DEFAULT_TRIPLETS,
                  seed: int = 0, name: str | None = None) -> OverlapProfile:
    """Label one sequence: mean triplet overlap per spacing, then isotonized.

    Spacings too long for the sequence (``2 * dt >= len(seq)``) are skipped.
    Each triplet start is drawn from its own generator keyed by
    ``(seed, dt, triplet)``, so the result does not depend on evaluation order.
    """
    length = len(seq)
    spacings = default_spacings(length) if spacings is None else sorted(int(s) for s in spacings)
    grid, values = [], []
    for dt in spacings:
        if dt < 1 or 2 * dt >= length:
            continue
        tri = []
        for t in range(n_triplets):
            i = int(np.random.default_rng([seed, dt, t]).integers(0, length - 2 * dt))
            tri.append(triplet_overlap(pairwise_overlap(provider, i, i + dt),
                                       pairwise_overlap(provider, i + dt, i + 2 * dt)))
        grid.append(dt)
        values.append(float(np.mean(tri)))
    if not grid:
        raise SequenceTooShort(f"sequence of length {length} admits none of the spacings {spacings}")
    if name is None:
        name = getattr(seq, "name", "sequence")
    tag = getattr(provider, "tag", type(provider).__name__)
    return OverlapProfile(name, grid, values, tag, n_triplets, seed, list(values)).isotonized()


# -- schedule and sampling -------------------------------------------------------

@dataclass(frozen=True)
class CurriculumSchedule:
    """Target-overlap schedule.

    ``mode`` is ``"overlap"`` (linear decay from ``o_max`` to ``o_min``),
    ``"none"`` (target drawn uniformly from ``[o_min, o_max]`` throughout) or
    ``"interval"`` (frame spacing grows linearly up to ``max_interval``,
    ignoring overlap).
    """

    o_min: float = 0.5
    o_max: float = 1.0
    warm_steps: int = 1
    mode: str = "overlap"
    max_interval: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.o_min <= self.o_max <= 1.0:
            raise ValueError(f"need 0 <= o_min <= o_max <= 1, got {self.o_min}, {self.o_max}")
        if self.mode not in ("overlap", "none", "interval"):
            raise ValueError(f"unknown curriculum mode {self.mode!r}")

    def progress(self, step: int) -> float:
        if self.warm_steps <= 0:
            return 1.0
        return float(min(1.0, max(0.0, step / self.warm_steps)))


GEOMETRIC_SCHEDULE = CurriculumSchedule(0.5, 1.0)
SEMANTIC_SCHEDULE = CurriculumSchedule(0.75, 1.0)


def target_overlap(schedule: CurriculumSchedule, s: float) -> float:
    if not 0.0 <= s <= 1.0:
        log.warning("curriculum progress %s outside [0, 1]; clamping", s)
        s = min(1.0, max(0.0, s))
    return s * schedule.o_min + (1.0 - s) * schedule.o_max


def lookup_spacing(profile: OverlapProfile, o_target: float) -> float:
    """Real-valued spacing at which the (isotonized) profile reaches ``o_target``."""
    grid = np.asarray(profile.grid, dtype=np.float64)
    vals = np.asarray(profile.values, dtype=np.float64)
    if grid.size == 0:
        raise EmptyProfile(f"profile {profile.sequence!r} is empty")
    if o_target >= vals[0]:
        return float(grid[0])
    if o_target <= vals[-1]:
        # first entry at the floor value: smallest spacing on a trailing flat run
        return float(grid[int(np.flatnonzero(vals <= vals[-1])[0])])
    b = int(np.flatnonzero(vals <= o_target)[0])
    a = b - 1
    frac = (vals[a] - o_target) / (vals[a] - vals[b])
    return float(grid[a] + frac * (grid[b] - grid[a]))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def window_indices(start: int, dt: float, V: int) -> list:
    idx = []
    for k in range(V):
        i = start + _round_half_up(k * dt)
        if idx and i <= idx[-1]:
            i = idx[-1] + 1
        idx.append(i)
    return idx


def sample_window(seq, profile: OverlapProfile | None, schedule: CurriculumSchedule,
                  s: float, V: int, rng) -> list:
    """Draw ``V`` increasing frame indices whose spacing follows the curriculum."""
    if V < 2:
        raise ValueError("a window needs at least two views")
    length = seq if isinstance(seq, (int, np.integer)) else len(seq)
    if schedule.mode == "interval":
        dt = 1.0 + min(1.0, max(0.0, s)) * (schedule.max_interval - 1.0)
        dt_min = 1.0
    else:
        if profile is None:
            raise EmptyProfile("overlap curricula need an OverlapProfile")
        if schedule.mode == "none":
            o = float(rng.uniform(schedule.o_min, schedule.o_max))
        else:
            o = target_overlap(schedule, s)
        dt = lookup_spacing(profile, o)
        dt_min = float(profile.grid[0])
    if (V - 1) * dt_min > length - 1:
        raise SequenceTooShort(f"{V} views at spacing {dt_min} need {(V - 1) * dt_min + 1} "
                               f"frames, sequence has {length}")
    dt = min(dt, (length - 1) / (V - 1))
    span = _round_half_up((V - 1) * dt)
    start = int(rng.integers(0, length - span)) if length - span > 0 else 0
    idx = window_indices(start, dt, V)
    if idx[-1] > length - 1:
        idx = window_indices(length - 1 - idx[-1] + start, dt, V)
    return idx
