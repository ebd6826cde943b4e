"""Pose and depth evaluation: relative pose accuracy, similarity alignment and
depth error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, EmptyMask, IndexMismatch
from .geometry import CameraPose, relative_pose, rotation_angle

DEFAULT_THRESHOLDS = (5.0, 15.0, 30.0)
_TINY_TRANSLATION = 1e-6


@dataclass
class PoseSet:
    poses: list
    indices: list = None

    def __post_init__(self):
        if self.indices is None:
            self.indices = list(range(len(self.poses)))
        self.indices = [int(i) for i in self.indices]
        if len(self.indices) != len(self.poses):
            raise IndexMismatch("pose and index lists differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise IndexMismatch("pose indices are not unique")

    def __len__(self):
        return len(self.poses)

    def by_index(self) -> dict:
        return dict(zip(self.indices, self.poses))


@dataclass
class RpaReport:
    thresholds: list
    accuracy: list
    n_pairs: int
    pairs: list = field(default_factory=list)  # (i, j, rot_err_deg, trans_err_deg)

    def at(self, threshold: float) -> float:
        return self.accuracy[self.thresholds.index(float(threshold))]

    def to_json(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "accuracy": {f"{t:g}": float(a) for t, a in zip(self.thresholds, self.accuracy)},
            "n_pairs": self.n_pairs,
            "pairs": [{"i": i, "j": j, "rot_err_deg": r, "trans_err_deg": t}
                      for i, j, r, t in self.pairs],
        }


def _as_poseset(p) -> PoseSet:
    return p if isinstance(p, PoseSet) else PoseSet(list(p))


def direction_angle(a, b) -> float:
    """Angle in degrees between two translation directions.

    Both near zero counts as agreement (0), exactly one near zero as 180.
    """
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    small_a, small_b = na < _TINY_TRANSLATION, nb < _TINY_TRANSLATION
    if small_a and small_b:
        return 0.0
    if small_a or small_b:
        return 180.0
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def pair_errors(pi: CameraPose, pj: CameraPose, gi: CameraPose, gj: CameraPose):
    """(rotation error, translation-direction error) in degrees for one pair."""
    rp, rg = relative_pose(pi, pj), relative_pose(gi, gj)
    rot = float(np.degrees(rotation_angle(rp.R @ rg.R.T)))
    return rot, direction_angle(rp.trans, rg.trans)


def rpa(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> RpaReport:
    """Fraction of unordered view pairs with both errors below each threshold."""
    pred, gt = _as_poseset(pred), _as_poseset(gt)
    if sorted(pred.indices) != sorted(gt.indices):
        raise IndexMismatch(f"prediction covers {sorted(pred.indices)}, ground truth {sorted(gt.indices)}")
    if len(pred) < 2:
        raise IndexMismatch("need at least two poses")
    P, G = pred.by_index(), gt.by_index()
    idx = sorted(P)
    pairs = []
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            i, j = idx[a], idx[b]
            r, t = pair_errors(P[i], P[j], G[i], G[j])
            pairs.append((i, j, r, t))
    worst = np.array([max(r, t) for _, _, r, t in pairs])
    thresholds = [float(t) for t in thresholds]
    acc = [float(np.mean(worst < t)) for t in thresholds]
    return RpaReport(thresholds, acc, len(pairs), pairs)


def umeyama_align(pred_centers, gt_centers):
    """Least-squares similarity with ``gt ~ s * R @ pred + t``.

    Returns ``(s, R, t, rmse)``; rmse is over the aligned residuals.
    """
    X = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise IndexMismatch(f"{len(X)} predicted vs {len(Y)} ground-truth centers")
    n = len(X)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 centers, got {n}")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv_gt = np.linalg.svd(Yc, compute_uv=False)
    if sv_gt[1] <= 1e-9 * max(sv_gt[0], 1e-300):
        raise DegenerateConfiguration("ground-truth centers are collinear")
    var_x = np.sum(Xc**2) / n
    if var_x <= 1e-300:
        raise DegenerateConfiguration("predicted centers coincide")
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * R @ mx
    res = Y - (s * X @ R.T + t)
    rmse = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return s, R, t, rmse


@dataclass
class DepthScores:
    absrel: float
    delta125: float
    n_pixels: int
    scale: float

    def to_json(self) -> dict:
        return {"absrel": self.absrel, "delta125": self.delta125,
                "n_pixels": self.n_pixels, "median_scale": self.scale}


def depth_metrics(pred, gt, mask=None, alpha=None, median_scale: bool = True) -> DepthScores:
    """AbsRel and delta<1.25 after per-image median scaling of ``pred``.

    Pixels with ``gt <= 0`` or zero rendered ``alpha`` are excluded.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise IndexMismatch(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    m = gt > 0
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if alpha is not None:
        m &= np.asarray(alpha) > 0
    m &= np.isfinite(pred)
    if median_scale:
        m &= pred > 0
    if not m.any():
        raise EmptyMask("no valid depth pixels")
    p, g = pred[m], gt[m]
    scale = float(np.median(g) / np.median(p)) if median_scale else 1.0
    p = p * scale
    absrel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    return DepthScores(absrel, float(np.mean(ratio < 1.25)), int(m.sum()), scale)


def trajectory_report(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """RPA plus similarity-aligned camera-center error, JSON ready."""
    pred, gt = _as_poseset(pred), _as_poseset(gt)
    rep = rpa(pred, gt, thresholds)
    out = rep.to_json()
    P, G = pred.by_index(), gt.by_index()
    idx = sorted(P)
    try:
        s, R, t, rmse = umeyama_align([P[i].center for i in idx], [G[i].center for i in idx])
        out["alignment"] = {"scale": s, "rotation": R.tolist(), "translation": t.tolist(),
                            "center_rmse": rmse}
    except DegenerateConfiguration as e:
        out["alignment"] = {"error": str(e)}
    return out
