"""Real spherical-harmonic color basis up to degree 3."""

import numpy as np

from ..errors import ShapeError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values ``(N, (degree+1)^2)`` at unit directions ``(N, 3)``."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ShapeError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], num_coeffs(degree)))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = C3[0] * y * (3 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives ``(N, ncoef, 3)`` of the basis polynomials in (x, y, z).

    The components are treated as independent; callers chain through the
    normalization of the view direction themselves.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac = np.zeros((n, num_coeffs(degree), 3))
    if degree >= 1:
        jac[:, 1, 1] = -C1
        jac[:, 2, 2] = C1
        jac[:, 3, 0] = -C1
    if degree >= 2:
        jac[:, 4] = np.stack([C2[0] * y, C2[0] * x, 0 * x], -1)
        jac[:, 5] = np.stack([0 * x, C2[1] * z, C2[1] * y], -1)
        jac[:, 6] = np.stack([-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z], -1)
        jac[:, 7] = np.stack([C2[3] * z, 0 * x, C2[3] * x], -1)
        jac[:, 8] = np.stack([2 * C2[4] * x, -2 * C2[4] * y, 0 * x], -1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[:, 9] = np.stack([6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), 0 * x], -1)
        jac[:, 10] = np.stack([C3[1] * y * z, C3[1] * x * z, C3[1] * x * y], -1)
        jac[:, 11] = np.stack([-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy),
                               8 * C3[2] * y * z], -1)
        jac[:, 12] = np.stack([-6 * C3[3] * x * z, -6 * C3[3] * y * z,
                               C3[3] * (6 * zz - 3 * xx - 3 * yy)], -1)
        jac[:, 13] = np.stack([C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y,
                               8 * C3[4] * x * z], -1)
        jac[:, 14] = np.stack([2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)], -1)
        jac[:, 15] = np.stack([C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, 0 * x], -1)
    return jac


def eval_sh(sh, viewdir, degree: int) -> np.ndarray:
    """RGB of one Gaussian: ``clip(sum_lm c_lm Y_lm(viewdir), 0, 1)``.

    ``sh`` may be flat or shaped ``((degree+1)^2, 3)``.
    """
    sh = np.asarray(sh, dtype=np.float64)
    if sh.size != num_coeffs(degree) * 3:
        raise ShapeError(f"degree {degree} needs {num_coeffs(degree) * 3} SH values, got {sh.size}")
    d = np.asarray(viewdir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    basis = sh_basis(d[None], degree)[0]
    return np.clip(basis @ sh.reshape(-1, 3), 0.0, 1.0)


def rgb_to_dc(rgb) -> np.ndarray:
    """Degree-0 coefficients reproducing ``rgb`` under :func:`eval_sh`."""
    return np.asarray(rgb, dtype=np.float64) / C0
