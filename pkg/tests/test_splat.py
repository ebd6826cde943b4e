import numpy as np
import pytest

from splatcal.errors import NonFiniteInput, ShapeError
from splatcal.geometry import CameraIntrinsics, CameraPose, so3_exp
from splatcal.splat import (DEFAULT_OPTIONS, GaussianCloud, GaussianSet, build_covariance, eval_sh,
                            get_backend, load_checkpoint, logit, num_coeffs, project_gaussian, render,
                            render_backward, render_bruteforce, rgb_to_dc, save_checkpoint, set_backend,
                            sh_basis)
from splatcal.splat.gradcheck import check_scene, random_scene, run_gradcheck

K16 = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 16, 16)


def cloud(means, rgb, opacity, scale):
    n = len(means)
    return GaussianCloud(
        means=np.asarray(means, dtype=np.float64),
        quats=np.tile([1.0, 0, 0, 0], (n, 1)),
        sh=rgb_to_dc(np.asarray(rgb, dtype=np.float64))[:, None, :],
        scale_raw=np.log(np.full((n, 3), scale)),
        opacity_raw=logit(np.asarray(opacity, dtype=np.float64)))


def empty_cloud():
    return GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 1, 3)),
                         np.zeros((0, 3)), np.zeros(0))


def random_cloud(rng, n, size=16):
    means = np.c_[rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(1.0, 3.0, n)]
    return GaussianCloud(means, rng.normal(size=(n, 4)), rng.uniform(0.2, 2.0, (n, 1, 3)),
                         np.log(rng.uniform(0.03, 0.3, (n, 3))), rng.uniform(-2, 3, n))


# -- covariance / projection / SH ----------------------------------------------

def test_covariance_isotropic():
    assert np.allclose(build_covariance([1, 0, 0, 0], [0.5, 0.5, 0.5]), 0.25 * np.eye(3))


def test_covariance_axis_permutation():
    q = [np.sqrt(0.5), 0, 0, np.sqrt(0.5)]
    assert np.allclose(build_covariance(q, [1.0, 2.0, 3.0]), np.diag([4.0, 1.0, 9.0]), atol=1e-12)


def test_covariance_eigenvalues():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.uniform(0.1, 2.0, 3)
        ev = np.linalg.eigvalsh(build_covariance(rng.normal(size=4), s))
        assert np.allclose(np.sort(ev), np.sort(s**2), atol=1e-9)


def test_project_on_axis():
    f, z, sigma = 20.0, 2.0, 0.1
    k = CameraIntrinsics(f, f, 8.0, 8.0, 16, 16)
    m2, c2, depth, culled = project_gaussian(k, CameraPose(), [0, 0, z], sigma**2 * np.eye(3))
    assert not culled and depth == z
    assert np.allclose(m2, [8.0, 8.0])
    assert np.allclose(c2, ((f * sigma / z) ** 2 + DEFAULT_OPTIONS.kappa) * np.eye(2))


def test_project_behind_camera_is_culled():
    assert project_gaussian(K16, CameraPose(), [0, 0, -1.0], np.eye(3))[3]


def test_project_matches_monte_carlo():
    rng = np.random.default_rng(1)
    k = CameraIntrinsics(30.0, 28.0, 8.0, 9.0, 16, 16)
    pose = CameraPose.from_rt(so3_exp([0.1, -0.05, 0.2]), [0.1, 0.0, 0.2])
    mean = np.array([0.1, -0.05, 2.5])
    cov = build_covariance(rng.normal(size=4), [0.01, 0.02, 0.015])
    m2, c2, _, _ = project_gaussian(k, pose, mean, cov)
    x = rng.multivariate_normal(mean, cov, size=200_000)
    p = pose.apply(x)
    uv = np.c_[k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy]
    emp = np.cov(uv.T) + DEFAULT_OPTIONS.kappa * np.eye(2)
    assert np.allclose(m2, uv.mean(0), atol=0.01)
    assert np.allclose(c2, emp, rtol=0.03, atol=0.01)


def test_sh_degree0_constant():
    c = np.zeros((1, 3))
    c[0, 0] = 2 * np.sqrt(np.pi)
    for d in ([0, 0, 1], [1, 0, 0], [0, -1, 0]):
        assert np.allclose(eval_sh(c, np.array(d, float), 0), [1, 0, 0])


def test_sh_degree1_z_band_antisymmetric():
    c = np.zeros((4, 3))
    c[0] = 0.5 * 2 * np.sqrt(np.pi)
    c[2] = 0.3  # the z-linear coefficient
    up = eval_sh(c, np.array([0, 0, 1.0]), 1)
    down = eval_sh(c, np.array([0, 0, -1.0]), 1)
    assert not np.allclose(up, down)
    assert np.allclose(up + down, 1.0)
    basis = sh_basis(np.array([[0, 0, 1.0]]), 1)
    assert np.allclose(up, 0.5 + 0.3 * basis[0, 2])


def test_sh_coefficient_count_checked():
    with pytest.raises(ShapeError):
        eval_sh(np.zeros((3, 3)), np.array([0, 0, 1.0]), 1)
    assert [num_coeffs(d) for d in range(4)] == [1, 4, 9, 16]


# -- compositing ----------------------------------------------------------------

def test_empty_scene_renders_zeros():
    for fn in (render, render_bruteforce):
        out = fn(empty_cloud(), K16, CameraPose())
        assert not out.rgb.any() and not out.alpha.any() and not out.depth.any()


def test_opaque_white_gaussian_hits_alpha_max():
    g = cloud([[0, 0, 2.0]], [[1, 1, 1]], [1 - 1e-12], 5.0)
    out = render(g, K16, CameraPose())
    assert np.allclose(out.rgb[8, 8], DEFAULT_OPTIONS.alpha_max, atol=1e-9)


def test_two_gaussian_arithmetic():
    red, green = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    # huge scales make the falloff exactly 1 at the center pixel to double precision
    g = cloud([[0, 0, 1.0], [0, 0, 2.0]], [red, green], [0.5, 0.99], 1e6)
    k = CameraIntrinsics(16.0, 16.0, 8.5, 8.5, 16, 16)
    for fn in (render, render_bruteforce):
        out = fn(g, k, CameraPose())
        assert np.allclose(out.rgb[8, 8], 0.5 * red + 0.5 * 0.99 * green, atol=1e-9)
        assert np.isclose(out.alpha[8, 8], 1 - 0.5 * 0.01, atol=1e-9)
        assert np.isclose(out.depth[8, 8], (0.5 * 1 + 0.5 * 0.99 * 2) / (1 - 0.005), atol=1e-9)


def test_invariants_on_random_scenes():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = random_cloud(rng, 40)
        out = render(g, K16, CameraPose())
        assert np.all(np.isfinite(out.rgb)) and np.all(np.isfinite(out.alpha))
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1
        assert np.all(out.rgb <= out.alpha[..., None] + 1e-12)


def test_transmittance_monotone():
    # adding Gaussians behind the scene can only raise alpha
    rng = np.random.default_rng(4)
    g = random_cloud(rng, 20)
    order = np.argsort(g.means[:, 2])
    prev = np.zeros((16, 16))
    for n in range(1, 21):
        idx = order[:n]
        sub = GaussianCloud(g.means[idx], g.quats[idx], g.sh[idx], g.scale_raw[idx], g.opacity_raw[idx])
        a = render(sub, K16, CameraPose()).alpha
        assert np.all(a >= prev - 1e-12)
        prev = a


def test_order_invariance():
    rng = np.random.default_rng(5)
    g = random_cloud(rng, 30)
    p = rng.permutation(30)
    h = GaussianCloud(g.means[p], g.quats[p], g.sh[p], g.scale_raw[p], g.opacity_raw[p])
    assert np.array_equal(render(g, K16, CameraPose()).rgb, render(h, K16, CameraPose()).rgb)


def test_non_finite_parameter_named():
    g = cloud([[0, 0, 2.0], [0, 0, 3.0]], [[1, 1, 1]] * 2, [0.5, 0.5], 0.1)
    bad = GaussianCloud(g.means.copy(), g.quats, g.sh, g.scale_raw, g.opacity_raw)
    bad.means[1, 0] = np.nan
    with pytest.raises(NonFiniteInput, match="Gaussian 1"):
        render(bad, K16, CameraPose())


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_bruteforce(seed):
    rng = np.random.default_rng(100 + seed)
    k = CameraIntrinsics(20.0, 20.0, 16.0, 16.0, 32, 32)
    g = random_cloud(rng, 60)
    a = render(g, k, CameraPose()).rgb
    b = render_bruteforce(g, k, CameraPose()).rgb
    assert np.abs(a - b).max() < 1e-5


def test_backends_agree():
    rng = np.random.default_rng(6)
    g, k, pose = random_scene(rng)
    prev = get_backend()
    try:
        outs = {}
        for name in ("numba", "numpy"):
            set_backend(name)
            out = render(g, k, pose)
            w = np.random.default_rng(0).normal(size=out.rgb.shape)
            outs[name] = (out.rgb, render_backward(out, w).arrays())
    finally:
        set_backend(prev)
    assert np.allclose(outs["numba"][0], outs["numpy"][0], atol=1e-12)
    for key, val in outs["numba"][1].items():
        assert np.allclose(val, outs["numpy"][1][key], atol=1e-10), key


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        set_backend("cuda")


# -- adjoints -------------------------------------------------------------------

def test_zero_upstream_gives_zero_adjoints():
    g, k, pose = random_scene(np.random.default_rng(7))
    out = render(g, k, pose)
    for name, val in render_backward(out, np.zeros_like(out.rgb)).arrays().items():
        assert not np.any(val), name


def test_backward_shape_checked():
    g, k, pose = random_scene(np.random.default_rng(8))
    out = render(g, k, pose)
    with pytest.raises(ShapeError):
        render_backward(out, np.zeros((3, 3, 3)))
    with pytest.raises(ShapeError):
        render_backward(render_bruteforce(g, k, pose), np.zeros_like(out.rgb))


def test_opacity_adjoint_sign():
    g = cloud([[0, 0, 2.0]], [[0.9, 0.9, 0.9]], [0.3], 0.05)
    out = render(g, K16, CameraPose())
    b = render_backward(out, np.ones_like(out.rgb))
    assert b.opacity[0] > 0


@pytest.mark.parametrize("seed", range(3))
def test_single_scene_gradcheck(seed):
    rng = np.random.default_rng(seed)
    g, k, pose = random_scene(rng)
    errs = check_scene(g, k, pose, rng)
    assert max(errs.values()) < 1e-5, errs


def test_gradcheck_report_f32():
    rep = run_gradcheck(n_scenes=2, precisions=("f32",), seed=11)
    assert rep["passed"], rep["max_relative_error"]


def test_gaussian_set_count_checked():
    g, _, _ = random_scene(np.random.default_rng(9))
    with pytest.raises(ShapeError):
        GaussianSet(g.d_raw[:-1], g.quats[:-1], g.sh[:-1], g.scale_raw[:-1], g.opacity_raw[:-1],
                    g.source_view[:-1], g.source_pixel[:-1], g.k_ref, g.height, g.width, g.ref_poses)


# -- checkpoint -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    g, k, pose = random_scene(np.random.default_rng(10), sh_degree=1, dtype=np.float32)
    save_checkpoint(tmp_path / "c.splc", g, k, {"note": "x"})
    h, k2, meta = load_checkpoint(tmp_path / "c.splc")
    assert k2 == k and meta["note"] == "x" and h.sh_degree == 1
    for name in ("d_raw", "quats", "sh", "scale_raw", "opacity_raw", "source_view", "source_pixel"):
        assert np.array_equal(np.asarray(getattr(h, name), np.float64),
                              np.asarray(getattr(g, name), np.float64)), name
    assert np.array_equal(render(h, k, pose).rgb, render(g, k, pose).rgb)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.splc"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ShapeError):
        load_checkpoint(p)


def test_render_checks_sh_count():
    g = cloud([[0, 0, 2.0]], [[1, 1, 1]], [0.5], 0.1)
    bad = GaussianCloud(g.means, g.quats, np.zeros((1, 2, 3)), g.scale_raw, g.opacity_raw)
    with pytest.raises(ShapeError):
        render(bad, K16, CameraPose())
