"""Compare the numba and numpy rasterizer backends.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 3]

Renders the synthetic box scene (forward and backward) with each backend,
reports the best wall time of ``--repeat`` runs and the largest difference
between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from splatcal.splat import render, render_backward, set_backend
from splatcal.synthscene import gen_scene


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def bench(backend, scene, repeat):
    set_backend(backend)
    g, k, pose = scene.gaussians, scene.intrinsics, scene.poses[len(scene.poses) // 2]
    render(g, k, pose)  # warm up (JIT compile on first call)
    t_fwd, out = _time(lambda: render(g, k, pose), repeat)
    rng = np.random.default_rng(0)
    g_rgb = rng.normal(size=out.rgb.shape)

    def backward():
        return render_backward(out, g_rgb, backend_name=backend)

    backward()
    t_bwd, grads = _time(backward, repeat)
    return t_fwd, t_bwd, out, grads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--preset", default="box")
    args = ap.parse_args()
    scene = gen_scene(args.preset, 10, width=args.size, height=args.size)
    print(f"{args.preset}: {len(scene.gaussians)} Gaussians, {args.size}x{args.size}")
    rows = {}
    for name in ("numba", "numpy"):
        rows[name] = bench(name, scene, args.repeat)
        print(f"{name:6s} forward {rows[name][0] * 1e3:9.1f} ms   backward {rows[name][1] * 1e3:9.1f} ms")
    set_backend("numba")
    diff = np.abs(rows["numba"][2].rgb - rows["numpy"][2].rgb).max()
    print(f"speedup forward {rows['numpy'][0] / rows['numba'][0]:.1f}x, "
          f"backward {rows['numpy'][1] / rows['numba'][1]:.1f}x; max |rgb diff| {diff:.2e}")


if __name__ == "__main__":
    main()
