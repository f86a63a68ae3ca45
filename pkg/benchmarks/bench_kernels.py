"""Time the compiled kernels against the numpy fallback on realistic inputs.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints one row
per kernel with the best-of-N wall time of each backend and the speedup.
"""

import argparse
import time

import numpy as np

from lidog._ext import compiled, fallback
from lidog.net.sparse import submanifold_rulebook
from lidog.synth import DOMAIN_A, SceneSpec, _pack, generate_scene, raycast_scan, scan_rng
from lidog.voxel import voxelize


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def workloads():
    scene = generate_scene(SceneSpec(seed=1, extent=30.0))
    kinds, prm, _ = _pack(scene)
    origin = np.array([0.0, DOMAIN_A.mount_height, 0.0])
    dirs = DOMAIN_A.directions()
    yield "raycast (64x360 rays)", lambda k: k.raycast(origin, dirs, kinds, prm)

    cloud = raycast_scan(scene, DOMAIN_A, scan_rng(1))
    grid = voxelize(cloud, 0.5)
    rb = submanifold_rulebook(grid.coords)
    rng = np.random.default_rng(0)
    args = (rb.rb_in, rb.rb_out, rb.ptr)
    n = len(grid.coords)
    # the layer code sends narrow convs to the compiled loop and wide ones to BLAS
    for cin, cout in ((5, 8), (16, 16)):
        x = np.maximum(rng.normal(size=(n, cin)), 0.0)
        w = rng.normal(size=(27, cin, cout))
        gy = rng.normal(size=(n, cout))
        yield f"sparse conv fwd ({n} voxels, {cin}->{cout})", lambda k, x=x, w=w: k.sparse_conv_forward(x, w, *args, n)
        yield f"sparse conv bwd ({cin}->{cout})", lambda k, x=x, w=w, gy=gy: k.sparse_conv_backward(gy, x, w, *args)

    fmap = rng.normal(size=(4, 168, 168, 16))
    _, arg = fallback.maxpool2d_forward(fmap, 5, 3, 1)
    gp = rng.normal(size=(4, 56, 56, 16))
    yield "maxpool fwd (4x168x168x16)", lambda k: k.maxpool2d_forward(fmap, 5, 3, 1)
    yield "maxpool bwd", lambda k: k.maxpool2d_backward(gp, arg, 168, 168)

    pix = rng.integers(-1, 168 * 168, len(grid.coords)).astype(np.int64)
    pr = rng.random(len(pix))
    yield "collision winners", lambda k: k.select_winners(pix, pr, 168 * 168)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("compiled extension not available; build it with `pip install -e .`")
    print(f"{'kernel':42s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, run in workloads():
        tc = best_of(lambda: run(compiled), args.repeat)
        tf = best_of(lambda: run(fallback), args.repeat)
        print(f"{name:42s} {tc * 1e3:10.2f} {tf * 1e3:10.2f} {tf / tc:7.1f}x")


if __name__ == "__main__":
    main()
