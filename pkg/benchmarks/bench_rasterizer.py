"""Compare the compiled and pure-Python rasterizer kernels.

Runs forward and backward passes over a sweep of scene sizes and prints
a table of per-call times plus the speedup ratio.  Invoke directly:

    python3 benchmarks/bench_rasterizer.py [--rounds N] [--resolution R]
"""

import argparse
import time

import numpy as np

import gsavatar.rasterizer as rast
from gsavatar.gaussians import make_gaussian_set
from gsavatar.scene import look_at_camera


def random_set(rng, count):
    centers = rng.normal(0.0, 0.6, (count, 3))
    colors = rng.uniform(0.0, 1.0, (count, 3))
    opacities = rng.uniform(0.05, 1.0, count)
    scales = rng.uniform(0.02, 0.25, (count, 3))
    quats = rng.normal(0.0, 1.0, (count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return make_gaussian_set(centers, colors=colors, opacities=opacities,
                             scales=scales, rotations=quats)


def time_call(fn, rounds):
    fn()  # warm the caches before timing
    started = time.monotonic()
    for _ in range(rounds):
        fn()
    return (time.monotonic() - started) / rounds


def bench(counts, resolution, rounds):
    rng = np.random.default_rng(71)
    cam = look_at_camera(25.0, 10.0, 5.0, fx=2.5 * resolution,
                         fy=2.5 * resolution,
                         width=resolution, height=resolution)
    backends = ["python"]
    if rast.active_backend() == "compiled":
        backends.insert(0, "compiled")
    else:
        print("compiled backend unavailable; timing the python kernels only")

    header = f"{'gaussians':>10} {'pass':>9}"
    for b in backends:
        header += f" {b + ' (ms)':>14}"
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))

    for count in counts:
        gs = random_set(rng, count)
        grad = rng.normal(size=(resolution, resolution, 3))
        rows = {"forward": {}, "backward": {}}
        for backend in backends:
            out = rast.render(gs, cam, dtype=np.float64, backend=backend)
            rows["forward"][backend] = time_call(
                lambda: rast.render(gs, cam, dtype=np.float64,
                                    backend=backend),
                rounds)
            rows["backward"][backend] = time_call(
                lambda: rast.render_backward(out.state, grad), rounds)
        for which in ("forward", "backward"):
            line = f"{count:>10} {which:>9}"
            for backend in backends:
                line += f" {rows[which][backend] * 1e3:>14.2f}"
            if len(backends) == 2:
                ratio = rows[which]["python"] / rows[which]["compiled"]
                line += f" {ratio:>8.1f}x"
            print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--resolution", type=int, default=64)
    parser.add_argument("--counts", type=int, nargs="+",
                        default=[100, 500, 2000])
    args = parser.parse_args()
    print(f"active backend at import: {rast.active_backend()}")
    bench(args.counts, args.resolution, args.rounds)


if __name__ == "__main__":
    main()
