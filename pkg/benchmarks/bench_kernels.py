"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from mphpe import _kernels


def _boxes(rng, n, size=640.0):
    xy = rng.uniform(0, size - 60, (n, 2))
    wh = rng.uniform(8, 60, (n, 2))
    return np.hstack([xy, xy + wh])


def _triangles(rng, n, size=320):
    centres = rng.uniform(0, size, (n, 1, 2))
    verts = centres + rng.normal(0, 6, (n, 3, 2))
    depth = rng.uniform(1, 10, (n, 3))
    colors = rng.integers(0, 256, (n, 3), dtype=np.uint8)
    return verts, depth, colors


def cases(rng):
    a, b = _boxes(rng, 300), _boxes(rng, 300)
    boxes, scores = _boxes(rng, 3000), rng.uniform(0, 1, 3000)
    iou = _kernels.box_iou_matrix(_boxes(rng, 200), _boxes(rng, 150))
    verts, depth, colors = _triangles(rng, 1280)

    def raster(impl):
        img = np.zeros((320, 320, 3), np.uint8)
        zbuf = np.zeros((320, 320))
        _kernels.rasterize_triangles(img, zbuf, verts, depth, colors, impl=impl)

    return {
        "iou 300x300": lambda impl: _kernels.box_iou_matrix(a, b, impl=impl),
        "nms 3000": lambda impl: _kernels.nms(boxes, scores, 0.65, impl=impl),
        "match 200x150": lambda impl: _kernels.greedy_match(iou, 0.5, impl=impl),
        "rasterize 1280 tris": raster,
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", default=None)
    args = p.parse_args(argv)
    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the fallback only", file=sys.stderr)
    results = {}
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in sorted(backends)) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for b in sorted(backends):
            impl = backends[b]
            fn(impl)  # warm-up
            row[b] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        results[name] = dict(row, speedup=speed)
        print(f"{name:<22}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in sorted(backends)) + f"{speed:>9.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=1)


if __name__ == "__main__":
    main()
