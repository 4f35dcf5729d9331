"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 5] [--grid 1125 2249]

Each kernel runs once to trigger JIT compilation (reported separately), then
``--repeat`` timed calls per backend; outputs are checked for agreement.
"""
import argparse
import time

import numpy as np

from obsmae import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n_lat, n_lon, rng):
    lat = np.linspace(-89.92, 89.92, n_lat)
    lon = np.linspace(-180.0, 180.0, n_lon, endpoint=False)

    L, h = 8, 144
    tile = rng.standard_normal((L, h, h))
    weight = np.outer(np.sin(np.pi * (np.arange(h) + 0.5) / h) ** 2, np.sin(np.pi * (np.arange(h) + 0.5) / h) ** 2)
    origins = [(a, b) for a in range(0, n_lat - h + 1, h // 2) for b in range(0, n_lon, h // 2)][:200]

    def hann(impl):
        def run():
            num = np.zeros((L, n_lat, n_lon))
            den = np.zeros((n_lat, n_lon))
            for a, b in origins:
                impl(num, den, tile, weight, a, b)
            return num, den

        return run

    src_p = np.array([10.0, 30, 70, 150, 250, 500, 700, 850, 1000])
    vals = np.ascontiguousarray(rng.uniform(200, 300, (20000, len(src_p))))
    dst_p = np.array([925.0, 850, 700, 500, 400, 300, 250, 200, 150, 100, 70, 50, 30, 20, 10])

    return {
        "hann_accumulate": (hann(_accel.hann_accumulate_numba), hann(_accel.hann_accumulate_numpy)),
        "great_circle_deg": (
            lambda: _accel.great_circle_deg_numba(lat, lon, 0.0, 0.0),
            lambda: _accel.great_circle_deg_numpy(lat, lon, 0.0, 0.0),
        ),
        "interp_logp": (
            lambda: _accel.interp_logp_numba(src_p, vals, dst_p),
            lambda: _accel.interp_logp_numpy(src_p, vals, dst_p),
        ),
    }


def close(a, b):
    if isinstance(a, tuple):
        return all(close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10, equal_nan=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--grid", type=int, nargs=2, default=(1125, 2249), metavar=("N_LAT", "N_LON"))
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"grid {args.grid[0]}x{args.grid[1]}, best of {args.repeat}")
    print(f"{'kernel':<18} {'jit (s)':>9} {'numba (s)':>10} {'numpy (s)':>10} {'speedup':>8}  agree")
    for name, (fast, slow) in cases(*args.grid, rng).items():
        t = time.perf_counter()
        out_fast = fast()
        jit = time.perf_counter() - t
        ok = close(out_fast, slow())
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<18} {jit:9.3f} {tf:10.4f} {ts:10.4f} {ts / tf:8.1f}x  {ok}")


if __name__ == "__main__":
    main()
