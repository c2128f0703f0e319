"""Compare the compiled LSTM kernels against the numpy fallback.

    python3 benchmarks/bench_lstm.py [--batch 64] [--steps 20] [--hidden 16] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from igcnet._kernels import implementations


def run(batch: int, steps: int, hidden: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    xw = rng.normal(size=(steps, batch, 4 * hidden))
    w = rng.normal(scale=0.3, size=(hidden, 4 * hidden))
    mask = np.ones((steps, batch))
    dh = rng.normal(size=(steps, batch, hidden))
    out = {}
    ref = None
    for name, (fwd, bwd) in implementations().items():
        h, cache = fwd(xw, w, mask)
        grads = bwd(dh, w, mask, h, cache)
        if ref is None:
            ref = (h, grads)
        else:
            diff = max(np.max(np.abs(h - ref[0])), *(np.max(np.abs(a - b)) for a, b in zip(grads, ref[1])))
            assert diff < 1e-10, f"{name} disagrees with numpy by {diff}"
        t_f = min(timeit.repeat(lambda: fwd(xw, w, mask), number=1, repeat=repeat))
        t_b = min(timeit.repeat(lambda: bwd(dh, w, mask, h, cache), number=1, repeat=repeat))
        out[name] = (t_f, t_b)
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--repeat", type=int, default=20)
    a = p.parse_args()
    res = run(a.batch, a.steps, a.hidden, a.repeat)
    print(f"B={a.batch} T={a.steps} H={a.hidden} (best of {a.repeat})")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, (f, b) in res.items():
        print(f"{name:<8} {f * 1e3:>11.3f} {b * 1e3:>12.3f}")
    if "cython" in res:
        f0, b0 = res["numpy"]
        f1, b1 = res["cython"]
        print(f"speedup  {f0 / f1:>10.1f}x {b0 / b1:>11.1f}x")


if __name__ == "__main__":
    main()
