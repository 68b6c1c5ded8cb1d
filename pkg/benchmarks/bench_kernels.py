"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one training iteration end to end under each backend (the backend
is fixed at import, so that part runs in a subprocess per backend).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cmlbgnn import _kernels

STEP_SNIPPET = """
import time
from cmlbgnn import diffcore as dc
from cmlbgnn.episode import make_synthetic_dataset
from cmlbgnn.training import OptState, TrainConfig, init_params, train_step
ds = make_synthetic_dataset(20, 16, 0.3, 30, dc.RngStream(0))
cfg = TrainConfig(layers=1, dim=32, hidden_states=8, rho=1.0, dropout=0.0)
p = init_params(cfg, ds.d)
opt = OptState.for_params(list(p))
train_step(p, opt, ds, cfg, 1, dc.RngStream(0))
t = time.perf_counter()
for it in range(2, 12):
    train_step(p, opt, ds, cfg, it, dc.RngStream(0))
print((time.perf_counter() - t) / 10)
"""


def _cases(rng):
    h = rng.normal(size=(8, 10, 32))
    g_pair = rng.normal(size=(8, 10, 10, 32))
    x = rng.normal(size=(800, 32))
    xhat, rstd = _kernels.NUMPY_KERNELS["layernorm_fwd"](x, 1e-5)
    return {
        "absdiff_fwd": (h,),
        "absdiff_bwd": (h, g_pair),
        "layernorm_fwd": (x, 1e-5),
        "layernorm_bwd": (xhat, rstd, rng.normal(size=x.shape)),
    }


def bench_kernels(repeat):
    if _kernels.NUMBA_KERNELS is None:
        print("numba is not installed; nothing to compare")
        return
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, args in cases.items():
        fn_np, fn_nb = _kernels.NUMPY_KERNELS[name], _kernels.NUMBA_KERNELS[name]
        out_np, out_nb = fn_np(*args), fn_nb(*args)  # also triggers compilation
        outs_np = out_np if isinstance(out_np, tuple) else (out_np,)
        outs_nb = out_nb if isinstance(out_nb, tuple) else (out_nb,)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outs_np, outs_nb))
        t_np = min(timeit.repeat(lambda: fn_np(*args), number=5, repeat=repeat)) / 5 * 1e6
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), number=5, repeat=repeat)) / 5 * 1e6
        print(f"{name:<16}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}{diff:>14.2e}")


def bench_step():
    print("\nfull training iteration (batch 8, T=8, dim 32):")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, BGNN_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        print(f"  {backend:<6} {float(out.stdout) * 1e3:8.1f} ms/iteration")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-step", action="store_true", help="only time the kernels")
    args = ap.parse_args()
    print(f"active backend: {_kernels.BACKEND}")
    bench_kernels(args.repeat)
    if not args.skip_step:
        bench_step()


if __name__ == "__main__":
    main()
