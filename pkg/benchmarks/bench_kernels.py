"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py            # kernel table
    python3 benchmarks/bench_kernels.py --model    # plus one training step per backend

The model timing runs in a subprocess per backend so GLEASON_NO_NUMBA takes
effect at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gleason_mamba.core import kernels

# shapes follow the MedMamba-Tiny stage-0 SS2D call: 4 directions x batch 32,
# 64 tokens, 8 channels, state 8; depthwise conv on (32, 8, 8, 8)
SCAN = (128, 64, 8, 8)
CONV = (32, 8, 8, 8)

STEP_SNIPPET = """
import time, numpy as np
from gleason_mamba import BACKEND
from gleason_mamba.medmamba import MedMamba, ModelConfig, cross_entropy
from gleason_mamba.medmamba.synthetic import make_textures
X, y = make_textures(32, seed=0)
m = MedMamba(ModelConfig(), seed=0)
def step():
    loss, g = cross_entropy(m(X), y)
    m.backward(g)
step()
t = time.perf_counter(); [step() for _ in range(5)]; dt = (time.perf_counter() - t) / 5
print(BACKEND, dt)
"""


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    N, L, D, S = SCAN
    a = rng.uniform(0.5, 1.0, SCAN)
    u = rng.standard_normal(SCAN)
    c = rng.standard_normal((N, L, S))
    h0 = np.zeros((N, D, S))
    dy = rng.standard_normal((N, L, D))
    x = rng.standard_normal(CONV)
    w = rng.standard_normal((CONV[1], 3, 3))
    dyc = rng.standard_normal(CONV)
    cases = [
        ("scan_forward", (a, u, c, h0)),
        ("scan_reverse", (a, dy, c)),
        ("dwconv_forward", (x, w)),
        ("dwconv_backward", (x, w, dyc)),
    ]
    print(f"{'kernel':18s}{'numpy ms':>12s}{'numba ms':>12s}{'speedup':>10s}")
    for name, args in cases:
        ref = getattr(kernels, f"{name}_numpy")
        fast = getattr(kernels, f"{name}_numba", None)
        t_np = best_of(lambda: ref(*args), repeat, 3)
        if fast is None:
            print(f"{name:18s}{t_np * 1e3:12.3f}{'n/a':>12s}")
            continue
        out_np, out_nb = ref(*args), fast(*args)  # also compiles
        for p, q in zip(out_np if isinstance(out_np, tuple) else (out_np,),
                        out_nb if isinstance(out_nb, tuple) else (out_nb,)):
            assert np.allclose(p, q, rtol=1e-12, atol=1e-12), name
        t_nb = best_of(lambda: fast(*args), repeat, 3)
        print(f"{name:18s}{t_np * 1e3:12.3f}{t_nb * 1e3:12.3f}{t_np / t_nb:9.1f}x")


def model_step():
    print("\nforward+backward, batch 32, MedMamba-Tiny:")
    for disabled in ("0", "1"):
        env = dict(os.environ, GLEASON_NO_NUMBA=disabled)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:6s} {float(out[1]) * 1e3:9.1f} ms/step")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--model", action="store_true", help="also time a full training step per backend")
    args = p.parse_args()
    print(f"active backend: {kernels.BACKEND}\n")
    kernel_table(args.repeat)
    if args.model:
        model_step()


if __name__ == "__main__":
    main()
