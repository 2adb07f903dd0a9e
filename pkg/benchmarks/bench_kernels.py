"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 20] [--rounds 3]

Each path runs in its own interpreter because the backend is fixed at
import time by ICDT_DISABLE_NUMBA. The two interpreters alternate for
several rounds and the best time per case is kept, which damps drift on
shared machines.
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from icdt import kernels as K
from icdt.metrics import uiqm
from icdt.model import IcdtModel, preset

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
x = rng.standard_normal((1024, 384)).astype(np.float32)
g = rng.standard_normal((1024, 384)).astype(np.float32)
img = rng.uniform(0, 255, (256, 256, 3))
m = IcdtModel(preset("tiny", patch=2, latent_side=16, latent_channels=3), seed=0)
z = rng.standard_normal((8, 16, 16, 3)).astype(np.float32)
xhat, rstd = K.layernorm_fwd(x, 1e-6)
p = K.softmax_fwd(x)
cases = {
    "layernorm fwd 1024x384": lambda: K.layernorm_fwd(x, 1e-6),
    "layernorm bwd 1024x384": lambda: K.layernorm_bwd(g, xhat, rstd),
    "softmax fwd 1024x384": lambda: K.softmax_fwd(x),
    "softmax bwd 1024x384": lambda: K.softmax_bwd(g, p),
    "uiqm 256x256": lambda: uiqm(img),
    "tiny forward batch 8": lambda: m(z, z, 10),
}
out = {}
for name, fn in cases.items():
    fn()  # warm-up, includes JIT compilation
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3
print(json.dumps({"backend": K.BACKEND, "ms": out}))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, ICDT_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()
    fast = slow = None
    for _ in range(args.rounds):
        a, b = run(False, args.repeat), run(True, args.repeat)
        fast = a if fast is None else {**a, "ms": {k: min(v, fast["ms"][k]) for k, v in a["ms"].items()}}
        slow = b if slow is None else {**b, "ms": {k: min(v, slow["ms"][k]) for k, v in b["ms"].items()}}
    print(f"{'case':<26}{fast['backend'] + ' ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, t_fast in fast["ms"].items():
        t_np = slow["ms"][name]
        print(f"{name:<26}{t_fast:>12.3f}{t_np:>12.3f}{t_np / t_fast:>9.2f}x")


if __name__ == "__main__":
    main()
