"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel plus a full training step for each backend.
The training step runs in a subprocess so MTM_PURE_PYTHON can pick the backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mtm.diff import _reference

try:
    from mtm.diff import _kernels
except ImportError:
    _kernels = None


STEP = """
import time
import numpy as np
from mtm import diff as D
from mtm.data import SynthSpec, synth_generate
from mtm.model import ModelConfig, batch_from_series, forward, init_params, loss
data = synth_generate(SynthSpec(n_samples=32, n_channels=4, alpha=0.5, events_per_channel=8, seed=0))
cfg = ModelConfig(n_channels=4, d_model=16, n_blocks=2, rate=3, dropout=0.0)
p = init_params(cfg)
batch = batch_from_series(data)
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter()
    with D.Tape() as tape:
        tape.backward(loss(forward(batch, p, cfg), batch.labels))
    best = min(best, time.perf_counter() - t0)
print(D.BACKEND, best)
"""


def inputs(rng):
    x = rng.normal(size=(4096, 64))
    mask = rng.random((4096, 64)) < 0.7
    x3 = rng.normal(size=(256, 64, 32))
    m3 = rng.random((256, 64, 32)) < 0.5
    idx = rng.integers(0, 512, size=20000)
    src = rng.normal(size=(20000, 32))
    return x, mask, x3, m3, idx, src


def bench(mod, repeat, data):
    x, mask, x3, m3, idx, src = data
    y = mod.softmax_fwd(x, mask)
    out, arg = mod.masked_max_fwd(x3, m3)
    cases = {
        "softmax_fwd": lambda: mod.softmax_fwd(x, mask),
        "softmax_bwd": lambda: mod.softmax_bwd(y, x),
        "masked_max_fwd": lambda: mod.masked_max_fwd(x3, m3),
        "masked_max_bwd": lambda: mod.masked_max_bwd(out, arg, 64),
        "scatter_add_rows": lambda: mod.scatter_add_rows(idx, src, 512),
    }
    return {k: min(timeit.repeat(f, number=1, repeat=repeat)) for k, f in cases.items()}


def step_time(pure, repeat):
    env = dict(os.environ, MTM_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    data = inputs(np.random.default_rng(0))
    ref = bench(_reference, args.repeat, data)
    fast = bench(_kernels, args.repeat, data) if _kernels is not None else None
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for k, t in ref.items():
        if fast is None:
            print(f"{k:<18}{t * 1e3:>10.2f}{'n/a':>11}")
        else:
            print(f"{k:<18}{t * 1e3:>10.2f}{fast[k] * 1e3:>11.2f}{t / fast[k]:>8.1f}x")
    rows = [step_time(True, max(3, args.repeat // 4))]
    if _kernels is not None:
        rows.append(step_time(False, max(3, args.repeat // 4)))
    for backend, t in rows:
        print(f"train step ({backend}): {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
