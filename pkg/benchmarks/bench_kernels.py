"""Compare the numba and pure-numpy LSTM kernels.

Two measurements:

1. the recurrence kernels alone (forward and backward), both paths in-process;
2. one full training step (forward, BPTT, RMSprop) in a subprocess per
   value of ``SCATAROUSAL_NUMBA``, so the dispatch in ``scatarousal.kernels``
   is exercised exactly as a user would run it.

Usage::

    python3 benchmarks/bench_kernels.py [--frames 1536] [--hidden 16 100] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from scatarousal import kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(frames, hidden, repeat):
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((frames, 4 * hidden))
    U = rng.standard_normal((4 * hidden, hidden)) / np.sqrt(hidden)
    dH = rng.standard_normal((frames, hidden))
    _, Cs, G = K.lstm_recurrence_numpy(Z, U)
    # compile outside the timed region
    K.lstm_recurrence_numba(Z[:2], U)
    K.lstm_recurrence_backward_numba(dH[:2], G[:2], Cs[:2], U)

    rows = []
    for label, np_fn, nb_fn in [
        ("forward", lambda: K.lstm_recurrence_numpy(Z, U), lambda: K.lstm_recurrence_numba(Z, U)),
        ("backward", lambda: K.lstm_recurrence_backward_numpy(dH, G, Cs, U),
         lambda: K.lstm_recurrence_backward_numba(dH, G, Cs, U)),
    ]:
        t_np, t_nb = best_of(np_fn, repeat), best_of(nb_fn, repeat)
        rows.append((label, hidden, t_np, t_nb))
    return rows


STEP_SCRIPT = """
import json, sys, time
import numpy as np
from scatarousal.model import ModelConfig, init_params, loss_and_grads, rmsprop_step
frames, hidden, dim, repeat = map(int, sys.argv[1:5])
rng = np.random.default_rng(0)
cfg = ModelConfig(input_dim=dim, hidden_units=hidden, seed=0)
p = init_params(cfg)
X = rng.standard_normal((frames, dim))
y = rng.integers(1, 3, frames)
loss_and_grads(p, cfg, X[:4], y[:4], [0, 1, 14])
best = float("inf")
for _ in range(repeat):
    t0 = time.perf_counter()
    _, g, _ = loss_and_grads(p, cfg, X, y, [0, 1, 14])
    rmsprop_step(p, g, {}, 1e-3)
    best = min(best, time.perf_counter() - t0)
print(json.dumps(best))
"""


def bench_step(frames, hidden, dim, repeat, flag):
    env = {**os.environ, "SCATAROUSAL_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(frames), str(hidden), str(dim),
                          str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=1536, help="sequence length in frames")
    ap.add_argument("--hidden", type=int, nargs="+", default=[16, 100])
    ap.add_argument("--input-dim", type=int, default=468)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    print(f"frames={args.frames} input_dim={args.input_dim} repeat={args.repeat} (best of)")
    print(f"{'what':<12}{'H':>5}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}")
    for h in args.hidden:
        for label, hid, t_np, t_nb in bench_kernels(args.frames, h, args.repeat):
            print(f"{label:<12}{hid:>5}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>8.1f}x")
        t_np = bench_step(args.frames, h, args.input_dim, args.repeat, "0")
        t_nb = bench_step(args.frames, h, args.input_dim, args.repeat, "1")
        print(f"{'train step':<12}{h:>5}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
