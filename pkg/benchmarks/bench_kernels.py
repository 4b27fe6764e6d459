"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the column softmax (forward and backward), the logistic, power
iteration and one full erasing step of the trainer on the default stack.
"""

import argparse
import timeit

import numpy as np

from cpelab import kernels
from cpelab.attention import make_stack
from cpelab.bank import generate_banks
from cpelab.grad import Tape, backward
from cpelab.losses import LossWeights
from cpelab.numkit import RngStream
from cpelab.resag import init_resag, tape_nodes
from cpelab.trainer import TrainConfig, _Sampler, bound_coefficients_for, erase_step


def kernel_cases(rng):
    m = rng.normal((8, 8))
    s = kernels.softmax_columns(m)
    g = rng.normal((8, 8))
    x = rng.normal((1, 64))
    w = rng.normal((32, 16))
    x0 = np.ones(16) / 4.0
    return {
        "softmax 8x8": lambda: kernels.softmax_columns(m),
        "softmax backward 8x8": lambda: kernels.softmax_columns_backward(s, g),
        "logistic 1x64": lambda: kernels.logistic(x),
        "power iteration 32x16": lambda: kernels.power_iteration(w, x0, 1e-12, 10_000),
    }


def train_step_case():
    bank = generate_banks({})[0]
    layers, queries = make_stack({}, bank.d, bank.m)
    cfg = TrainConfig(stages=1, t1=1)
    anchors = bank.pool[:5]
    weights = LossWeights(cfg.eta, cfg.lam, bound_coefficients_for(bank, layers, queries, anchors))
    r = init_resag(bank.target_id, layers, cfg.s1, cfg.s2, RngStream(0, 11))
    sampler = _Sampler(cfg, bank, anchors)
    pairs, anc = sampler.pairs(), sampler.anchor_batch()

    def step():
        tape = Tape()
        nodes = tape_nodes(tape, r)
        total = erase_step(cfg, layers, None, nodes, tape, pairs, anc, weights, None, 1)[0]
        backward(tape, total)

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000)
    args = ap.parse_args()
    backends = sorted(kernels.implementations())
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is timed")
    rows = []
    for name in backends:
        kernels.use_backend(name)
        cases = kernel_cases(RngStream(0, 0))
        cases["erasing step (fwd+bwd)"] = train_step_case()
        for label, fn in cases.items():
            n = args.number if "step" not in label else max(1, args.number // 100)
            best = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
            rows.append((label, name, best))
    print(f"{'case':28s} {'backend':8s} {'us/call':>12s}")
    for label, name, t in sorted(rows):
        print(f"{label:28s} {name:8s} {t * 1e6:12.2f}")
    if len(backends) == 2:
        times = {(l, n): t for l, n, t in rows}
        print()
        for label in sorted({l for l, _, _ in rows}):
            print(f"{label:28s} speedup {times[(label, 'python')] / times[(label, 'cython')]:6.2f}x")


if __name__ == "__main__":
    main()
