"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the raw kernels on training-sized shapes and one full training
iteration (forward, backward, Adam) under each available backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from aflnet import backend
from aflnet import numeric as nm
from aflnet.scoring import Model, ModelConfig, batch_loss
from aflnet.synthdata import ScenarioConfig, generate_scenario


def kernel_cases(rng):
    a, b = rng.normal(size=(352, 64)), rng.normal(size=(64, 64))
    qa, kb = rng.normal(size=(32, 10, 64)), rng.normal(size=(32, 64, 11))
    u = rng.uniform(size=(120, 120))
    scores = np.ascontiguousarray((u + u.T) / 2)
    return {
        "matmul 352x64 @ 64x64": lambda k: k.matmul(a, b),
        "bmm 32 x (10x64 @ 64x11)": lambda k: k.bmm(qa, kb),
        "ahc_merges n=120": lambda k: k.ahc_merges(scores),
    }


def training_step():
    rec = generate_scenario(ScenarioConfig(duration=20, seed=1))
    segments = rec.segments[:32]
    model = Model(ModelConfig(), seed=0)
    params = model.parameters()
    opt = nm.Adam(params, lr=5e-4)

    def step():
        with nm.Tape() as tape:
            loss = batch_loss(model, segments)
        tape.backward(loss, params)
        opt.step()

    return step


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    names = backend.available()
    rng = np.random.default_rng(0)
    rows = []
    for label, case in kernel_cases(rng).items():
        rows.append((label, [best_of(lambda: case(backend.get(n)), args.repeat) for n in names]))
    times = []
    for n in names:
        backend.use(n)
        times.append(best_of(training_step(), args.repeat))
    rows.append(("training iteration (N=32)", times))

    header = f"{'case':<30}" + "".join(f"{n + ' (ms)':>16}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for label, ts in rows:
        line = f"{label:<30}" + "".join(f"{1e3 * t:>16.3f}" for t in ts)
        if len(ts) > 1:
            line += f"{ts[-1] / ts[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
