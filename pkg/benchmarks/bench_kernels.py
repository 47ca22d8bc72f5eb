"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each row is one kernel at a shape the trainer actually uses, plus one full
training step of the default model.
"""
import argparse
import csv
import sys
import time

import numpy as np

from semimatch import kernels, trainer


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.random((40, 3, 64, 64)).astype(np.float32)
    w = rng.normal(size=(16, 3, 3, 3)).astype(np.float32)
    out, cols = kernels._fallback.conv2d_forward(x, w, 2, 1)
    g = rng.normal(size=out.shape).astype(np.float32)
    # aggregator input: one 16x16 plane per target cell
    planes = rng.random((20 * 256, 1, 16, 16)).astype(np.float32)
    w_agg = rng.normal(size=(4, 1, 3, 3)).astype(np.float32)
    img = rng.random((20, 3, 64, 64))
    coords = rng.uniform(-2, 65, size=(20, 64, 64, 2))
    valid = np.ones((20, 64, 64), np.uint8)
    prob = rng.random((20, 256, 256))
    return {
        "conv 3x3 s2 forward": lambda k: k.conv2d_forward(x, w, 2, 1),
        "conv 3x3 s2 backward": lambda k: k.conv2d_backward(g, k.conv2d_forward(x, w, 2, 1)[1], w, x.shape, 2, 1),
        "aggregator conv forward": lambda k: k.conv2d_forward(planes, w_agg, 1, 1),
        "bilinear gather": lambda k: k.bilinear_gather(img, coords, valid),
        "bilinear scatter": lambda k: k.bilinear_scatter(img, coords, valid, 64, 64),
        "hard argmax": lambda k: k.hard_argmax(prob),
    }


def training_step():
    cfg = trainer.RunConfig(n_train=40, n_val=0, n_test=0, warmup=0.0)
    ds = trainer.load_dataset(cfg)
    lab, unl = trainer.split_train(ds["train"], cfg)
    li, ui = trainer.make_batches(len(lab), len(unl), cfg.batch_size, 0, 0)[0]
    batch = trainer.build_batch(lab, unl, li, ui, cfg, 0)

    def run():
        model = trainer.MatchingModel(cfg.model_config(), seed=0)
        trainer.train_step(model, trainer.make_optimizer(cfg), batch, cfg, 0)

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)
    start = kernels.current_backend()
    rng = np.random.default_rng(0)
    table = {name: {} for name in cases(rng)}
    step = training_step()
    table["train step (semi, default batch)"] = {}
    try:
        for backend in backends:
            kernels.use_backend(backend)
            mod = kernels._BACKENDS[backend]
            for name, fn in cases(np.random.default_rng(0)).items():
                table[name][backend] = best_of(lambda: fn(mod), args.repeat)
            table["train step (semi, default batch)"][backend] = best_of(step, max(1, args.repeat // 2))
    finally:
        kernels.use_backend(start)

    rows = []
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, t in table.items():
        row = {"kernel": name, **{f"{b}_ms": round(1e3 * t[b], 3) for b in backends}}
        line = f"{name:32s}" + "".join(f"{1e3 * t[b]:10.2f}ms" for b in backends)
        if len(backends) > 1:
            row["speedup"] = round(t["python"] / t["compiled"], 2)
            line += f"{row['speedup']:11.1f}x"
        rows.append(row)
        print(line)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
