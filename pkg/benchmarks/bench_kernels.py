"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes follow the desk configuration (batch 8, 50 decoder frames, hidden
48; calibration GRU over 150 frames for 240 clips).  The last section
times one full training step (forward and backward, both decoder modes)
with each backend.
"""

import argparse
import json
import time

import numpy as np

from react_emg import kernels
from react_emg.kernels import _reference


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    t, b, h, d = 50, 8, 48, 20
    dec = [rng.standard_normal(s) * 0.3 for s in
           [(t, b, 4 * h), (d, 4 * h), (h, 4 * h), (h, 4 * h), (h, 4 * h), (4 * h,),
            (h, 2 * d), (2 * d,), (b, d)]]
    xp = rng.standard_normal((150, 240, 48)) * 0.3
    u = rng.standard_normal((16, 48)) * 0.3
    cols = rng.standard_normal((8, 16, 756, 11))

    def dec_fwd(m):
        return lambda: m.decoder_scan_forward(*dec, False, 12, 0.01)

    def dec_bwd(m):
        _, cache = m.decoder_scan_forward(*dec, False, 12, 0.01)
        g = np.ones((t, b, d))
        return lambda: m.decoder_scan_backward(g, dec[1], dec[2], dec[3], dec[4], dec[6],
                                               cache, False, 12, 0.01)

    def gru_fwd(m):
        return lambda: m.gru_scan_forward(xp, u, False)

    def gru_bwd(m):
        hs, cache = m.gru_scan_forward(xp, u, False)
        g = np.ones_like(hs)
        return lambda: m.gru_scan_backward(g, u, cache, False)

    def col2im(m):
        return lambda: m.col2im_1d(cols, 3790, 5)

    return {"decoder_scan_forward": dec_fwd, "decoder_scan_backward": dec_bwd,
            "gru_scan_forward": gru_fwd, "gru_scan_backward": gru_bwd, "col2im_1d": col2im}


def training_step_time(repeat):
    from react_emg.config import desk_config
    from react_emg.model import build_params
    from react_emg.train import Batch, forward_losses

    cfg = desk_config()
    rng = np.random.default_rng(0)
    ps = build_params(cfg, 0)
    b = 8
    batch = Batch(rng.standard_normal((b, 16, cfg.window_samples)),
                  rng.standard_normal((b, cfg.content_frames, 20)) * 0.3,
                  np.ones((b, cfg.content_frames), bool), np.zeros((b, 20)),
                  list(range(b)), [0] * b, [0] * b)
    feats = [rng.standard_normal((15, 64, 150)) for _ in range(b)]

    def step():
        ps.zero_grad()
        loss, _ = forward_losses(ps, cfg, batch, feats)
        loss.backward()

    return _best(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args()
    backends = kernels.available()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the NumPy fallback can be timed")
    modules = {"python": _reference}
    if "compiled" in backends:
        from react_emg.kernels import _compiled
        modules["compiled"] = _compiled
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':<24} " + " ".join(f"{n:>12}" for n in modules) + f" {'speedup':>8}")
    for name, make in kernel_cases(rng).items():
        row = {n: _best(make(m), args.repeat) for n, m in modules.items()}
        results[name] = row
        speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
        print(f"{name:<24} " + " ".join(f"{row[n] * 1e3:>10.2f}ms" for n in modules)
              + f" {speed:>7.1f}x")
    row = {}
    for n in modules:
        kernels.use(n)
        row[n] = training_step_time(max(1, args.repeat // 2))
    results["training_step"] = row
    speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
    print(f"{'training_step':<24} " + " ".join(f"{row[n] * 1e3:>10.2f}ms" for n in modules)
          + f" {speed:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
