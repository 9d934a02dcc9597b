"""Compiled vs pure-numpy kernel timings.

Micro-benchmarks call both implementations directly; the end-to-end
pretraining step is timed in this process (active backend) and in a child
process with CROSSMAE_NO_EXT=1 (forced fallback).

Run: python3 benchmarks/bench_kernels.py
"""
import os
import subprocess
import sys
import time

import numpy as np

from crossmae.kernels import BACKEND, fallback

try:
    from crossmae.kernels import _ckern
except ImportError:
    _ckern = None


def bench(fn, *args, repeat=200):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def micro():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((256, 64))
    gy = rng.standard_normal((256, 64))
    gain = np.ones(64)
    bias = np.zeros(64)
    y, xhat, inv_std = fallback.layernorm_fwd(x, gain, bias, 1e-5)
    logits = rng.standard_normal((256, 256))
    soft = fallback.softmax_fwd(logits)
    p = rng.standard_normal(100_000)
    g = rng.standard_normal(100_000)
    m = np.zeros(100_000)
    v = np.zeros(100_000)

    cases = [
        ("gelu_fwd", (x,)),
        ("gelu_bwd", (x, gy)),
        ("softmax_fwd", (logits,)),
        ("softmax_bwd", (soft, logits)),
        ("layernorm_fwd", (x, gain, bias, 1e-5)),
        ("layernorm_bwd", (xhat, inv_std, gain, gy)),
        ("adamw_update", (p, g, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.01, 0.1, 0.05)),
    ]
    print(f"{'kernel':<16}{'fallback us':>14}{'compiled us':>14}{'speedup':>10}")
    for name, args in cases:
        fb = bench(getattr(fallback, name), *[np.array(a, copy=True) if isinstance(a, np.ndarray) else a for a in args])
        if _ckern is not None:
            ck = bench(getattr(_ckern, name), *[np.array(a, copy=True) if isinstance(a, np.ndarray) else a for a in args])
            print(f"{name:<16}{fb:>14.1f}{ck:>14.1f}{fb / ck:>10.2f}x")
        else:
            print(f"{name:<16}{fb:>14.1f}{'n/a':>14}{'n/a':>10}")


def step_time():
    from crossmae.masking import CROSS
    from crossmae.model import ArchSpec
    from crossmae.train import OptimConfig, PretrainConfig, pretrain
    from crossmae.windows import SynthSpec, generate_windows

    windows = generate_windows(SynthSpec(n_windows=8, n_modalities=6, n_samples=64,
                                         n_classes=4, shared_latent_strength=0.9,
                                         noise_sd=0.3, seed=0))
    arch = ArchSpec(n_modalities=6, n_patches=8, patch_len=8)
    cfg = PretrainConfig(policy=CROSS, mask_ratio=0.75,
                         optim=OptimConfig(epochs=20, warmup_epochs=2, batch_size=8))
    t0 = time.perf_counter()
    pretrain(windows, arch, cfg, seed=0)
    per_step = (time.perf_counter() - t0) / 20 * 1e3
    print(f"pretrain step ({BACKEND}): {per_step:.1f} ms")


def main():
    if "--step-only" in sys.argv:
        step_time()
        return
    print(f"active backend: {BACKEND}")
    micro()
    step_time()
    sys.stdout.flush()
    env = dict(os.environ, CROSSMAE_NO_EXT="1")
    subprocess.run([sys.executable, os.path.abspath(__file__), "--step-only"],
                   env=env, check=True)


if __name__ == "__main__":
    main()
