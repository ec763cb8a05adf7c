"""Tune the synthetic generator's peak widths so the congested fraction (c > 1) averages a target.

Bisects a common width scale over a set of seeds and prints the resulting
peak tuple; the printed values are frozen as DEFAULT_PEAKS in pcnn/synth.py.

    python3 scripts/calibrate_synth.py --target 0.36 --seeds 20
"""

import argparse

import numpy as np

from pcnn.synth import DEFAULT_PEAKS, SynthConfig, generate


def mean_fraction(peaks, seeds):
    return float(np.mean([generate(SynthConfig(seed=s, peaks=peaks)).congested_fraction() for s in seeds]))


def scaled(base, k):
    return tuple((c, round(w * k, 4), a) for c, w, a in base)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", type=float, default=0.36)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--iters", type=int, default=25)
    args = ap.parse_args()
    seeds = range(args.seeds)

    lo, hi = 0.2, 2.0
    for _ in range(args.iters):
        mid = 0.5 * (lo + hi)
        if mean_fraction(scaled(DEFAULT_PEAKS, mid), seeds) > args.target:
            hi = mid
        else:
            lo = mid
    k = 0.5 * (lo + hi)
    peaks = scaled(DEFAULT_PEAKS, k)
    fr = [generate(SynthConfig(seed=s, peaks=peaks)).congested_fraction() for s in seeds]
    print(f"width scale {k:.4f}")
    print(f"peaks = {peaks}")
    print(f"congested fraction: mean {np.mean(fr):.3f}, min {np.min(fr):.3f}, max {np.max(fr):.3f}")


if __name__ == "__main__":
    main()
