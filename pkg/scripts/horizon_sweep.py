"""Receding-horizon runs for several horizons (PMPC, cube, ideal servo).

Reports when the position error starts to decrease monotonically and where it ends.
"""
import argparse
from dataclasses import replace

import numpy as np

from dualtray.bench import EpisodeSpec, run_episode
from dualtray.config import BenchConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--horizons", type=int, nargs="+", default=[20, 40, 80])
    ap.add_argument("--duration", type=float, default=3.0)
    args = ap.parse_args()

    for N in args.horizons:
        cfg = BenchConfig()
        cfg = replace(cfg, mpc=replace(cfg.mpc, N=N))
        log, rec = run_episode(EpisodeSpec(duration=args.duration), cfg)
        t = log.column("t")
        e = np.hypot(log.column("px") - 0.10, log.column("py"))
        rising = np.nonzero(np.diff(e) > 0)[0]
        onset = t[rising[-1] + 1] if len(rising) else 0.0
        print(f"N={N:3d}  monotone from {onset:.3f} s  final {e[-1]:.2e} m  sse {1e3 * rec.steady_state_error:.2f} mm")


if __name__ == "__main__":
    main()
