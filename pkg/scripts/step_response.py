"""Dual-arm pitch step: overshoot, 2% settling and grasp rigidity."""
import argparse

import numpy as np

from dualtray.dualarm import DualArmActuator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pitch", type=float, default=0.3, help="[rad]")
    ap.add_argument("--steps", type=int, default=300)
    args = ap.parse_args()

    act = DualArmActuator()
    betas, rigid = [], []
    for _ in range(args.steps):
        tray = act.step((0.0, args.pitch), 0.002)
        betas.append(tray.tilt[1])
        rigid.append(act.rigidity_error())
    betas = np.array(betas)
    t = 0.002 * np.arange(1, len(betas) + 1)
    outside = np.nonzero(np.abs(betas - args.pitch) > 0.02 * abs(args.pitch))[0]
    settle = t[outside[-1] + 1] if len(outside) and outside[-1] + 1 < len(t) else (0.0 if not len(outside) else np.inf)
    print(f"overshoot   {100 * (betas.max() / args.pitch - 1):.2f} %")
    print(f"settling    {settle:.3f} s")
    print(f"rigidity    {1e3 * max(rigid):.3f} mm")
    print(f"fallbacks   {act.flags['fallback']}")


if __name__ == "__main__":
    main()
