#!/usr/bin/env python3
"""Train all module variants across several seeds and tabulate
occluded-point EPE per variant."""

import argparse
import dataclasses
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from flowagg.config import parse_config_file
from flowagg.train import ABLATION_VARIANTS, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(
        os.path.dirname(__file__), os.pardir, "configs", "ablation_local.cfg"))
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    base = parse_config_file(args.config)
    print(f"config: {args.config}")
    header = "seed " + " ".join(f"{v:>16}" for v in ABLATION_VARIANTS)
    print(header)
    sums = {v: 0.0 for v in ABLATION_VARIANTS}
    for seed in range(args.seeds):
        cfg = dataclasses.replace(base)
        cfg.scene = dataclasses.replace(base.scene, seed=seed)
        cfg.train = dataclasses.replace(base.train, seed=seed)
        reports = run_ablation(cfg)
        row = [f"{seed:>4}"]
        for v in ABLATION_VARIANTS:
            e = reports[v].metrics_occluded.epe_m
            sums[v] += e
            row.append(f"{e:>16.5f}")
        print(" ".join(row))
    print("mean " + " ".join(f"{sums[v] / args.seeds:>16.5f}"
                             for v in ABLATION_VARIANTS))


if __name__ == "__main__":
    main()
