#!/usr/bin/env python3
"""Region-selection ablation grid on the toy benchmark.

Runs the shared statistics/transfer phases once per seed, then the four
adaptation variants (both label filters, each alone, neither) plus the
source-only baseline, and prints a per-variant mIoU table of medians over
seeds.

Example:
    python scripts/run_ablation.py --seeds 7 8 9 --out runs/ablation
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from mtda.config import ExperimentConfig
from mtda.pipeline import (
    build_datasets,
    init_models,
    phase_adapt,
    phase_eval,
    phase_mtdt,
    phase_stats,
    phase_transfer,
    run_source_only_baseline,
)

VARIANTS = [
    ("neither", dict(bars_source=False, bars_target=False)),
    ("source-filter", dict(bars_source=True, bars_target=False)),
    ("target-filter", dict(bars_source=False, bars_target=True)),
    ("both", dict(bars_source=True, bars_target=True)),
]


def run_seed(cfg: ExperimentConfig, out: Path) -> dict[str, dict[str, float]]:
    out.mkdir(parents=True, exist_ok=True)
    data = build_datasets(cfg)
    model, disc, pnet = init_models(cfg)
    stats_list, _ = phase_stats(cfg, model, data, out)
    phase_mtdt(cfg, model, disc, pnet, data, stats_list, out)
    transferred = phase_transfer(cfg, model, data, stats_list, out)

    results: dict[str, dict[str, float]] = {}
    for name, flags in VARIANTS:
        variant_cfg = ExperimentConfig(**{**cfg.__dict__, **flags,
                                          "targets": tuple(cfg.targets),
                                          "out_dir": str(out / name)})
        (out / name).mkdir(exist_ok=True)
        net, _ = phase_adapt(variant_cfg, data, transferred, out / name)
        ev = phase_eval(variant_cfg, net, data, out / name)
        results[name] = {k: v["miou"] for k, v in ev.items()}
    _, results["source-only"] = run_source_only_baseline(cfg, data)
    return results


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg0 = ExperimentConfig()
    per_seed = []
    for seed in args.seeds:
        cfg = ExperimentConfig(**{**cfg0.__dict__, "seed": seed,
                                  "targets": tuple(cfg0.targets)})
        res = run_seed(cfg, Path(args.out) / f"seed{seed}")
        per_seed.append(res)
        print(f"seed {seed}: " + "  ".join(
            f"{name}={np.mean(list(v.values())):.1f}" for name, v in res.items()))

    domains = list(per_seed[0]["both"].keys())
    print("\nmedian mIoU over seeds:")
    header = f"{'variant':<14}" + "".join(f"{d:>10}" for d in domains) + f"{'avg':>10}"
    print(header)
    for name, _ in VARIANTS + [("source-only", None)]:
        row = [float(np.median([r[name][d] for r in per_seed])) for d in domains]
        print(f"{name:<14}" + "".join(f"{v:>10.2f}" for v in row)
              + f"{np.mean(row):>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
