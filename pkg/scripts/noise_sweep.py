"""Final forgetting of one variant as the prototype noise range varies.

    python scripts/noise_sweep.py [--variant Baseline] [--seeds 0 1 2]
"""

import argparse

from ramf import cli
from ramf import config as cfgmod
from ramf.metrics import average_forgetting
from ramf.trainer import ABLATION_VARIANTS, run_experiment

RANGES = ((0.0, 0.0), (0.1, 0.3), (0.5, 1.5), (1.0, 3.0))


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--variant", default="Baseline", choices=sorted(ABLATION_VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    print("r_min,r_max,seed,final_F_percent")
    for lo, hi in RANGES:
        cfg = cfgmod.load(args.config, [f"params.noise_range=[{lo}, {hi}]"])
        train, test = cli.load_data(cfg.data)
        for seed in args.seeds:
            split = cli._split(cfg, train, seed)
            mc = cfg.method_config(ABLATION_VARIANTS[args.variant])
            m = run_experiment(mc, train, test, split, seed, with_reference=False).matrix
            print(f"{lo},{hi},{seed},{100 * average_forgetting(m, m.num_tasks):.2f}", flush=True)


if __name__ == "__main__":
    main()
