"""RAMF against plain fine-tuning on the desk config, one line per seed.

    python scripts/desk_compare.py [--config configs/desk.json] [--seeds 0 1 2]
"""

import argparse
import copy
import time

from ramf import cli
from ramf import config as cfgmod
from ramf.metrics import average_accuracy, average_forgetting, incremental_average
from ramf.trainer import PRESETS, run_experiment, train_initial


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    cfg = cfgmod.load(args.config)
    train, test = cli.load_data(cfg.data)
    print("seed,method,final_A_percent,final_F_percent,incremental_average_percent,seconds")
    for seed in args.seeds:
        split = cli._split(cfg, train, seed)
        for method in ("finetune", "ramf"):
            mc = cfg.method_config(PRESETS[method])
            t0 = time.perf_counter()
            st = train_initial(mc, train.subset(split.stage_classes[0]), seed, split.stage_classes[0])
            res = run_experiment(mc, train, test, split, seed, with_reference=False, initial_state=copy.deepcopy(st))
            m = res.matrix
            print(
                f"{seed},{method},{100 * average_accuracy(m, m.num_tasks):.2f},"
                f"{100 * average_forgetting(m, m.num_tasks):.2f},{100 * incremental_average(m.overall):.2f},"
                f"{time.perf_counter() - t0:.0f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
