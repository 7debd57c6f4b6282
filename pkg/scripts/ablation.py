"""Module ablation (five variants) over the config's ablation seeds.

Writes ablation.csv plus per-variant accuracy matrices, and prints the
per-seed forgetting ordering check.

    python scripts/ablation.py [--config configs/desk.json] [--out runs/ablation]
"""

import argparse
from pathlib import Path

from ramf import cli
from ramf import config as cfgmod
from ramf.metrics import average_forgetting

CHAIN = ("Baseline", "+BaseClassAug", "+MF", "+MF+AC")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    cfg = cfgmod.load(args.config)
    seeds = list(cfg.ablation_seeds) or [cfg.seed]
    train, test = cli.load_data(cfg.data)
    results = cli.ablation_grid(cfg, train, test, seeds)
    files = {"ablation.csv": cli.ablation_table(results, seeds)}
    for name, per_seed in results.items():
        for s, r in per_seed.items():
            files[f"{cli._slug(name)}/seed_{s}/acc_matrix.csv"] = r.matrix.to_csv()
    cli.write_all(Path(args.out), files)
    print(files["ablation.csv"], end="")
    for s in seeds:
        f = [average_forgetting(results[v][s].matrix, results[v][s].matrix.num_tasks) for v in CHAIN]
        ok = all(a >= b for a, b in zip(f, f[1:]))
        print(f"seed {s}: " + " >= ".join(f"{100 * x:.1f}" for x in f) + ("  holds" if ok else "  broken"))


if __name__ == "__main__":
    main()
