"""Weighted-CE vs fusion crispness comparison over several seeds.

    python scripts/run_ab.py --seeds 0 1 2 3 4 [--set key=value ...] [--out results.tsv]

Prints one table per seed and a final count of seeds where the fusion model
has strictly higher pre-NMS ODS and a thickness ratio at least 20% lower.
"""

import argparse
import time

from crispedge.config import load_config, parse_overrides
from crispedge.experiment import run_ab


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default=None, help="append per-seed rows to this TSV")
    args = ap.parse_args()
    base = parse_overrides(args.set, load_config(args.config) if args.config else None)
    wins = 0
    start = time.perf_counter()
    for seed in args.seeds:
        t = time.perf_counter()
        res = run_ab(base.replace(seed=seed))
        ok = res.fusion_wins(0.20)
        wins += ok
        print(f"seed {seed} ({time.perf_counter() - t:.0f}s) fusion wins: {ok}\n{res.to_table()}\n", flush=True)
        if args.out:
            with open(args.out, "a") as fh:
                for name, r in res.rows.items():
                    fh.write(f"{' '.join(args.set) or 'default'}\t{seed}\t{name}\t{r.pre_nms_ods:.4f}"
                             f"\t{r.post_nms_ods:.4f}\t{r.thickness_ratio:.4f}\n")
    print(f"fusion wins {wins}/{len(args.seeds)} seeds in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
