"""Cost-model estimates next to simulated iteration times.

For each N and mode, prints the closed-form estimate and the span of the
first simulated iteration under the same config.  Mask-mode rows agree
exactly.  Tree-mode estimates are upper bounds: each round is charged a
full c-input aggregation, while the simulation charges only for the
partials a node actually receives.

    python scripts/costmodel_sweep.py --n 1 2 4 8 16 --c 2 4
"""
import argparse
import csv
import sys

from teeagg.config import JobConfig
from teeagg.costmodel import CostParams, crossover, estimate_mask, estimate_tree
from teeagg.simnet import run_job


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ap.add_argument("--c", type=int, nargs="+", default=[2, 4])
    args = ap.parse_args(argv)

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["n", "mode", "c", "estimate", "simulated"])
    for n in args.n:
        cfg = JobConfig(n_training=n, epochs=1)
        p = CostParams.from_config(cfg)
        a, b = run_job(cfg).iteration_spans[0]
        out.writerow([n, "mask", "", repr(estimate_mask(p, n)), repr(b - a)])
        for c in args.c:
            tcfg = JobConfig(n_training=n, epochs=1, mode="tree", children_c=c)
            a, b = run_job(tcfg).iteration_spans[0]
            out.writerow([n, "tree", c, repr(estimate_tree(p, n, c)), repr(b - a)])
    p = CostParams.from_config(JobConfig())
    for c in args.c:
        print(f"# first n where tree is recommended (c={c}): {crossover(p, c)}", file=sys.stderr)


if __name__ == "__main__":
    main()
