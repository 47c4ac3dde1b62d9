"""Simulated per-iteration time of masked vs tree aggregation as N grows.

Writes CSV to stdout: n, mode, mean iteration time, aggregator inbound
bytes per iteration, and whether the final model matched the oracle.

    python scripts/scaling_sweep.py --n 1 2 4 8 16 32 --c 2 --epochs 1
"""
import argparse
import csv
import sys

from teeagg.config import JobConfig
from teeagg.oracle import run_oracle
from teeagg.simnet import run_job


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32])
    ap.add_argument("--c", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["n", "mode", "mean_iteration_time", "aggregator_bytes_in", "matches_oracle"])
    for n in args.n:
        for mode in ("mask", "tree"):
            cfg = JobConfig(n_training=n, mode=mode, children_c=args.c, epochs=args.epochs, seed=args.seed)
            res = run_job(cfg)
            spans = [b - a for a, b in res.iteration_spans.values()]
            inbound = sum(t.size for t in res.trace if t.dst == "aggregator") / len(spans)
            same = res.final_weights == run_oracle(cfg).final_weights
            out.writerow([n, mode, repr(sum(spans) / len(spans)), repr(inbound), same])


if __name__ == "__main__":
    main()
