"""Run the metric-axiom sampler for several costs and print one JSON report each."""
import argparse
import json
import time

from conicuot.cli import parse_cost
from conicuot.metrics import metric_axioms_test


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--costs", default="ghk;hk;cone_power(2,2,pi/2);cone_power(1,1,pi)",
                    help="semicolon-separated cost names")
    ap.add_argument("--samples", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    for name in args.costs.split(";"):
        t0 = time.perf_counter()
        rep = metric_axioms_test(parse_cost(name), n_samples=args.samples, seed=args.seed, threads=args.threads)
        print(json.dumps({**rep.to_json(), "seconds": round(time.perf_counter() - t0, 1)}), flush=True)


if __name__ == "__main__":
    main()
