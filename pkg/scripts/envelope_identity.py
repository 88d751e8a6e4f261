"""Compare the radial convex envelope of one cone cost with a closed-form target.

By default the squared cone distance with truncation pi is convexified and
compared with the same cost truncated at pi/2.  Prints the maximum absolute
error per ground distance as CSV.
"""
import argparse
import csv
import math
import sys

import numpy as np

from conicuot.cli import parse_cost
from conicuot.costs import radial_cc_envelope


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cost", default="cone_power(2,2,pi)", help="cost to convexify")
    ap.add_argument("--target", default="cone_power(2,2,pi/2)", help="closed-form comparison cost")
    ap.add_argument("--radii", type=int, default=50, help="radial grid points per axis")
    ap.add_argument("--r-max", type=float, default=3.0)
    ap.add_argument("--distances", type=int, default=20)
    ap.add_argument("--d-max", type=float, default=4.0)
    ap.add_argument("--resolution", type=int, default=2048, help="rays used for the envelope")
    args = ap.parse_args(argv)

    cost, target = parse_cost(args.cost), parse_cost(args.target)
    r = np.linspace(0.0, args.r_max, args.radii)
    R1, R2 = np.meshgrid(r, r, indexing="ij")
    out = csv.writer(sys.stdout)
    out.writerow(["d", "max_abs_error", "max_H_minus_envelope"])
    worst = 0.0
    for d in np.linspace(0.0, args.d_max, args.distances):
        env = radial_cc_envelope(cost, [0.0], [d], resolution=args.resolution)(R1, R2)
        err = float(np.max(np.abs(env - target.radial(R1, R2, d))))
        worst = max(worst, err)
        out.writerow([f"{d:.6f}", f"{err:.3e}", f"{float(np.max(cost.radial(R1, R2, d) - env)):.6f}"])
    print(f"# worst error {worst:.3e} (pi/2 = {math.pi / 2:.6f})", file=sys.stderr)


if __name__ == "__main__":
    main()
