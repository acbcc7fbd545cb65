"""Compare the guaranteed per-iteration contraction with the observed one.

For each seeded instance prints m, the guaranteed factor 1 - m^3/4 (as its
gap m^3/4 from 1), and the worst observed ratio KL(p_{k+1}||p*)/KL(p_k||p*)
while KL is above the noise floor. Output is CSV on stdout.

    python scripts/rate_gap.py --instances 50 --iterations 100
"""

import argparse
import csv
import sys

from imflab.imf import ImfConfig, run_imf
from imflab.oracle import solve_bridge
from imflab.process import GeneratorSpec, bridge_conditional, build_markov_joint, init_p0, random_instance
from imflab.theory import compute_constants

GEOMETRIES = [(2, 1), (2, 2), (3, 1), (3, 2)]


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=50)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--concentration", type=float, default=1.0)
    ap.add_argument("--floor", type=float, default=1e-3)
    args = ap.parse_args(argv)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["seed", "cardinality", "interior_count", "m", "guaranteed_gap", "observed_ratio", "iterations_to_1e-12"])
    for seed in range(args.instances):
        k, n = GEOMETRIES[seed % len(GEOMETRIES)]
        inst = random_instance(GeneratorSpec(k, n, seed, args.concentration, args.floor))
        q = build_markov_joint(inst.spec)
        bridge = bridge_conditional(q)
        consts = compute_constants(bridge, inst.marginals)
        opt = solve_bridge(q, inst.marginals, bridge=bridge).lifted
        p0 = init_p0(bridge, inst.coupling, inst.marginals)
        trace = run_imf(p0, bridge, opt, ImfConfig(args.iterations, stop_kl=0.0, record_gradients=False))
        kl = [r.kl_to_opt for r in trace.integer_rows()]
        ratios = [b / a for a, b in zip(kl, kl[1:]) if a > 1e-13 and b > 1e-13]
        hit = next((i for i, v in enumerate(kl) if v < 1e-12), None)
        w.writerow([seed, k, n, f"{consts.m:.6g}", f"{consts.rate:.6g}",
                    f"{max(ratios):.6g}" if ratios else "nan", hit if hit is not None else ""])


if __name__ == "__main__":
    main()
