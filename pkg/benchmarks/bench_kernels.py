"""Compiled vs pure-Python kernels: per-call timings and a whole filter run.

Usage: python3 benchmarks/bench_kernels.py [--particles 500] [--repeat 20]
"""

import argparse
import json
import time

import numpy as np

from plcapf import kernels
from plcapf.particles import FilterConfig, filter as particle_filter
from plcapf.synth import harmonic_templates, polyphonic_scenario, synthesize


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=500)
    ap.add_argument("--pitches", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args()

    dct = harmonic_templates(args.pitches)
    rng = np.random.default_rng(0)
    n, k = args.particles, dct.basis.shape[0]
    # sparse-ish mixtures, as after Dirichlet draws with small concentrations
    weights = rng.dirichlet(np.full(k, 0.1), size=n)
    observed = weights[0] @ dct.basis
    cdf = np.cumsum(rng.dirichlet(np.ones(n)))
    positions = (rng.random() + np.arange(n)) / n

    scenario = polyphonic_scenario(4, args.pitches, noise_sigma=0.02, rng=0)
    spec, _ = synthesize(scenario, dct, rng=1)
    cfg = FilterConfig(n_particles=n, sigma=0.05, seed=0, store_ensembles=False)

    results = {}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            results[name] = {
                "reconstruct_s": best_of(lambda: kernels.reconstruct(weights, dct.basis), args.repeat),
                "mixture_loglik_s": best_of(
                    lambda: kernels.mixture_loglik(weights, dct.basis, observed, 0.05), args.repeat
                ),
                "cdf_traverse_s": best_of(lambda: kernels.cdf_traverse(cdf, positions), args.repeat),
                "filter_s": best_of(lambda: particle_filter(spec, dct, cfg), max(1, args.repeat // 10)),
            }
    shape = {"particles": n, "components": k, "bins": dct.n_bins, "frames": spec.n_frames}
    if args.json:
        print(json.dumps({"shape": shape, "results": results}, indent=2))
        return
    print(f"N={n} K={k} F={dct.n_bins} T={spec.n_frames}")
    names = list(results)
    print(f"{'kernel':<18}" + "".join(f"{nm:>12}" for nm in names) + ("     speedup" if len(names) == 2 else ""))
    for key in results[names[0]]:
        row = [results[nm][key] for nm in names]
        line = f"{key[:-2]:<18}" + "".join(f"{v * 1e3:>10.3f}ms" for v in row)
        if len(row) == 2:
            line += f"{row[1] / row[0]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
