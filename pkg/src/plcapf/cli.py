"""Command-line entry point.

Every option can also be set through an environment variable named
``PLCAPF_`` plus the option's destination in upper case (for example
``PLCAPF_PARTICLES=200`` or ``PLCAPF_SIGMA=0.02``).  Explicit flags win over
the environment, which wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from plcapf import io
from plcapf.pipeline import ESTIMATORS, RunConfig, StageError, _cli_exit, run

ENV_PREFIX = "PLCAPF_"


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [x for x in str(text).replace(",", " ").split()]


class _EnvDefaults:
    """Adds options whose default can come from ``PLCAPF_<DEST>``."""

    def __init__(self, parser):
        self.parser = parser

    def __call__(self, *flags, dest, type=str, default=None, nargs=None, **kw):
        env = os.environ.get(ENV_PREFIX + dest.upper())
        if env is not None:
            try:
                if nargs in ("+", "*"):
                    default = [type(v) for v in _str_list(env)]
                else:
                    default = type(env)
            except ValueError:
                raise SystemExit(f"plcapf: error [config] bad value {env!r} in {ENV_PREFIX}{dest.upper()}")
        self.parser.add_argument(*flags, dest=dest, type=type, default=default, nargs=nargs, **kw)


def _add_run(sub):
    p = sub.add_parser("run", help="estimate activity, extract notes, score against a reference")
    opt = _EnvDefaults(p)
    opt("--spectrogram", dest="spectrogram", required=False, help="spectrogram CSV")
    opt("--templates", dest="templates", help="templates CSV")
    opt("--reference", dest="reference", help="reference notes JSON (optional)")
    opt("--estimator", dest="estimator", default="pf", choices=ESTIMATORS)
    opt("--particles", dest="particles", type=int, default=500)
    opt("--sigma", dest="sigma", type=float, default=0.05, help="observation noise std on unit-sum frames")
    opt("--seed", dest="seed", type=int, default=0)
    opt("--threshold", dest="threshold", type=float,
        help="absolute detection threshold (default 0.1 x max activity)")
    opt("--priors", dest="priors", nargs="+", default=[], help="prior matrix CSV files")
    opt("--prior-weight", dest="prior_weight", type=float, default=1.0)
    opt("--workers", dest="workers", type=int, default=1)
    opt("--out", dest="out", default="out")
    opt("--theta-shape", dest="theta_shape", type=float, default=50.0)
    opt("--mode-shape", dest="mode_shape", type=float, default=50.0)
    opt("--shift-shape", dest="shift_shape", type=float, default=50.0)
    opt("--mh-iters", dest="mh_iters", type=int, default=10)
    opt("--mh-step", dest="mh_step", type=float, default=0.02)
    opt("--em-iters", dest="em_iters", type=int, default=100)
    opt("--em-tol", dest="em_tol", type=float, default=1e-6)
    opt("--sparsity", dest="sparsity", type=float, default=1.02)
    opt("--min-duration", dest="min_duration", type=float, default=0.05)
    opt("--onset-tol", dest="onset_tol", type=float, default=0.05)
    p.set_defaults(handler=cmd_run)


def cmd_run(args, argv) -> int:
    if not args.spectrogram or not args.templates:
        raise StageError("config", "run needs --spectrogram and --templates")
    try:
        config = RunConfig(
            spectrogram=args.spectrogram, templates=args.templates, out=args.out,
            estimator=args.estimator, reference=args.reference, priors=args.priors,
            n_particles=args.particles, sigma=args.sigma, theta_shape=args.theta_shape,
            mode_shape=args.mode_shape, shift_shape=args.shift_shape, mh_iters=args.mh_iters,
            mh_step=args.mh_step, prior_weight=args.prior_weight, em_iters=args.em_iters,
            em_tol=args.em_tol, sparsity_exponent=args.sparsity, threshold=args.threshold,
            min_duration_s=args.min_duration, onset_tol_s=args.onset_tol, seed=args.seed,
            workers=args.workers,
        )
    except ValueError as exc:
        raise StageError("config", str(exc)) from exc
    manifest = run(config, argv)
    summary = {"out": config.out, "n_notes": manifest["n_notes"], "metrics": manifest["metrics"]}
    print(json.dumps(summary))
    return 0


def _add_synth(sub):
    p = sub.add_parser("synth", help="render a synthetic scenario with ground truth")
    opt = _EnvDefaults(p)
    opt("--kind", dest="kind", default="mono", choices=("single", "mono", "poly"))
    opt("--pitches", dest="pitches", type=int, default=12)
    opt("--notes", dest="notes", type=int, default=20, help="notes (single, mono) or chords (poly)")
    opt("--dictionary", dest="dictionary", choices=("disjoint", "harmonic"),
        help="template family (default: harmonic for poly, disjoint otherwise)")
    opt("--noise", dest="noise", type=float, default=0.0, help="generator noise std (default 0)")
    opt("--pitch", dest="pitch", type=int, default=0, help="the pitch used by --kind single")
    opt("--seed", dest="seed", type=int, default=0)
    opt("--out", dest="out", default="synth")
    p.set_defaults(handler=cmd_synth)


def make_synthetic(kind="mono", pitches=12, notes=20, dictionary=None, noise=0.0, seed=0, pitch=0):
    """Scenario, dictionary, spectrogram and true activity for the CLI and benchmarks."""
    from plcapf.synth import (
        disjoint_templates,
        harmonic_templates,
        polyphonic_scenario,
        sequential_scenario,
        single_pitch_scenario,
        synthesize,
    )

    dictionary = dictionary or ("harmonic" if kind == "poly" else "disjoint")
    dct = disjoint_templates(pitches) if dictionary == "disjoint" else harmonic_templates(pitches)
    if kind == "single":
        scenario = single_pitch_scenario(notes, pitch, noise_sigma=noise)
    elif kind == "mono":
        scenario = sequential_scenario(notes, pitches, noise_sigma=noise, rng=seed)
    else:
        scenario = polyphonic_scenario(notes, pitches, noise_sigma=noise, rng=seed)
    scenario.meta.update(kind=kind, dictionary=dictionary, seed=seed)
    spec, truth = synthesize(scenario, dct, rng=seed + 1)
    return scenario, dct, spec, truth


def cmd_synth(args, argv) -> int:
    try:
        scenario, dct, spec, truth = make_synthetic(
            args.kind, args.pitches, args.notes, args.dictionary, args.noise, args.seed, args.pitch
        )
    except ValueError as exc:
        raise StageError("synthesize", str(exc)) from exc
    out = Path(args.out)
    try:
        files = {
            "spectrogram": io.save_spectrogram(out / "spectrogram.csv", spec),
            "templates": io.save_templates(out / "templates.csv", dct),
            "reference": io.save_notes(out / "reference.json", scenario.events),
            "truth": io.save_activity(out / "truth.csv", truth, spec.frame_hop_seconds),
            "scenario": io.save_scenario(out / "scenario.json", scenario),
        }
    except OSError as exc:
        raise StageError("write", str(exc)) from exc
    print(json.dumps({k: str(v) for k, v in files.items()}))
    return 0


def _add_train_priors(sub):
    p = sub.add_parser("train-priors", help="build prior matrices from notes and spectra")
    opt = _EnvDefaults(p)
    opt("--corpus", dest="corpus", help="training notes JSON")
    opt("--pitches", dest="pitches", type=int, help="number of pitches (default: from corpus)")
    opt("--free", dest="free", help="free-resonance spectra CSV")
    opt("--muted", dest="muted", help="muted spectra CSV")
    opt("--out", dest="out", default="priors")
    p.set_defaults(handler=cmd_train_priors)


def cmd_train_priors(args, argv) -> int:
    from plcapf.priors import build_cooccurrence_prior, build_resonance_prior, build_transition_prior

    if not args.corpus and not (args.free and args.muted):
        raise StageError("config", "train-priors needs --corpus and/or both --free and --muted")
    if bool(args.free) != bool(args.muted):
        raise StageError("config", "--free and --muted must be given together")
    out = Path(args.out)
    written = {}
    try:
        priors = []
        if args.corpus:
            corpus = io.load_corpus(args.corpus, n_pitches=args.pitches)
            priors += [build_cooccurrence_prior(corpus), build_transition_prior(corpus)]
        if args.free:
            priors.append(build_resonance_prior(io.load_spectra(args.free), io.load_spectra(args.muted)))
    except (OSError, ValueError) as exc:
        raise StageError("train", str(exc)) from exc
    try:
        for prior in priors:
            written[prior.kind] = str(io.save_prior(out / f"{prior.kind}.csv", prior))
    except OSError as exc:
        raise StageError("write", str(exc)) from exc
    print(json.dumps(written))
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="score estimated notes against reference notes")
    opt = _EnvDefaults(p)
    opt("--estimated", dest="estimated", required=False)
    opt("--reference", dest="reference", required=False)
    opt("--onset-tol", dest="onset_tol", type=float, default=0.05)
    opt("--out", dest="out", help="write metrics JSON here")
    p.set_defaults(handler=cmd_eval)


def cmd_eval(args, argv) -> int:
    from plcapf.transcription import evaluate

    if not args.estimated or not args.reference:
        raise StageError("config", "eval needs --estimated and --reference")
    try:
        est, ref = io.load_notes(args.estimated), io.load_notes(args.reference)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    try:
        report = evaluate(est, ref, args.onset_tol)
    except ValueError as exc:
        raise StageError("evaluate", str(exc)) from exc
    if args.out:
        io.save_metrics(args.out, report)
    print(json.dumps(report.to_dict()))
    return 0


def _add_bench(sub):
    p = sub.add_parser("bench-particles", help="runtime and F-measure against the particle count")
    opt = _EnvDefaults(p)
    opt("--spectrogram", dest="spectrogram")
    opt("--templates", dest="templates")
    opt("--reference", dest="reference")
    opt("--particles", dest="particles", type=_int_list, default=[10, 100, 500])
    opt("--seeds", dest="seeds", type=int, default=3)
    opt("--sigma", dest="sigma", type=float, default=0.05)
    opt("--seed", dest="seed", type=int, default=0)
    opt("--workers", dest="workers", type=int, default=1)
    opt("--pitches", dest="pitches", type=int, default=12)
    opt("--notes", dest="notes", type=int, default=20)
    opt("--noise", dest="noise", type=float, default=0.02)
    opt("--out", dest="out", help="write the sweep as JSON here")
    p.set_defaults(handler=cmd_bench)


def bench_particles(spec, dictionary, reference, counts, n_seeds=3, sigma=0.05, seed=0, workers=1):
    """Mean wall-clock and F-measure of the particle filter for each count."""
    from plcapf.particles import FilterConfig, filter as particle_filter
    from plcapf.transcription import evaluate, extract_notes

    rows = []
    for n in counts:
        times, fs = [], []
        for s in range(n_seeds):
            cfg = FilterConfig(n_particles=int(n), sigma=sigma, seed=seed + s,
                               store_ensembles=False, workers=workers)
            start = time.perf_counter()
            result = particle_filter(spec, dictionary, cfg)
            times.append(time.perf_counter() - start)
            if reference is not None:
                notes = extract_notes(result.activations, spec.frame_hop_seconds)
                fs.append(evaluate(notes, reference).f_measure)
        row = {"n_particles": int(n), "seconds": float(np.mean(times)), "seconds_all": times}
        if fs:
            row.update(f_measure=float(np.mean(fs)), f_measure_all=fs)
        rows.append(row)
    return rows


def cmd_bench(args, argv) -> int:
    if any(n < 1 for n in args.particles):
        raise StageError("config", "particle counts must be positive")
    try:
        if args.spectrogram and args.templates:
            spec, dct = io.load_spectrogram(args.spectrogram), io.load_templates(args.templates)
            reference = io.load_notes(args.reference) if args.reference else None
        else:
            scenario, dct, spec, _ = make_synthetic("mono", args.pitches, args.notes, noise=args.noise,
                                                    seed=args.seed)
            reference = scenario.events
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    rows = bench_particles(spec, dct, reference, args.particles, args.seeds, args.sigma,
                           args.seed, args.workers)
    doc = {"schema": "plcapf-bench/1", "sweep": rows}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    for row in rows:
        f = row.get("f_measure")
        print(f"N={row['n_particles']:>6d}  {row['seconds']:8.3f} s" + (f"  F={f:.3f}" if f is not None else ""))
    return 0


def _add_split(sub):
    p = sub.add_parser("split", help="split a note corpus into train and test sets")
    opt = _EnvDefaults(p)
    opt("--corpus", dest="corpus")
    opt("--test-fraction", dest="test_fraction", type=float, default=0.3)
    opt("--segment", dest="segment", type=float, help="cut pieces into windows of this many seconds")
    opt("--pitches", dest="pitches", type=int)
    opt("--seed", dest="seed", type=int, default=0)
    opt("--out", dest="out", default="split")
    p.set_defaults(handler=cmd_split)


def cmd_split(args, argv) -> int:
    from plcapf.corpus import split_corpus

    if not args.corpus:
        raise StageError("config", "split needs --corpus")
    try:
        corpus = io.load_corpus(args.corpus, n_pitches=args.pitches)
        train, test = split_corpus(corpus, args.test_fraction, args.seed, args.segment)
    except (OSError, ValueError) as exc:
        raise StageError("split", str(exc)) from exc
    out = Path(args.out)
    files = {
        "train": str(io.save_corpus(out / "train.json", train)),
        "test": str(io.save_corpus(out / "test.json", test)),
    }
    print(json.dumps({**files, "n_train": len(train.pieces), "n_test": len(test.pieces)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plcapf",
        description="Particle-filter SIPLCA transcription. "
        f"Options also read {ENV_PREFIX}<OPTION> environment variables.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_run, _add_synth, _add_train_priors, _add_eval, _add_bench, _add_split):
        add(sub)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args, argv)
    except StageError as exc:
        return _cli_exit(exc)


if __name__ == "__main__":
    sys.exit(main())
