"""End-to-end run: estimate activity, extract notes, score, write artifacts."""

from __future__ import annotations

import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from plcapf import __version__, io, kernels
from plcapf.em import EMConfig, em_estimate
from plcapf.particles import FilterConfig, filter as particle_filter
from plcapf.priors import MHConfig, PriorSet
from plcapf.transcription import (
    MIN_DURATION_S,
    ONSET_TOLERANCE_S,
    default_threshold,
    evaluate,
    extract_notes,
)

logger = logging.getLogger(__name__)

ESTIMATORS = ("pf", "pf_priors", "em", "daem")
ARTIFACTS = {
    "activity": "activity.csv",
    "notes": "notes.json",
    "metrics": "metrics.json",
    "manifest": "manifest.json",
}


class StageError(RuntimeError):
    """Failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    """Everything a run needs; recorded verbatim in the manifest."""

    spectrogram: str
    templates: str
    out: str = "out"
    estimator: str = "pf"
    reference: str | None = None
    priors: list = field(default_factory=list)
    n_particles: int = 500
    sigma: float = 0.05
    theta_shape: float = 50.0
    mode_shape: float = 50.0
    shift_shape: float = 50.0
    mh_iters: int = 10
    mh_step: float = 0.02
    prior_weight: float = 1.0
    em_iters: int = 100
    em_tol: float = 1e-6
    sparsity_exponent: float = 1.02
    daem_temperatures: tuple = (0.6, 0.8, 1.0)
    threshold: float | None = None
    min_duration_s: float = MIN_DURATION_S
    onset_tol_s: float = ONSET_TOLERANCE_S
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        positive = ("n_particles", "sigma", "theta_shape", "mode_shape", "shift_shape",
                    "mh_step", "em_iters", "em_tol", "min_duration_s", "onset_tol_s", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold!r}")
        if self.mh_iters < 0 or self.prior_weight < 0:
            raise ValueError("mh_iters and prior_weight must be >= 0")
        if self.estimator == "pf_priors" and not self.priors:
            raise ValueError("estimator pf_priors needs at least one prior file")
        self.priors = [str(p) for p in self.priors]
        self.daem_temperatures = tuple(float(b) for b in self.daem_temperatures)

    def filter_config(self) -> FilterConfig:
        mh = MHConfig(self.mh_iters, self.mh_step) if self.estimator == "pf_priors" else None
        return FilterConfig(
            n_particles=int(self.n_particles), sigma=self.sigma, theta_shape=self.theta_shape,
            mode_shape=self.mode_shape, shift_shape=self.shift_shape, seed=self.seed,
            store_ensembles=False, workers=int(self.workers), mh=mh,
        )

    def em_config(self) -> EMConfig:
        return EMConfig(int(self.em_iters), self.em_tol, self.daem_temperatures, self.sparsity_exponent)


def versions() -> dict:
    return {
        "plcapf": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "kernel_backend": kernels.BACKEND,
    }


def estimate(spec, dictionary, config: RunConfig, priors: PriorSet | None = None):
    """Run the configured estimator; returns ``(activity (I, T), diagnostics)``."""
    if config.estimator in ("pf", "pf_priors"):
        result = particle_filter(spec, dictionary, config.filter_config(), priors)
        diag = {
            "mean_ess": float(np.mean(result.ess)) if result.n_frames else None,
            "weight_collapses": list(map(int, result.collapses)),
            "skipped_frames": int(result.skipped.sum()),
        }
        if config.estimator == "pf_priors":
            diag["mh_acceptance"] = float(np.nanmean(result.acceptance)) if np.isfinite(result.acceptance).any() else None
        return result.activations, diag
    result = em_estimate(
        spec, dictionary, config.em_config(), init="uniform", rng=config.seed,
        annealed=config.estimator == "daem", workers=int(config.workers),
    )
    return result.activations, {"converged": result.converged, "iterations": result.n_iter}


def _stage(name, fn, timings):
    start = time.perf_counter()
    try:
        return fn()
    except StageError:
        raise
    except (OSError, ValueError, RuntimeError) as exc:
        raise StageError(name, str(exc)) from exc
    finally:
        timings[name] = time.perf_counter() - start


def run(config: RunConfig, argv: list | None = None) -> dict:
    """Execute estimator, note extraction and (optionally) evaluation.

    Returns the manifest, which is also written to ``<out>/manifest.json``.
    Any stage failure raises ``StageError`` tagged with the stage name.
    """
    started = time.perf_counter()
    timings: dict = {}
    out = Path(config.out)

    def load():
        spec = io.load_spectrogram(config.spectrogram)
        dictionary = io.load_templates(config.templates)
        reference = io.load_notes(config.reference) if config.reference else None
        priors = PriorSet([io.load_prior(p) for p in config.priors], config.prior_weight)
        for prior in priors:
            if prior.n_pitches != dictionary.n_pitches:
                raise ValueError(
                    f"prior of kind {prior.kind} covers {prior.n_pitches} pitches, "
                    f"templates cover {dictionary.n_pitches}"
                )
        return spec, dictionary, reference, priors

    spec, dictionary, reference, priors = _stage("load", load, timings)
    activity, diagnostics = _stage(
        "estimate", lambda: estimate(spec, dictionary, config, priors or None), timings
    )
    threshold = config.threshold if config.threshold is not None else default_threshold(activity)

    def extract():
        if threshold <= 0:
            return []
        return extract_notes(activity, spec.frame_hop_seconds, threshold, config.min_duration_s)

    notes = _stage("extract", extract, timings)

    stages = {"load": "ok", "estimate": "ok", "extract": "ok"}
    report = None
    if reference is not None:
        report = _stage("evaluate", lambda: evaluate(notes, reference, config.onset_tol_s), timings)
        stages["evaluate"] = "ok"
    else:
        stages["evaluate"] = "skipped: no reference notes given"

    def write():
        out.mkdir(parents=True, exist_ok=True)
        written = {
            "activity": str(io.save_activity(out / ARTIFACTS["activity"], activity, spec.frame_hop_seconds)),
            "notes": str(io.save_notes(out / ARTIFACTS["notes"], notes)),
        }
        if report is not None:
            written["metrics"] = str(io.save_metrics(out / ARTIFACTS["metrics"], report))
        return written

    outputs = _stage("write", write, timings)
    stages["write"] = "ok"
    manifest = {
        "command": list(argv) if argv is not None else None,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "seed": config.seed,
        "threshold_used": float(threshold),
        "versions": versions(),
        "stages": stages,
        "stage_seconds": timings,
        "wall_clock_s": time.perf_counter() - started,
        "diagnostics": diagnostics,
        "outputs": outputs,
        "metrics": report.to_dict() if report is not None else None,
        "n_notes": len(notes),
    }
    outputs["manifest"] = str(out / ARTIFACTS["manifest"])
    io.save_manifest(out / ARTIFACTS["manifest"], manifest)
    return manifest


def _cli_exit(exc: StageError) -> int:
    codes = {"config": 2, "load": 3, "estimate": 4, "extract": 5, "evaluate": 6, "write": 7}
    print(f"plcapf: error {exc}", file=sys.stderr)
    return codes.get(exc.stage, 1)
