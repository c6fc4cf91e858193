"""Particle filter and backward smoother for the SIPLCA state space.

Hidden state per particle is a set of Dirichlet concentrations
``(theta, delta1, delta2)`` that perform multiplicative Gamma random walks with
shape equal to rate (so each walk is unbiased).  Given the hidden state the
frame parameters are Dirichlet draws:

    A ~ Dir(theta),  B[i] ~ Dir(delta1[i]),  C[i, m] ~ Dir(delta2[i, m])

The proposal is the transition prior, so importance weights are the Gaussian
observation likelihood of each particle's reconstruction.  Every frame is
resampled with the single-uniform CDF traversal.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import gammaln, logsumexp

from plcapf import kernels
from plcapf.model import (
    ModelDims,
    ParameterState,
    Spectrogram,
    TemplateDictionary,
    normalize_frames,
)

if TYPE_CHECKING:
    from plcapf.priors import MHConfig

logger = logging.getLogger(__name__)

EPS = 1e-8
WEIGHT_TOL = 1e-9
RESAMPLE_SCHEMES = ("systematic", "multinomial")
BLOCK_RANKS = (1, 2, 3)


class WeightCollapse(RuntimeError):
    """Every importance weight underflowed (all log-weights are -inf or NaN)."""

    def __init__(self, message: str = "weight collapse", frame: int | None = None):
        super().__init__(message if frame is None else f"{message} at frame {frame}")
        self.frame = frame


@dataclass
class HiddenState:
    """Dirichlet concentrations; leading axes index particles when batched."""

    theta: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray

    def arrays(self):
        return self.theta, self.delta1, self.delta2

    def take(self, index) -> "HiddenState":
        return HiddenState(self.theta[index], self.delta1[index], self.delta2[index])


@dataclass(frozen=True)
class GammaHyperparams:
    """Shapes of the multiplicative Gamma walks; every rate equals its shape.

    Each field is a scalar or an array broadcastable to the corresponding
    hidden-state block: ``theta_shape`` per pitch, ``mode_shape`` per
    (pitch, mode), ``shift_shape`` per (pitch, mode, shift).
    """

    theta_shape: float | np.ndarray = 50.0
    mode_shape: float | np.ndarray = 50.0
    shift_shape: float | np.ndarray = 50.0

    def __post_init__(self):
        for name in ("theta_shape", "mode_shape", "shift_shape"):
            value = np.asarray(getattr(self, name), dtype=float)
            if np.any(~(value > 0)) or not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite")
            object.__setattr__(self, name, value)

    @property
    def shapes(self):
        return self.theta_shape, self.mode_shape, self.shift_shape

    # rate == shape keeps E[next | prev] = prev
    rates = shapes


@dataclass
class Particle:
    hidden: HiddenState
    params: ParameterState
    log_weight: float = 0.0


@dataclass
class ParticleEnsemble:
    """N particles stored as stacked arrays, plus their normalized weights."""

    hidden: HiddenState
    params: ParameterState
    log_weights: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.weights is None:
            self.weights = np.full(len(self.log_weights), 1.0 / len(self.log_weights))

    def __len__(self) -> int:
        return len(self.log_weights)

    def __getitem__(self, n: int) -> Particle:
        params = ParameterState(self.params.A[n], self.params.B[n], self.params.C[n])
        return Particle(self.hidden.take(n), params, float(self.log_weights[n]))

    @property
    def particles(self) -> list[Particle]:
        return [self[n] for n in range(len(self))]

    def take(self, index) -> "ParticleEnsemble":
        """Subset/copy particles by index; weights become uniform."""
        index = np.asarray(index)
        params = ParameterState(
            self.params.A[index], self.params.B[index], self.params.C[index]
        )
        return ParticleEnsemble(self.hidden.take(index), params, np.zeros(len(index)))

    def effective_sample_size(self) -> float:
        return 1.0 / np.sum(self.weights**2)

    def mean_activations(self) -> np.ndarray:
        return self.weights @ self.params.A

    @classmethod
    def from_particles(cls, particles) -> "ParticleEnsemble":
        particles = list(particles)
        hidden = HiddenState(
            *(np.stack(a) for a in zip(*(p.hidden.arrays() for p in particles)))
        )
        params = ParameterState(
            np.stack([p.params.A for p in particles]),
            np.stack([p.params.B for p in particles]),
            np.stack([p.params.C for p in particles]),
        )
        ens = cls(hidden, params, np.array([p.log_weight for p in particles]))
        ens.weights = normalize_log_weights(ens.log_weights)
        return ens


def _rng(seed_or_rng) -> np.random.Generator:
    return np.random.default_rng(seed_or_rng)


def sample_dirichlet(alpha, rng) -> np.ndarray:
    """Dirichlet draws along the last axis from normalized Gamma variates.

    Uses G(a) = G(a + 1) * U**(1/a) in log space, which stays exact for very
    small concentrations where plain Gamma draws underflow to zero.
    """
    alpha = np.asarray(alpha, dtype=float)
    log_g = np.log(rng.gamma(alpha + 1.0)) + np.log1p(-rng.random(alpha.shape)) / alpha
    return np.exp(log_g - logsumexp(log_g, axis=-1, keepdims=True))


def init_ensemble(
    n_particles: int,
    dims: ModelDims,
    rng=0,
    prior_shape: float = 1.0,
    prior_rate: float = 1.0,
    energy: float = 1.0,
) -> ParticleEnsemble:
    """Draw N hidden states i.i.d. from a Gamma prior and sample their parameters."""
    if int(n_particles) < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    rng = _rng(rng)
    n = int(n_particles)
    shapes = [
        (n, dims.n_pitches),
        (n, dims.n_pitches, dims.n_modes),
        (n, dims.n_pitches, dims.n_modes, dims.n_shifts),
    ]
    blocks = [np.maximum(rng.gamma(prior_shape, 1.0 / prior_rate, s), EPS) for s in shapes]
    hidden = HiddenState(*blocks)
    params = sample_parameters(hidden, rng, energy)
    return ParticleEnsemble(hidden, params, np.zeros(n))


def propagate_hidden(hidden: HiddenState, hyper: GammaHyperparams, rng) -> HiddenState:
    """Multiply every concentration by an independent Gamma(k, rate=k) factor."""
    rng = _rng(rng)
    out = []
    for value, shape in zip(hidden.arrays(), hyper.shapes):
        shape = np.broadcast_to(shape, value.shape)
        out.append(np.maximum(value * rng.gamma(shape, 1.0 / shape), EPS))
    return HiddenState(*out)


def sample_parameters(hidden: HiddenState, rng, energy: float = 1.0) -> ParameterState:
    """Dirichlet draws of A, B rows and C fibers; A is scaled by ``energy``."""
    rng = _rng(rng)
    A = energy * sample_dirichlet(hidden.theta, rng)
    B = sample_dirichlet(hidden.delta1, rng)
    C = sample_dirichlet(hidden.delta2, rng)
    return ParameterState(A, B, C)


def gamma_transition_log_density(next_state: HiddenState, prev: HiddenState, hyper) -> np.ndarray:
    """log f(next | prev) with next ~ Gamma(k, rate=k/prev) coordinate-wise.

    Either argument may carry leading (particle) axes; they broadcast and the
    result has one entry per broadcast position.
    """
    total = 0.0
    for rank, x, p, k in zip(BLOCK_RANKS, next_state.arrays(), prev.arrays(), hyper.shapes):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if np.any(x <= 0) or np.any(p <= 0):
            raise ValueError("transition density needs strictly positive states")
        terms = k * np.log(k / p) - gammaln(k) + (k - 1.0) * np.log(x) - k * x / p
        total = total + terms.sum(axis=tuple(range(-rank, 0)))
    return total


def normalize_log_weights(log_weights) -> np.ndarray:
    """Max-shifted exponentiation; raises WeightCollapse if nothing is finite."""
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise WeightCollapse()
    shifted = np.where(finite, log_weights - log_weights[finite].max(), -np.inf)
    w = np.exp(shifted)
    return w / w.sum()


def particle_loglik(weights, basis, observed, sigma, workers: int = 1) -> np.ndarray:
    """Observation log-density of each particle, optionally split over threads."""
    n = len(weights)
    if workers <= 1 or n < 2 * workers:
        return kernels.mixture_loglik(weights, basis, observed, sigma)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(
            lambda b: kernels.mixture_loglik(weights[b[0]:b[1]], basis, observed, sigma),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(parts))


def weight_ensemble(
    ensemble: ParticleEnsemble,
    observed_frame,
    dictionary: TemplateDictionary,
    sigma: float,
    workers: int = 1,
) -> ParticleEnsemble:
    """Add each particle's observation log-density to its log-weight and normalize."""
    if len(ensemble) == 0:
        raise ValueError("cannot weight an empty ensemble")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    loglik = particle_loglik(
        ensemble.params.mixture_weights(), dictionary.basis, observed_frame, sigma, workers
    )
    log_weights = ensemble.log_weights + loglik
    weights = normalize_log_weights(log_weights)
    return replace(ensemble, log_weights=log_weights, weights=weights)


def multinomial_resample(ensemble: ParticleEnsemble, rng, scheme: str = "systematic") -> ParticleEnsemble:
    """Redraw N particles in proportion to their weights; weights reset to 1/N.

    ``"systematic"`` walks the weight CDF with positions ``u1 + j/N`` from a
    single ``u1 ~ U[0, 1/N]``; ``"multinomial"`` uses N sorted i.i.d. uniforms.
    The output follows CDF order.
    """
    rng = _rng(rng)
    w = np.asarray(ensemble.weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights must be normalized before resampling (sum={w.sum()!r})")
    n = len(w)
    if scheme == "systematic":
        positions = rng.uniform(0.0, 1.0 / n) + np.arange(n) / n
    elif scheme == "multinomial":
        positions = np.sort(rng.random(n))
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected {RESAMPLE_SCHEMES}")
    index = kernels.cdf_traverse(np.cumsum(w), positions)
    return ensemble.take(index)


@dataclass
class FilterConfig:
    n_particles: int = 500
    sigma: float = 0.05
    theta_shape: float = 50.0
    mode_shape: float = 50.0
    shift_shape: float = 50.0
    init_shape: float = 1.0
    init_rate: float = 1.0
    seed: int = 0
    resample: str = "systematic"
    store_ensembles: bool = True
    workers: int = 1
    mh: MHConfig | None = None

    def __post_init__(self):
        if int(self.n_particles) < 1:
            raise ValueError("n_particles must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.resample not in RESAMPLE_SCHEMES:
            raise ValueError(f"resample must be one of {RESAMPLE_SCHEMES}")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")

    @property
    def hyper(self) -> GammaHyperparams:
        return GammaHyperparams(self.theta_shape, self.mode_shape, self.shift_shape)


@dataclass
class FilterResult:
    """Per-frame filtering summaries plus the stored weighted ensembles.

    ``activations`` is the weighted posterior mean of A (taken before
    resampling) multiplied back by each frame's energy.
    """

    activations: np.ndarray
    energies: np.ndarray
    hop_seconds: float
    hyper: GammaHyperparams
    ensembles: list = field(default_factory=list, repr=False)
    skipped: np.ndarray = None
    collapses: list = field(default_factory=list)
    ess: np.ndarray = None
    log_evidence: np.ndarray = None
    acceptance: np.ndarray = None

    @property
    def n_frames(self) -> int:
        return self.activations.shape[1]


def filter(
    spec: Spectrogram,
    dictionary: TemplateDictionary,
    config: FilterConfig | None = None,
    priors=None,
) -> FilterResult:
    """Bootstrap particle filter over the frames of ``spec``.

    Frames are unit-normalized first; all-zero frames carry the ensemble
    forward untouched.  When ``config.mh`` is set, every particle's sampled
    activations are refined by a Metropolis-Hastings chain targeting
    likelihood times ``priors`` before weighting.
    """
    from plcapf.priors import MHConfig, PriorSet, mh_perturb_batch

    config = config or FilterConfig()
    hyper = config.hyper
    if spec.n_bins != dictionary.n_bins:
        raise ValueError(
            f"spectrogram has {spec.n_bins} bins but templates have {dictionary.n_bins}"
        )
    normalized, energies = normalize_frames(spec)
    values = normalized.values
    n_frames = spec.n_frames
    dims = ModelDims.from_dictionary(dictionary)
    rng = np.random.default_rng(config.seed)
    if config.mh is not None and priors is None:
        priors = PriorSet()
    mh_config = config.mh if config.mh is not None else (MHConfig() if priors else None)

    activations = np.zeros((dictionary.n_pitches, n_frames))
    skipped = np.zeros(n_frames, dtype=bool)
    ess = np.zeros(n_frames)
    log_evidence = np.zeros(n_frames)
    acceptance = np.full(n_frames, np.nan)
    stored, collapses = [], []
    resampled = None
    for t in range(n_frames):
        if energies[t] == 0:
            skipped[t] = True
            if resampled is None:
                resampled = init_ensemble(
                    config.n_particles, dims, rng, config.init_shape, config.init_rate
                )
            ess[t] = len(resampled)
            if config.store_ensembles:
                stored.append(stored[-1] if stored else resampled)
            continue

        if resampled is None:
            ens = init_ensemble(config.n_particles, dims, rng, config.init_shape, config.init_rate)
            previous_A = None
        else:
            hidden = propagate_hidden(resampled.hidden, hyper, rng)
            ens = ParticleEnsemble(hidden, sample_parameters(hidden, rng), np.zeros(len(resampled)))
            previous_A = resampled.params.A

        y = values[:, t]
        if mh_config is not None:
            A, log_prior, acc = mh_perturb_batch(
                ens.params, y, dictionary, config.sigma, priors, mh_config, rng,
                previous_A=previous_A, workers=config.workers,
            )
            ens = replace(ens, params=replace(ens.params, A=A), log_weights=log_prior)
            acceptance[t] = acc

        try:
            ens = weight_ensemble(ens, y, dictionary, config.sigma, config.workers)
        except WeightCollapse:
            logger.warning("weight collapse at frame %d; resetting to uniform weights", t)
            collapses.append(t)
            ens = replace(ens, weights=np.full(len(ens), 1.0 / len(ens)))
        finite = ens.log_weights[np.isfinite(ens.log_weights)]
        log_evidence[t] = logsumexp(finite) - np.log(len(ens)) if finite.size else -np.inf
        ess[t] = ens.effective_sample_size()
        activations[:, t] = energies[t] * ens.mean_activations()
        if config.store_ensembles:
            stored.append(ens)
        resampled = multinomial_resample(ens, rng, config.resample)

    return FilterResult(
        activations=activations,
        energies=energies,
        hop_seconds=spec.frame_hop_seconds,
        hyper=hyper,
        ensembles=stored,
        skipped=skipped,
        collapses=collapses,
        ess=ess,
        log_evidence=log_evidence,
        acceptance=acceptance,
    )


@dataclass
class SmoothedTrajectory:
    """One realization x_1..x_T drawn from the particle smoothing distribution."""

    indices: np.ndarray
    hidden: list
    params: list
    activations: np.ndarray


def _draw(log_w, rng) -> int:
    w = normalize_log_weights(log_w)
    return int(min(np.searchsorted(np.cumsum(w), rng.random(), side="right"), len(w) - 1))


def smooth(result: FilterResult, rng=0, hyper: GammaHyperparams | None = None) -> SmoothedTrajectory:
    """Backward-simulation smoother over the stored filter ensembles.

    Draws the last state from the final weights, then for t = T-1..1 reweights
    the stored particles by w_t * f(x~_{t+1} | x_t) and samples.
    """
    ensembles = result.ensembles
    if not ensembles or len(ensembles) != result.n_frames:
        raise ValueError("smoothing needs the weighted ensemble of every frame (store_ensembles)")
    rng = _rng(rng)
    hyper = hyper or result.hyper
    n_frames = result.n_frames
    skipped = result.skipped if result.skipped is not None else np.zeros(n_frames, bool)
    indices = np.zeros(n_frames, dtype=int)
    last = ensembles[-1]
    indices[-1] = _draw(np.log(last.weights), rng)
    for t in range(n_frames - 2, -1, -1):
        if skipped[t + 1]:
            # frame t+1 reused frame t's ensemble unchanged
            indices[t] = indices[t + 1]
            continue
        ens, nxt = ensembles[t], ensembles[t + 1]
        target = nxt.hidden.take(indices[t + 1])
        with np.errstate(divide="ignore"):
            log_w = np.log(ens.weights) + gamma_transition_log_density(target, ens.hidden, hyper)
        indices[t] = _draw(log_w, rng)

    hidden = [ensembles[t].hidden.take(i) for t, i in enumerate(indices)]
    params = [ensembles[t][i].params for t, i in enumerate(indices)]
    activations = np.stack([p.A for p in params], axis=1) * result.energies
    activations[:, skipped & (result.energies == 0)] = 0.0
    return SmoothedTrajectory(indices, hidden, params, activations)


def smoothed_activations(result: FilterResult, n_draws: int = 50, rng=0) -> np.ndarray:
    """Average of ``n_draws`` independent smoothing realizations of A."""
    rng = _rng(rng)
    total = np.zeros_like(result.activations)
    for _ in range(n_draws):
        total += smooth(result, rng).activations
    return total / n_draws
