"""Inter-pitch prior matrices and Metropolis-Hastings prior injection.

Every prior has the form ``P(A) ~ exp(-A' S K)`` with a penalty matrix ``S``
and a target vector ``K``: the current activations for the co-occurrence and
resonance kinds, the previous frame's activations for the transition kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from plcapf.model import ParameterState, TemplateDictionary
from plcapf.transcription import NoteEvent, notes_to_roll

KINDS = ("co_occurrence", "resonance", "transition")
RESONANCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class PriorMatrix:
    """N_I x N_I penalty matrix.

    For the transition kind, rows index the current pitch and columns the
    previous one, so ``A_t' S A_{t-1}`` is the penalty.
    """

    S: np.ndarray
    kind: str

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"prior matrix must be square, got shape {S.shape}")
        if np.any(S < 0) or not np.all(np.isfinite(S)):
            raise ValueError("prior matrix entries must be finite and nonnegative")
        if self.kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "S", S)

    @property
    def n_pitches(self) -> int:
        return self.S.shape[0]

    def target(self, current, previous=None):
        """The K vector for this kind, or None when it cannot be resolved yet."""
        return previous if self.kind == "transition" else current


@dataclass
class TrainingCorpus:
    """Note lists per piece, sampled on a frame grid of ``hop_s`` seconds."""

    pieces: list
    n_pitches: int
    hop_s: float

    def __post_init__(self):
        self.pieces = [[n if isinstance(n, NoteEvent) else NoteEvent.from_dict(n) for n in p]
                       for p in self.pieces]
        for piece in self.pieces:
            for note in piece:
                if note.pitch >= self.n_pitches:
                    raise ValueError(f"pitch {note.pitch} outside 0..{self.n_pitches - 1}")

    def rolls(self):
        """Binary (pitch, frame) activity for every nonempty piece."""
        for piece in self.pieces:
            if not piece:
                continue
            n_frames = int(math.ceil(max(n.offset_s for n in piece) / self.hop_s - 1e-9))
            yield notes_to_roll(piece, self.n_pitches, n_frames, self.hop_s)

    @property
    def n_frames(self) -> int:
        return sum(r.shape[1] for r in self.rolls())


def pi_normalize(x) -> np.ndarray:
    """1 - x / max(x); an all-zero input maps to all ones."""
    x = np.asarray(x, dtype=float)
    peak = x.max() if x.size else 0.0
    return np.ones_like(x) if peak <= 0 else 1.0 - x / peak


def cooccurrence_counts(corpus: TrainingCorpus) -> np.ndarray:
    counts = np.zeros((corpus.n_pitches, corpus.n_pitches))
    for roll in corpus.rolls():
        r = roll.astype(float)
        counts += r @ r.T
    np.fill_diagonal(counts, 0.0)
    return counts


def build_cooccurrence_prior(corpus: TrainingCorpus) -> PriorMatrix:
    """Frame-wise co-occurrence counts turned into penalties.

    The most frequent pair gets penalty 0 and never-seen pairs get 1; a pitch
    never penalizes itself.
    """
    if corpus.n_frames == 0:
        raise ValueError("training corpus is empty")
    S = pi_normalize(cooccurrence_counts(corpus))
    np.fill_diagonal(S, 0.0)
    return PriorMatrix(S, "co_occurrence")


def build_resonance_prior(free_spectra, muted_spectra) -> PriorMatrix:
    """Sympathetic-resonance penalties from free vs muted isolated-note spectra.

    For pitch i the bins where the two spectra differ by at least 0.5 form a
    binary mask; ``S[i, j]`` is the muted spectrum of pitch j summed over that
    mask.
    """
    free = np.asarray(free_spectra, dtype=float)
    muted = np.asarray(muted_spectra, dtype=float)
    if free.shape != muted.shape or free.ndim != 2:
        raise ValueError(
            f"free and muted spectra must be matching (pitch, bin) arrays, "
            f"got {free.shape} and {muted.shape}"
        )
    if np.any(free < 0) or np.any(muted < 0):
        raise ValueError("spectra must be nonnegative")
    mask = (np.abs(free - muted) >= RESONANCE_THRESHOLD).astype(float)
    S = mask @ muted.T
    np.fill_diagonal(S, 0.0)
    return PriorMatrix(S, "resonance")


def transition_counts(corpus: TrainingCorpus) -> np.ndarray:
    """c[i, j]: frames where i is active at t-1 and j at t."""
    counts = np.zeros((corpus.n_pitches, corpus.n_pitches))
    for roll in corpus.rolls():
        r = roll.astype(float)
        counts += r[:, :-1] @ r[:, 1:].T
    return counts


def witten_bell(counts) -> np.ndarray:
    """Row-wise Witten-Bell estimate of P(next | previous).

    Seen successors get c / (n + T); the reserved mass T / (n + T) is spread
    uniformly over the unseen ones (n = row total, T = distinct successors).
    Rows with no unseen successor fall back to c / n, rows with no data to
    uniform, so every row sums to 1.
    """
    counts = np.asarray(counts, dtype=float)
    n_states = counts.shape[1]
    probs = np.empty_like(counts)
    for i, row in enumerate(counts):
        n = row.sum()
        seen = row > 0
        types = seen.sum()
        if n == 0:
            probs[i] = 1.0 / n_states
        elif types == n_states:
            probs[i] = row / n
        else:
            probs[i] = np.where(seen, row / (n + types), types / (n + types) / (n_states - types))
    return probs


def build_transition_prior(corpus: TrainingCorpus) -> PriorMatrix:
    """Witten-Bell transition probabilities inverted into penalties."""
    if corpus.n_frames < 2:
        raise ValueError("transition prior needs a corpus with at least two frames")
    probs = witten_bell(transition_counts(corpus))
    return PriorMatrix(pi_normalize(probs).T, "transition")


def prior_log_density(p, S, K) -> np.ndarray:
    """Unnormalized log prior ``-p' S K``; leading batch axes broadcast."""
    S = S.S if isinstance(S, PriorMatrix) else np.asarray(S, dtype=float)
    p = np.asarray(p, dtype=float)
    K = np.asarray(K, dtype=float)
    if p.shape[-1] != S.shape[0] or K.shape[-1] != S.shape[1]:
        raise ValueError(
            f"dimension mismatch: p has {p.shape[-1]}, S is {S.shape}, K has {K.shape[-1]}"
        )
    return -np.einsum("...i,ij,...j->...", p, S, K)


def combined_log_prior(terms) -> np.ndarray:
    """Sum of ``prior_log_density`` over ``(p, S, K)`` triples."""
    total = 0.0
    for p, S, K in terms:
        if K is None:
            raise ValueError("prior target vector could not be resolved")
        total = total + prior_log_density(p, S, K)
    return total


@dataclass
class PriorSet:
    """Priors on the activations, combined additively in log space."""

    priors: list = field(default_factory=list)
    weight: float = 1.0

    def __bool__(self) -> bool:
        return bool(self.priors)

    def __iter__(self):
        return iter(self.priors)

    def log_density(self, A, previous_A=None):
        """Combined log prior of ``A``; transition terms are skipped without ``previous_A``."""
        A = np.asarray(A, dtype=float)
        terms = []
        for prior in self.priors:
            K = prior.target(A, previous_A)
            if K is None and prior.kind == "transition":
                continue
            terms.append((A, prior, K))
        if not terms:
            return np.zeros(A.shape[:-1])
        return self.weight * combined_log_prior(terms)


@dataclass
class MHConfig:
    n_iter: int = 10
    step_scale: float = 0.02
    preserve_energy: bool = True

    def __post_init__(self):
        if int(self.n_iter) < 0:
            raise ValueError("n_iter must be >= 0")
        if self.step_scale < 0:
            raise ValueError("step_scale must be >= 0")


@dataclass
class MHResult:
    x: np.ndarray
    log_target: np.ndarray
    n_accepted: np.ndarray
    n_iter: int
    trace: np.ndarray | None = None

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.n_accepted) / self.n_iter) if self.n_iter else float("nan")


def metropolis_hastings(x0, log_target, step, n_iter, rng, project=None, keep_trace=False):
    """Random-walk Metropolis chains with Gaussian jumps.

    ``x0`` is (chains, dim); ``log_target`` maps such an array to one value
    per chain; ``step`` is a scalar or per-chain scale.  Because the jump is
    symmetric the acceptance ratio is just the target ratio.  ``project``
    optionally maps proposals back onto the support.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x0, dtype=float, copy=True)
    step = np.broadcast_to(np.asarray(step, dtype=float), x.shape[:-1])[..., None]
    current = np.asarray(log_target(x), dtype=float)
    accepted = np.zeros(x.shape[:-1], dtype=int)
    trace = np.empty((n_iter,) + x.shape) if keep_trace else None
    for q in range(n_iter):
        proposal = x + step * rng.standard_normal(x.shape)
        if project is not None:
            proposal = project(proposal)
        with np.errstate(invalid="ignore"):
            candidate = np.asarray(log_target(proposal), dtype=float)
            log_r = candidate - current
        take = np.log(rng.random(current.shape)) < np.where(np.isnan(log_r), -np.inf, log_r)
        x = np.where(take[..., None], proposal, x)
        current = np.where(take, candidate, current)
        accepted += take
        if keep_trace:
            trace[q] = x
    return MHResult(x, current, accepted, n_iter, trace)


def _energy_projection(totals):
    def project(proposal):
        clipped = np.maximum(proposal, 0.0)
        sums = clipped.sum(axis=-1, keepdims=True)
        scale = np.divide(totals, sums, out=np.full_like(sums, np.nan), where=sums > 0)
        return clipped * scale

    return project


def mh_perturb_batch(
    params: ParameterState,
    observed,
    dictionary: TemplateDictionary,
    sigma: float,
    priors: PriorSet | None,
    config: MHConfig,
    rng,
    previous_A=None,
    workers: int = 1,
):
    """Run one MH chain per particle on its activations, starting from the PF draw.

    Returns ``(A, log_prior, acceptance_rate)`` where ``log_prior`` is the
    combined log prior of the final activations.  B and C are left untouched.
    """
    from plcapf.particles import particle_loglik

    priors = priors or PriorSet()
    basis = dictionary.basis
    B, C = params.B, params.C
    A0 = np.asarray(params.A, dtype=float)

    def log_target(A):
        mix = (np.nan_to_num(A)[..., :, None, None] * B[..., :, :, None] * C).reshape(len(A), -1)
        ll = particle_loglik(mix, basis, observed, sigma, workers)
        ll = np.where(np.isnan(A).any(axis=-1), -np.inf, ll)
        return ll + priors.log_density(np.nan_to_num(A), previous_A)

    if config.n_iter == 0:
        return A0.copy(), priors.log_density(A0, previous_A), float("nan")
    totals = A0.sum(axis=-1, keepdims=True)
    project = _energy_projection(totals) if config.preserve_energy else (lambda a: np.maximum(a, 0.0))
    step = config.step_scale * totals[..., 0]
    result = metropolis_hastings(A0, log_target, step, config.n_iter, rng, project)
    return result.x, priors.log_density(result.x, previous_A), result.acceptance_rate


def mh_perturb(
    particle,
    observed_frame,
    dictionary: TemplateDictionary,
    priors: PriorSet | None,
    sigma: float,
    config: MHConfig,
    rng,
    previous_A=None,
):
    """Refine one particle's activations toward likelihood x prior.

    The returned particle carries the accepted activations and has the log
    prior of that state added to its log-weight.
    """
    params = particle.params
    batch = ParameterState(params.A[None], params.B[None], params.C[None])
    prev = None if previous_A is None else np.asarray(previous_A, dtype=float)[None]
    A, log_prior, _ = mh_perturb_batch(
        batch, observed_frame, dictionary, sigma, priors, config, rng, prev
    )
    return replace(
        particle,
        params=replace(params, A=A[0]),
        log_weight=particle.log_weight + float(log_prior[0]),
    )
