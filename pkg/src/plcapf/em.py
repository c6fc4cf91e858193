"""EM and deterministically annealed EM for the fixed-template SIPLCA model.

Every frame is fitted independently: templates never change, so the E-step
responsibilities of a frame depend only on its own A, B and C.  See
``docs/math.md`` for the update equations.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from plcapf.model import ParameterState, Spectrogram, TemplateDictionary, normalize_frames

INIT_MODES = ("uniform", "random")


@dataclass(frozen=True)
class EMConfig:
    """Iteration budget, stopping rule and annealing schedule.

    Parameters
    ----------
    max_iters : int
        Iteration cap per temperature stage.
    convergence_tol : float
        A frame stops once its relative log-likelihood change drops below this.
    daem_temperatures : tuple of float
        Strictly increasing, in (0, 1], ending at 1.  Only used by DAEM.
    sparsity_exponent : float
        Activations are raised to this power and renormalized every iteration.
    """

    max_iters: int = 100
    convergence_tol: float = 1e-6
    daem_temperatures: tuple = (0.6, 0.8, 1.0)
    sparsity_exponent: float = 1.02

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be a positive integer")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        temps = tuple(float(b) for b in self.daem_temperatures)
        if not temps or temps[-1] != 1.0:
            raise ValueError("the temperature schedule must end at 1")
        if any(not 0 < b <= 1 for b in temps) or any(b >= c for b, c in zip(temps, temps[1:])):
            raise ValueError(f"temperatures must increase strictly within (0, 1], got {temps}")
        if not self.sparsity_exponent >= 1:
            raise ValueError("sparsity_exponent must be >= 1")
        object.__setattr__(self, "daem_temperatures", temps)


@dataclass
class EMResult:
    """Per-frame fitted parameters and the log-likelihood history.

    ``states`` holds A (T, I) on the unit simplex, B (T, I, M) and
    C (T, I, M, D).  ``loglik`` has one row per iteration (row 0 is the
    initial state) and one column per frame, always evaluated at
    temperature 1; ``temperatures`` gives the stage of each row.
    """

    states: ParameterState
    activations: np.ndarray
    energies: np.ndarray
    hop_seconds: float
    loglik: np.ndarray
    temperatures: np.ndarray
    converged: bool
    n_iter: int


def frame_loglik(y: np.ndarray, weights: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """sum_f y(f) log P(f) for each row of ``y`` (frames x bins).

    Bins that no shifted template reaches are left out: no parameter setting
    can explain them, so they only add a constant (minus infinity) that the
    updates ignore anyway.
    """
    model = weights @ basis
    reachable = basis.sum(axis=0) > 0
    with np.errstate(divide="ignore"):
        logp = np.where((y > 0) & reachable, np.log(model), 0.0)
    return np.sum(y * logp, axis=-1)


def _mixture(A, B, C):
    return (A[:, :, None, None] * B[:, :, :, None] * C).reshape(len(A), -1)


def _normalize(x, axis, fallback):
    total = x.sum(axis=axis, keepdims=True)
    return np.where(total > 0, x / np.where(total > 0, total, 1.0), fallback)


def em_step(y, state: ParameterState, dictionary: TemplateDictionary,
            temperature: float = 1.0, sparsity_exponent: float = 1.0) -> ParameterState:
    """One E+M update for a batch of frames ``y`` (frames x bins, unit-sum rows).

    Responsibilities are proportional to (A B C W)^temperature.  Components
    that receive no mass keep their previous B and C values.
    """
    A, B, C = state.A, state.B, state.C
    n_t = len(y)
    shape = (n_t,) + C.shape[1:]
    basis = dictionary.basis
    pi = _mixture(A, B, C)
    if temperature != 1.0:
        pi = pi**temperature
        basis = basis**temperature
    q = pi @ basis
    ratio = np.divide(y, q, out=np.zeros_like(y), where=q > 0)
    counts = (pi * (ratio @ basis.T)).reshape(shape)

    per_mode = counts.sum(axis=-1)
    per_pitch = per_mode.sum(axis=-1)
    A_new = _normalize(per_pitch, -1, A)
    if sparsity_exponent != 1.0:
        A_new = _normalize(A_new**sparsity_exponent, -1, A_new)
    B_new = _normalize(per_mode, -1, B)
    C_new = _normalize(counts, -1, C)
    return ParameterState(A_new, B_new, C_new)


def initial_state(n_frames: int, dictionary: TemplateDictionary, init="uniform", rng=0) -> ParameterState:
    """Starting point: flat parameters, or Dirichlet(1) draws per frame."""
    n_i, n_m, n_d = dictionary.n_pitches, dictionary.n_modes, dictionary.n_shifts
    if init == "uniform":
        return ParameterState(
            np.full((n_frames, n_i), 1.0 / n_i),
            np.full((n_frames, n_i, n_m), 1.0 / n_m),
            np.full((n_frames, n_i, n_m, n_d), 1.0 / n_d),
        )
    if init == "random":
        rng = np.random.default_rng(rng)
        return ParameterState(
            rng.dirichlet(np.ones(n_i), size=n_frames),
            rng.dirichlet(np.ones(n_m), size=(n_frames, n_i)),
            rng.dirichlet(np.ones(n_d), size=(n_frames, n_i, n_m)),
        )
    raise ValueError(f"init must be one of {INIT_MODES}, got {init!r}")


def _fit(y, state, dictionary, cfg, temperatures):
    basis = dictionary.basis
    ll = frame_loglik(y, _mixture(state.A, state.B, state.C), basis)
    trace, temps = [ll], [temperatures[0]]
    converged = np.zeros(len(y), dtype=bool)
    for beta in temperatures:
        active = np.ones(len(y), dtype=bool)
        for _ in range(int(cfg.max_iters)):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            sub = ParameterState(state.A[idx], state.B[idx], state.C[idx])
            new = em_step(y[idx], sub, dictionary, beta, cfg.sparsity_exponent)
            state.A[idx], state.B[idx], state.C[idx] = new.A, new.B, new.C
            ll_new = ll.copy()
            ll_new[idx] = frame_loglik(y[idx], _mixture(new.A, new.B, new.C), basis)
            change = np.abs(ll_new - ll) <= cfg.convergence_tol * np.maximum(np.abs(ll), 1e-300)
            active &= ~change
            ll = ll_new
            trace.append(ll)
            temps.append(beta)
        converged = ~active
    return state, np.array(trace), np.array(temps), bool(converged.all())


def em_estimate(
    spec: Spectrogram,
    dictionary: TemplateDictionary,
    cfg: EMConfig | None = None,
    init="uniform",
    rng=0,
    annealed: bool = False,
    workers: int = 1,
) -> EMResult:
    """Fit A, B, C to every frame of ``spec`` with the templates held fixed.

    With ``annealed=True`` the iterations run through
    ``cfg.daem_temperatures`` in order, each stage until convergence or
    ``cfg.max_iters``; otherwise a single stage at temperature 1.  Hitting
    the iteration cap is reported through ``converged``, not raised.
    """
    cfg = cfg or EMConfig()
    if spec.n_bins != dictionary.n_bins:
        raise ValueError(
            f"spectrogram has {spec.n_bins} bins but templates have {dictionary.n_bins}"
        )
    normalized, energies = normalize_frames(spec)
    y = np.ascontiguousarray(normalized.values.T)
    state = initial_state(spec.n_frames, dictionary, init, rng)
    temperatures = cfg.daem_temperatures if annealed else (1.0,)

    live = np.flatnonzero(energies > 0)
    chunks = np.array_split(live, max(1, min(int(workers), len(live))))

    def run(idx):
        sub = ParameterState(state.A[idx].copy(), state.B[idx].copy(), state.C[idx].copy())
        return idx, _fit(y[idx], sub, dictionary, cfg, temperatures)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            outputs = list(pool.map(run, chunks))
    else:
        outputs = [run(idx) for idx in chunks]

    n_rows = max((len(out[1]) for _, out in outputs), default=1)
    loglik = np.zeros((n_rows, spec.n_frames))
    temps = np.ones(n_rows)
    converged = True
    for idx, (sub, trace, stage, ok) in outputs:
        state.A[idx], state.B[idx], state.C[idx] = sub.A, sub.B, sub.C
        # frames that stopped early keep their final value in later rows
        padded = np.vstack([trace, np.repeat(trace[-1:], n_rows - len(trace), axis=0)])
        loglik[:, idx] = padded
        if len(stage) == n_rows:
            temps = stage
        converged &= ok
    state.A[energies == 0] = 0.0
    activations = (state.A * energies[:, None]).T
    return EMResult(
        states=state,
        activations=activations,
        energies=energies,
        hop_seconds=spec.frame_hop_seconds,
        loglik=loglik,
        temperatures=temps,
        converged=converged,
        n_iter=n_rows - 1,
    )


def extract_template(note_spec: Spectrogram) -> np.ndarray:
    """Rank-1 PLCA spectral factor: the normalized sum over frames."""
    values = np.asarray(getattr(note_spec, "values", note_spec), dtype=float)
    if values.size == 0:
        raise ValueError("note spectrogram is empty")
    if np.any(values < 0):
        raise ValueError("note spectrogram must be nonnegative")
    marginal = values.sum(axis=1) if values.ndim == 2 else values
    total = marginal.sum()
    if not total > 0:
        raise ValueError("note spectrogram is all zeros")
    return marginal / total
