"""Shift-invariant PLCA observation model.

A normalized spectrogram frame is modelled as

    P(f|t) = sum_{i,m,d} A(i) B(i,m) C(i,m,d) W(i,m)[f - shift_d]

with fixed spectral templates ``W``, pitch activations ``A``, mode weights
``B`` and shift weights ``C``.  Observations are that reconstruction plus
white Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

HOP_SECONDS = 512 / 44100.0
BINS_PER_OCTAVE = 60
DEFAULT_SHIFTS = (-2, -1, 0, 1, 2)
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Spectrogram:
    """Nonnegative F x T magnitude matrix plus framing metadata."""

    values: np.ndarray
    frame_hop_seconds: float = HOP_SECONDS
    bins_per_octave: int = BINS_PER_OCTAVE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {values.shape}")
        if not self.frame_hop_seconds > 0:
            raise ValueError("frame_hop_seconds must be positive")
        if int(self.bins_per_octave) <= 0:
            raise ValueError("bins_per_octave must be a positive integer")
        _check_nonnegative(values)
        object.__setattr__(self, "values", values)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TemplateDictionary:
    """Fixed spectral templates, one unit-sum vector per (pitch, mode).

    Parameters
    ----------
    templates : ndarray, shape (n_pitches, n_modes, n_bins)
    shifts : sequence of int
        Bin offsets applied to every template; symmetric around zero.
    """

    templates: np.ndarray
    shifts: tuple = DEFAULT_SHIFTS

    def __post_init__(self):
        templates = np.asarray(self.templates, dtype=float)
        if templates.ndim == 2:
            templates = templates[:, None, :]
        if templates.ndim != 3:
            raise ValueError("templates must have shape (n_pitches, n_modes, n_bins)")
        if np.any(templates < 0):
            raise ValueError("templates must be nonnegative")
        sums = templates.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
            raise ValueError("every template must sum to 1")
        shifts = tuple(int(s) for s in self.shifts)
        if sorted(shifts) != sorted(-s for s in shifts) or len(set(shifts)) != len(shifts):
            raise ValueError(f"shift range must be symmetric around 0, got {shifts}")
        object.__setattr__(self, "templates", templates)
        object.__setattr__(self, "shifts", tuple(sorted(shifts)))

    @property
    def n_pitches(self) -> int:
        return self.templates.shape[0]

    @property
    def n_modes(self) -> int:
        return self.templates.shape[1]

    @property
    def n_shifts(self) -> int:
        return len(self.shifts)

    @property
    def n_bins(self) -> int:
        return self.templates.shape[2]

    @cached_property
    def shifted(self) -> np.ndarray:
        """Shifted templates, shape (n_pitches, n_modes, n_shifts, n_bins).

        Mass pushed past either end of the frequency axis is dropped.
        """
        n_bins = self.n_bins
        out = np.zeros(self.templates.shape[:2] + (self.n_shifts, n_bins))
        for d, s in enumerate(self.shifts):
            if s >= 0:
                out[:, :, d, s:] = self.templates[:, :, : n_bins - s]
            else:
                out[:, :, d, :s] = self.templates[:, :, -s:]
        return out

    @cached_property
    def basis(self) -> np.ndarray:
        """Shifted templates flattened to (n_pitches*n_modes*n_shifts, n_bins)."""
        return np.ascontiguousarray(self.shifted.reshape(-1, self.n_bins))


@dataclass
class ParameterState:
    """Per-frame factors ``A`` (pitch), ``B`` (mode|pitch), ``C`` (shift|pitch,mode).

    Leading batch dimensions are allowed, so the same type holds one frame's
    parameters or those of a whole particle ensemble.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def mixture_weights(self) -> np.ndarray:
        """Product A*B*C flattened over (pitch, mode, shift)."""
        joint = self.A[..., :, None, None] * self.B[..., :, :, None] * self.C
        return joint.reshape(joint.shape[:-3] + (-1,))

    def check(self, tol: float = SIMPLEX_TOL) -> None:
        if np.any(self.A < 0):
            raise ValueError("activations must be nonnegative")
        if np.any(np.abs(self.B.sum(axis=-1) - 1.0) > tol):
            raise ValueError("mode weights must sum to 1 per pitch")
        if np.any(np.abs(self.C.sum(axis=-1) - 1.0) > tol):
            raise ValueError("shift weights must sum to 1 per (pitch, mode)")


@dataclass
class ModelDims:
    n_pitches: int
    n_modes: int = 1
    n_shifts: int = len(DEFAULT_SHIFTS)

    @classmethod
    def from_dictionary(cls, dictionary: TemplateDictionary) -> "ModelDims":
        return cls(dictionary.n_pitches, dictionary.n_modes, dictionary.n_shifts)


def _check_nonnegative(values: np.ndarray) -> None:
    bad = np.argwhere(values < 0)
    if bad.size:
        f, t = bad[0]
        raise ValueError(f"negative spectrogram entry {values[f, t]!r} at (f={f}, t={t})")
    if not np.all(np.isfinite(values)):
        f, t = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(f"non-finite spectrogram entry at (f={f}, t={t})")


def normalize_frames(spec: Spectrogram) -> tuple[Spectrogram, np.ndarray]:
    """Scale each column to unit sum.

    Returns the normalized spectrogram and the original column sums.  All-zero
    columns stay zero and report energy 0.
    """
    values = np.asarray(spec.values, dtype=float)
    _check_nonnegative(values)
    energies = values.sum(axis=0)
    scale = np.divide(1.0, energies, out=np.zeros_like(energies), where=energies > 0)
    normalized = Spectrogram(values * scale, spec.frame_hop_seconds, spec.bins_per_octave)
    return normalized, energies


def _check_dims(state: ParameterState, dictionary: TemplateDictionary) -> None:
    expected = (dictionary.n_pitches, dictionary.n_modes, dictionary.n_shifts)
    got = state.C.shape[-3:]
    if (
        got != expected
        or state.A.shape[-1] != expected[0]
        or state.B.shape[-2:] != expected[:2]
    ):
        raise ValueError(
            f"parameter dimensions A{state.A.shape} B{state.B.shape} C{state.C.shape} "
            f"do not match dictionary (pitches, modes, shifts) = {expected}"
        )


def reconstruct_frame(state: ParameterState, dictionary: TemplateDictionary) -> np.ndarray:
    """Predicted spectrum for one frame (or a batch of frames)."""
    _check_dims(state, dictionary)
    return state.mixture_weights() @ dictionary.basis


def observation_log_density(observed, predicted, sigma: float) -> float:
    """Sum of independent Gaussian log-densities N(observed; predicted, sigma^2)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape[-1] != predicted.shape[-1]:
        raise ValueError(
            f"length mismatch: observed {observed.shape[-1]} vs predicted {predicted.shape[-1]}"
        )
    n = observed.shape[-1]
    resid = observed - predicted
    return -0.5 * n * np.log(2 * np.pi * sigma**2) - np.sum(resid**2, axis=-1) / (2 * sigma**2)
