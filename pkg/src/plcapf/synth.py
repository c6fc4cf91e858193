"""Synthetic spectrograms generated from known note events.

Spectrogram columns are exact SIPLCA reconstructions of the implied
parameters plus i.i.d. Gaussian noise clipped at zero, so every estimator can
be scored against a known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from plcapf.model import (
    BINS_PER_OCTAVE,
    DEFAULT_SHIFTS,
    HOP_SECONDS,
    ParameterState,
    Spectrogram,
    TemplateDictionary,
    reconstruct_frame,
)
from plcapf.transcription import NoteEvent


def disjoint_templates(
    n_pitches: int,
    width: int = 5,
    spacing: int | None = None,
    n_modes: int = 1,
    margin: int = 2,
) -> TemplateDictionary:
    """One compact bump per pitch, supports pairwise disjoint.

    Pitch ``i`` occupies bins ``margin + i * spacing`` onward for ``width``
    bins.  Extra modes reuse the support with a different profile.
    """
    spacing = spacing or width + 4
    n_bins = 2 * margin + (n_pitches - 1) * spacing + width
    templates = np.zeros((n_pitches, n_modes, n_bins))
    base = np.hanning(width + 2)[1:-1]
    for i in range(n_pitches):
        start = margin + i * spacing
        for m in range(n_modes):
            profile = base ** (1 + m)
            templates[i, m, start:start + width] = profile / profile.sum()
    return TemplateDictionary(templates, DEFAULT_SHIFTS)


def harmonic_templates(
    n_pitches: int,
    bins_per_octave: int = BINS_PER_OCTAVE,
    n_harmonics: int = 6,
    lowest_bin: int = 4,
    decay: float = 1.0,
    n_modes: int = 1,
    spread: float = 0.8,
) -> TemplateDictionary:
    """Harmonic-comb templates on a log-frequency axis, one pitch per semitone.

    Harmonics of different pitches overlap, which makes the decomposition
    ambiguous (octave and fifth relations).  Mode ``m`` uses amplitude decay
    ``h ** -(decay * (m + 1))``.
    """
    per_semitone = bins_per_octave / 12.0
    offsets = bins_per_octave * np.log2(np.arange(1, n_harmonics + 1))
    n_bins = int(np.ceil(lowest_bin + (n_pitches - 1) * per_semitone + offsets[-1] + 4 * spread + 3))
    f = np.arange(n_bins)
    templates = np.zeros((n_pitches, n_modes, n_bins))
    for i in range(n_pitches):
        root = lowest_bin + i * per_semitone
        for m in range(n_modes):
            amps = np.arange(1, n_harmonics + 1, dtype=float) ** -(decay * (m + 1))
            t = sum(a * np.exp(-0.5 * ((f - root - o) / spread) ** 2) for a, o in zip(amps, offsets))
            t[t < 1e-6 * t.max()] = 0.0
            templates[i, m] = t / t.sum()
    return TemplateDictionary(templates, DEFAULT_SHIFTS)


@dataclass
class SyntheticNote:
    pitch: int
    onset_s: float
    offset_s: float
    amplitude: float = 1.0
    mode: int = 0
    shift: int = 0

    def event(self) -> NoteEvent:
        return NoteEvent(self.pitch, self.onset_s, self.offset_s)


@dataclass
class SyntheticScenario:
    """Ground-truth notes plus the rendering settings.

    Each note fixes its mode and its shift (a bin offset from the dictionary's
    shift range) for its whole duration.  Onsets and offsets are snapped to
    the frame grid.
    """

    notes: list
    noise_sigma: float = 0.0
    hop_s: float = HOP_SECONDS
    n_frames: int | None = None
    tail_frames: int = 4
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.notes = [n if isinstance(n, SyntheticNote) else SyntheticNote(**n) for n in self.notes]
        for n in self.notes:
            n.onset_s = round(n.onset_s / self.hop_s) * self.hop_s
            n.offset_s = round(n.offset_s / self.hop_s) * self.hop_s
            if n.offset_s <= n.onset_s:
                raise ValueError(f"note {n} is shorter than one frame")
        if self.n_frames is None:
            last = max((round(n.offset_s / self.hop_s) for n in self.notes), default=0)
            self.n_frames = int(last + self.tail_frames)

    @property
    def events(self) -> list[NoteEvent]:
        return sorted((n.event() for n in self.notes), key=lambda e: (e.onset_s, e.pitch))


def scenario_states(scenario: SyntheticScenario, dictionary: TemplateDictionary):
    """Per-frame parameter tensors implied by the scenario.

    Returns ``ParameterState`` with A (T, I), B (T, I, M), C (T, I, M, D).
    Pitches that are silent keep uniform B and C.
    """
    n_i, n_m, n_d = dictionary.n_pitches, dictionary.n_modes, dictionary.n_shifts
    T = scenario.n_frames
    A = np.zeros((T, n_i))
    B = np.full((T, n_i, n_m), 1.0 / n_m)
    C = np.full((T, n_i, n_m, n_d), 1.0 / n_d)
    for note in scenario.notes:
        if not 0 <= note.pitch < n_i:
            raise ValueError(f"note pitch {note.pitch} outside dictionary (0..{n_i - 1})")
        if not 0 <= note.mode < n_m:
            raise ValueError(f"note mode {note.mode} outside dictionary (0..{n_m - 1})")
        if note.shift not in dictionary.shifts:
            raise ValueError(f"note shift {note.shift} not in {dictionary.shifts}")
        t0 = int(round(note.onset_s / scenario.hop_s))
        t1 = min(int(round(note.offset_s / scenario.hop_s)), T)
        d = dictionary.shifts.index(note.shift)
        A[t0:t1, note.pitch] += note.amplitude
        B[t0:t1, note.pitch] = np.eye(n_m)[note.mode]
        C[t0:t1, note.pitch, note.mode] = np.eye(n_d)[d]
    return ParameterState(A, B, C)


def synthesize(scenario: SyntheticScenario, dictionary: TemplateDictionary, rng=0):
    """Render the scenario.

    Returns ``(spectrogram, true_activity)`` with ``true_activity`` shaped
    (pitches, frames) on the same grid as the spectrogram.
    """
    rng = np.random.default_rng(rng)
    states = scenario_states(scenario, dictionary)
    clean = reconstruct_frame(states, dictionary).T
    noise = scenario.noise_sigma * rng.standard_normal(clean.shape) if scenario.noise_sigma else 0.0
    values = np.maximum(clean + noise, 0.0)
    spec = Spectrogram(values, scenario.hop_s, BINS_PER_OCTAVE)
    return spec, states.A.T.copy()


def sequential_scenario(
    n_notes: int,
    n_pitches: int,
    note_frames: int = 16,
    gap_frames: int = 3,
    noise_sigma: float = 0.0,
    hop_s: float = HOP_SECONDS,
    rng=0,
) -> SyntheticScenario:
    """Monophonic line: ``n_notes`` notes one after another with short rests.

    Consecutive notes never repeat a pitch.
    """
    rng = np.random.default_rng(rng)
    notes, prev, t = [], -1, 2
    for _ in range(n_notes):
        pitch = int(rng.choice([p for p in range(n_pitches) if p != prev]))
        notes.append(SyntheticNote(pitch, t * hop_s, (t + note_frames) * hop_s))
        prev = pitch
        t += note_frames + gap_frames
    return SyntheticScenario(notes, noise_sigma, hop_s)


def single_pitch_scenario(
    n_notes: int,
    pitch: int = 0,
    note_frames: int = 16,
    gap_frames: int = 3,
    noise_sigma: float = 0.0,
    hop_s: float = HOP_SECONDS,
) -> SyntheticScenario:
    """The same pitch struck ``n_notes`` times with short rests in between."""
    notes, t = [], 2
    for _ in range(n_notes):
        notes.append(SyntheticNote(int(pitch), t * hop_s, (t + note_frames) * hop_s))
        t += note_frames + gap_frames
    return SyntheticScenario(notes, noise_sigma, hop_s)


def polyphonic_scenario(
    n_chords: int,
    n_pitches: int,
    polyphony=(2, 3),
    chord_frames: int = 16,
    gap_frames: int = 3,
    noise_sigma: float = 0.0,
    hop_s: float = HOP_SECONDS,
    amplitude_range=(0.7, 1.3),
    rng=0,
) -> SyntheticScenario:
    """Sequence of chords with 2-3 distinct pitches each."""
    rng = np.random.default_rng(rng)
    notes, t = [], 2
    for _ in range(n_chords):
        k = int(rng.integers(polyphony[0], polyphony[1] + 1))
        pitches = rng.choice(n_pitches, size=k, replace=False)
        for p in sorted(pitches):
            amp = float(rng.uniform(*amplitude_range))
            notes.append(SyntheticNote(int(p), t * hop_s, (t + chord_frames) * hop_s, amp))
        t += chord_frames + gap_frames
    return SyntheticScenario(notes, noise_sigma, hop_s)
