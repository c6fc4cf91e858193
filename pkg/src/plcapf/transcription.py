"""Note events from pitch activity, and onset-based note-level scoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

MIN_DURATION_S = 0.05
ONSET_TOLERANCE_S = 0.05
THRESHOLD_FRACTION = 0.1
# slack for float noise at the inclusive tolerance boundary
_BOUNDARY_SLACK = 1e-9


@dataclass(frozen=True, order=True)
class NoteEvent:
    """A note: 0-based pitch index, onset and offset in seconds."""

    pitch: int
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if self.pitch < 0:
            raise ValueError(f"pitch index must be >= 0, got {self.pitch}")
        if not self.offset_s > self.onset_s:
            raise ValueError(f"offset {self.offset_s} must follow onset {self.onset_s}")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoteEvent":
        return cls(int(d["pitch"]), float(d["onset_s"]), float(d["offset_s"]))


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def ppv(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f_measure(self) -> float:
        p, r = self.ppv, self.tpr
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tpr": self.tpr,
            "ppv": self.ppv,
            "f_measure": self.f_measure,
        }


def default_threshold(activity) -> float:
    """Detection threshold used when none is given: 10% of the global maximum."""
    peak = float(np.max(activity)) if np.size(activity) else 0.0
    return THRESHOLD_FRACTION * peak


def extract_notes(
    activity,
    hop_s: float,
    threshold: float | None = None,
    min_duration_s: float = MIN_DURATION_S,
) -> list[NoteEvent]:
    """Threshold each pitch row and keep runs lasting at least ``min_duration_s``.

    A run of frames ``t0..t1`` with activity >= threshold becomes the note
    ``[t0 * hop_s, (t1 + 1) * hop_s)``.
    """
    activity = np.asarray(activity, dtype=float)
    if activity.ndim != 2:
        raise ValueError("activity must be a (pitches, frames) matrix")
    if np.any(activity < 0):
        raise ValueError("activity must be nonnegative")
    if threshold is None:
        threshold = default_threshold(activity)
        if threshold <= 0:
            return []
    if not threshold > 0:
        raise ValueError("threshold must be positive")

    notes = []
    active = activity >= threshold
    padded = np.zeros((active.shape[0], active.shape[1] + 2), dtype=np.int8)
    padded[:, 1:-1] = active
    edges = np.diff(padded, axis=1)
    for pitch in range(active.shape[0]):
        starts = np.flatnonzero(edges[pitch] == 1)
        stops = np.flatnonzero(edges[pitch] == -1)
        for t0, t1 in zip(starts, stops):
            onset, offset = t0 * hop_s, t1 * hop_s
            if offset - onset + _BOUNDARY_SLACK >= min_duration_s:
                notes.append(NoteEvent(pitch, onset, offset))
    notes.sort(key=lambda n: (n.onset_s, n.pitch))
    return notes


def match_notes(estimated, reference, onset_tol_s: float = ONSET_TOLERANCE_S):
    """Greedy one-to-one matching of equal-pitch notes, nearest onsets first.

    All candidate pairs within the (inclusive) tolerance are ranked by onset
    error and taken in that order when both notes are still free.  Ranking
    globally rather than reference by reference keeps the result unchanged
    when the two lists are swapped.

    Returns a list of ``(reference_index, estimated_index)`` pairs.
    """
    if not onset_tol_s > 0:
        raise ValueError("onset tolerance must be positive")
    candidates = []
    for r, ref in enumerate(reference):
        for e, est in enumerate(estimated):
            if ref.pitch != est.pitch:
                continue
            err = abs(ref.onset_s - est.onset_s)
            if err <= onset_tol_s + _BOUNDARY_SLACK:
                lo, hi = sorted((ref.onset_s, est.onset_s))
                candidates.append((err, ref.pitch, lo, hi, r, e))
    candidates.sort(key=lambda c: c[:4])
    used_ref, used_est, pairs = set(), set(), []
    for *_, r, e in candidates:
        if r in used_ref or e in used_est:
            continue
        used_ref.add(r)
        used_est.add(e)
        pairs.append((r, e))
    return pairs


def evaluate(estimated, reference, onset_tol_s: float = ONSET_TOLERANCE_S) -> EvalReport:
    """Note-level TP/FP/FN with onset-only matching."""
    estimated, reference = list(estimated), list(reference)
    tp = len(match_notes(estimated, reference, onset_tol_s))
    return EvalReport(tp=tp, fp=len(estimated) - tp, fn=len(reference) - tp)


def notes_to_roll(notes, n_pitches: int, n_frames: int, hop_s: float) -> np.ndarray:
    """Binary piano roll sampled at frame start times ``t * hop_s``."""
    roll = np.zeros((n_pitches, n_frames), dtype=bool)
    times = np.arange(n_frames) * hop_s
    for note in notes:
        if note.pitch >= n_pitches:
            raise ValueError(f"pitch {note.pitch} outside 0..{n_pitches - 1}")
        # tiny slack so grid-aligned boundaries survive float rounding
        eps = 1e-9 * hop_s
        roll[note.pitch] |= (times >= note.onset_s - eps) & (times < note.offset_s - eps)
    return roll
