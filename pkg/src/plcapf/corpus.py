"""Segmenting and splitting note-event corpora into train and test sets."""

from __future__ import annotations

import numpy as np

from plcapf.priors import TrainingCorpus
from plcapf.transcription import NoteEvent


def segment_piece(notes, segment_s: float) -> list[list[NoteEvent]]:
    """Cut one piece into consecutive windows of ``segment_s`` seconds.

    A note belongs to the window holding its onset; times are re-based to
    the window start and offsets are clipped to the window end.  Empty
    windows are dropped.
    """
    if not segment_s > 0:
        raise ValueError("segment length must be positive")
    windows: dict = {}
    for note in notes:
        k = int(note.onset_s // segment_s)
        start = k * segment_s
        onset = note.onset_s - start
        offset = min(note.offset_s, start + segment_s) - start
        if offset > onset:
            windows.setdefault(k, []).append(NoteEvent(note.pitch, onset, offset))
    return [windows[k] for k in sorted(windows)]


def split_corpus(corpus: TrainingCorpus, test_fraction: float = 0.3, rng=0,
                 segment_s: float | None = None):
    """Shuffle pieces (or their segments) and split them.

    Returns ``(train, test)`` corpora.  The test set gets
    ``round(test_fraction * n)`` pieces, at least one when there are two or
    more.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    pieces = list(corpus.pieces)
    if segment_s is not None:
        pieces = [seg for piece in pieces for seg in segment_piece(piece, segment_s)]
    n = len(pieces)
    order = np.random.default_rng(rng).permutation(n)
    n_test = int(round(test_fraction * n))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    test_idx = set(order[:n_test].tolist())
    train = [p for i, p in enumerate(pieces) if i not in test_idx]
    test = [p for i, p in enumerate(pieces) if i in test_idx]
    make = lambda ps: TrainingCorpus(ps, corpus.n_pitches, corpus.hop_s)  # noqa: E731
    return make(train), make(test)
