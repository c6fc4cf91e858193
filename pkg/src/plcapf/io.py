"""Versioned on-disk formats.

CSV matrices start with a header line whose first field is a schema tag
(``plcapf-<kind>/<version>``) followed by the dimensions; every following
line is one matrix row.  JSON documents carry the tag in a ``schema`` key.
Floats are written with 17 significant digits so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from plcapf.model import BINS_PER_OCTAVE, Spectrogram, TemplateDictionary
from plcapf.priors import PriorMatrix, TrainingCorpus
from plcapf.transcription import EvalReport, NoteEvent

SPECTROGRAM_SCHEMA = "plcapf-spectrogram/1"
TEMPLATES_SCHEMA = "plcapf-templates/1"
PRIOR_SCHEMA = "plcapf-prior/1"
SPECTRA_SCHEMA = "plcapf-spectra/1"
ACTIVITY_SCHEMA = "plcapf-activity/1"
NOTES_SCHEMA = "plcapf-notes/1"
CORPUS_SCHEMA = "plcapf-corpus/1"
METRICS_SCHEMA = "plcapf-metrics/1"
MANIFEST_SCHEMA = "plcapf-manifest/1"
SCENARIO_SCHEMA = "plcapf-scenario/1"


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_matrix(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _read_matrix(path, schema: str, n_header: int):
    """Return (header fields after the tag, matrix, first data line number)."""
    path = Path(path)
    with path.open(newline="") as fh:
        lines = [row for row in csv.reader(fh)]
    if not lines:
        raise FormatError(path, 1, "empty file")
    header = [h.strip() for h in lines[0]]
    if header[0] != schema:
        raise FormatError(path, 1, f"expected schema tag {schema!r}, found {header[0]!r}")
    if len(header) != n_header + 1:
        raise FormatError(path, 1, f"header needs {n_header} fields after the tag, found {len(header) - 1}")
    rows, width = [], None
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw or all(not c.strip() for c in raw):
            continue
        try:
            row = [float(c) for c in raw]
        except ValueError as exc:
            raise FormatError(path, lineno, f"non-numeric value ({exc})") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(path, lineno, f"ragged row: {len(row)} values, expected {width}")
        if not all(math.isfinite(v) for v in row):
            raise FormatError(path, lineno, "non-finite value")
        rows.append((lineno, row))
    return header[1:], rows


def _int_field(path, value: str, name: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise FormatError(path, 1, f"header field {name} must be an integer, got {value!r}") from None
    if n <= 0:
        raise FormatError(path, 1, f"header field {name} must be positive, got {n}")
    return n


def _float_field(path, value: str, name: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise FormatError(path, 1, f"header field {name} must be a number, got {value!r}") from None
    if not x > 0:
        raise FormatError(path, 1, f"header field {name} must be positive, got {x}")
    return x


def _check_shape(path, rows, n_rows: int, n_cols: int, row_name: str, col_name: str):
    if len(rows) != n_rows:
        raise FormatError(
            path, 1, f"header declares {row_name}={n_rows} but the file has {len(rows)} data rows"
        )
    if rows and len(rows[0][1]) != n_cols:
        raise FormatError(
            path, rows[0][0], f"header declares {col_name}={n_cols} but the row has {len(rows[0][1])} values"
        )


def _check_nonnegative(path, rows):
    for lineno, row in rows:
        if any(v < 0 for v in row):
            col = next(i for i, v in enumerate(row) if v < 0)
            raise FormatError(path, lineno, f"negative value {row[col]!r} in column {col + 1}")


# spectrograms


def save_spectrogram(path, spec: Spectrogram) -> Path:
    header = [SPECTROGRAM_SCHEMA, spec.n_bins, spec.n_frames, _fmt(spec.frame_hop_seconds),
              int(spec.bins_per_octave)]
    return _write_matrix(path, header, spec.values)


def load_spectrogram(path) -> Spectrogram:
    """Read an F x T spectrogram; header ``tag,F,T,hop_s,bins_per_octave``."""
    fields, rows = _read_matrix(path, SPECTROGRAM_SCHEMA, 4)
    n_bins = _int_field(path, fields[0], "F")
    n_frames = _int_field(path, fields[1], "T")
    hop = _float_field(path, fields[2], "hop_s")
    bpo = _int_field(path, fields[3], "bins_per_octave")
    _check_shape(path, rows, n_bins, n_frames, "F", "T")
    _check_nonnegative(path, rows)
    return Spectrogram(np.array([r for _, r in rows], dtype=float), hop, bpo)


# templates


def save_templates(path, dictionary: TemplateDictionary) -> Path:
    n_i, n_m, n_f = dictionary.templates.shape
    shifts = ";".join(str(s) for s in dictionary.shifts)
    header = [TEMPLATES_SCHEMA, n_i, n_m, n_f, shifts]
    return _write_matrix(path, header, dictionary.templates.reshape(n_i * n_m, n_f))


def load_templates(path) -> TemplateDictionary:
    """Rows are templates ordered pitch-major; header ``tag,I,M,F,shifts``."""
    fields, rows = _read_matrix(path, TEMPLATES_SCHEMA, 4)
    n_i = _int_field(path, fields[0], "I")
    n_m = _int_field(path, fields[1], "M")
    n_f = _int_field(path, fields[2], "F")
    try:
        shifts = tuple(int(s) for s in fields[3].split(";"))
    except ValueError:
        raise FormatError(path, 1, f"shifts must be ';'-separated integers, got {fields[3]!r}") from None
    _check_shape(path, rows, n_i * n_m, n_f, "I*M", "F")
    _check_nonnegative(path, rows)
    values = np.array([r for _, r in rows], dtype=float).reshape(n_i, n_m, n_f)
    try:
        return TemplateDictionary(values, shifts)
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None


# priors and resonance spectra


def save_prior(path, prior: PriorMatrix) -> Path:
    return _write_matrix(path, [PRIOR_SCHEMA, prior.n_pitches, prior.kind], prior.S)


def load_prior(path) -> PriorMatrix:
    """Header ``tag,N_I,kind`` then N_I rows of N_I values."""
    fields, rows = _read_matrix(path, PRIOR_SCHEMA, 2)
    n = _int_field(path, fields[0], "N_I")
    _check_shape(path, rows, n, n, "N_I", "N_I")
    _check_nonnegative(path, rows)
    try:
        return PriorMatrix(np.array([r for _, r in rows], dtype=float), fields[1])
    except ValueError as exc:
        raise FormatError(path, 1, str(exc)) from None


def save_spectra(path, spectra) -> Path:
    spectra = np.asarray(spectra, dtype=float)
    return _write_matrix(path, [SPECTRA_SCHEMA, spectra.shape[0], spectra.shape[1]], spectra)


def load_spectra(path) -> np.ndarray:
    """One spectrum per pitch; header ``tag,N_I,F``."""
    fields, rows = _read_matrix(path, SPECTRA_SCHEMA, 2)
    n = _int_field(path, fields[0], "N_I")
    n_f = _int_field(path, fields[1], "F")
    _check_shape(path, rows, n, n_f, "N_I", "F")
    _check_nonnegative(path, rows)
    return np.array([r for _, r in rows], dtype=float)


# activity


def save_activity(path, activity, hop_s: float) -> Path:
    activity = np.asarray(activity, dtype=float)
    header = [ACTIVITY_SCHEMA, activity.shape[0], activity.shape[1], _fmt(hop_s)]
    return _write_matrix(path, header, activity)


def load_activity(path):
    """Returns ``(activity (I, T), hop_s)``."""
    fields, rows = _read_matrix(path, ACTIVITY_SCHEMA, 3)
    n_i = _int_field(path, fields[0], "I")
    n_t = _int_field(path, fields[1], "T")
    hop = _float_field(path, fields[2], "hop_s")
    _check_shape(path, rows, n_i, n_t, "I", "T")
    _check_nonnegative(path, rows)
    return np.array([r for _, r in rows], dtype=float), hop


# JSON documents


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, f"invalid JSON ({exc.msg})") from None


def _check_schema(path, doc, schema):
    found = doc.get("schema")
    if found != schema:
        raise FormatError(path, None, f"expected schema {schema!r}, found {found!r}")


def _parse_notes(path, items) -> list[NoteEvent]:
    notes = []
    for k, item in enumerate(items):
        try:
            notes.append(NoteEvent.from_dict(item))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, None, f"note #{k}: {exc!r}") from None
    return notes


def save_notes(path, notes) -> Path:
    return _write_json(path, {"schema": NOTES_SCHEMA, "notes": [n.to_dict() for n in notes]})


def load_notes(path) -> list[NoteEvent]:
    """Accepts the tagged document or a bare ``[{pitch, onset_s, offset_s}, ...]`` list."""
    doc = _read_json(path)
    if isinstance(doc, list):
        return _parse_notes(path, doc)
    _check_schema(path, doc, NOTES_SCHEMA)
    return _parse_notes(path, doc.get("notes", []))


def save_notes_csv(path, notes) -> Path:
    """Header ``tag,N`` then one ``pitch,onset_s,offset_s`` row per note."""
    notes = list(notes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"{NOTES_SCHEMA},{len(notes)}\n")
        for n in notes:
            fh.write(f"{n.pitch},{_fmt(n.onset_s)},{_fmt(n.offset_s)}\n")
    return path


def load_notes_csv(path) -> list[NoteEvent]:
    fields, rows = _read_matrix(path, NOTES_SCHEMA, 1)
    n = int(fields[0]) if fields[0].isdigit() else None
    if n is None or len(rows) != n:
        raise FormatError(path, 1, f"header declares {fields[0]} notes, file has {len(rows)}")
    notes = []
    for lineno, row in rows:
        if len(row) != 3 or row[0] != int(row[0]):
            raise FormatError(path, lineno, "expected integer pitch, onset_s, offset_s")
        try:
            notes.append(NoteEvent(int(row[0]), row[1], row[2]))
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from None
    return notes


def save_corpus(path, corpus: TrainingCorpus) -> Path:
    doc = {
        "schema": CORPUS_SCHEMA,
        "n_pitches": corpus.n_pitches,
        "hop_s": corpus.hop_s,
        "pieces": [[n.to_dict() for n in piece] for piece in corpus.pieces],
    }
    return _write_json(path, doc)


def load_corpus(path, n_pitches: int | None = None, hop_s: float | None = None) -> TrainingCorpus:
    """Read a training corpus.

    Besides the tagged document, a bare note list (one piece) or a list of
    note lists is accepted; then ``n_pitches`` defaults to the highest pitch
    plus one and ``hop_s`` to the standard hop.
    """
    from plcapf.model import HOP_SECONDS

    doc = _read_json(path)
    if isinstance(doc, dict):
        _check_schema(path, doc, CORPUS_SCHEMA)
        raw = doc.get("pieces", [])
        n_pitches = n_pitches or doc.get("n_pitches")
        hop_s = hop_s or doc.get("hop_s")
    elif doc and all(isinstance(p, list) for p in doc):
        raw = doc
    else:
        raw = [doc]
    pieces = [_parse_notes(path, piece) for piece in raw]
    if n_pitches is None:
        n_pitches = 1 + max((n.pitch for p in pieces for n in p), default=0)
    try:
        return TrainingCorpus(pieces, int(n_pitches), float(hop_s or HOP_SECONDS))
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None


def save_metrics(path, report: EvalReport, extra: dict | None = None) -> Path:
    doc = {"schema": METRICS_SCHEMA, **report.to_dict(), **(extra or {})}
    return _write_json(path, doc)


def load_metrics(path) -> dict:
    doc = _read_json(path)
    _check_schema(path, doc, METRICS_SCHEMA)
    return doc


def save_manifest(path, manifest: dict) -> Path:
    return _write_json(path, {"schema": MANIFEST_SCHEMA, **manifest})


def load_manifest(path) -> dict:
    doc = _read_json(path)
    _check_schema(path, doc, MANIFEST_SCHEMA)
    return doc


def save_scenario(path, scenario) -> Path:
    doc = {
        "schema": SCENARIO_SCHEMA,
        "noise_sigma": scenario.noise_sigma,
        "hop_s": scenario.hop_s,
        "n_frames": scenario.n_frames,
        "notes": [
            {"pitch": n.pitch, "onset_s": n.onset_s, "offset_s": n.offset_s,
             "amplitude": n.amplitude, "mode": n.mode, "shift": n.shift}
            for n in scenario.notes
        ],
        "meta": scenario.meta,
    }
    return _write_json(path, doc)


def load_scenario(path):
    from plcapf.synth import SyntheticScenario

    doc = _read_json(path)
    _check_schema(path, doc, SCENARIO_SCHEMA)
    try:
        return SyntheticScenario(
            doc["notes"], doc.get("noise_sigma", 0.0), doc["hop_s"], doc.get("n_frames"),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, None, f"bad scenario: {exc!r}") from None


__all__ = [name for name in dir() if name.startswith(("save_", "load_"))] + [
    "FormatError",
    "BINS_PER_OCTAVE",
]
