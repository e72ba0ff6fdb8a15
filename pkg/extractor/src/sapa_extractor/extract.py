"""Windowed encoding of aligned audio into the SAPA dataset format.

Per utterance: one speaker-kind record from the full waveform and one
content-kind record per aligned phoneme, encoded from a fixed-length window
centered on the phoneme midpoint (default 240 ms, 120 ms for analysis-style
exports). Windows reaching past the utterance edge are zero-padded.

The output file is the pipeline's interchange format: UTF-8 JSON Lines,
manifest object first, then one record object per line with fields
record_id, corpus_id, speaker_id, utterance_id, emotion, kind, phoneme,
vector, split.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import load_wav
from .encoders import Encoder

log = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happiness", "anger", "sadness")
SPLITS = ("train", "validation", "test")
AUDIO_CSV_COLUMNS = ("path", "utterance_id", "speaker_id", "corpus_id",
                     "emotion", "split")


@dataclass
class AudioEntry:
    path: Path
    utterance_id: str
    speaker_id: str
    corpus_id: str
    emotion: str
    split: str

    def validate(self):
        if self.emotion not in EMOTIONS:
            raise ValueError(f"{self.utterance_id}: unknown emotion {self.emotion!r}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.utterance_id}: unknown split {self.split!r}")


def read_audio_csv(path) -> list[AudioEntry]:
    path = Path(path)
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(AUDIO_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"audio csv missing columns: {sorted(missing)}")
        for row in reader:
            entry = AudioEntry(
                path=Path(row["path"]),
                utterance_id=row["utterance_id"],
                speaker_id=row["speaker_id"],
                corpus_id=row["corpus_id"],
                emotion=row["emotion"],
                split=row["split"],
            )
            entry.validate()
            key = (entry.corpus_id, entry.utterance_id)
            if key in seen:
                raise ValueError(f"duplicate utterance {key} in audio csv")
            seen.add(key)
            entries.append(entry)
    return entries


@dataclass
class ExtractionReport:
    n_utterances: int = 0
    n_speaker_records: int = 0
    n_content_records: int = 0
    skipped: list[str] = field(default_factory=list)


def cut_window(samples: np.ndarray, rate: int, center_s: float,
               window_ms: float) -> np.ndarray:
    """Fixed-length window centered at ``center_s``, zero-padded at edges."""
    half = int(round(rate * window_ms / 2000.0))
    center = int(round(center_s * rate))
    lo, hi = center - half, center + half
    out = np.zeros(2 * half, dtype=np.float64)
    src_lo, src_hi = max(lo, 0), min(hi, samples.size)
    if src_lo < src_hi:
        out[src_lo - lo:src_hi - lo] = samples[src_lo:src_hi]
    return out


def _record_line(record: dict) -> str:
    ordered = {
        "record_id": record["record_id"],
        "corpus_id": record["corpus_id"],
        "speaker_id": record["speaker_id"],
        "utterance_id": record["utterance_id"],
        "emotion": record["emotion"],
        "kind": record["kind"],
        "phoneme": record["phoneme"],
        "vector": [float(x) for x in record["vector"]],
        "split": record["split"],
    }
    return json.dumps(ordered)


def extract(audio_entries, alignments, content_encoder: Encoder,
            speaker_encoder: Encoder, out_path, window_ms: float = 240.0):
    """Encode every utterance and write a dataset file.

    ``audio_entries`` comes from :func:`read_audio_csv`; ``alignments`` maps
    utterance_id to AlignmentEntry lists (see :func:`read_alignments`).
    Utterances without alignments are skipped and logged; encoder errors
    abort the run. Returns (out_path, ExtractionReport).
    """
    out_path = Path(out_path)
    report = ExtractionReport()
    records = []
    counts: dict[tuple[str, str, str], int] = {}
    corpora: list[str] = []
    phonemes: set[str] = set()

    for entry in audio_entries:
        aligned = alignments.get(entry.utterance_id)
        if not aligned:
            report.skipped.append(entry.utterance_id)
            log.warning("no alignment for utterance %s, skipped", entry.utterance_id)
            continue
        samples, rate = load_wav(entry.path)
        duration = samples.size / rate
        for a in aligned:
            a.validate(duration)
        if entry.corpus_id not in corpora:
            corpora.append(entry.corpus_id)
        report.n_utterances += 1
        key = (entry.corpus_id, entry.emotion, entry.split)

        speaker_vec = speaker_encoder.encode(samples, rate)
        records.append({
            "record_id": f"{entry.corpus_id}-{entry.utterance_id}-spk",
            "corpus_id": entry.corpus_id,
            "speaker_id": entry.speaker_id,
            "utterance_id": entry.utterance_id,
            "emotion": entry.emotion,
            "kind": "speaker",
            "phoneme": None,
            "vector": speaker_vec,
            "split": entry.split,
        })
        counts[key] = counts.get(key, 0) + 1
        report.n_speaker_records += 1

        for i, a in enumerate(aligned):
            center = (a.start + a.end) / 2.0
            window = cut_window(samples, rate, center, window_ms)
            vec = content_encoder.encode(window, rate)
            phonemes.add(a.phoneme)
            records.append({
                "record_id": f"{entry.corpus_id}-{entry.utterance_id}-seg{i:03d}",
                "corpus_id": entry.corpus_id,
                "speaker_id": entry.speaker_id,
                "utterance_id": entry.utterance_id,
                "emotion": entry.emotion,
                "kind": "content",
                "phoneme": a.phoneme,
                "vector": vec,
                "split": entry.split,
            })
            counts[key] = counts.get(key, 0) + 1
            report.n_content_records += 1

    manifest = {
        "d_s": speaker_encoder.dim,
        "d_c": content_encoder.dim,
        "corpora": corpora,
        "phoneme_inventory": sorted(phonemes),
        "counts": [
            {"corpus": c, "emotion": e, "split": s, "n": n}
            for (c, e, s), n in sorted(counts.items())
        ],
        "encoder": {
            "content": {"name": content_encoder.name,
                        "checksum": content_encoder.checksum,
                        "dim": content_encoder.dim},
            "speaker": {"name": speaker_encoder.name,
                        "checksum": speaker_encoder.checksum,
                        "dim": speaker_encoder.dim},
            "window_ms": window_ms,
        },
    }
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest) + "\n")
        for record in records:
            fh.write(_record_line(record) + "\n")
    return out_path, report
