"""Phoneme alignment ingestion.

Accepts either one combined tab-separated file with columns
(utterance_id, start, end, phoneme) or a directory of per-utterance files
named ``<utterance_id>.tsv`` with (start, end, phoneme) rows. Times are in
seconds. Fields split on tabs when present, otherwise on whitespace runs;
commas are never separators because merged phoneme classes like "A,a"
contain them. This package consumes alignments; it never computes them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


def _fields(line: str) -> list[str]:
    if "\t" in line:
        return [p.strip() for p in line.split("\t") if p.strip()]
    return line.split()


@dataclass
class AlignmentEntry:
    utterance_id: str
    phoneme: str
    start: float
    end: float

    def validate(self, duration: float | None = None):
        if not 0.0 <= self.start < self.end:
            raise ValueError(
                f"{self.utterance_id}: bad alignment times [{self.start}, {self.end})")
        if duration is not None and self.end > duration + 1e-6:
            raise ValueError(
                f"{self.utterance_id}: alignment end {self.end:.3f}s past "
                f"utterance duration {duration:.3f}s")


def _parse_line(line: str, utterance_id: str | None):
    parts = _fields(line.strip())
    if utterance_id is None:
        if len(parts) != 4:
            raise ValueError(f"expected 'utterance_id start end phoneme': {line!r}")
        utt, start, end, phoneme = parts
    else:
        if len(parts) != 3:
            raise ValueError(f"expected 'start end phoneme': {line!r}")
        utt = utterance_id
        start, end, phoneme = parts
    return AlignmentEntry(utt, phoneme, float(start), float(end))


def read_alignments(path) -> dict[str, list[AlignmentEntry]]:
    """Read one combined file or a directory of per-utterance files."""
    path = Path(path)
    out: dict[str, list[AlignmentEntry]] = {}

    def add(entry: AlignmentEntry):
        entry.validate()
        out.setdefault(entry.utterance_id, []).append(entry)

    if path.is_dir():
        for file in sorted(path.iterdir()):
            if file.suffix.lower() not in (".tsv", ".txt", ".align"):
                continue
            for line in file.read_text(encoding="utf-8").splitlines():
                if line.strip() and not line.startswith("#"):
                    add(_parse_line(line, file.stem))
    else:
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip() and not line.startswith("#"):
                add(_parse_line(line, None))
    for entries in out.values():
        entries.sort(key=lambda e: e.start)
    return out
