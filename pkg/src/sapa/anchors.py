"""Cross-corpus phoneme similarity and per-emotion anchor selection.

For every (emotion, phoneme) present in both corpora, the similarity cell is
the cosine between the two per-corpus mean content embeddings. Anchor sets
keep the phonemes whose realizations stay closest across corpora, either the
top k per emotion or everything above a threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .embstore import EMOTIONS
from .errors import InsufficientDataError
from .simgraph import cosine

log = logging.getLogger(__name__)


@dataclass
class SelectionRule:
    """Anchor selection rule: kind "top_k" (uses k) or "threshold" (uses theta)."""

    kind: str = "top_k"
    k: int = 3
    theta: float = 0.7

    def validate(self):
        if self.kind not in ("top_k", "threshold"):
            raise ValueError(f"unknown selection rule {self.kind!r}")
        if self.kind == "top_k" and self.k < 1:
            raise ValueError("k must be positive")


@dataclass
class PhonemeSimilarityTable:
    """Emotion rows by phoneme columns; cells only where both corpora have data."""

    phonemes: list[str]                       # column order (inventory order)
    cells: dict[tuple[str, str], float]       # (emotion, phoneme) -> sim
    src_corpus: str = "src"
    tgt_corpus: str = "tgt"

    def row(self, emotion: str) -> list[tuple[str, float]]:
        return [(p, self.cells[(emotion, p)])
                for p in self.phonemes if (emotion, p) in self.cells]

    def to_csv(self) -> str:
        lines = ["emotion," + ",".join(self.phonemes)]
        for emotion in EMOTIONS:
            vals = []
            for p in self.phonemes:
                cell = self.cells.get((emotion, p))
                vals.append("" if cell is None else repr(cell))
            lines.append(f"{emotion}," + ",".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class AnchorSet:
    """Per-emotion anchor phonemes with similarity scores, descending by sim."""

    anchors: dict[str, list[tuple[str, float]]]
    rule: SelectionRule

    def phonemes(self, emotion: str) -> list[str]:
        return [p for p, _ in self.anchors.get(emotion, [])]

    def to_json_dict(self) -> dict:
        return {
            "rule": {"kind": self.rule.kind, "k": self.rule.k, "theta": self.rule.theta},
            "anchors": {
                e: [{"phoneme": p, "sim": s} for p, s in rows]
                for e, rows in self.anchors.items()
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AnchorSet":
        rule = SelectionRule(**obj["rule"])
        anchors = {
            e: [(row["phoneme"], float(row["sim"])) for row in rows]
            for e, rows in obj["anchors"].items()
        }
        return cls(anchors, rule)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def phoneme_similarity(records, src_corpus: str, tgt_corpus: str,
                       inventory: list[str] | None = None,
                       vowels_only: tuple[str, ...] | None = None) -> PhonemeSimilarityTable:
    """Cosine similarity between per-corpus mean content embeddings.

    Uses train-split content records. ``inventory`` fixes the column order
    (defaults to first appearance order); ``vowels_only`` restricts the
    search to a sub-inventory.
    """
    sums: dict[tuple[str, str, str], np.ndarray] = {}
    ns: dict[tuple[str, str, str], int] = {}
    seen: list[str] = []
    for rec in records:
        if rec.kind != "content" or rec.split != "train":
            continue
        if rec.corpus_id not in (src_corpus, tgt_corpus):
            continue
        if vowels_only is not None and rec.phoneme not in vowels_only:
            continue
        key = (rec.emotion, rec.phoneme, rec.corpus_id)
        if key in sums:
            sums[key] = sums[key] + rec.vector
            ns[key] += 1
        else:
            sums[key] = rec.vector.copy()
            ns[key] = 1
        if rec.phoneme not in seen:
            seen.append(rec.phoneme)
    if inventory is None:
        inventory = seen
    phonemes = [p for p in inventory if vowels_only is None or p in vowels_only]

    cells: dict[tuple[str, str], float] = {}
    for emotion in EMOTIONS:
        for p in phonemes:
            ks = (emotion, p, src_corpus)
            kt = (emotion, p, tgt_corpus)
            if ks in sums and kt in sums:
                cells[(emotion, p)] = cosine(sums[ks] / ns[ks], sums[kt] / ns[kt])
    if not cells:
        log.warning("phoneme similarity table is empty: no shared phonemes "
                    "between %s and %s", src_corpus, tgt_corpus)
    return PhonemeSimilarityTable(phonemes=phonemes, cells=cells,
                                  src_corpus=src_corpus, tgt_corpus=tgt_corpus)


def select_anchors(table: PhonemeSimilarityTable, rule: SelectionRule | None = None,
                   emotions=EMOTIONS) -> AnchorSet:
    """Pick anchor phonemes per emotion under the given rule.

    top_k keeps the k highest-similarity phonemes, ties broken by inventory
    order; threshold keeps every phoneme with sim >= theta.
    """
    rule = rule or SelectionRule()
    rule.validate()
    missing = [e for e in emotions if not table.row(e)]
    if missing:
        raise InsufficientDataError(
            f"no similarity cells for emotions: {', '.join(missing)}"
        )
    col = {p: i for i, p in enumerate(table.phonemes)}
    anchors: dict[str, list[tuple[str, float]]] = {}
    for emotion in emotions:
        row = table.row(emotion)
        row.sort(key=lambda ps: (-ps[1], col[ps[0]]))
        if rule.kind == "top_k":
            chosen = row[: rule.k]
        else:
            chosen = [(p, s) for p, s in row if s >= rule.theta]
        anchors[emotion] = chosen
    return AnchorSet(anchors=anchors, rule=rule)
