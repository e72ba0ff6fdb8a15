"""Offline triplet mining in the phoneme and speaker-style spaces.

Phoneme-space triplets share one phoneme: anchor and positive share the
emotion and a style community, the negative carries a different emotion.
Speaker-space triplets pair style embeddings from the same community against
one from a different community, all under one emotion's partition.

Anchors are drawn uniformly over (emotion, phoneme, community) cells, not
raw records, so frequent phonemes do not dominate. Mining is deterministic
given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embstore import EMOTIONS


@dataclass
class Triplet:
    space: str                 # "phoneme" or "speaker"
    anchor_id: str
    positive_id: str
    negative_id: str
    emotion: str
    phoneme: str | None = None

    def as_line(self) -> str:
        ph = self.phoneme if self.phoneme is not None else "-"
        return "\t".join([self.space, self.anchor_id, self.positive_id,
                          self.negative_id, self.emotion, ph])


@dataclass
class MiningConfig:
    anchors_per_batch: int = 64
    cross_corpus_positive: bool = True
    restrict_to_anchor_set: bool = True
    seed: int = 0

    def validate(self):
        if self.anchors_per_batch < 1:
            raise ValueError("anchors_per_batch must be positive")


@dataclass
class MiningReport:
    requested: int = 0
    emitted: int = 0
    skipped_no_positive: int = 0
    skipped_no_negative: int = 0
    unpartitioned_records: int = 0
    notices: list[str] = field(default_factory=list)


def _node_community(partition, rec):
    return partition.assignment.get((rec.speaker_id, rec.corpus_id))


def mine_phoneme_triplets(records, anchor_set, partitions, cfg: MiningConfig,
                          n_triplets: int | None = None):
    """Mine phoneme-space triplets; returns (triplets, report).

    Anchors without a valid positive or negative are skipped and counted,
    never fatal. With ``cross_corpus_positive`` the positive is taken from
    the opposite corpus whenever one exists.
    """
    cfg.validate()
    n_triplets = cfg.anchors_per_batch if n_triplets is None else n_triplets
    report = MiningReport(requested=n_triplets)
    rng = np.random.default_rng(cfg.seed)

    # (emotion, phoneme, community) -> content train records
    cells: dict[tuple[str, str, int], list] = {}
    by_phoneme_emotion: dict[tuple[str, str], list] = {}
    for rec in records:
        if rec.kind != "content" or rec.split != "train":
            continue
        partition = partitions.get(rec.emotion)
        if partition is None:
            report.unpartitioned_records += 1
            continue
        community = _node_community(partition, rec)
        if community is None:
            report.unpartitioned_records += 1
            continue
        if cfg.restrict_to_anchor_set and rec.phoneme not in anchor_set.phonemes(rec.emotion):
            continue
        cells.setdefault((rec.emotion, rec.phoneme, community), []).append(rec)
        by_phoneme_emotion.setdefault((rec.phoneme, rec.emotion), []).append(rec)

    # negatives may come from outside the anchor set's emotion restriction
    negatives_pool: dict[tuple[str, str], list] = {}
    for rec in records:
        if rec.kind != "content" or rec.split != "train":
            continue
        negatives_pool.setdefault((rec.phoneme, rec.emotion), []).append(rec)

    cell_keys = sorted(cells)
    triplets: list[Triplet] = []
    if not cell_keys:
        report.notices.append("no mineable phoneme cells")
        return triplets, report

    for _ in range(n_triplets):
        emotion, phoneme, community = cell_keys[int(rng.integers(len(cell_keys)))]
        pool = cells[(emotion, phoneme, community)]
        anchor = pool[int(rng.integers(len(pool)))]

        candidates = [r for r in pool if r.record_id != anchor.record_id]
        if cfg.cross_corpus_positive:
            cross = [r for r in candidates if r.corpus_id != anchor.corpus_id]
            if cross:
                candidates = cross
        if not candidates:
            report.skipped_no_positive += 1
            continue
        positive = candidates[int(rng.integers(len(candidates)))]

        neg_emotions = [e for e in EMOTIONS
                        if e != emotion and negatives_pool.get((phoneme, e))]
        if not neg_emotions:
            report.skipped_no_negative += 1
            continue
        neg_emotion = neg_emotions[int(rng.integers(len(neg_emotions)))]
        neg_candidates = negatives_pool[(phoneme, neg_emotion)]
        # prefer negatives whose speaker shares the anchor's style community
        anchor_partition = partitions[emotion]
        same_comm = [r for r in neg_candidates
                     if _node_community(anchor_partition, r) == community]
        if same_comm:
            neg_candidates = same_comm
        negative = neg_candidates[int(rng.integers(len(neg_candidates)))]

        triplets.append(Triplet("phoneme", anchor.record_id, positive.record_id,
                                negative.record_id, emotion, phoneme))
        report.emitted += 1
    return triplets, report


def mine_speaker_triplets(records, partitions, cfg: MiningConfig,
                          n_triplets: int | None = None):
    """Mine speaker-space triplets; returns (triplets, report).

    Emotions whose partition has a single community yield no triplets and
    leave a notice in the report.
    """
    cfg.validate()
    n_triplets = cfg.anchors_per_batch if n_triplets is None else n_triplets
    report = MiningReport(requested=n_triplets)
    rng = np.random.default_rng(cfg.seed)

    cells: dict[tuple[str, int], list] = {}
    for rec in records:
        if rec.kind != "speaker" or rec.split != "train":
            continue
        partition = partitions.get(rec.emotion)
        if partition is None:
            report.unpartitioned_records += 1
            continue
        community = _node_community(partition, rec)
        if community is None:
            report.unpartitioned_records += 1
            continue
        cells.setdefault((rec.emotion, community), []).append(rec)

    communities_of: dict[str, list[int]] = {}
    for emotion, community in cells:
        communities_of.setdefault(emotion, []).append(community)
    eligible = []
    for emotion in sorted(communities_of):
        if len(communities_of[emotion]) >= 2:
            eligible.extend(
                (emotion, c) for c in sorted(communities_of[emotion])
            )
        else:
            report.notices.append(f"{emotion}: single style community, no triplets")

    triplets: list[Triplet] = []
    if not eligible:
        return triplets, report

    for _ in range(n_triplets):
        emotion, community = eligible[int(rng.integers(len(eligible)))]
        pool = cells[(emotion, community)]
        anchor = pool[int(rng.integers(len(pool)))]

        candidates = [r for r in pool if r.record_id != anchor.record_id]
        if cfg.cross_corpus_positive:
            cross = [r for r in candidates if r.corpus_id != anchor.corpus_id]
            if cross:
                candidates = cross
        if not candidates:
            report.skipped_no_positive += 1
            continue
        positive = candidates[int(rng.integers(len(candidates)))]

        other = [c for c in sorted(communities_of[emotion]) if c != community]
        neg_community = other[int(rng.integers(len(other)))]
        neg_pool = cells[(emotion, neg_community)]
        negative = neg_pool[int(rng.integers(len(neg_pool)))]

        triplets.append(Triplet("speaker", anchor.record_id, positive.record_id,
                                negative.record_id, emotion))
        report.emitted += 1
    return triplets, report


def validate_triplets(triplets, records, partitions) -> list[str]:
    """Independent invariant checker; returns a list of violation messages.

    Reads only the raw records and partitions, rebuilding its own indexes,
    so it shares no state with the miners.
    """
    by_id = {rec.record_id: rec for rec in records}
    problems: list[str] = []

    def community(rec, emotion):
        partition = partitions.get(emotion)
        if partition is None:
            return None
        return partition.assignment.get((rec.speaker_id, rec.corpus_id))

    for t in triplets:
        tag = f"{t.space} triplet {t.anchor_id}/{t.positive_id}/{t.negative_id}"
        trio = []
        ok = True
        for rid in (t.anchor_id, t.positive_id, t.negative_id):
            rec = by_id.get(rid)
            if rec is None:
                problems.append(f"{tag}: unknown record_id {rid}")
                ok = False
                break
            trio.append(rec)
        if not ok:
            continue
        a, p, n = trio
        if t.space == "phoneme":
            if any(r.kind != "content" for r in trio):
                problems.append(f"{tag}: non-content record in phoneme triplet")
            if not (a.phoneme == p.phoneme == n.phoneme == t.phoneme):
                problems.append(f"{tag}: phoneme mismatch")
            if a.emotion != p.emotion or a.emotion != t.emotion:
                problems.append(f"{tag}: anchor/positive emotion mismatch")
            if n.emotion == a.emotion:
                problems.append(f"{tag}: negative shares the anchor emotion")
            ca = community(a, t.emotion)
            cp = community(p, t.emotion)
            if ca is None or cp is None or ca != cp:
                problems.append(f"{tag}: anchor/positive not in one style community")
        elif t.space == "speaker":
            if any(r.kind != "speaker" for r in trio):
                problems.append(f"{tag}: non-speaker record in speaker triplet")
            if not (a.emotion == p.emotion == n.emotion == t.emotion):
                problems.append(f"{tag}: emotion mismatch")
            ca = community(a, t.emotion)
            cp = community(p, t.emotion)
            cn = community(n, t.emotion)
            if ca is None or cp is None or ca != cp:
                problems.append(f"{tag}: anchor/positive not in one style community")
            if cn is None or cn == ca:
                problems.append(f"{tag}: negative not in a different community")
        else:
            problems.append(f"{tag}: unknown space {t.space!r}")
    return problems


def dump_triplets(triplets) -> str:
    """One-per-line audit dump: space, ids, emotion, phoneme."""
    return "".join(t.as_line() + "\n" for t in triplets)
