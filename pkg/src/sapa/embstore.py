"""Embedding data model, JSON Lines dataset format, and synthetic corpus generator.

A dataset file is UTF-8 JSON Lines: the first line is the manifest object,
every following line one embedding record. Field names and field order are
canonical so that write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetParseError, DatasetSchemaError

EMOTIONS = ("neutral", "happiness", "anger", "sadness")
EMOTION_INDEX = {e: i for i, e in enumerate(EMOTIONS)}
KINDS = ("speaker", "content")
SPLITS = ("train", "validation", "test")

# canonical key order for record serialization
RECORD_FIELDS = (
    "record_id",
    "corpus_id",
    "speaker_id",
    "utterance_id",
    "emotion",
    "kind",
    "phoneme",
    "vector",
    "split",
)

DEFAULT_VOWELS = ("i", "E", "@", "A,a", "O", "u")


@dataclass
class EmbeddingRecord:
    """One embedding vector with its corpus/speaker/emotion/phoneme metadata."""

    record_id: str
    corpus_id: str
    speaker_id: str
    utterance_id: str
    emotion: str
    kind: str
    phoneme: str | None
    vector: np.ndarray
    split: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.corpus_id == other.corpus_id
            and self.speaker_id == other.speaker_id
            and self.utterance_id == other.utterance_id
            and self.emotion == other.emotion
            and self.kind == other.kind
            and self.phoneme == other.phoneme
            and self.split == other.split
            and np.array_equal(self.vector, other.vector)
        )


@dataclass
class DatasetManifest:
    """Dataset-level metadata: dimensions, corpora, phoneme inventory, counts.

    ``counts`` maps (corpus_id, emotion, split) to the number of records.
    ``encoder`` (written by extraction tools) and ``provenance`` (config hash
    and seed, written by the CLI) are optional and preserved verbatim through
    read/write round trips.
    """

    d_s: int
    d_c: int
    corpora: list[str]
    phoneme_inventory: list[str]
    counts: dict[tuple[str, str, str], int]
    encoder: dict | None = None
    provenance: dict | None = None

    def total_records(self) -> int:
        return sum(self.counts.values())

    def to_json_dict(self) -> dict:
        counts = [
            {"corpus": c, "emotion": e, "split": s, "n": n}
            for (c, e, s), n in sorted(self.counts.items())
        ]
        obj = {
            "d_s": self.d_s,
            "d_c": self.d_c,
            "corpora": list(self.corpora),
            "phoneme_inventory": list(self.phoneme_inventory),
            "counts": counts,
        }
        if self.encoder is not None:
            obj["encoder"] = self.encoder
        if self.provenance is not None:
            obj["provenance"] = self.provenance
        return obj

    @classmethod
    def from_json_dict(cls, obj: dict) -> "DatasetManifest":
        try:
            counts = {
                (row["corpus"], row["emotion"], row["split"]): int(row["n"])
                for row in obj["counts"]
            }
            return cls(
                d_s=int(obj["d_s"]),
                d_c=int(obj["d_c"]),
                corpora=list(obj["corpora"]),
                phoneme_inventory=list(obj["phoneme_inventory"]),
                counts=counts,
                encoder=obj.get("encoder"),
                provenance=obj.get("provenance"),
            )
        except (KeyError, TypeError) as exc:
            raise DatasetSchemaError(f"malformed manifest: {exc}") from exc


def validate_record(rec: EmbeddingRecord, manifest: DatasetManifest) -> None:
    """Check one record against the schema; raises DatasetSchemaError."""
    rid = rec.record_id
    if not rid or not isinstance(rid, str):
        raise DatasetSchemaError(f"record_id must be a non-empty string, got {rid!r}")
    if rec.emotion not in EMOTIONS:
        raise DatasetSchemaError(f"record {rid}: unknown emotion {rec.emotion!r}")
    if rec.kind not in KINDS:
        raise DatasetSchemaError(f"record {rid}: unknown kind {rec.kind!r}")
    if rec.split not in SPLITS:
        raise DatasetSchemaError(f"record {rid}: unknown split {rec.split!r}")
    if rec.corpus_id not in manifest.corpora:
        raise DatasetSchemaError(f"record {rid}: corpus {rec.corpus_id!r} not in manifest")
    if rec.kind == "content":
        if rec.phoneme is None:
            raise DatasetSchemaError(f"record {rid}: content record without phoneme")
        if rec.phoneme not in manifest.phoneme_inventory:
            raise DatasetSchemaError(
                f"record {rid}: phoneme {rec.phoneme!r} not in inventory"
            )
    elif rec.phoneme is not None:
        raise DatasetSchemaError(f"record {rid}: speaker record must not carry a phoneme")
    expected_dim = manifest.d_c if rec.kind == "content" else manifest.d_s
    if rec.vector.ndim != 1 or rec.vector.shape[0] != expected_dim:
        raise DatasetSchemaError(
            f"record {rid}: vector length {rec.vector.shape} does not match "
            f"manifest dimension {expected_dim} for kind {rec.kind!r}"
        )
    if not np.all(np.isfinite(rec.vector)):
        raise DatasetSchemaError(f"record {rid}: vector has non-finite entries")


def _validate_dataset(manifest: DatasetManifest, records: list[EmbeddingRecord]) -> None:
    seen = set()
    counts: dict[tuple[str, str, str], int] = {}
    for rec in records:
        validate_record(rec, manifest)
        if rec.record_id in seen:
            raise DatasetSchemaError(f"duplicate record_id {rec.record_id!r}")
        seen.add(rec.record_id)
        key = (rec.corpus_id, rec.emotion, rec.split)
        counts[key] = counts.get(key, 0) + 1
    if counts != {k: v for k, v in manifest.counts.items() if v}:
        raise DatasetSchemaError("manifest counts do not match records")


def write_dataset(manifest: DatasetManifest, records: list[EmbeddingRecord], path) -> Path:
    """Write a dataset file; read_dataset(write_dataset(x)) reproduces x exactly."""
    _validate_dataset(manifest, records)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest.to_json_dict()) + "\n")
        for rec in records:
            obj = {
                "record_id": rec.record_id,
                "corpus_id": rec.corpus_id,
                "speaker_id": rec.speaker_id,
                "utterance_id": rec.utterance_id,
                "emotion": rec.emotion,
                "kind": rec.kind,
                "phoneme": rec.phoneme,
                "vector": [float(x) for x in rec.vector],
                "split": rec.split,
            }
            fh.write(json.dumps(obj) + "\n")
    return path


def read_dataset(path, phoneme_map: dict[str, str] | None = None):
    """Read a dataset file into (manifest, records).

    ``phoneme_map`` optionally merges phoneme symbols at ingestion
    (e.g. {"A": "A,a", "a": "A,a"}); mapped symbols must resolve into the
    manifest inventory after the manifest itself is mapped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    records: list[EmbeddingRecord] = []
    manifest = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(str(exc), line_no=line_no) from exc
            if line_no == 1:
                manifest = DatasetManifest.from_json_dict(obj)
                if phoneme_map:
                    inv = []
                    for p in manifest.phoneme_inventory:
                        q = phoneme_map.get(p, p)
                        if q not in inv:
                            inv.append(q)
                    manifest.phoneme_inventory = inv
                continue
            try:
                phoneme = obj["phoneme"]
                if phoneme_map and phoneme is not None:
                    phoneme = phoneme_map.get(phoneme, phoneme)
                rec = EmbeddingRecord(
                    record_id=obj["record_id"],
                    corpus_id=obj["corpus_id"],
                    speaker_id=obj["speaker_id"],
                    utterance_id=obj["utterance_id"],
                    emotion=obj["emotion"],
                    kind=obj["kind"],
                    phoneme=phoneme,
                    vector=np.asarray(obj["vector"], dtype=np.float64),
                    split=obj["split"],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(f"malformed record: {exc}", line_no=line_no) from exc
            records.append(rec)
    if manifest is None:
        raise DatasetParseError("empty file: missing manifest line", line_no=1)
    _validate_dataset(manifest, records)
    return manifest, records


def merge_datasets(*datasets) -> tuple[DatasetManifest, list[EmbeddingRecord]]:
    """Combine (manifest, records) pairs, e.g. a source and a target corpus file."""
    manifests = [m for m, _ in datasets]
    base = manifests[0]
    for m in manifests[1:]:
        if (m.d_s, m.d_c) != (base.d_s, base.d_c):
            raise DatasetSchemaError("cannot merge datasets with different dimensions")
    corpora: list[str] = []
    inventory: list[str] = []
    counts: dict[tuple[str, str, str], int] = {}
    records: list[EmbeddingRecord] = []
    for m, recs in datasets:
        for c in m.corpora:
            if c not in corpora:
                corpora.append(c)
        for p in m.phoneme_inventory:
            if p not in inventory:
                inventory.append(p)
        for k, v in m.counts.items():
            counts[k] = counts.get(k, 0) + v
        records.extend(recs)
    merged = DatasetManifest(
        d_s=base.d_s, d_c=base.d_c, corpora=corpora,
        phoneme_inventory=inventory, counts=counts,
    )
    _validate_dataset(merged, records)
    return merged, records


def group_utterances(records, split=None, corpus=None):
    """Group records into utterances keyed by (corpus_id, utterance_id).

    Returns a dict mapping the key to a dict with ``emotion``, ``speaker_id``,
    ``speaker`` (record or None), and ``content`` (records sorted by id).
    Insertion order follows the record list, so grouping is deterministic.
    """
    utts: dict[tuple[str, str], dict] = {}
    for rec in records:
        if split is not None and rec.split != split:
            continue
        if corpus is not None and rec.corpus_id != corpus:
            continue
        key = (rec.corpus_id, rec.utterance_id)
        slot = utts.setdefault(
            key,
            {"emotion": rec.emotion, "speaker_id": rec.speaker_id,
             "corpus_id": rec.corpus_id, "speaker": None, "content": []},
        )
        if rec.kind == "speaker":
            slot["speaker"] = rec
        else:
            slot["content"].append(rec)
    for slot in utts.values():
        slot["content"].sort(key=lambda r: r.record_id)
    return utts


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the planted-structure synthetic corpus.

    The generator plants three kinds of ground truth that downstream stages
    can be checked against:

    * per-emotion speaker style clusters whose centroids are shared across
      corpora (``n_style_clusters``, ``cluster_spread``);
    * phoneme anchors: content centroids of ``anchored_phonemes`` are shared
      across corpora up to ``cross_corpus_anchor_gap`` displacement while all
      other phonemes are displaced by ``non_anchor_gap`` (1.0 = fully
      corpus-specific);
    * a linearly recoverable emotion signal in content space with strength
      ``emotion_signal_strength``; ``style_emotion_strength`` is the far
      weaker counterpart leaking into speaker-style space.

    ``cluster_size_skew`` > 0 makes planted cluster sizes unequal, and
    ``expressiveness_range`` (lo, hi) then scales each cluster's emotion
    signal so that smaller clusters express emotion more clearly. Defaults
    keep clusters balanced and uniformly expressive.
    """

    seed: int
    speakers_per_corpus: int = 8
    utterances_per_speaker: int = 5
    segments_per_utterance: int = 4
    n_style_clusters: int = 2
    cluster_spread: float = 0.05
    anchored_phonemes: dict[str, tuple[str, ...]] = field(default_factory=dict)
    cross_corpus_anchor_gap: float = 0.0
    emotion_signal_strength: float = 1.0
    non_anchor_gap: float = 1.0
    style_emotion_strength: float = 0.25
    content_spread: float | None = None
    expressiveness_range: tuple[float, float] = (1.0, 1.0)
    cluster_size_skew: float = 0.0
    phoneme_inventory: tuple[str, ...] = DEFAULT_VOWELS
    corpora: tuple[str, str] = ("src", "tgt")
    d_s: int = 64
    d_c: int = 64

    def validate(self) -> None:
        if self.speakers_per_corpus < 1 or self.utterances_per_speaker < 1:
            raise ValueError("speaker and utterance counts must be positive")
        if self.segments_per_utterance < 1 or self.n_style_clusters < 1:
            raise ValueError("segment and cluster counts must be positive")
        for gap in (self.cross_corpus_anchor_gap, self.non_anchor_gap):
            if not 0.0 <= gap <= 1.0:
                raise ValueError(f"gap {gap} outside [0, 1]")
        if self.cluster_spread < 0 or (self.content_spread or 0) < 0:
            raise ValueError("spreads must be non-negative")
        if len(self.corpora) != 2:
            raise ValueError("exactly two corpora expected")
        for e, phs in self.anchored_phonemes.items():
            if e not in EMOTIONS:
                raise ValueError(f"unknown emotion {e!r} in anchored_phonemes")
            for p in phs:
                if p not in self.phoneme_inventory:
                    raise ValueError(f"anchored phoneme {p!r} not in inventory")
        lo, hi = self.expressiveness_range
        if lo <= 0 or hi < lo:
            raise ValueError("expressiveness_range must satisfy 0 < lo <= hi")


@dataclass
class PlantedStructure:
    """Ground-truth labels the generator planted, for oracle checks."""

    style_cluster: dict[tuple[str, str, str], int]  # (corpus, speaker, emotion) -> cluster
    cluster_sizes: dict[str, list[int]]             # emotion -> size per cluster
    expressiveness: dict[str, list[float]]          # emotion -> multiplier per cluster


# fixed sub-stream tags so generation and planted_structure stay in sync
_STREAM_DIRS = 1
_STREAM_ASSIGN = 2
_STREAM_NOISE = 3


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _split_allocation(u: int) -> tuple[int, int, int]:
    """Deterministic (train, validation, test) counts for u utterances."""
    if u < 3:
        return u, 0, 0
    val = max(1, round(u * 0.2))
    test = max(1, round(u * 0.2))
    return u - val - test, val, test


def _cluster_sizes(n: int, k: int, skew: float) -> list[int]:
    """Largest-remainder allocation of n members over k clusters.

    skew = 0 gives balanced sizes; larger skew weights cluster j by
    (1 + skew)^j so later clusters grow and earlier ones shrink.
    """
    weights = np.array([(1.0 + skew) ** j for j in range(k)])
    weights /= weights.sum()
    raw = weights * n
    sizes = np.floor(raw).astype(int)
    remainder = n - sizes.sum()
    order = np.argsort(-(raw - sizes))
    for j in range(remainder):
        sizes[order[j]] += 1
    sizes = np.maximum(sizes, 1)
    while sizes.sum() > n:
        sizes[int(np.argmax(sizes))] -= 1
    return [int(s) for s in sizes]


def planted_structure(spec: SyntheticSpec) -> PlantedStructure:
    """Reproduce the cluster assignment and expressiveness the generator plants."""
    spec.validate()
    rng = _rng(spec.seed, _STREAM_ASSIGN)
    speakers = [f"s{i:03d}" for i in range(spec.speakers_per_corpus)]
    pool = [(c, s) for c in spec.corpora for s in speakers]
    k = spec.n_style_clusters
    lo, hi = spec.expressiveness_range
    assignment: dict[tuple[str, str, str], int] = {}
    sizes_by_emotion: dict[str, list[int]] = {}
    expr_by_emotion: dict[str, list[float]] = {}
    for emotion in EMOTIONS:
        sizes = _cluster_sizes(len(pool), k, spec.cluster_size_skew)
        order = rng.permutation(len(pool))
        idx = 0
        for cluster, size in enumerate(sizes):
            for _ in range(size):
                corpus, speaker = pool[order[idx]]
                assignment[(corpus, speaker, emotion)] = cluster
                idx += 1
        # smaller clusters express emotion more clearly
        rank = np.argsort(np.argsort([-s for s in sizes]))  # 0 = largest
        if k > 1:
            expr = [lo + (hi - lo) * r / (k - 1) for r in rank]
        else:
            expr = [(lo + hi) / 2.0]
        sizes_by_emotion[emotion] = sizes
        expr_by_emotion[emotion] = expr
    return PlantedStructure(assignment, sizes_by_emotion, expr_by_emotion)


def generate_synthetic(spec: SyntheticSpec):
    """Build a two-corpus dataset with planted clusters, anchors, and emotion signal.

    Fully deterministic in ``spec`` (including the seed). Returns
    (manifest, records); planted ground truth is recoverable through
    :func:`planted_structure` on the same spec.
    """
    spec.validate()
    planted = planted_structure(spec)
    dirs = _rng(spec.seed, _STREAM_DIRS)
    noise = _rng(spec.seed, _STREAM_NOISE)

    # direction dictionary, drawn in a fixed order
    style_base = [_unit(dirs, spec.d_s) for _ in range(spec.n_style_clusters)]
    style_emo = {e: _unit(dirs, spec.d_s) for e in EMOTIONS}
    phon_shared = {p: _unit(dirs, spec.d_c) for p in spec.phoneme_inventory}
    phon_corpus = {
        (p, c): _unit(dirs, spec.d_c)
        for p in spec.phoneme_inventory
        for c in spec.corpora
    }
    emo_shared = {e: _unit(dirs, spec.d_c) for e in EMOTIONS}
    emo_corpus = {(e, c): _unit(dirs, spec.d_c) for e in EMOTIONS for c in spec.corpora}

    content_spread = (
        spec.cluster_spread if spec.content_spread is None else spec.content_spread
    )
    anchored = {e: set(spec.anchored_phonemes.get(e, ())) for e in EMOTIONS}
    speakers = [f"s{i:03d}" for i in range(spec.speakers_per_corpus)]
    n_train, n_val, n_test = _split_allocation(spec.utterances_per_speaker)
    split_of = ["train"] * n_train + ["validation"] * n_val + ["test"] * n_test

    records: list[EmbeddingRecord] = []
    counts: dict[tuple[str, str, str], int] = {}

    def emit(rec: EmbeddingRecord):
        records.append(rec)
        key = (rec.corpus_id, rec.emotion, rec.split)
        counts[key] = counts.get(key, 0) + 1

    for corpus in spec.corpora:
        for speaker in speakers:
            for emotion in EMOTIONS:
                cluster = planted.style_cluster[(corpus, speaker, emotion)]
                expr = planted.expressiveness[emotion][cluster]
                style_centroid = style_base[cluster] + (
                    spec.style_emotion_strength * expr * style_emo[emotion]
                )
                style_centroid = style_centroid / np.linalg.norm(style_centroid)
                for u in range(spec.utterances_per_speaker):
                    split = split_of[u]
                    utt_id = f"{speaker}-{emotion}-u{u:02d}"
                    vec = style_centroid + spec.cluster_spread * noise.normal(size=spec.d_s)
                    emit(EmbeddingRecord(
                        record_id=f"{corpus}-{utt_id}-spk",
                        corpus_id=corpus, speaker_id=speaker, utterance_id=utt_id,
                        emotion=emotion, kind="speaker", phoneme=None,
                        vector=vec, split=split,
                    ))
                    for seg in range(spec.segments_per_utterance):
                        phoneme = spec.phoneme_inventory[
                            int(noise.integers(len(spec.phoneme_inventory)))
                        ]
                        gap = (
                            spec.cross_corpus_anchor_gap
                            if phoneme in anchored[emotion]
                            else spec.non_anchor_gap
                        )
                        phon_mix = (1.0 - gap) * phon_shared[phoneme] + gap * phon_corpus[
                            (phoneme, corpus)
                        ]
                        emo_mix = (1.0 - gap) * emo_shared[emotion] + gap * emo_corpus[
                            (emotion, corpus)
                        ]
                        centroid = phon_mix + spec.emotion_signal_strength * expr * emo_mix
                        centroid = centroid / np.linalg.norm(centroid)
                        vec = centroid + content_spread * noise.normal(size=spec.d_c)
                        emit(EmbeddingRecord(
                            record_id=f"{corpus}-{utt_id}-seg{seg:02d}",
                            corpus_id=corpus, speaker_id=speaker, utterance_id=utt_id,
                            emotion=emotion, kind="content", phoneme=phoneme,
                            vector=vec, split=split,
                        ))

    manifest = DatasetManifest(
        d_s=spec.d_s,
        d_c=spec.d_c,
        corpora=list(spec.corpora),
        phoneme_inventory=list(spec.phoneme_inventory),
        counts=counts,
    )
    return manifest, records


def split_by_corpus(manifest: DatasetManifest, records):
    """Split a joint dataset into one (manifest, records) pair per corpus."""
    out = []
    for corpus in manifest.corpora:
        recs = [r for r in records if r.corpus_id == corpus]
        counts = {k: v for k, v in manifest.counts.items() if k[0] == corpus}
        m = DatasetManifest(
            d_s=manifest.d_s, d_c=manifest.d_c, corpora=[corpus],
            phoneme_inventory=list(manifest.phoneme_inventory),
            counts=counts, encoder=manifest.encoder,
            provenance=manifest.provenance,
        )
        out.append((m, recs))
    return out
