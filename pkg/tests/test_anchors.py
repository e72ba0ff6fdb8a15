import logging

import numpy as np
import pytest

import sapa
from sapa.anchors import (
    PhonemeSimilarityTable,
    SelectionRule,
    phoneme_similarity,
    select_anchors,
)
from sapa.errors import InsufficientDataError

from conftest import small_spec

VOWELS = ["i", "E", "@", "A,a", "O", "u"]

# published cross-corpus similarity reference (six shared vowels, four emotions)
REFERENCE_SIMS = {
    "neutral":   {"i": 0.72, "E": 0.73, "@": 0.73, "A,a": 0.74, "O": 0.70, "u": 0.72},
    "happiness": {"i": 0.74, "E": 0.71, "@": 0.68, "A,a": 0.73, "O": 0.69, "u": 0.68},
    "anger":     {"i": 0.72, "E": 0.71, "@": 0.70, "A,a": 0.73, "O": 0.71, "u": 0.72},
    "sadness":   {"i": 0.67, "E": 0.70, "@": 0.69, "A,a": 0.67, "O": 0.69, "u": 0.68},
}


def reference_table() -> PhonemeSimilarityTable:
    cells = {(e, p): s for e, row in REFERENCE_SIMS.items() for p, s in row.items()}
    return PhonemeSimilarityTable(phonemes=list(VOWELS), cells=cells)


class TestSelectOnReferenceValues:
    def test_top3_anger(self):
        anchors = select_anchors(reference_table(), SelectionRule("top_k", k=3))
        assert anchors.anchors["anger"] == [("A,a", 0.73), ("i", 0.72), ("u", 0.72)]

    def test_top2_happiness(self):
        anchors = select_anchors(reference_table(), SelectionRule("top_k", k=2))
        assert anchors.anchors["happiness"] == [("i", 0.74), ("A,a", 0.73)]

    def test_top3_neutral_and_sadness_sets(self):
        anchors = select_anchors(reference_table(), SelectionRule("top_k", k=3))
        assert set(anchors.phonemes("neutral")) == {"A,a", "E", "@"}
        assert set(anchors.phonemes("sadness")) == {"E", "@", "O"}

    def test_all_equal_ties_follow_inventory_order(self):
        cells = {(e, p): 0.5 for e in sapa.EMOTIONS for p in VOWELS}
        table = PhonemeSimilarityTable(phonemes=list(VOWELS), cells=cells)
        anchors = select_anchors(table, SelectionRule("top_k", k=3))
        for emotion in sapa.EMOTIONS:
            assert anchors.phonemes(emotion) == ["i", "E", "@"]

    def test_threshold_rule(self):
        anchors = select_anchors(reference_table(), SelectionRule("threshold", theta=0.72))
        assert set(anchors.phonemes("neutral")) == {"i", "E", "@", "A,a", "u"}
        assert anchors.phonemes("sadness") == []

    def test_threshold_monotonicity(self):
        table = reference_table()
        sizes = []
        for theta in (0.6, 0.68, 0.7, 0.72, 0.74, 0.8):
            anchors = select_anchors(table, SelectionRule("threshold", theta=theta))
            sizes.append({e: len(v) for e, v in anchors.anchors.items()})
        for lo, hi in zip(sizes, sizes[1:]):
            for emotion in lo:
                assert hi[emotion] <= lo[emotion]

    def test_missing_emotion_reported(self):
        cells = {("anger", "i"): 0.9}
        table = PhonemeSimilarityTable(phonemes=["i"], cells=cells)
        with pytest.raises(InsufficientDataError, match="sadness"):
            select_anchors(table, SelectionRule("top_k", k=1))


class TestPhonemeSimilarity:
    def test_gap_zero_spread_zero_all_cells_one(self):
        spec = small_spec(
            seed=2, cluster_spread=0.0,
            anchored_phonemes={e: tuple(VOWELS) for e in sapa.EMOTIONS},
        )
        manifest, records = sapa.generate_synthetic(spec)
        table = phoneme_similarity(records, "src", "tgt",
                                   inventory=manifest.phoneme_inventory)
        assert table.cells
        for value in table.cells.values():
            assert value == pytest.approx(1.0, abs=1e-9)

    def test_phoneme_only_in_one_corpus_has_no_cell(self):
        def content(rid, corpus, phoneme):
            return sapa.EmbeddingRecord(rid, corpus, "s0", f"u{rid}", "anger",
                                        "content", phoneme,
                                        np.ones(4), "train")
        records = [content("a", "src", "i"), content("b", "tgt", "i"),
                   content("c", "src", "u")]
        table = phoneme_similarity(records, "src", "tgt", inventory=["i", "u"])
        assert ("anger", "i") in table.cells
        assert ("anger", "u") not in table.cells

    def test_empty_intersection_warns(self, caplog):
        def content(rid, corpus, phoneme):
            return sapa.EmbeddingRecord(rid, corpus, "s0", f"u{rid}", "anger",
                                        "content", phoneme, np.ones(4), "train")
        records = [content("a", "src", "i"), content("b", "tgt", "u")]
        with caplog.at_level(logging.WARNING):
            table = phoneme_similarity(records, "src", "tgt", inventory=["i", "u"])
        assert table.cells == {}
        assert any("empty" in r.message for r in caplog.records)

    def test_planted_anchor_recovery_with_threshold(self):
        spec = small_spec(
            seed=6, cluster_spread=0.05,
            anchored_phonemes={e: ("i", "A,a") for e in sapa.EMOTIONS},
            cross_corpus_anchor_gap=0.0, non_anchor_gap=1.0,
        )
        manifest, records = sapa.generate_synthetic(spec)
        table = phoneme_similarity(records, "src", "tgt",
                                   inventory=manifest.phoneme_inventory)
        anchors = select_anchors(table, SelectionRule("threshold", theta=0.9))
        for emotion in sapa.EMOTIONS:
            assert set(anchors.phonemes(emotion)) == {"i", "A,a"}

    def test_anchors_subset_of_shared_phonemes(self, small_dataset):
        _, manifest, records = small_dataset
        table = phoneme_similarity(records, "src", "tgt",
                                   inventory=manifest.phoneme_inventory)
        shared = {p for (_, p) in table.cells}
        anchors = select_anchors(table, SelectionRule("top_k", k=4))
        for emotion in sapa.EMOTIONS:
            row_phonemes = {p for (e, p) in table.cells if e == emotion}
            assert set(anchors.phonemes(emotion)) <= row_phonemes <= shared

    def test_vowels_only_restriction(self, small_dataset):
        _, manifest, records = small_dataset
        table = phoneme_similarity(records, "src", "tgt",
                                   inventory=manifest.phoneme_inventory,
                                   vowels_only=("i", "u"))
        assert set(table.phonemes) == {"i", "u"}


class TestSerialization:
    def test_csv_layout(self):
        text = reference_table().to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "emotion," + ",".join(VOWELS)
        assert len(lines) == 5
        assert lines[1].startswith("neutral,0.72,")

    def test_anchor_json_round_trip(self):
        anchors = select_anchors(reference_table(), SelectionRule("top_k", k=3))
        obj = anchors.to_json_dict()
        back = sapa.AnchorSet.from_json_dict(obj)
        assert back.anchors == anchors.anchors
        assert back.rule.kind == "top_k" and back.rule.k == 3
