import logging

import numpy as np
import pytest

import sapa
from sapa.anchors import SelectionRule, phoneme_similarity, select_anchors
from sapa.embstore import EMOTION_INDEX, group_utterances
from sapa.errors import DomainError
from sapa.evalkit import (
    ConfusionMatrix,
    evaluate_cross,
    format_ablation_table,
    format_transfer_table,
    group_transferability,
    permutation_test,
    predict,
    uar,
)
from sapa.model import ModelConfig, init_params
from sapa.simgraph import build_graph, cluster_all_emotions, louvain
from sapa.trainer import TrainConfig, train
from sapa.triplets import MiningConfig

from conftest import small_spec


def cm_from_recalls(recalls, support=10):
    counts = np.zeros((4, 4), dtype=np.int64)
    for i, r in enumerate(recalls):
        hit = int(round(r * support))
        counts[i, i] = hit
        counts[i, (i + 1) % 4] = support - hit
    return ConfusionMatrix(counts)


class TestUar:
    def test_perfect_diagonal(self):
        assert uar(ConfusionMatrix(np.eye(4, dtype=np.int64) * 7)) == 1.0

    def test_hand_mean(self):
        cm = cm_from_recalls([1.0, 0.5, 0.5, 0.0])
        assert uar(cm) == pytest.approx(0.5, abs=1e-12)

    def test_duplication_invariance(self):
        cm = cm_from_recalls([0.9, 0.4, 0.7, 0.1])
        for k in (2, 5, 11):
            scaled = ConfusionMatrix(cm.counts * k)
            assert uar(scaled) == pytest.approx(uar(cm), abs=1e-12)

    def test_zero_support_excluded_with_warning(self, caplog):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[0, 0] = 5
        counts[1, 1] = 5
        counts[1, 0] = 5
        with caplog.at_level(logging.WARNING):
            value = uar(ConfusionMatrix(counts))
        assert value == pytest.approx((1.0 + 0.5) / 2)
        assert sum("zero support" in r.message for r in caplog.records) == 2

    def test_all_empty_rejected(self):
        with pytest.raises(DomainError):
            uar(ConfusionMatrix.empty())

    def test_uniform_random_predictions_monte_carlo(self):
        rng = np.random.default_rng(0)
        y_true = np.repeat(np.arange(4), 2500)
        y_pred = rng.integers(0, 4, size=y_true.size)
        cm = ConfusionMatrix.from_pairs(y_true, y_pred)
        assert uar(cm) == pytest.approx(0.25, abs=0.03)

    def test_confusion_total(self):
        cm = cm_from_recalls([1.0, 0.5, 0.5, 0.0], support=8)
        assert cm.total() == 32


def eval_setup(seed=1, train_epochs=4, **spec_overrides):
    overrides = dict(speakers_per_corpus=6, utterances_per_speaker=5,
                     cluster_spread=0.1, emotion_signal_strength=1.0,
                     d_s=16, d_c=16)
    overrides.update(spec_overrides)
    spec = small_spec(seed=seed, **overrides)
    manifest, records = sapa.generate_synthetic(spec)
    outcome = cluster_all_emotions(records, 0.7, seed=seed)
    partitions = {e: p for e, (g, p, r) in outcome.results.items()}
    anchor_set = select_anchors(
        phoneme_similarity(records, "src", "tgt", inventory=manifest.phoneme_inventory),
        SelectionRule("top_k", k=2))
    model = ModelConfig(d_c=manifest.d_c, d_s=manifest.d_s, d_model=8, n_heads=2,
                        n_layers=1, fc_widths=(16, 8, 8, 4), d_proj=8)
    cfg = TrainConfig(model=model, learning_rate=3e-3, max_epochs=train_epochs,
                      batch_size=32, early_stop_patience=3, seed=seed,
                      mining=MiningConfig(anchors_per_batch=16, seed=seed))
    params, _ = train(records, cfg, anchor_set, partitions)
    return manifest, records, partitions, params


class TestEvaluateCross:
    def test_untrained_uniform_model_quarter_uar(self):
        spec = small_spec(seed=8)
        manifest, records = sapa.generate_synthetic(spec)
        cfg = ModelConfig(d_c=manifest.d_c, d_s=manifest.d_s, d_model=8,
                          n_heads=2, n_layers=1, fc_widths=(8, 8, 8, 4), d_proj=4)
        params = init_params(cfg, 0)
        for key in params.arrays:
            params.arrays[key][:] = 0.0
        result = evaluate_cross(params, records, corpus="tgt")
        # all-equal logits predict class 0 always: recalls (1, 0, 0, 0)
        assert result.uar == pytest.approx(0.25, abs=0.02)

    def test_counts_and_skips(self):
        manifest, records, _, params = eval_setup(seed=2, train_epochs=2)
        n_test = len(group_utterances(records, split="test", corpus="tgt"))
        result = evaluate_cross(params, records, corpus="tgt")
        assert result.confusion.total() == n_test
        assert result.skipped == 0
        # drop speaker records of two test utterances: fused model skips them
        utts = list(group_utterances(records, split="test", corpus="tgt"))[:2]
        drop = {(c, u) for c, u in utts}
        thinned = [r for r in records
                   if not (r.kind == "speaker" and (r.corpus_id, r.utterance_id) in drop)]
        result2 = evaluate_cross(params, thinned, corpus="tgt")
        assert result2.skipped == 2
        assert result2.confusion.total() == n_test - 2

    def test_empty_split_rejected(self):
        manifest, records, _, params = eval_setup(seed=2, train_epochs=1)
        train_only = [r for r in records if r.split == "train"]
        with pytest.raises(DomainError):
            evaluate_cross(params, train_only, corpus="tgt")

    def test_gap_zero_cross_close_to_within(self):
        # identical corpus distributions: cross-corpus UAR within 5 points of
        # the within-corpus (source test) UAR
        manifest, records, _, params = eval_setup(
            seed=5, train_epochs=12, cross_corpus_anchor_gap=0.0,
            non_anchor_gap=0.0, emotion_signal_strength=1.5)
        cross = evaluate_cross(params, records, corpus="tgt")
        within = evaluate_cross(params, records, corpus="src")
        assert abs(cross.uar - within.uar) <= 0.05


class TestGroupTransferability:
    def setup_reports(self, seed=3, **spec_overrides):
        manifest, records, partitions, params = eval_setup(seed=seed, train_epochs=4,
                                                           **spec_overrides)
        graph = build_graph(records, None, 0.7)
        global_partition = louvain(graph, seed + 101) if graph.edges else None
        reports = group_transferability(params, records, partitions,
                                        global_partition, n_random_seeds=5,
                                        random_seed=seed)
        return records, partitions, params, reports

    def test_three_groupings_emitted(self):
        _, _, _, reports = self.setup_reports()
        assert [r.grouping for r in reports] == \
            ["with_emotion", "without_emotion", "random"]
        for rep in reports[:2]:
            for emotion, stats in rep.per_emotion.items():
                assert 0.0 <= stats["macro"] <= 1.0
                assert 0.0 <= stats["micro"] <= 1.0
                assert stats["groups"]

    def test_matches_brute_force_recomputation(self):
        records, partitions, params, reports = self.setup_reports()
        utts = list(group_utterances(records, split="test", corpus="tgt").values())
        y_true, y_pred, _ = predict(params, utts)
        correct = {
            (u["speaker_id"], u["emotion"], i): t == p
            for i, (u, t, p) in enumerate(zip(utts, y_true, y_pred))
        }
        with_emo = reports[0]
        for emotion, stats in with_emo.per_emotion.items():
            partition = partitions[emotion]
            clusters = {}
            for (speaker, corpus), comm in partition.assignment.items():
                if corpus == "tgt":
                    clusters.setdefault(comm, set()).add(speaker)
            accs = []
            n_total, n_hit = 0, 0
            for comm in sorted(clusters):
                hits = [ok for (spk, emo, _), ok in correct.items()
                        if emo == emotion and spk in clusters[comm]]
                if not hits:
                    continue
                accs.append(np.mean(hits))
                n_total += len(hits)
                n_hit += sum(hits)
            assert stats["macro"] == pytest.approx(float(np.mean(accs)), abs=1e-12)
            assert stats["micro"] == pytest.approx(n_hit / n_total, abs=1e-12)

    def test_perfect_classifier_all_ones(self, monkeypatch):
        records, partitions, params, _ = self.setup_reports(seed=4)

        def perfect(params_, utterances):
            y = np.array([EMOTION_INDEX[u["emotion"]] for u in utterances])
            return y, y.copy(), 0

        monkeypatch.setattr(sapa.evalkit, "predict", perfect)
        graph = build_graph(records, None, 0.7)
        global_partition = louvain(graph, 1)
        reports = sapa.evalkit.group_transferability(
            params, records, partitions, global_partition, n_random_seeds=3)
        for rep in reports:
            for stats in rep.per_emotion.values():
                assert stats["macro"] == 1.0
                assert stats["micro"] == 1.0

    def test_more_random_seeds_reduce_variance(self):
        # seven speakers over two groups: unequal folds, so macro varies by draw
        records, partitions, params, _ = self.setup_reports(
            seed=6, speakers_per_corpus=7)
        graph = build_graph(records, None, 0.7)
        global_partition = louvain(graph, 1)

        def macro_draws(n_seeds, repeats=12):
            values = []
            for rep in range(repeats):
                reports = group_transferability(
                    params, records, partitions, global_partition,
                    n_random_seeds=n_seeds, random_seed=1000 + rep)
                rand = reports[2]
                values.append(np.mean([s["macro"] for s in rand.per_emotion.values()]))
            return np.var(values)

        assert macro_draws(10) < macro_draws(1)


class TestPermutationTest:
    def test_identical_samples_p_one(self):
        a = [0.5, 0.6, 0.7, 0.55]
        assert permutation_test(a, a) == 1.0

    def test_consistent_difference_small_p(self):
        a = [0.9, 0.91, 0.92, 0.93, 0.9, 0.94, 0.92, 0.9]
        b = [0.5, 0.52, 0.51, 0.53, 0.5, 0.52, 0.55, 0.5]
        p = permutation_test(a, b)
        assert p == pytest.approx(2 / 256, abs=1e-12)

    def test_symmetry(self):
        a = [0.9, 0.8, 0.85, 0.95]
        b = [0.6, 0.7, 0.65, 0.75]
        assert permutation_test(a, b) == permutation_test(b, a)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            permutation_test([], [])


class TestTables:
    def test_ablation_table(self):
        text = format_ablation_table(
            {"SAPA": [0.6, 0.62], "Only-S": [0.4, 0.42], "Only-P": [0.5, 0.52]},
            p_values={"Only-S": 0.03, "Only-P": 0.2})
        assert "SAPA" in text and "Only-S" in text
        lines = text.strip().splitlines()
        assert lines[0].startswith("mode")
        assert any("**" in line for line in lines)

    def test_transfer_table(self):
        _, _, _, reports = TestGroupTransferability().setup_reports(seed=7)
        text = format_transfer_table(reports)
        lines = text.strip().splitlines()
        assert lines[0].split() == ["emotion", "w/", "Emo", "w/o", "Emo", "Rand"]
        assert len(lines) == 5
