import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sapa
from sapa.embstore import EMOTION_INDEX, group_utterances
from sapa.errors import DomainError, NumericError
from sapa.model import (
    Batch,
    ModelConfig,
    _encode_group,
    _softmax,
    backward,
    build_batch,
    forward,
    fuse,
    fuse_sequence,
    init_params,
    load_params,
    loss_components,
    loss_total,
    save_params,
    triplet_loss,
)

from conftest import small_spec
from oracles import finite_difference_gradient

vec3 = st.lists(st.floats(min_value=-10, max_value=10, allow_nan=False),
                min_size=3, max_size=3).map(np.array)


def tiny_config(**overrides):
    kwargs = dict(d_c=6, d_s=5, d_model=8, n_heads=2, n_layers=1,
                  fc_widths=(8, 8, 8, 4), d_proj=4)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_batch(cfg, rng, n_utts=5, n_segs=3, n_trip=4, scale=1.0,
               labels=None):
    sequences = [rng.normal(size=(n_segs, cfg.d_c)) for _ in range(n_utts)]
    speaker_vecs = rng.normal(size=(n_utts, cfg.d_s))
    if labels is None:
        labels = rng.integers(0, 4, size=n_utts)
    content_bank = scale * rng.normal(size=(max(3 * n_trip, 1), cfg.d_c))
    speaker_bank = scale * rng.normal(size=(max(3 * n_trip, 1), cfg.d_s))
    trip = np.arange(3 * n_trip).reshape(n_trip, 3) if n_trip else np.zeros((0, 3), int)
    return Batch(
        sequences=sequences,
        speaker_vecs=speaker_vecs,
        labels=np.asarray(labels, dtype=np.int64),
        content_bank=content_bank,
        speaker_bank=speaker_bank,
        trip_p=trip.copy(),
        trip_s=trip.copy(),
    )


class TestFuse:
    def test_single_segment_is_concatenation(self):
        out = fuse([np.array([1.0, 2.0])], np.array([3.0]))
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])

    def test_mean_of_two_segments(self):
        out = fuse([np.array([1.0, 1.0]), np.array([3.0, 3.0])], np.array([5.0]))
        np.testing.assert_array_equal(out, [2.0, 2.0, 5.0])

    def test_empty_segments_rejected(self):
        with pytest.raises(DomainError, match="at least one"):
            fuse([], np.array([1.0]))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DomainError, match="inconsistent"):
            fuse([np.array([1.0, 2.0]), np.array([1.0])], np.array([3.0]))

    def test_sequence_mode_shape(self):
        segs = np.arange(6.0).reshape(3, 2)
        out = fuse_sequence(segs, np.array([9.0]))
        assert out.shape == (3, 3)
        np.testing.assert_array_equal(out[:, 2], [9.0, 9.0, 9.0])


class TestTripletLoss:
    def test_satisfied_margin_is_zero(self):
        a = np.array([0.0, 0.0])
        n = np.array([1.0, 0.0])
        assert triplet_loss(a, a, n, 0.4) == 0.0

    def test_collapsed_inputs_give_margin(self):
        a = np.array([2.0, -1.0])
        assert triplet_loss(a, a, a, 0.4) == pytest.approx(0.4)
        assert triplet_loss(a, a, a, 0.6) == pytest.approx(0.6)

    def test_hand_values(self):
        a, p = np.array([0.0, 0.0]), np.array([1.0, 0.0])
        assert triplet_loss(a, p, np.array([0.0, 2.0]), 0.4) == 0.0
        assert triplet_loss(a, p, np.array([0.0, 1.0]), 0.4) == pytest.approx(0.4)

    def test_margin_must_be_positive(self):
        a = np.array([1.0])
        with pytest.raises(DomainError):
            triplet_loss(a, a, a, 0.0)

    @given(vec3, vec3, vec3, st.floats(min_value=0.01, max_value=2.0))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, a, p, n, margin):
        assert triplet_loss(a, p, n, margin) >= 0.0

    @given(vec3, vec3, vec3, vec3)
    @settings(max_examples=100, deadline=None)
    def test_translation_invariance(self, a, p, n, shift):
        before = triplet_loss(a, p, n, 0.5)
        after = triplet_loss(a + shift, p + shift, n + shift, 0.5)
        assert after == pytest.approx(before, rel=1e-9, abs=1e-9)


class TestForward:
    def test_zero_params_uniform_softmax(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        for key in params.arrays:
            params.arrays[key][:] = 0.0
        batch = make_batch(cfg, np.random.default_rng(0), n_trip=0)
        logits, _ = forward(params, batch)
        probs = _softmax(logits)
        np.testing.assert_allclose(probs, 0.25, atol=1e-12)

    def test_single_segment_attention_is_identity(self):
        cfg = tiny_config()
        params = init_params(cfg, 1)
        x = np.random.default_rng(2).normal(size=(3, 1, cfg.input_dim()))
        _, cache = _encode_group(params, x)
        attn = cache["layers"][0]["attn"]
        np.testing.assert_allclose(attn, 1.0, atol=1e-12)
        # softmax over one key is 1, so context equals the value projection
        v = x @ params.arrays["input.W"].T + params.arrays["input.b"]
        v = v @ params.arrays["enc0.Wv"].T + params.arrays["enc0.bv"]
        np.testing.assert_allclose(cache["layers"][0]["ctx"], v, atol=1e-12)

    def test_determinism(self):
        cfg = tiny_config()
        params = init_params(cfg, 3)
        batch = make_batch(cfg, np.random.default_rng(4))
        a, _ = forward(params, batch)
        b, _ = forward(params, batch)
        assert np.array_equal(a, b)

    def test_variable_length_grouping(self):
        cfg = tiny_config()
        params = init_params(cfg, 3)
        rng = np.random.default_rng(5)
        sequences = [rng.normal(size=(s, cfg.d_c)) for s in (1, 3, 2, 3, 1)]
        batch = Batch(sequences, rng.normal(size=(5, cfg.d_s)),
                      np.array([0, 1, 2, 3, 0]), np.zeros((0, cfg.d_c)),
                      np.zeros((0, cfg.d_s)), np.zeros((0, 3), int),
                      np.zeros((0, 3), int))
        logits, _ = forward(params, batch)
        assert logits.shape == (5, 4)
        # per-utterance result must not depend on batch grouping
        for i, seq in enumerate(sequences):
            solo = Batch([seq], batch.speaker_vecs[i:i + 1], batch.labels[i:i + 1],
                         batch.content_bank, batch.speaker_bank,
                         batch.trip_p, batch.trip_s)
            solo_logits, _ = forward(params, solo)
            np.testing.assert_allclose(solo_logits[0], logits[i], atol=1e-12)

    def test_nonfinite_input_raises_named_layer(self):
        cfg = tiny_config()
        params = init_params(cfg, 3)
        batch = make_batch(cfg, np.random.default_rng(6), n_trip=0)
        batch.sequences[0][0, 0] = np.inf
        with pytest.raises(NumericError, match="input"):
            forward(params, batch)

    def test_speaker_only_ignores_content(self):
        cfg = tiny_config(input_mode="speaker_only")
        params = init_params(cfg, 7)
        batch = make_batch(cfg, np.random.default_rng(8), n_trip=0)
        a, _ = forward(params, batch)
        for seq in batch.sequences:
            seq += 100.0
        b, _ = forward(params, batch)
        assert np.array_equal(a, b)

    def test_content_only_ignores_speaker(self):
        cfg = tiny_config(input_mode="content_only")
        params = init_params(cfg, 7)
        batch = make_batch(cfg, np.random.default_rng(9), n_trip=0)
        a, _ = forward(params, batch)
        batch.speaker_vecs += 100.0
        b, _ = forward(params, batch)
        assert np.array_equal(a, b)

    def test_positional_encoding_flag(self):
        rng = np.random.default_rng(10)
        batch = make_batch(tiny_config(), rng, n_segs=3, n_trip=0)
        base = init_params(tiny_config(), 11)
        pe_cfg = tiny_config(positional_encoding=True)
        pe_params = init_params(pe_cfg, 11)
        a, _ = forward(base, batch)
        b, _ = forward(pe_params, batch)
        assert not np.allclose(a, b)

    def test_utterance_vector_mode(self):
        cfg = tiny_config(sequence_input=False)
        params = init_params(cfg, 12)
        batch = make_batch(cfg, np.random.default_rng(13), n_trip=0)
        logits, _ = forward(params, batch)
        assert logits.shape == (len(batch.sequences), 4)


class TestLosses:
    def test_uniform_logits_cross_entropy_is_ln4(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        for key in params.arrays:
            params.arrays[key][:] = 0.0
        batch = make_batch(cfg, np.random.default_rng(1), n_trip=0)
        total, comps = loss_total(params, batch)
        assert comps["L_SER"] == pytest.approx(np.log(4.0), abs=1e-12)
        assert comps["L_p"] == 0.0 and comps["L_s"] == 0.0

    def test_near_perfect_prediction_near_zero_loss(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        for key in params.arrays:
            params.arrays[key][:] = 0.0
        params.arrays["fc3.b"][:] = np.array([50.0, 0.0, 0.0, 0.0])
        batch = make_batch(cfg, np.random.default_rng(2), n_trip=0,
                           labels=[0, 0, 0, 0, 0])
        _, comps = loss_total(params, batch)
        assert comps["L_SER"] == pytest.approx(0.0, abs=1e-12)

    def test_total_is_weighted_sum(self):
        cfg = tiny_config(lambda1=0.5, lambda2=0.5)
        params = init_params(cfg, 5)
        batch = make_batch(cfg, np.random.default_rng(3))
        total, comps = loss_total(params, batch)
        assert total == pytest.approx(
            comps["L_SER"] + 0.5 * comps["L_p"] + 0.5 * comps["L_s"], abs=1e-12)
        assert comps["L_p"] > 0 or comps["L_s"] > 0

    def test_empty_triplet_lists_zero_components(self):
        cfg = tiny_config()
        params = init_params(cfg, 5)
        batch = make_batch(cfg, np.random.default_rng(3), n_trip=0)
        total, comps = loss_total(params, batch)
        assert comps["L_p"] == 0.0 and comps["L_s"] == 0.0
        assert total == comps["L_SER"]

    def test_permutation_invariance_over_utterances(self):
        cfg = tiny_config()
        params = init_params(cfg, 5)
        batch = make_batch(cfg, np.random.default_rng(7), n_utts=6)
        total, _ = loss_total(params, batch)
        perm = [3, 1, 5, 0, 4, 2]
        shuffled = Batch([batch.sequences[i] for i in perm],
                         batch.speaker_vecs[perm], batch.labels[perm],
                         batch.content_bank, batch.speaker_bank,
                         batch.trip_p, batch.trip_s)
        total2, _ = loss_total(params, shuffled)
        assert total2 == pytest.approx(total, abs=1e-12)

    def test_softmax_properties(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(scale=10, size=(50, 4))
        probs = _softmax(logits)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs > 0)
        shifted = _softmax(logits + 123.456)
        assert np.array_equal(np.argmax(logits, axis=1),
                              np.argmax(logits + 123.456, axis=1))
        np.testing.assert_allclose(probs, shifted, atol=1e-12)


class TestBackward:
    def relative_errors(self, cfg, seed, batch):
        params = init_params(cfg, seed)
        grads = backward(params, batch)
        analytic = np.concatenate(
            [grads.arrays[k].ravel() for k in sorted(grads.arrays)])
        x0 = params.to_vector()
        fd = finite_difference_gradient(
            lambda v: loss_total(params.from_vector(v), batch)[0], x0)
        denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)
        return np.abs(analytic - fd) / denom

    def test_gradcheck_fused(self):
        cfg = tiny_config()
        batch = make_batch(cfg, np.random.default_rng(21), n_utts=4, n_trip=3,
                           scale=0.5)
        rel = self.relative_errors(cfg, 0, batch)
        assert rel.max() < 1e-4

    def test_gradcheck_content_only_relu(self):
        cfg = tiny_config(input_mode="content_only", activation="relu")
        batch = make_batch(cfg, np.random.default_rng(22), n_utts=4, n_trip=2)
        rel = self.relative_errors(cfg, 1, batch)
        assert rel.max() < 1e-3  # relu kinks make finite differences coarser

    def test_gradcheck_no_projections(self):
        cfg = tiny_config(use_projections=False)
        batch = make_batch(cfg, np.random.default_rng(23), n_utts=4, n_trip=3)
        rel = self.relative_errors(cfg, 2, batch)
        assert rel.max() < 1e-4

    def test_inactive_hinge_zero_gradient(self):
        cfg = tiny_config(use_projections=False)
        params = init_params(cfg, 3)
        rng = np.random.default_rng(24)
        batch = make_batch(cfg, rng, n_trip=2)
        # push negatives far away so both phoneme hinges go inactive
        batch.content_bank[batch.trip_p[:, 2]] += 100.0
        _, caches, comps = loss_components(params, batch)
        assert comps["L_p"] == 0.0
        grads = backward(params, batch)
        np.testing.assert_array_equal(grads.trip_p_inputs, 0.0)

    def test_collapsed_triplet_anchor_gradient_cancels(self):
        cfg = tiny_config(use_projections=False)
        params = init_params(cfg, 3)
        batch = make_batch(cfg, np.random.default_rng(25), n_trip=1)
        batch.content_bank[1] = batch.content_bank[0]
        batch.content_bank[2] = batch.content_bank[0]
        grads = backward(params, batch)
        # a = p = n: hinge active at the margin but 2(n - p) cancels
        np.testing.assert_allclose(grads.trip_p_inputs[0, 0], 0.0, atol=1e-15)

    def test_projection_disabled_triplet_terms_constant(self):
        cfg = tiny_config(use_projections=False)
        params = init_params(cfg, 4)
        batch = make_batch(cfg, np.random.default_rng(26), n_trip=3)
        grads = backward(params, batch)
        np.testing.assert_array_equal(grads.arrays["proj_c.W"], 0.0)
        np.testing.assert_array_equal(grads.arrays["proj_s.W"], 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, 9)
        path = tmp_path / "ckpt.npz"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.config == cfg
        for key, arr in params.arrays.items():
            np.testing.assert_array_equal(loaded.arrays[key], arr)

    def test_shape_validation(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, 9)
        path = tmp_path / "ckpt.npz"
        save_params(params, path)
        with np.load(path) as data:
            files = {k: data[k] for k in data.files}
        files["fc0.W"] = files["fc0.W"][:2]
        with open(path, "wb") as fh:
            np.savez(fh, **files)
        with pytest.raises(DomainError, match="shape mismatch"):
            load_params(path)

    def test_missing_parameter_rejected(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, 9)
        path = tmp_path / "ckpt.npz"
        save_params(params, path)
        with np.load(path) as data:
            files = {k: data[k] for k in data.files}
        del files["fc0.W"]
        with open(path, "wb") as fh:
            np.savez(fh, **files)
        with pytest.raises(DomainError, match="names"):
            load_params(path)


def test_build_batch_from_synthetic_utterances():
    spec = small_spec(seed=43)
    manifest, records = sapa.generate_synthetic(spec)
    utts = list(group_utterances(records, split="train", corpus="src").values())[:4]
    by_id = {r.record_id: r for r in records}
    batch = build_batch(utts, [], [], by_id, manifest.d_c, manifest.d_s)
    assert batch.size == 4
    assert batch.speaker_vecs.shape == (4, manifest.d_s)
    for utt, label in zip(utts, batch.labels):
        assert EMOTION_INDEX[utt["emotion"]] == label
    assert all(seq.shape[1] == manifest.d_c for seq in batch.sequences)
