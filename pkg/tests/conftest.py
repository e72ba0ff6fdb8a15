import sys
from pathlib import Path

import pytest

import sapa

sys.path.insert(0, str(Path(__file__).parent))


def small_spec(seed=1, **overrides):
    """Desk-scale two-corpus spec with planted anchors in every emotion."""
    kwargs = dict(
        seed=seed,
        speakers_per_corpus=6,
        utterances_per_speaker=5,
        segments_per_utterance=4,
        n_style_clusters=2,
        cluster_spread=0.05,
        anchored_phonemes={e: ("i", "A,a") for e in sapa.EMOTIONS},
        cross_corpus_anchor_gap=0.0,
        emotion_signal_strength=0.8,
        d_s=16,
        d_c=16,
    )
    kwargs.update(overrides)
    return sapa.SyntheticSpec(**kwargs)


@pytest.fixture(scope="session")
def small_dataset():
    spec = small_spec()
    manifest, records = sapa.generate_synthetic(spec)
    return spec, manifest, records
