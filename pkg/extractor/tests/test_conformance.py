"""Cross-component conformance: extractor output must load in the pipeline.

These tests import the primary sapa package purely as the consumer of the
dataset files this package writes (acceptance criterion for the adapter).
"""

import numpy as np
import pytest

sapa = pytest.importorskip("sapa")

from sapa_extractor import SpectralHashEncoder, extract, read_alignments, read_audio_csv

from test_extract import make_fixture


def test_output_passes_read_dataset_with_zero_errors(tmp_path):
    plan = make_fixture(tmp_path)
    out, report = extract(
        read_audio_csv(tmp_path / "audio.csv"),
        read_alignments(tmp_path / "alignments.tsv"),
        SpectralHashEncoder("content", 32),
        SpectralHashEncoder("speaker", 16),
        tmp_path / "out.jsonl")
    manifest, records = sapa.read_dataset(out)

    assert manifest.d_c == 32 and manifest.d_s == 16
    assert manifest.encoder["content"]["name"] == "content"
    # per-utterance cardinality: one speaker record plus one per phoneme
    utts = sapa.group_utterances(records)
    assert len(utts) == 3
    for (corpus, utt_id), slot in utts.items():
        assert slot["speaker"] is not None
        assert len(slot["content"]) == len(plan[utt_id])
    for rec in records:
        sapa.embstore.validate_record(rec, manifest)
    print(f"\n[PASS] criterion 10: extractor output accepted by read_dataset "
          f"({len(records)} records, {len(report.skipped)} skipped)")


def test_output_round_trips_through_pipeline_writer(tmp_path):
    make_fixture(tmp_path)
    out, _ = extract(
        read_audio_csv(tmp_path / "audio.csv"),
        read_alignments(tmp_path / "alignments.tsv"),
        SpectralHashEncoder("content", 8),
        SpectralHashEncoder("speaker", 8),
        tmp_path / "out.jsonl")
    manifest, records = sapa.read_dataset(out)
    rewritten = sapa.write_dataset(manifest, records, tmp_path / "rewrite.jsonl")
    manifest2, records2 = sapa.read_dataset(rewritten)
    assert manifest2 == manifest
    assert records2 == records


def test_extracted_embeddings_feed_graph_stage(tmp_path):
    # a larger fixture with train-split records in two corpora exercises the
    # downstream graph builder on extractor output
    rng = np.random.default_rng(3)
    csv_lines = ["path,utterance_id,speaker_id,corpus_id,emotion,split"]
    align_lines = []
    from test_extract import RATE, write_wav
    for corpus in ("src", "tgt"):
        for s in range(2):
            for u in range(2):
                utt = f"{corpus}-s{s}-u{u}"
                t = np.arange(int(0.4 * RATE)) / RATE
                freq = 150 + 80 * s + (40 if corpus == "tgt" else 0)
                write_wav(tmp_path / f"{utt}.wav",
                          0.4 * np.sin(2 * np.pi * freq * t)
                          + 0.05 * rng.normal(size=t.size))
                csv_lines.append(f"{tmp_path / (utt + '.wav')},{utt},s{s},{corpus},anger,train")
                align_lines.append(f"{utt}\t0.05\t0.15\ti")
                align_lines.append(f"{utt}\t0.2\t0.3\tu")
    (tmp_path / "audio.csv").write_text("\n".join(csv_lines) + "\n")
    (tmp_path / "aligns.tsv").write_text("\n".join(align_lines) + "\n")
    out, _ = extract(read_audio_csv(tmp_path / "audio.csv"),
                     read_alignments(tmp_path / "aligns.tsv"),
                     SpectralHashEncoder("content", 16),
                     SpectralHashEncoder("speaker", 16),
                     tmp_path / "out.jsonl")
    _, records = sapa.read_dataset(out)
    graph = sapa.build_graph(records, "anger", tau=0.0)
    assert graph.n_nodes == 4
    assert graph.edges
