"""Command-line entry point for dataset extraction."""

import argparse
import logging
import sys

from .alignments import read_alignments
from .encoders import load_encoder
from .extract import extract, read_audio_csv


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sapa-extract",
        description="Encode aligned audio into a SAPA embedding dataset",
    )
    parser.add_argument("--audio-csv", required=True,
                        help="CSV with path,utterance_id,speaker_id,corpus_id,emotion,split")
    parser.add_argument("--alignments", required=True,
                        help="combined alignment file or directory of per-utterance files")
    parser.add_argument("--out", required=True, help="output dataset path (.jsonl)")
    parser.add_argument("--window-ms", type=float, default=240.0,
                        help="content window length (240 for training exports, "
                             "120 for analysis mode)")
    parser.add_argument("--content-encoder", default="spectral:content:64")
    parser.add_argument("--speaker-encoder", default="spectral:speaker:64")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        entries = read_audio_csv(args.audio_csv)
        alignments = read_alignments(args.alignments)
        content_encoder = load_encoder(args.content_encoder)
        speaker_encoder = load_encoder(args.speaker_encoder)
        out, report = extract(entries, alignments, content_encoder,
                              speaker_encoder, args.out, window_ms=args.window_ms)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{out}: {report.n_speaker_records} speaker + "
          f"{report.n_content_records} content records "
          f"({len(report.skipped)} utterances skipped)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
