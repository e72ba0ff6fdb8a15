"""Extraction adapter: audio + forced alignments -> SAPA embedding datasets.

Runs a speaker encoder over whole utterances and a content encoder over
fixed windows centered on aligned phonemes, then writes the JSON Lines
dataset format the SAPA pipeline ingests. Encoders are pluggable and pinned
into the output manifest by name and checksum.
"""

__version__ = "0.1.0"

from .alignments import AlignmentEntry, read_alignments
from .audio import load_wav
from .encoders import Encoder, SpectralHashEncoder, load_encoder
from .extract import AudioEntry, ExtractionReport, extract, read_audio_csv

__all__ = [
    "AlignmentEntry",
    "AudioEntry",
    "Encoder",
    "ExtractionReport",
    "SpectralHashEncoder",
    "extract",
    "load_encoder",
    "load_wav",
    "read_alignments",
    "read_audio_csv",
]
