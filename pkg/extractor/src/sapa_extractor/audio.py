"""Minimal WAV loading built on the stdlib wave module."""

import wave

import numpy as np

_WIDTH_DTYPE = {1: np.uint8, 2: np.int16, 4: np.int32}


def load_wav(path):
    """Load a PCM WAV file as (mono float64 samples in [-1, 1], sample rate)."""
    with wave.open(str(path), "rb") as wav:
        n_channels = wav.getnchannels()
        width = wav.getsampwidth()
        rate = wav.getframerate()
        raw = wav.readframes(wav.getnframes())
    if width not in _WIDTH_DTYPE:
        raise ValueError(f"unsupported sample width {width} bytes in {path}")
    data = np.frombuffer(raw, dtype=_WIDTH_DTYPE[width]).astype(np.float64)
    if width == 1:
        data = (data - 128.0) / 128.0
    else:
        data = data / float(2 ** (8 * width - 1))
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return data, rate
