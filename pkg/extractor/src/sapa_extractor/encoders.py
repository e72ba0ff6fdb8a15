"""Pluggable waveform encoders.

An encoder maps (samples, sample_rate) to a fixed-dimension vector and
exposes a name and checksum that get pinned into the output manifest.
Real pretrained encoders plug in through ``load_encoder("module:factory")``;
the built-in spectral-hash encoder is a deterministic, dependency-free
stand-in that keeps the pipeline runnable end to end without checkpoints.
"""

from __future__ import annotations

import hashlib
import importlib
from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class Encoder(Protocol):
    name: str
    checksum: str
    dim: int

    def encode(self, samples: np.ndarray, rate: int) -> np.ndarray:
        ...


class SpectralHashEncoder:
    """Deterministic spectral summary through a name-seeded projection.

    Frames the signal (Hann window), takes log band energies, summarizes
    each band with mean/std/max/mean-delta statistics, and projects the
    summary to ``dim`` dimensions with a matrix seeded from the encoder
    name. Same name and dim always produce the same embedding space.
    """

    def __init__(self, name: str = "spectral-hash", dim: int = 64,
                 n_bands: int = 24, frame_ms: float = 25.0, hop_ms: float = 10.0):
        self.name = name
        self.dim = dim
        self.n_bands = n_bands
        self.frame_ms = frame_ms
        self.hop_ms = hop_ms
        seed = int.from_bytes(
            hashlib.sha256(f"{name}:{dim}:{n_bands}".encode()).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        self._projection = rng.normal(size=(dim, 4 * n_bands)) / np.sqrt(4 * n_bands)
        self.checksum = hashlib.sha256(self._projection.tobytes()).hexdigest()[:16]

    def _band_energies(self, samples: np.ndarray, rate: int) -> np.ndarray:
        frame = max(16, int(rate * self.frame_ms / 1000.0))
        hop = max(8, int(rate * self.hop_ms / 1000.0))
        if samples.size < frame:
            samples = np.pad(samples, (0, frame - samples.size))
        n_frames = 1 + (samples.size - frame) // hop
        window = np.hanning(frame)
        spectra = []
        for f in range(n_frames):
            chunk = samples[f * hop:f * hop + frame] * window
            power = np.abs(np.fft.rfft(chunk)) ** 2
            edges = np.linspace(0, power.size, self.n_bands + 1, dtype=int)
            bands = np.array([
                power[edges[b]:max(edges[b] + 1, edges[b + 1])].sum()
                for b in range(self.n_bands)
            ])
            spectra.append(np.log(bands + 1e-10))
        return np.stack(spectra)

    def encode(self, samples: np.ndarray, rate: int) -> np.ndarray:
        bands = self._band_energies(np.asarray(samples, dtype=np.float64), rate)
        delta = np.diff(bands, axis=0) if bands.shape[0] > 1 else np.zeros_like(bands)
        stats = np.concatenate([
            bands.mean(axis=0), bands.std(axis=0), bands.max(axis=0),
            delta.mean(axis=0),
        ])
        out = self._projection @ stats
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else out

    def describe(self) -> dict:
        return {"name": self.name, "checksum": self.checksum, "dim": self.dim}


def load_encoder(spec: str) -> Encoder:
    """Build an encoder from a spec string.

    ``spectral:<name>:<dim>`` selects the built-in encoder; anything with a
    ``module:attribute`` shape imports the attribute and calls it with no
    arguments to obtain an Encoder.
    """
    if spec.startswith("spectral:"):
        _, name, dim = spec.split(":")
        return SpectralHashEncoder(name=name, dim=int(dim))
    module_name, _, attr = spec.rpartition(":")
    if not module_name:
        raise ValueError(
            f"encoder spec {spec!r} is neither spectral:<name>:<dim> nor module:attr")
    factory = getattr(importlib.import_module(module_name), attr)
    encoder = factory()
    if not isinstance(encoder, Encoder):
        raise TypeError(f"{spec!r} did not produce an Encoder")
    return encoder
