"""16-bit PCM mono WAV read/write.

Real values in [-1, 1) map to int16 by scaling with 32768 and clipping;
reading divides back, so a write/read round trip is exact to one LSB.
"""

from __future__ import annotations

import wave

import numpy as np

from .frames import Waveform

_SCALE = 32768.0


def write_wav(path, waveform):
    samples = np.clip(np.round(waveform.samples * _SCALE), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(samples.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _SCALE
    return Waveform(samples=samples, sample_rate=rate)
