"""Mono 16-bit PCM WAV reading and writing.

Samples are exchanged as float64 arrays in [-1, 1]; on disk they are
signed 16-bit little-endian integers (scale 32767).
"""

from __future__ import annotations

import wave

import numpy as np

from .errors import DataError

PCM_SCALE = 32767.0


def write_wav(path, samples, sample_rate: int) -> None:
    """Write a mono 16-bit PCM WAV file.

    Values outside [-1, 1] are clipped before quantization.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise DataError(f"cannot write empty or non-mono signal to {path}")
    quantized = np.clip(np.round(samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(quantized.tobytes())


def read_wav(path, expected_rate: int | None = None):
    """Read a mono 16-bit PCM WAV file.

    Returns (samples, sample_rate) with samples as float64 in [-1, 1].
    Raises DataError if the file is not mono 16-bit PCM, or if
    ``expected_rate`` is given and the header rate differs.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(
            f"{path}: sample rate {rate} Hz does not match configured {expected_rate} Hz"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return samples, rate
