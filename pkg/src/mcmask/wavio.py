"""Multi-channel WAV reading (16-bit PCM or 32-bit float) and 32-bit float writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .framing import MultiChannelWaveform


class WavError(ValueError):
    pass


def read_wav(path: str | Path) -> MultiChannelWaveform:
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as e:
        raise WavError(f"{path}: cannot read WAV ({e})") from e
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}")
    samples = samples.reshape(samples.shape[0], -1).T  # (C, L)
    if samples.shape[1] == 0:
        raise WavError(f"{path}: no samples")
    try:
        return MultiChannelWaveform(samples, int(rate))
    except ValueError as e:
        raise WavError(f"{path}: {e}") from e


def write_wav(path: str | Path, wave: MultiChannelWaveform | np.ndarray, sample_rate: int | None = None) -> None:
    """Write interleaved 32-bit float samples."""
    if isinstance(wave, MultiChannelWaveform):
        data, rate = wave.data, wave.sample_rate
    else:
        data, rate = np.atleast_2d(np.asarray(wave, dtype=np.float64)), sample_rate
    if rate is None:
        raise ValueError("sample_rate required")
    out = data.T.astype(np.float32)
    wavfile.write(path, int(rate), out[:, 0] if out.shape[1] == 1 else out)
