"""Waveform containers, frame segmentation and overlap-add reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class MultiChannelWaveform:
    """C equally long channels sharing one sample rate; ``data`` has shape (C, L)."""

    data: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"expected (C, L) samples, got shape {self.data.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.data.shape[1]


@dataclass
class FrameMatrix:
    frames: np.ndarray  # (T, N)
    hop: int
    original_length: int

    @property
    def frame_length(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


def n_frames_for(length: int, T: int, hop: int) -> int:
    return -(-max(length - T, 0) // hop) + 1


def segment(x, T: int, hop: int | None = None) -> FrameMatrix:
    """Split ``x`` into length-``T`` frames spaced ``hop`` samples apart.

    Frame ``n`` covers samples ``[n*hop, n*hop + T)``. The final frame is
    zero-padded; ``hop`` defaults to ``T // 2``.
    """
    x = np.asarray(x, dtype=np.float64)
    if hop is None:
        hop = max(T // 2, 1)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("segment needs a non-empty 1-D waveform")
    if T < 1 or not 1 <= hop <= T:
        raise ValueError(f"need T >= 1 and 1 <= hop <= T, got T={T}, hop={hop}")
    n = n_frames_for(x.size, T, hop)
    padded = np.zeros((n - 1) * hop + T)
    padded[: x.size] = x
    idx = np.arange(T)[:, None] + hop * np.arange(n)[None, :]
    return FrameMatrix(padded[idx], hop, x.size)


def overlap_add(f: FrameMatrix) -> np.ndarray:
    """Sum frames at offsets ``n*hop`` and truncate to the original length."""
    T, n = f.frames.shape
    out = np.zeros((n - 1) * f.hop + T)
    for j in range(n):
        out[j * f.hop:j * f.hop + T] += f.frames[:, j]
    return out[: f.original_length]
