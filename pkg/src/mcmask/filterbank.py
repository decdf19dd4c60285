"""Learnable analysis/synthesis filterbanks.

The encoder maps each length-T frame to F features with one F x T matrix per
channel (or a single shared matrix). The decoder maps F features back to a
length-T frame with a T x F matrix, followed by overlap-add.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .framing import FrameMatrix, overlap_add

BANK_FORMAT_VERSION = 1
MAX_CONDITION = 1e12


@dataclass
class EncoderBank:
    matrices: np.ndarray  # (C, F, T), or (1, F, T) when shared
    shared: bool = False

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.ndim == 2:
            self.matrices = self.matrices[None]
            self.shared = True
        if self.matrices.ndim != 3:
            raise ValueError(f"encoder matrices must be (C, F, T), got {self.matrices.shape}")
        if self.shared and self.matrices.shape[0] != 1:
            raise ValueError("shared bank must hold exactly one matrix")

    @property
    def n_features(self) -> int:
        return self.matrices.shape[1]

    @property
    def frame_length(self) -> int:
        return self.matrices.shape[2]

    def matrix(self, channel: int) -> np.ndarray:
        if self.shared:
            return self.matrices[0]
        if not 0 <= channel < self.matrices.shape[0]:
            raise IndexError(f"channel {channel} out of range for {self.matrices.shape[0]} banks")
        return self.matrices[channel]


@dataclass
class DecoderBank:
    matrix: np.ndarray  # (T, F)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"decoder matrix must be (T, F), got {self.matrix.shape}")


@dataclass
class FilterbankRepresentation:
    values: np.ndarray  # (F, N)
    hop: int
    original_length: int


def encode(frames: FrameMatrix, bank: EncoderBank, channel: int = 0) -> FilterbankRepresentation:
    """Linear encoding ``U_channel @ frames``; no nonlinearity."""
    U = bank.matrix(channel)
    if U.shape[1] != frames.frame_length:
        raise ValueError(f"bank frame length {U.shape[1]} != frame length {frames.frame_length}")
    return FilterbankRepresentation(U @ frames.frames, frames.hop, frames.original_length)


def decode(rep: FilterbankRepresentation, dec: DecoderBank) -> np.ndarray:
    if dec.matrix.shape[1] != rep.values.shape[0]:
        raise ValueError(f"decoder expects F={dec.matrix.shape[1]}, representation has {rep.values.shape[0]}")
    return overlap_add(FrameMatrix(dec.matrix @ rep.values, rep.hop, rep.original_length))


def init_random(rng: np.random.Generator, C: int, F: int, T: int, shared: bool = False) -> EncoderBank:
    """Uniform entries in ``[-1/sqrt(T), 1/sqrt(T)]``."""
    if F < 1 or T < 1:
        raise ValueError("F and T must be >= 1")
    bound = 1.0 / np.sqrt(T)
    n = 1 if shared else C
    return EncoderBank(rng.uniform(-bound, bound, size=(n, F, T)), shared=shared)


def dft_matrix(T: int) -> np.ndarray:
    """Square real DFT basis: cosines for bins 0..T/2 then sines for bins 1..T/2-1."""
    if T < 2 or T % 2:
        raise ValueError(f"DFT initialisation needs an even frame length, got {T}")
    t = np.arange(T)
    cos_rows = np.cos(2 * np.pi * np.arange(T // 2 + 1)[:, None] * t / T)
    sin_rows = np.sin(2 * np.pi * np.arange(1, T // 2)[:, None] * t / T)
    return np.vstack([cos_rows, sin_rows])


def init_dft(T: int, C: int = 1) -> EncoderBank:
    """Shared bank (or C identical copies when ``C > 1``) holding the real DFT basis."""
    basis = dft_matrix(T)
    if C == 1:
        return EncoderBank(basis[None], shared=True)
    return EncoderBank(np.repeat(basis[None], C, axis=0), shared=False)


def pseudo_inverse_decoder(bank: EncoderBank | np.ndarray) -> DecoderBank:
    """Moore-Penrose inverse of a full-rank encoder matrix.

    Accepts a shared bank or a bare F x T matrix. Raises ``ValueError`` when the
    condition number exceeds 1e12.
    """
    if isinstance(bank, EncoderBank):
        if not bank.shared:
            raise ValueError("pseudo-inverse decoder needs a shared bank (or pass one matrix)")
        U = bank.matrices[0]
    else:
        U = np.asarray(bank, dtype=np.float64)
    cond = np.linalg.cond(U)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise ValueError(f"encoder is rank deficient (condition number {cond:.3g})")
    return DecoderBank(np.linalg.pinv(U))


def save_bank(path: str | Path, bank: EncoderBank | DecoderBank) -> None:
    if isinstance(bank, EncoderBank):
        np.savez(path, version=BANK_FORMAT_VERSION, kind="encoder", shared=bank.shared, values=bank.matrices)
    else:
        np.savez(path, version=BANK_FORMAT_VERSION, kind="decoder", shared=False, values=bank.matrix)


def load_bank(path: str | Path) -> EncoderBank | DecoderBank:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != BANK_FORMAT_VERSION:
            raise ValueError(f"unsupported bank format version {version}")
        kind = str(z["kind"])
        if kind == "encoder":
            return EncoderBank(z["values"].copy(), shared=bool(z["shared"]))
        if kind == "decoder":
            return DecoderBank(z["values"].copy())
    raise ValueError(f"unknown bank kind {kind!r}")
