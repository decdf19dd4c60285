"""Separation metrics: SDR, scale-invariant SDR and interior power ratio."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

DB_CAP = 300.0


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: reference {ref.size}, estimate {est.size}")
    if not np.any(ref):
        raise ValueError("reference signal is all zeros")
    return ref, est


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return DB_CAP if num > 0 else -DB_CAP
    if num <= 0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def sdr(ref, est) -> float:
    """Plain SDR in dB: reference energy over error energy, capped at +-300 dB."""
    ref, est = _pair(ref, est)
    return _ratio_db(float(ref @ ref), float(np.sum((ref - est) ** 2)))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR: ``est`` is compared with its projection onto ``ref``."""
    ref, est = _pair(ref, est)
    alpha = float(est @ ref) / float(ref @ ref)
    target = alpha * ref
    return _ratio_db(float(target @ target), float(np.sum((est - target) ** 2)))


def power_ratio(y, z, exclude_edges: int = 0) -> float:
    """``sum(y^2) / sum(z^2)`` over samples ``[exclude_edges, L - exclude_edges)``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if y.size != z.size:
        raise ValueError(f"length mismatch: {y.size} vs {z.size}")
    if exclude_edges < 0 or y.size <= 2 * exclude_edges:
        raise ValueError(f"signal of {y.size} samples leaves nothing after excluding {exclude_edges} per edge")
    sl = slice(exclude_edges, y.size - exclude_edges)
    den = float(np.sum(z[sl] ** 2))
    if den == 0:
        raise ValueError("reference power is zero over the evaluated region")
    return float(np.sum(y[sl] ** 2)) / den


@dataclass
class MetricReport:
    sdr_db: list[float] = field(default_factory=list)
    si_sdr_db: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def add(self, name: str, ref, est) -> None:
        self.names.append(name)
        self.sdr_db.append(sdr(ref, est))
        self.si_sdr_db.append(si_sdr(ref, est))

    @property
    def mean_sdr_db(self) -> float:
        return float(np.mean(self.sdr_db)) if self.sdr_db else float("nan")

    @property
    def mean_si_sdr_db(self) -> float:
        return float(np.mean(self.si_sdr_db)) if self.si_sdr_db else float("nan")

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "mean_sdr_db": self.mean_sdr_db,
                           "mean_si_sdr_db": self.mean_si_sdr_db}, indent=2)
