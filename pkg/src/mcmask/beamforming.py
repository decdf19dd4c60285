"""Array geometry, plane-wave delays, delay-and-sum and black-box beampatterns.

Coordinates are metres in an array-centred frame. Directions are unit vectors
pointing from the array towards the source; azimuth is measured in the x-y
plane from +x towards +y and elevation upwards from that plane.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .framing import DEFAULT_SAMPLE_RATE, MultiChannelWaveform
from .metrics import power_ratio

SPEED_OF_SOUND = 343.0
FRACTIONAL_DELAY_TAPS = 64
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class GeometryError(ValueError):
    """Invalid array geometry; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ArrayGeometry:
    positions: np.ndarray  # (C, 3)
    speed_of_sound: float = SPEED_OF_SOUND
    name: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise GeometryError("positions", f"expected a list of [x, y, z] points, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("positions", "coordinates must be finite")
        if not np.isfinite(self.speed_of_sound) or self.speed_of_sound <= 0:
            raise GeometryError("speed_of_sound", "must be a positive number")
        self.positions = pos

    @property
    def n_channels(self) -> int:
        return self.positions.shape[0]

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.positions, axis=1)))


def load_geometry(path: str | Path) -> ArrayGeometry:
    """Read a YAML/JSON geometry file with keys ``positions`` and optional
    ``speed_of_sound``, ``name`` and ``center`` (subtract the array centroid)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise GeometryError("<root>", "geometry file must contain a mapping")
    if "positions" not in doc:
        raise GeometryError("positions", "missing")
    try:
        pos = np.asarray(doc["positions"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise GeometryError("positions", f"not numeric ({e})") from None
    try:
        c = float(doc.get("speed_of_sound", SPEED_OF_SOUND))
    except (TypeError, ValueError):
        raise GeometryError("speed_of_sound", f"not a number: {doc.get('speed_of_sound')!r}") from None
    geom = ArrayGeometry(pos, c, str(doc.get("name", "")))
    if doc.get("center", False):
        geom.positions = geom.positions - geom.positions.mean(axis=0)
    return geom


def linear_array(n: int, spacing: float, axis: int = 0) -> ArrayGeometry:
    """``n`` sensors spaced ``spacing`` metres apart along one axis, centred on 0."""
    pos = np.zeros((n, 3))
    pos[:, axis] = (np.arange(n) - (n - 1) / 2.0) * spacing
    return ArrayGeometry(pos, name=f"linear{n}")


# ---------------------------------------------------------------------------
# directions
# ---------------------------------------------------------------------------

def direction_from_angles(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


@dataclass
class DirectionGrid:
    directions: np.ndarray  # (K, 3) unit vectors

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if d.shape[1] != 3 or d.shape[0] < 1:
            raise ValueError(f"directions must be (K, 3), got {d.shape}")
        if np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-12:
            raise ValueError("directions must be unit vectors")
        self.directions = d

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def azimuth_deg(self) -> np.ndarray:
        return np.degrees(np.arctan2(self.directions[:, 1], self.directions[:, 0])) % 360.0

    @property
    def elevation_deg(self) -> np.ndarray:
        return np.degrees(np.arcsin(np.clip(self.directions[:, 2], -1.0, 1.0)))

    def nearest(self, direction) -> int:
        return int(np.argmax(self.directions @ np.asarray(direction, dtype=np.float64)))

    def angular_distance(self, i: int, j: int) -> float:
        """Angle in radians between grid points ``i`` and ``j``."""
        cos = float(np.clip(self.directions[i] @ self.directions[j], -1.0, 1.0))
        return float(np.arccos(cos))

    def nearest_neighbour_angles(self) -> np.ndarray:
        """Angle from every point to its closest other point (radians)."""
        d = self.directions
        out = np.empty(len(d))
        for start in range(0, len(d), 512):
            cos = d[start:start + 512] @ d.T
            for r in range(cos.shape[0]):
                cos[r, start + r] = -2.0
            out[start:start + 512] = np.arccos(np.clip(cos.max(axis=1), -1.0, 1.0))
        return out


def make_grid(K: int) -> DirectionGrid:
    """Spherical Fibonacci lattice of ``K`` nearly uniform directions."""
    if K < 1:
        raise ValueError("K must be >= 1")
    i = np.arange(K)
    z = 1.0 - (2.0 * i + 1.0) / K
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE
    d = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return DirectionGrid(d / np.linalg.norm(d, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# delays and rendering
# ---------------------------------------------------------------------------

def steering_delays(geom: ArrayGeometry, direction) -> np.ndarray:
    """Arrival time of a plane wave at each sensor relative to the array origin.

    ``tau_c = -(p_c . d) / c``: sensors closer to the source hear it first.
    ``direction`` may be one unit vector (returns (C,)) or a (K, 3) stack.
    """
    d = np.asarray(direction, dtype=np.float64)
    return -(d @ geom.positions.T) / geom.speed_of_sound


def render_probe(f: float, duration: float, geom: ArrayGeometry, direction,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> MultiChannelWaveform:
    """Array signals for a plane-wave sinusoid ``sin(2 pi f t)`` arriving from ``direction``.

    Rendered with exact phase shifts: channel c is ``sin(2 pi f (n/fs - tau_c))``.
    """
    if not 0 < f < sample_rate / 2:
        raise ValueError(f"probe frequency {f} Hz must lie in (0, {sample_rate / 2}) Hz")
    n = np.arange(int(round(duration * sample_rate)))
    tau = steering_delays(geom, direction)
    data = np.sin(2 * np.pi * f * (n[None, :] / sample_rate - tau[:, None]))
    return MultiChannelWaveform(data, sample_rate)


def probe_reference(f: float, duration: float, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    n = np.arange(int(round(duration * sample_rate)))
    return np.sin(2 * np.pi * f * n / sample_rate)


def fractional_delay_filter(frac: float, taps: int = FRACTIONAL_DELAY_TAPS) -> np.ndarray:
    """Hann-windowed sinc taps for lags ``j = -(taps/2 - 1) .. taps/2``, normalised to unit DC gain."""
    j = np.arange(-(taps // 2 - 1), taps // 2 + 1)
    u = j - frac
    h = np.sinc(u) * (0.5 + 0.5 * np.cos(2 * np.pi * u / taps))
    return h / h.sum()


def fractional_delay(x, delay: float, taps: int = FRACTIONAL_DELAY_TAPS) -> np.ndarray:
    """``y[n] ~= x(n - delay)`` for a real (possibly negative) delay in samples.

    Samples outside the input are treated as zero; output length equals input length.
    """
    x = np.asarray(x, dtype=np.float64)
    whole = int(np.floor(delay))
    frac = delay - whole
    if frac == 0.0:
        out = np.zeros_like(x)
        if abs(whole) < x.size:
            if whole >= 0:
                out[whole:] = x[: x.size - whole]
            else:
                out[:whole] = x[-whole:]
        return out
    h = fractional_delay_filter(frac, taps)
    conv = np.convolve(x, h)  # conv[k] = sum_i h[i] x[k - i]; lag j sits at index i = j + taps/2 - 1
    offset = taps // 2 - 1 - whole
    out = np.zeros_like(x)
    lo, hi = max(0, -offset), min(x.size, conv.size - offset)
    if lo < hi:
        out[lo:hi] = conv[lo + offset:hi + offset]
    return out


def delay_and_sum(mix, delays, sample_rate: int | None = None) -> np.ndarray:
    """Average of channels advanced by their steering delays (seconds)."""
    if isinstance(mix, MultiChannelWaveform):
        data, fs = mix.data, mix.sample_rate
    else:
        data, fs = np.atleast_2d(np.asarray(mix, dtype=np.float64)), sample_rate or DEFAULT_SAMPLE_RATE
    delays = np.asarray(delays, dtype=np.float64)
    if delays.shape != (data.shape[0],):
        raise ValueError(f"need one delay per channel ({data.shape[0]}), got {delays.shape}")
    acc = np.zeros(data.shape[1])
    for c in range(data.shape[0]):
        acc += fractional_delay(data[c], -delays[c] * fs)
    return acc / data.shape[0]


def das_array_factor(geom: ArrayGeometry, grid: DirectionGrid, f: float, steer) -> np.ndarray:
    """Closed-form delay-and-sum power ``|mean_c exp(-j 2 pi f (tau_c(k) - tau_c(steer)))|^2``."""
    tau = steering_delays(geom, grid.directions)
    tau0 = steering_delays(geom, steer)
    return np.abs(np.mean(np.exp(-2j * np.pi * f * (tau - tau0[None, :])), axis=1)) ** 2


# ---------------------------------------------------------------------------
# beampatterns
# ---------------------------------------------------------------------------

@dataclass
class Beampattern:
    grid: DirectionGrid
    response: np.ndarray  # (K,) linear power ratio
    frequency: float
    meta: dict = field(default_factory=dict)

    @property
    def response_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.maximum(10.0 * np.log10(self.response), -300.0)

    def rank_of(self, k: int) -> float:
        """Fraction of grid responses strictly greater than the response at ``k``."""
        return float(np.mean(self.response > self.response[k]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "azimuth_deg", "elevation_deg", "b_linear", "b_dB"])
            for k, (az, el, b, bdb) in enumerate(zip(self.grid.azimuth_deg, self.grid.elevation_deg,
                                                     self.response, self.response_db)):
                w.writerow([k, f"{az:.6f}", f"{el:.6f}", repr(float(b)), f"{bdb:.6f}"])

    def to_json(self, path: str | Path) -> None:
        doc = {
            "frequency_hz": self.frequency,
            "K": len(self.grid),
            **self.meta,
            "directions": self.grid.directions.tolist(),
            "azimuth_deg": self.grid.azimuth_deg.tolist(),
            "elevation_deg": self.grid.elevation_deg.tolist(),
            "b_linear": self.response.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)


def beampattern_sweep(system: Callable[[MultiChannelWaveform], np.ndarray], grid: DirectionGrid,
                      f: float, duration: float, geom: ArrayGeometry,
                      sample_rate: int = DEFAULT_SAMPLE_RATE, exclude_edges: int = 128,
                      workers: int = 1, description: str = "") -> Beampattern:
    """Probe ``system`` with a plane-wave tone from every grid direction.

    ``b_k = sum y^2 / sum z^2`` where ``z`` is the undelayed tone and ``y`` the
    system output, both with ``exclude_edges`` samples dropped at each end.
    """
    z = probe_reference(f, duration, sample_rate)

    def one(k: int) -> float:
        y = np.asarray(system(render_probe(f, duration, geom, grid.directions[k], sample_rate)))
        if y.shape != z.shape:
            raise ValueError(f"system output has shape {y.shape}, expected {z.shape}")
        return power_ratio(y, z, exclude_edges)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            response = np.fromiter(pool.map(one, range(len(grid))), float, len(grid))
    else:
        response = np.fromiter((one(k) for k in range(len(grid))), float, len(grid))
    meta = {"system": description, "duration_s": duration, "sample_rate": sample_rate,
            "exclude_edges": exclude_edges}
    return Beampattern(grid, response, f, meta)


def das_system(geom: ArrayGeometry, steer) -> Callable[[MultiChannelWaveform], np.ndarray]:
    delays = steering_delays(geom, steer)
    return lambda mix: delay_and_sum(mix, delays)


def masking_system(model, masks) -> Callable[[MultiChannelWaveform], np.ndarray]:
    """Encoder -> frozen masks -> filter-and-sum -> decoder, as a black box."""
    from .masking import separate

    frozen = np.asarray(masks, dtype=np.float64).copy()
    return lambda mix: separate(model, mix, masks=frozen)
