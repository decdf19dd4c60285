"""Synthetic multi-channel scenes: ``mixture = clean + noise`` on every channel.

Speech is rendered as a static plane wave onto the array, scaled so that the
total multi-channel speech power sits ``snr_db`` above the total noise power,
and added to a random crop of a multi-channel noise recording.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .beamforming import ArrayGeometry, direction_from_angles, fractional_delay, steering_delays
from .framing import DEFAULT_SAMPLE_RATE, MultiChannelWaveform
from .numerics import derive_rng
from .wavio import read_wav, write_wav

MANIFEST_VERSION = 1


@dataclass
class Scene:
    clean: np.ndarray  # (C, L)
    noise: np.ndarray  # (C, L)
    mixture: np.ndarray  # (C, L)
    source_doa: np.ndarray
    snr_db: float
    ref_channel: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def measured_snr_db(self) -> float:
        pn = float(np.sum(self.noise ** 2))
        if pn == 0:
            return math.inf
        return 10.0 * math.log10(float(np.sum(self.clean ** 2)) / pn)

    def training_pair(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mixture, self.clean[self.ref_channel]


def render_anechoic(src, geom: ArrayGeometry, direction, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Delay ``src`` onto each sensor by its plane-wave arrival time."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    tau = steering_delays(geom, d)
    return np.stack([fractional_delay(src, t * sample_rate) for t in tau])


def scale_to_snr(speech, noise, target_db: float) -> float:
    """Gain for ``speech`` so its total power is ``target_db`` above the noise's.

    Powers are summed over all channels and samples.
    """
    ps = float(np.sum(np.square(speech)))
    pn = float(np.sum(np.square(noise)))
    if pn == 0:
        raise ValueError("noise is silent")
    if ps == 0:
        raise ValueError("speech is silent")
    return math.sqrt(10.0 ** (target_db / 10.0) * pn / ps)


def crop_noise(noise, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous ``length``-sample excerpt; one start offset for all channels."""
    noise = np.asarray(noise, dtype=np.float64)
    total = noise.shape[-1]
    if total < length:
        raise ValueError(f"noise has {total} samples, {length} requested")
    start = int(rng.integers(0, total - length + 1))
    return noise[..., start:start + length].copy()


def make_scene(speech_src, noise_src, geom: ArrayGeometry, direction, snr_db: float,
               ref_channel: int, rng: np.random.Generator,
               sample_rate: int = DEFAULT_SAMPLE_RATE) -> Scene:
    """Render, crop, scale and mix one scene. ``snr_db = inf`` gives a noiseless mixture."""
    speech_src = np.asarray(speech_src, dtype=np.float64)
    noise_src = np.atleast_2d(np.asarray(noise_src, dtype=np.float64))
    if noise_src.shape[0] != geom.n_channels:
        raise ValueError(f"noise has {noise_src.shape[0]} channels, array has {geom.n_channels}")
    if not 0 <= ref_channel < geom.n_channels:
        raise ValueError(f"reference channel {ref_channel} out of range")
    speech = render_anechoic(speech_src, geom, direction, sample_rate)
    noise = crop_noise(noise_src, speech.shape[1], rng)
    if math.isinf(snr_db) and snr_db > 0:
        noise = np.zeros_like(speech)
        clean = speech
    else:
        clean = scale_to_snr(speech, noise, snr_db) * speech
    return Scene(clean, noise, clean + noise, np.asarray(direction, dtype=np.float64),
                 float(snr_db), ref_channel, sample_rate)


# ---------------------------------------------------------------------------
# synthetic sources
# ---------------------------------------------------------------------------

def speech_like(rng: np.random.Generator, length: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Voiced-speech stand-in: a gliding harmonic series under a syllable-rate envelope."""
    t = np.arange(length) / sample_rate
    f0 = rng.uniform(90.0, 220.0) * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t
                                                       + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(min(30, 0.45 * sample_rate / f0.max()))
    tilt = rng.uniform(0.6, 1.2)
    sig = np.zeros(length)
    for h in range(1, n_harm + 1):
        sig += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h ** tilt
    rate = rng.uniform(3.0, 6.0)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.5
    sig *= 0.2 + 0.8 * env
    sig += 0.05 * rng.standard_normal(length) * env  # unvoiced component
    return sig / np.sqrt(np.mean(sig ** 2)) * 0.1


def pink_noise(rng: np.random.Generator, length: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.arange(spec.size)
    spec[1:] /= np.sqrt(f[1:])
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=length)
    return x / np.sqrt(np.mean(x ** 2))


def multichannel_noise(rng: np.random.Generator, kind: str, C: int, length: int,
                       geom: ArrayGeometry | None = None,
                       sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """``white``/``pink``: independent per channel; ``directional``: one pink
    source rendered from a random direction."""
    if kind == "white":
        return rng.standard_normal((C, length))
    if kind == "pink":
        return np.stack([pink_noise(rng, length) for _ in range(C)])
    if kind == "directional":
        if geom is None:
            raise ValueError("directional noise needs an array geometry")
        d = rng.standard_normal(3)
        return render_anechoic(pink_noise(rng, length), geom, d / np.linalg.norm(d), sample_rate)
    raise ValueError(f"unknown noise kind {kind!r}")


@dataclass
class SimulationConfig:
    n_scenes: int = 10
    seed: int = 0
    duration_s: float = 1.0
    noise_duration_s: float = 2.0
    snr_db: float = 5.0
    snr_spread_db: float = 0.0
    noise_kind: str = "white"
    ref_channel: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    azimuth_deg: float | None = None
    elevation_deg: float | None = None

    def __post_init__(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if self.duration_s <= 0 or self.noise_duration_s < self.duration_s:
            raise ValueError("need 0 < duration_s <= noise_duration_s")


def simulate_scene(cfg: SimulationConfig, geom: ArrayGeometry, index: int) -> Scene:
    """Scene ``index`` of a dataset; its random stream derives from (seed, index)."""
    rng = derive_rng(cfg.seed, index)
    length = int(round(cfg.duration_s * cfg.sample_rate))
    if cfg.azimuth_deg is not None and cfg.elevation_deg is not None:
        doa = direction_from_angles(cfg.azimuth_deg, cfg.elevation_deg)
    else:
        v = rng.standard_normal(3)
        doa = v / np.linalg.norm(v)
    snr = cfg.snr_db + (rng.uniform(-cfg.snr_spread_db, cfg.snr_spread_db) if cfg.snr_spread_db else 0.0)
    src = speech_like(rng, length, cfg.sample_rate)
    noise = multichannel_noise(rng, cfg.noise_kind, geom.n_channels,
                               int(round(cfg.noise_duration_s * cfg.sample_rate)), geom, cfg.sample_rate)
    scene = make_scene(src, noise, geom, doa, snr, cfg.ref_channel, rng, cfg.sample_rate)
    scene.meta = {"index": index, "seed": cfg.seed}
    return scene


def simulate(cfg: SimulationConfig, geom: ArrayGeometry) -> list[Scene]:
    return [simulate_scene(cfg, geom, i) for i in range(cfg.n_scenes)]


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def write_dataset(out_dir: str | Path, scenes: Sequence[Scene], config: dict | None = None) -> Path:
    """One directory: ``<id>_mix.wav``, ``<id>_clean.wav``, ``<id>_noise.wav`` per
    scene (32-bit float) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scenes):
        sid = f"scene_{i:05d}"
        for part in ("mix", "clean", "noise"):
            data = s.mixture if part == "mix" else getattr(s, part)
            write_wav(out / f"{sid}_{part}.wav", MultiChannelWaveform(data, s.sample_rate))
        az = float(np.degrees(np.arctan2(s.source_doa[1], s.source_doa[0])) % 360.0)
        el = float(np.degrees(np.arcsin(np.clip(s.source_doa[2], -1, 1))))
        entries.append({
            "id": sid,
            "mixture": f"{sid}_mix.wav",
            "clean": f"{sid}_clean.wav",
            "noise": f"{sid}_noise.wav",
            "doa": [float(v) for v in s.source_doa],
            "azimuth_deg": az,
            "elevation_deg": el,
            "snr_db": s.snr_db,
            "ref_channel": s.ref_channel,
            "seed": s.meta.get("seed"),
            "index": s.meta.get("index", i),
            "sample_rate": s.sample_rate,
            "n_channels": int(s.mixture.shape[0]),
            "length": int(s.mixture.shape[1]),
        })
    manifest = {"version": MANIFEST_VERSION, "config": config or {}, "scenes": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION or "scenes" not in doc:
        raise ValueError(f"{path}: not a version-{MANIFEST_VERSION} scene manifest")
    return doc


def load_dataset(path: str | Path) -> list[Scene]:
    """Read scenes back from a manifest (or its directory)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    scenes = []
    for e in read_manifest(path)["scenes"]:
        mix = read_wav(root / e["mixture"])
        clean = read_wav(root / e["clean"])
        noise = read_wav(root / e["noise"])
        scenes.append(Scene(clean.data, noise.data, mix.data, np.asarray(e["doa"]), e["snr_db"],
                            e["ref_channel"], mix.sample_rate, {"id": e["id"], "seed": e.get("seed")}))
    return scenes
