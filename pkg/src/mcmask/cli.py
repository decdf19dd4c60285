"""``mcmask`` command-line interface.

Subcommands: simulate, train, separate, beampattern, metrics.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import beamforming as bf
from .framing import MultiChannelWaveform, segment
from .masking import init_model, load_model, oracle_masks, save_model, separate, encode_channels
from .metrics import MetricReport
from .mixture import SimulationConfig, load_dataset, simulate, write_dataset
from .numerics import NumericalError, make_rng
from .trainer import TrainConfig, train, write_log
from .wavio import WavError, read_wav, write_wav

log = logging.getLogger("mcmask")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULT_MODEL = {
    "frame_length": 64,
    "hop": None,
    "n_features": 64,
    "hidden": None,
    "mask_mode": "multi",
    "encoder": "random",
    "shared_encoder": False,
    "ref_channel": 0,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except OSError as e:
        raise ConfigError(f"{p}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return doc, p.parent


def _section(cfg: dict, name: str, cls, overrides: dict):
    raw = dict(cfg.get(name) or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _geometry(cfg: dict, base: Path, override: str | None) -> bf.ArrayGeometry:
    ref = override or cfg.get("geometry")
    if ref is None:
        raise ConfigError("geometry: no geometry file given")
    path = Path(ref)
    if not path.is_absolute() and override is None:
        path = base / path
    try:
        return bf.load_geometry(path)
    except bf.GeometryError as e:
        raise ConfigError(f"geometry file {path}: field {e}") from e
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"geometry file {path}: {e}") from e


def _model_cfg(cfg: dict) -> dict:
    raw = dict(DEFAULT_MODEL)
    extra = set(cfg.get("model") or {}) - set(raw)
    if extra:
        raise ConfigError(f"model: unknown field(s) {sorted(extra)}")
    raw.update(cfg.get("model") or {})
    for key in ("frame_length", "n_features"):
        if not isinstance(raw[key], int) or raw[key] < 1:
            raise ConfigError(f"model: {key} must be a positive integer")
    if raw["mask_mode"] not in ("multi", "single"):
        raise ConfigError("model: mask_mode must be 'multi' or 'single'")
    return raw


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, base = load_config(args.config)
    sim = _section(cfg, "simulate", SimulationConfig,
                   {"n_scenes": args.n_scenes, "seed": args.seed, "snr_db": args.snr_db})
    geom = _geometry(cfg, base, args.geometry)
    scenes = simulate(sim, geom)
    try:
        path = write_dataset(args.out, scenes, {"simulate": asdict(sim), "geometry": geom.positions.tolist(),
                                                "speed_of_sound": geom.speed_of_sound})
    except OSError as e:
        raise DataError(f"{args.out}: {e}") from e
    print(f"wrote {len(scenes)} scenes to {path}")
    return 0


def _pairs(scenes):
    return [s.training_pair() for s in scenes]


def cmd_train(args) -> int:
    cfg, _ = load_config(args.config)
    tcfg_raw = dict(cfg.get("train") or {})
    val_fraction = float(tcfg_raw.pop("val_fraction", 0.1))
    tcfg = _section({"train": tcfg_raw}, "train", TrainConfig,
                    {"epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
                     "seed": args.seed})
    mcfg = _model_cfg(cfg)
    try:
        scenes = load_dataset(args.dataset)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"dataset {args.dataset}: {e}") from e
    if len(scenes) < 2:
        raise DataError("dataset needs at least two scenes (train + validation)")
    n_val = max(1, int(round(val_fraction * len(scenes))))
    train_set, val_set = _pairs(scenes[:-n_val]), _pairs(scenes[-n_val:])
    C = scenes[0].mixture.shape[0]
    if scenes[0].sample_rate != tcfg.sample_rate:
        tcfg.sample_rate = scenes[0].sample_rate
    try:
        model = init_model(make_rng(mcfg["seed"]), C, mcfg["n_features"], mcfg["frame_length"],
                           hop=mcfg["hop"], hidden=mcfg["hidden"], mask_mode=mcfg["mask_mode"],
                           encoder=mcfg["encoder"], shared_encoder=mcfg["shared_encoder"],
                           ref_channel=mcfg["ref_channel"])
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e
    history = []

    def on_epoch(rec):
        history.append(rec)
        log.info("epoch %(epoch)s val_loss %(val_loss).4f", rec)

    ckpt = train(model, train_set, val_set, tcfg, on_epoch)
    out = Path(args.out)
    save_model(out, ckpt.model, extra={
        "epoch": ckpt.epoch,
        "validation_loss": ckpt.validation_loss,
        "train": asdict(tcfg),
        "model": mcfg,
        "dataset": str(args.dataset),
    })
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    write_log(log_path, history)
    print(f"best epoch {ckpt.epoch}, validation loss {ckpt.validation_loss:.3f} dB -> {out}")
    return 0


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"checkpoint {path}: {e}") from e


def _read(path) -> MultiChannelWaveform:
    try:
        return read_wav(path)
    except (WavError, OSError) as e:
        raise DataError(str(e)) from e


def _oracle_for(model, mixture: np.ndarray, clean_ref: np.ndarray) -> np.ndarray:
    reps = encode_channels(model, mixture)
    frames = segment(clean_ref, model.frame_length, model.hop).frames
    target = model.encoder.matrix(model.ref_channel) @ frames
    return oracle_masks(reps, target)


def cmd_separate(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    mix = _read(args.input)
    if mix.n_channels != model.n_channels:
        raise DataError(f"{args.input}: {mix.n_channels} channels, model expects {model.n_channels}")
    masks = None
    if args.oracle_clean:
        clean = _read(args.oracle_clean)
        if clean.data.shape != mix.data.shape:
            raise DataError("oracle clean signal must match the mixture's shape")
        masks = _oracle_for(model, mix.data, clean.data[model.ref_channel])
    try:
        est = separate(model, mix, masks=masks)
    except ValueError as e:
        raise DataError(str(e)) from e
    write_wav(args.output, MultiChannelWaveform(est[None], mix.sample_rate))
    return 0


def cmd_beampattern(args) -> int:
    cfg, base = load_config(args.config)
    bcfg = dict(cfg.get("beampattern") or {})
    f = float(args.frequency if args.frequency is not None else bcfg.get("frequency_hz", 1000.0))
    K = int(args.K if args.K is not None else bcfg.get("K", 5100))
    fs = int(cfg.get("sample_rate", 16000))
    duration = float(args.duration if args.duration is not None else bcfg.get("duration_s", 1.0))
    if not 0 < f < fs / 2:
        raise ConfigError(f"frequency {f} Hz must lie below Nyquist ({fs / 2} Hz)")
    if K < 1:
        raise ConfigError("K must be >= 1")
    mode = args.mode
    grid = bf.make_grid(K)
    exclude = int(args.exclude_edges if args.exclude_edges is not None else bcfg.get("exclude_edges", 128))

    if mode == "model":
        if not args.checkpoint or not args.scene:
            raise ConfigError("model mode needs --checkpoint and --scene")
        model, _ = _load_checkpoint(args.checkpoint)
        scene_dir, _, idx = args.scene.partition(":")
        try:
            scene = load_dataset(scene_dir)[int(idx or 0)]
        except (OSError, ValueError, KeyError, IndexError) as e:
            raise DataError(f"scene {args.scene}: {e}") from e
        if args.geometry is None and cfg.get("geometry") is None:
            geom = bf.ArrayGeometry(np.asarray(
                json.loads((Path(scene_dir) / "manifest.json").read_text())["config"]["geometry"]))
        else:
            geom = _geometry(cfg, base, args.geometry)
        masks = _oracle_for(model, scene.mixture, scene.clean[model.ref_channel])
        duration = scene.mixture.shape[1] / scene.sample_rate
        fs = scene.sample_rate
        exclude = int(args.exclude_edges if args.exclude_edges is not None else 2 * model.frame_length)
        system = bf.masking_system(model, masks)
        desc = f"oracle-mask filter-and-sum ({args.checkpoint}, scene {args.scene})"
    else:
        geom = _geometry(cfg, base, args.geometry)
        if mode == "das":
            az = args.steer_azimuth if args.steer_azimuth is not None else bcfg.get("steer_azimuth_deg", 0.0)
            el = args.steer_elevation if args.steer_elevation is not None else bcfg.get("steer_elevation_deg", 0.0)
            steer = bf.direction_from_angles(float(az), float(el))
            system = bf.das_system(geom, steer)
            desc = f"delay-and-sum steered to azimuth {az} deg, elevation {el} deg"
        else:
            def system(mix):
                return mix.data[0]
            desc = "pass-through of channel 0"
    try:
        bp = bf.beampattern_sweep(system, grid, f, duration, geom, fs, exclude, workers=args.workers,
                                  description=desc)
    except ValueError as e:
        raise DataError(str(e)) from e
    bp.meta["config"] = cfg
    bp.to_csv(args.out)
    if args.json:
        bp.to_json(args.json)
    print(f"wrote {K} directions to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    report = MetricReport()
    if args.dataset:
        if not args.checkpoint:
            raise ConfigError("--dataset needs --checkpoint")
        model, _ = _load_checkpoint(args.checkpoint)
        try:
            scenes = load_dataset(args.dataset)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"dataset {args.dataset}: {e}") from e
        for i, s in enumerate(scenes):
            mix, ref = s.training_pair()
            report.add(s.meta.get("id", str(i)), ref, separate(model, mix))
    else:
        if not (args.reference and args.estimate):
            raise ConfigError("give --reference and --estimate, or --dataset and --checkpoint")
        ref, est = _read(args.reference), _read(args.estimate)
        try:
            report.add(Path(args.estimate).name, ref.data[args.channel], est.data[0])
        except (ValueError, IndexError) as e:
            raise DataError(str(e)) from e
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcmask", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene dataset")
    s.add_argument("--config")
    s.add_argument("--geometry")
    s.add_argument("--out", required=True)
    s.add_argument("--n-scenes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--snr-db", type=float)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a separation model with the negative-SDR loss")
    t.add_argument("--config")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("separate", help="run a checkpoint on a multi-channel WAV")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--oracle-clean", help="multi-channel clean WAV; use oracle masks instead of the estimator")
    r.set_defaults(func=cmd_separate)

    b = sub.add_parser("beampattern", help="measure a spatial power response over a direction grid")
    b.add_argument("--mode", choices=["das", "model", "passthrough"], default="das")
    b.add_argument("--config")
    b.add_argument("--geometry")
    b.add_argument("--checkpoint")
    b.add_argument("--scene", help="DATASET_DIR[:INDEX] providing the reference masks (model mode)")
    b.add_argument("--frequency", type=float)
    b.add_argument("--K", type=int)
    b.add_argument("--duration", type=float)
    b.add_argument("--steer-azimuth", type=float)
    b.add_argument("--steer-elevation", type=float)
    b.add_argument("--exclude-edges", type=int)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True)
    b.add_argument("--json")
    b.set_defaults(func=cmd_beampattern)

    m = sub.add_parser("metrics", help="SDR / SI-SDR report")
    m.add_argument("--reference")
    m.add_argument("--estimate")
    m.add_argument("--channel", type=int, default=0, help="reference channel to compare against")
    m.add_argument("--dataset")
    m.add_argument("--checkpoint")
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
