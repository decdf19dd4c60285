"""Multi-channel masking in the filterbank domain.

Each channel c is encoded to ``X_c`` (F x N), a mask ``M_c`` of the same shape
is estimated, and the masked channels are summed::

    S_hat = sum_c M_c * X_c

which is a filter-and-sum beamformer whose weights live in the learned
transform domain. Masks are unconstrained reals. The single-channel baseline
uses one mask applied to the reference channel only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .filterbank import DecoderBank, EncoderBank, init_dft, init_random, pseudo_inverse_decoder
from .framing import MultiChannelWaveform, segment

MODEL_FORMAT_VERSION = 1
DEFAULT_PRELU_SLOPE = 0.25


@dataclass
class MaskEstimator:
    """Pointwise per-mask network over the stacked channel representations.

    ``weights[k][l]`` / ``biases[k][l]`` are layer ``l`` of the branch producing
    mask ``k``; ``slopes[k][l]`` is the PReLU slope after layer ``l`` (every layer
    but the last). The input to every branch is all C representations stacked
    along the feature axis (C*F rows).
    """

    weights: list[list[np.ndarray]]
    biases: list[list[np.ndarray]]
    slopes: list[list[float]]

    @property
    def n_masks(self) -> int:
        return len(self.weights)

    @property
    def in_features(self) -> int:
        return self.weights[0][0].shape[1]

    @property
    def out_features(self) -> int:
        return self.weights[0][-1].shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, n_masks: int, in_features: int, out_features: int,
             hidden: Sequence[int] = ()) -> "MaskEstimator":
        sizes = [in_features, *hidden, out_features]
        weights, biases, slopes = [], [], []
        for _ in range(n_masks):
            ws, bs = [], []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
                bs.append(np.zeros((fan_out, 1)))
            weights.append(ws)
            biases.append(bs)
            slopes.append([DEFAULT_PRELU_SLOPE] * len(hidden))
        return cls(weights, biases, slopes)

    @classmethod
    def identity(cls, C: int, F: int) -> "MaskEstimator":
        """Single-layer estimator whose mask ``c`` is exactly ``X_c``."""
        weights = []
        for c in range(C):
            W = np.zeros((F, C * F))
            W[:, c * F:(c + 1) * F] = np.eye(F)
            weights.append([W])
        return cls(weights, [[np.zeros((F, 1))] for _ in range(C)], [[] for _ in range(C)])


@dataclass
class SeparationModel:
    encoder: EncoderBank
    estimator: MaskEstimator
    decoder: DecoderBank
    ref_channel: int = 0
    frame_length: int = 64
    hop: int = 32
    n_channels: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, F = self.frame_length, self.encoder.n_features
        if self.encoder.frame_length != T:
            raise ValueError(f"encoder frame length {self.encoder.frame_length} != {T}")
        if not self.encoder.shared and self.encoder.matrices.shape[0] != self.n_channels:
            raise ValueError("per-channel encoder count does not match n_channels")
        if self.decoder.matrix.shape != (T, F):
            raise ValueError(f"decoder shape {self.decoder.matrix.shape} != {(T, F)}")
        if self.estimator.in_features != self.n_channels * F or self.estimator.out_features != F:
            raise ValueError("mask estimator dimensions do not match C*F -> F")
        if self.estimator.n_masks not in (1, self.n_channels):
            raise ValueError("estimator must produce 1 or C masks")
        if not 0 <= self.ref_channel < self.n_channels:
            raise ValueError(f"reference channel {self.ref_channel} outside 0..{self.n_channels - 1}")
        if not 1 <= self.hop <= T:
            raise ValueError(f"hop {self.hop} outside 1..{T}")

    @property
    def n_features(self) -> int:
        return self.encoder.n_features

    @property
    def mask_mode(self) -> str:
        return "single" if self.estimator.n_masks == 1 and self.n_channels > 1 else "multi"

    # parameters are addressed by flat names so optimizers and checkpoints share one view
    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"encoder.{i}": U for i, U in enumerate(self.encoder.matrices)}
        params["decoder"] = self.decoder.matrix
        for k, (ws, bs, ss) in enumerate(zip(self.estimator.weights, self.estimator.biases,
                                             self.estimator.slopes)):
            for l, (W, b) in enumerate(zip(ws, bs)):
                params[f"est.{k}.W{l}"] = W
                params[f"est.{k}.b{l}"] = b
            for l, a in enumerate(ss):
                params[f"est.{k}.a{l}"] = np.asarray([a], dtype=np.float64)
        return params

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        n_banks = self.encoder.matrices.shape[0]
        self.encoder.matrices = np.stack([np.asarray(params[f"encoder.{i}"], dtype=np.float64)
                                          for i in range(n_banks)])
        self.decoder.matrix = np.asarray(params["decoder"], dtype=np.float64)
        est = self.estimator
        for k in range(est.n_masks):
            for l in range(len(est.weights[k])):
                est.weights[k][l] = np.asarray(params[f"est.{k}.W{l}"], dtype=np.float64)
                est.biases[k][l] = np.asarray(params[f"est.{k}.b{l}"], dtype=np.float64)
            for l in range(len(est.slopes[k])):
                est.slopes[k][l] = float(np.asarray(params[f"est.{k}.a{l}"]).reshape(-1)[0])


def init_model(rng: np.random.Generator, C: int, F: int, T: int, hop: int | None = None,
               hidden: Sequence[int] | None = None, mask_mode: str = "multi",
               encoder: str = "random", shared_encoder: bool = False,
               ref_channel: int = 0) -> SeparationModel:
    """Randomly initialised model; the decoder starts as the pseudo-inverse of the
    reference channel's encoder so that an all-ones reference mask is near identity."""
    hop = T // 2 if hop is None else hop
    hidden = [F] if hidden is None else list(hidden)
    if encoder == "dft":
        if F != T:
            raise ValueError("DFT encoder needs F == T")
        bank = init_dft(T) if shared_encoder or C == 1 else init_dft(T, C)
    elif encoder == "random":
        bank = init_random(rng, C, F, T, shared=shared_encoder)
    else:
        raise ValueError(f"unknown encoder init {encoder!r}")
    dec = pseudo_inverse_decoder(bank.matrix(ref_channel))
    if mask_mode not in ("multi", "single"):
        raise ValueError(f"mask_mode must be 'multi' or 'single', got {mask_mode!r}")
    n_masks = C if mask_mode == "multi" else 1
    est = MaskEstimator.init(rng, n_masks, C * F, F, hidden)
    return SeparationModel(bank, est, dec, ref_channel, T, hop, C,
                           meta={"mask_mode": mask_mode, "hidden": hidden})


# ---------------------------------------------------------------------------
# core operations; each accepts plain arrays or numerics.Var handles
# ---------------------------------------------------------------------------

def filter_and_sum(masks: Sequence, reps: Sequence):
    """``sum_c masks[c] * reps[c]``, accumulated in ascending channel order."""
    if len(masks) != len(reps):
        raise ValueError(f"{len(masks)} masks for {len(reps)} channel representations")
    return nx.sum_channels([nx.ewise("mul", m, x) for m, x in zip(masks, reps)])


def single_channel_mask(mask, rep):
    return nx.ewise("mul", mask, rep)


def estimate_masks(est: MaskEstimator, reps: Sequence, params: dict | None = None):
    """Run the estimator on the stacked representations; returns one mask per branch.

    ``params`` optionally supplies replacement tensors (e.g. graph Vars) keyed by
    the names used in :meth:`SeparationModel.parameters`.
    """
    stacked = nx.concat(list(reps), axis=0)
    n = stacked.shape[1]
    if stacked.shape[0] != est.in_features:
        raise ValueError(f"estimator expects {est.in_features} input features, got {stacked.shape[0]}")
    ones = np.ones((1, n))
    masks = []
    for k in range(est.n_masks):
        h = stacked
        n_layers = len(est.weights[k])
        for l in range(n_layers):
            W = est.weights[k][l] if params is None else params[f"est.{k}.W{l}"]
            b = est.biases[k][l] if params is None else params[f"est.{k}.b{l}"]
            h = nx.ewise("add", nx.matmul(W, h), nx.matmul(b, ones))
            if l < n_layers - 1:
                a = est.slopes[k][l] if params is None else params[f"est.{k}.a{l}"]
                h = nx.ewise("prelu", h, alpha=a)
        masks.append(h)
    return masks


def oracle_masks(reps: np.ndarray, target: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Minimum-norm masks solving ``sum_c M_c X_c = S`` independently per bin.

    ``M_c = X_c S / sum_c' X_c'^2`` where the denominator exceeds ``eps``, else 0.
    """
    reps = np.asarray(reps, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if reps.shape[1:] != target.shape:
        raise ValueError(f"representation shape {reps.shape[1:]} != target shape {target.shape}")
    den = np.sum(reps * reps, axis=0)
    active = den > eps
    scale = np.divide(target, den, out=np.zeros_like(target), where=active)
    return reps * scale[None]


def _encoder_matrix(model: SeparationModel, c: int, params):
    if params is None:
        return model.encoder.matrix(c)
    return params[f"encoder.{0 if model.encoder.shared else c}"]


def pipeline(model: SeparationModel, frames: Sequence, params: dict | None = None,
             masks=None):
    """Encode, mask and filter-and-sum; returns (decoded frames, masks).

    ``frames[c]`` is a (T, N) frame matrix for channel c. Works eagerly on arrays
    or records onto a graph when ``params`` holds Vars.
    """
    if len(frames) != model.n_channels:
        raise ValueError(f"model expects {model.n_channels} channels, got {len(frames)}")
    reps = [nx.matmul(_encoder_matrix(model, c, params), frames[c]) for c in range(model.n_channels)]
    if masks is None:
        masks = estimate_masks(model.estimator, reps, params)
    if len(masks) == 1:
        summed = single_channel_mask(masks[0], reps[model.ref_channel])
    else:
        summed = filter_and_sum(masks, reps)
    V = model.decoder.matrix if params is None else params["decoder"]
    return nx.matmul(V, summed), masks


def encode_channels(model: SeparationModel, mix: np.ndarray) -> np.ndarray:
    """(C, F, N) stack of per-channel representations of a (C, L) mixture."""
    mix = np.atleast_2d(mix)
    return np.stack([model.encoder.matrix(c) @ segment(mix[c], model.frame_length, model.hop).frames
                     for c in range(mix.shape[0])])


def separate(model: SeparationModel, mix, masks: np.ndarray | None = None) -> np.ndarray:
    """Estimate the reference-channel clean signal from a (C, L) mixture.

    ``masks`` (C x F x N, or 1 x F x N) bypasses the estimator, e.g. for oracle
    or frozen masks. The output has the same length as the input.
    """
    data = mix.data if isinstance(mix, MultiChannelWaveform) else np.atleast_2d(np.asarray(mix, float))
    if data.shape[0] != model.n_channels:
        raise ValueError(f"model expects {model.n_channels} channels, mixture has {data.shape[0]}")
    length = data.shape[1]
    try:
        frames = [segment(data[c], model.frame_length, model.hop).frames for c in range(data.shape[0])]
    except ValueError as e:
        raise ValueError(f"segment: {e}") from e
    if masks is not None:
        masks = list(np.asarray(masks, dtype=np.float64))
        if masks[0].shape != (model.n_features, frames[0].shape[1]):
            raise ValueError(f"mask shape {masks[0].shape} != {(model.n_features, frames[0].shape[1])}")
    try:
        out_frames, _ = pipeline(model, frames, masks=masks)
        return nx.overlap_add(out_frames, model.hop, length)
    except nx.NumericalError as e:
        raise nx.NumericalError(f"separate: {e}") from e


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def save_model(path: str | Path, model: SeparationModel, extra: dict | None = None) -> None:
    """Bundle encoder, estimator, decoder and frame config in one ``.npz`` container."""
    meta = {
        "version": MODEL_FORMAT_VERSION,
        "frame_length": model.frame_length,
        "hop": model.hop,
        "n_features": model.n_features,
        "n_channels": model.n_channels,
        "ref_channel": model.ref_channel,
        "shared_encoder": model.encoder.shared,
        "n_masks": model.estimator.n_masks,
        "layers": [len(ws) for ws in model.estimator.weights],
        **({"extra": extra} if extra else {}),
    }
    arrays = {k: v for k, v in model.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> tuple[SeparationModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {meta.get('version')}")
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    weights, biases, slopes = [], [], []
    for k, n_layers in enumerate(meta["layers"]):
        weights.append([arrays[f"est.{k}.W{l}"] for l in range(n_layers)])
        biases.append([arrays[f"est.{k}.b{l}"] for l in range(n_layers)])
        slopes.append([float(arrays[f"est.{k}.a{l}"][0]) for l in range(n_layers - 1)])
    model = SeparationModel(
        EncoderBank(np.stack([arrays[f"encoder.{i}"] for i in range(1 if meta["shared_encoder"]
                                                                    else meta["n_channels"])]),
                    shared=meta["shared_encoder"]),
        MaskEstimator(weights, biases, slopes),
        DecoderBank(arrays["decoder"]),
        ref_channel=meta["ref_channel"],
        frame_length=meta["frame_length"],
        hop=meta["hop"],
        n_channels=meta["n_channels"],
    )
    return model, meta
