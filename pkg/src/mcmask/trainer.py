"""Negative-SDR training of a :class:`~mcmask.masking.SeparationModel`."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .framing import segment
from .masking import SeparationModel, pipeline, separate
from .metrics import sdr

log = logging.getLogger(__name__)

SDR_DELTA = 1e-9


class TrainingDiverged(nx.NumericalError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 50
    batch_size: int = 8
    segment_seconds: float = 3.0
    sample_rate: int = 16000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("learning_rate and epochs must be non-negative")
        if self.batch_size < 1 or self.segment_seconds <= 0 or self.sample_rate <= 0:
            raise ValueError("batch_size, segment_seconds and sample_rate must be positive")

    @property
    def segment_length(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))


@dataclass
class Checkpoint:
    model: SeparationModel
    epoch: int
    validation_loss: float
    history: list[dict] = field(default_factory=list)


def sdr_loss(est, ref, delta: float = SDR_DELTA):
    """Graph-recordable ``-10 log10(sum(ref^2) / (sum((ref - est)^2) + delta))``."""
    return nx.sdr_loss(est, ref, delta)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    """Crop or zero-pad the last axis to ``length`` samples."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] >= length:
        return x[..., :length].copy()
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])]
    return np.pad(x, pad)


def loss_graph(model: SeparationModel, mixtures: np.ndarray, refs: np.ndarray):
    """Record the batched forward pass and its mean negative SDR on a fresh graph.

    ``mixtures`` is (B, C, L) and ``refs`` is (B, L); all utterances share L so
    their frames are stacked side by side along the frame axis.
    Returns ``(graph, loss_var, {param_name: Var})``.
    """
    mixtures = np.asarray(mixtures, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    B, C, L = mixtures.shape
    g = nx.Graph()
    params = {k: g.leaf(v, trainable=True, name=k) for k, v in model.parameters().items()}
    frames = [np.concatenate([segment(mixtures[b, c], model.frame_length, model.hop).frames
                              for b in range(B)], axis=1) for c in range(C)]
    out_frames, _ = pipeline(model, frames, params)
    est = nx.overlap_add(out_frames, model.hop, L, batch=B)
    loss = sdr_loss(est, refs if B > 1 else refs[0])
    return g, loss, params


def batch_gradients(model: SeparationModel, mixtures, refs) -> tuple[float, dict[str, np.ndarray]]:
    g, loss, params = loss_graph(model, mixtures, refs)
    grads = nx.backward(g, loss)
    return float(loss.value), {k: grads[v.id] for k, v in params.items()}


def validation_loss(model: SeparationModel, dataset: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean negative SDR (with the loss stabiliser) over full-length utterances."""
    losses = [float(sdr_loss(separate(model, mix), ref)) for mix, ref in dataset]
    return float(np.mean(losses))


def mean_sdr(model: SeparationModel, dataset: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    return float(np.mean([sdr(ref, separate(model, mix)) for mix, ref in dataset]))


def train(model: SeparationModel, train_set: Sequence[tuple[np.ndarray, np.ndarray]],
          val_set: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Adam on mean negative SDR with per-epoch shuffled mini-batches.

    Each training utterance is cropped or zero-padded to ``cfg.segment_seconds``.
    Validation uses full utterances. The initial model counts as epoch 0 and the
    checkpoint with the lowest validation loss is returned. ``model`` is updated
    in place to the final (not necessarily best) parameters.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    channels = {np.atleast_2d(m).shape[0] for m, _ in list(train_set) + list(val_set)}
    if channels != {model.n_channels}:
        raise ValueError(f"dataset channel counts {sorted(channels)} do not match model C={model.n_channels}")

    L = cfg.segment_length
    mixes = np.stack([fit_length(np.atleast_2d(m), L) for m, _ in train_set])
    refs = np.stack([fit_length(r, L) for _, r in train_set])
    rng = nx.make_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    val = validation_loss(model, val_set)
    history = [{"epoch": 0, "train_loss": None, "val_loss": val}]
    if on_epoch:
        on_epoch(history[-1])
    best = Checkpoint(copy.deepcopy(model), 0, val)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(mixes))
        losses = []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = batch_gradients(model, mixes[idx], refs[idx])
            except nx.NumericalError as e:
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: {e}") from e
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: loss {loss}")
            model.set_parameters(opt.step(model.parameters(), grads))
            losses.append(loss)
        try:
            val = validation_loss(model, val_set)
        except nx.NumericalError as e:
            raise TrainingDiverged(f"epoch {epoch}, validation: {e}") from e
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val}
        history.append(record)
        log.info("epoch %d train %.3f val %.3f", epoch, record["train_loss"], val)
        if on_epoch:
            on_epoch(record)
        if val < best.validation_loss:
            best = Checkpoint(copy.deepcopy(model), epoch, val)
    best.history = history
    return best


def write_log(path, history: Sequence[dict]) -> None:
    """One JSON object per line: epoch, train_loss, val_loss."""
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
