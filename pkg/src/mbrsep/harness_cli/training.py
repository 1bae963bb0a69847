"""Training configuration, learning-rate schedule and the Adam training loop."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..dsp_pipeline import SAMPLE_RATE, AudioError, load_audio, padded_stft, segment
from ..model_zoo import ModelSpec, WeightSet, backward, build, forward, init_weights, predict
from ..tensor_engine import AdamState, EngineError, adam_step, mse_loss
from .checkpoint import Checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "mbr-fcn"
    batch_size: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_patience_epochs: int = 3
    plateau_factor: float = 0.1
    max_epochs: int = 30
    seed: int = 0
    patch_frames: int = 29
    patch_hop: int = 29
    # relative improvement of the best validation loss that resets patience
    plateau_threshold: float = 1e-6
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    normalize: bool = False

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience_epochs < 1:
            raise ValueError("plateau_patience_epochs must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.patch_hop < 1 or self.patch_frames < 1:
            raise ValueError("patch_frames and patch_hop must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, learning_rate: float, factor: float = 0.1, patience: int = 3, threshold: float = 1e-6):
        self.learning_rate = learning_rate
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = float("inf")
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold) or self.best == float("inf"):
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.learning_rate *= self.factor
                self.stale = 0
        return self.learning_rate


# ---------------------------------------------------------------------------
# data


def read_manifest(path) -> tuple[dict, Path]:
    """Parse a manifest and check every referenced file; returns (manifest, base dir)."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    base = path.parent
    rate = manifest.get("sample_rate", SAMPLE_RATE)
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: manifest sample_rate {rate} != {SAMPLE_RATE}")
    for i, entry in enumerate(manifest.get("entries", [])):
        entry.setdefault("song_id", f"song_{i:03d}")
        if entry.get("split") not in ("train", "valid", "test"):
            raise ValueError(f"{path}: entry {entry['song_id']} has invalid split {entry.get('split')!r}")
        for key in ("mixture_path", "vocal_stem_path"):
            if not (base / entry[key]).is_file():
                raise FileNotFoundError(f"{path}: {entry['song_id']} {key} {entry[key]} does not exist")
    return manifest, base


def split_entries(manifest: dict, split: str) -> list[dict]:
    return [e for e in manifest["entries"] if e["split"] == split]


def _magnitude(path) -> tuple[np.ndarray, float]:
    clip = load_audio(path)
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioError(f"{path}: sample rate {clip.sample_rate} != {SAMPLE_RATE}")
    return padded_stft(clip).magnitude, float(np.max(np.abs(clip.samples)))


def song_patches(entry: dict, base: Path, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    mix, peak = _magnitude(base / entry["mixture_path"])
    voc, _ = _magnitude(base / entry["vocal_stem_path"])
    if mix.shape != voc.shape:
        raise AudioError(f"{entry['song_id']}: mixture and vocal stem lengths differ")
    if config.normalize and peak > 0:
        mix, voc = mix / peak, voc / peak
    x = segment(mix, config.patch_frames, config.patch_hop, "train").patches
    y = segment(voc, config.patch_frames, config.patch_hop, "train").patches
    return x, y


def load_split(manifest: dict, base: Path, split: str, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    entries = split_entries(manifest, split)
    if not entries:
        raise TrainingError(f"the {split} split is empty")
    pairs = [song_patches(e, base, config) for e in entries]
    return (np.concatenate([p[0] for p in pairs]).astype(np.float32),
            np.concatenate([p[1] for p in pairs]).astype(np.float32))


# ---------------------------------------------------------------------------
# optimisation


def make_optimizer(weights: WeightSet, config: TrainConfig) -> dict[str, AdamState]:
    return {k: AdamState.like(v, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
                              learning_rate=config.learning_rate)
            for k, v in weights.trainables().items()}


def train_step(spec: ModelSpec, weights: WeightSet, adam: dict[str, AdamState], x: np.ndarray, y: np.ndarray,
               step: int) -> float:
    """Forward, backward and one Adam update on a batch; returns the pre-update loss."""
    try:
        out, trace = forward(spec, weights, x[:, None], "train")
        loss, grad = mse_loss(out, y[:, None])
        grads = backward(spec, weights, trace, grad)
        for name, param in weights.trainables().items():
            adam_step(param, grads[name], adam[name])
    except EngineError as exc:
        raise TrainingError(f"training aborted at step {step}: {exc}") from exc
    return loss


def evaluate_loss(spec: ModelSpec, weights: WeightSet, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    """Inference-mode MSE over all patches."""
    pred = predict(spec, weights, x, batch_size)
    return float(np.mean(np.square(pred.astype(np.float64) - y)))


def fit_batch(spec: ModelSpec, weights: WeightSet, x: np.ndarray, y: np.ndarray, steps: int = 500,
              learning_rate: float = 1e-4, stop_ratio: Optional[float] = None) -> list[float]:
    """Repeated Adam steps on one fixed batch; stops early once loss <= first/stop_ratio."""
    config = TrainConfig(model=spec.name, learning_rate=learning_rate)
    adam = make_optimizer(weights, config)
    losses = []
    for step in range(1, steps + 1):
        losses.append(train_step(spec, weights, adam, x, y, step))
        if stop_ratio and losses[-1] <= losses[0] / stop_ratio:
            break
    return losses


@dataclass
class TrainResult:
    spec: ModelSpec
    checkpoint: Checkpoint
    history: list[dict]


def train(config: TrainConfig, manifest_path, out_path=None, spec: Optional[ModelSpec] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on the manifest's train split, keeping the weights with the best validation loss."""
    manifest, base = read_manifest(manifest_path)
    spec = spec or build(config.model)
    if spec.frames != config.patch_frames:
        raise ValueError(f"{spec.name} expects {spec.frames}-frame patches, config has {config.patch_frames}")
    x_train, y_train = load_split(manifest, base, "train", config)
    x_valid, y_valid = load_split(manifest, base, "valid", config)
    log.info("train patches %d, valid patches %d", len(x_train), len(x_valid))

    weights = init_weights(spec, config.seed, np.float32, config.bn_momentum, config.bn_epsilon)
    adam = make_optimizer(weights, config)
    scheduler = PlateauScheduler(config.learning_rate, config.plateau_factor, config.plateau_patience_epochs,
                                 config.plateau_threshold)
    rng = np.random.default_rng(config.seed)
    best = Checkpoint(config.model, weights.copy(), None, 0, float("inf"), config.to_dict())
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        lr = scheduler.learning_rate
        for state in adam.values():
            state.learning_rate = lr
        order = rng.permutation(len(x_train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            step += 1
            losses.append(train_step(spec, weights, adam, x_train[idx], y_train[idx], step))
        valid = evaluate_loss(spec, weights, x_valid, y_valid)
        if not np.isfinite(valid):
            raise TrainingError(f"non-finite validation loss after step {step}")
        record = {"epoch": epoch, "step": step, "learning_rate": lr, "train_loss": float(np.mean(losses)),
                  "valid_loss": valid, "seconds": time.perf_counter() - started}
        history.append(record)
        log.info("epoch %d  lr %.3g  train %.6g  valid %.6g", epoch, lr, record["train_loss"], valid)
        if valid < best.best_val_loss:
            best = Checkpoint(config.model, weights.copy(), copy.deepcopy(adam), epoch, valid, config.to_dict())
        scheduler.step(valid)
        if on_epoch:
            on_epoch(record)
    best.history = history
    if out_path is not None:
        save_checkpoint(out_path, spec, best)
    return TrainResult(spec, best, history)
