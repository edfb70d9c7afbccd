#!/usr/bin/env python3
"""
training.py - Fine-tuning, from-scratch training and masked-patch pre-training

Training minimizes the mean squared error between predictions and z-scored (SBP, DBP)
targets with Adam (beta1 0.9, beta2 0.999, eps 1e-8). In frozen mode only the patch
embedding projection and the regression head update; every other tensor stays
bit-identical. Shuffling is seeded per epoch, so a run is fully determined by its
options.

Pre-training is a stand-in for large-corpus encoder pre-training: synthetic two-channel
sinusoid mixtures with 1/f noise, a fraction of patches replaced by a learned mask
vector, and a linear head reconstructing the masked patches. The head and mask vector
are discarded; only the encoder is kept.

Usage::

    from training import TrainOptions, train

    model, history = train(init_xavier(cfg, seed=0), train_ds, val_ds, TrainOptions(epochs=60))
    history.write("model.bpmdl.history.jsonl")

History files are JSON lines, one record per epoch.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from common import ConfigError, DivergenceError, atomic_write_text, log
from encoder_model import (
    EncoderModel,
    ModelConfig,
    TargetNorm,
    encode_tokens,
    init_xavier,
    load_model,
    predict,
    tokenize,
)
import numpy as np
from signal_data import SAMPLE_RATE_HZ, SegmentDataset, zscore
from tensor_numerics import GradTape, Tensor, add, matmul, mean, mul, square, sub, sum_all

BACKBONE_MODES = ("frozen", "unfrozen")
INIT_MODES = ("scratch", "pretrained")

# The "first input-embedding layer" and the regression head.
FROZEN_TRAINABLE = ("patch_embed.weight", "patch_embed.bias", "head.weight", "head.bias")


# ---------------------------------------------------------------------------
# Options and history
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 3e-4
    seed: int = 0
    backbone_mode: str = "unfrozen"
    init_mode: str = "scratch"
    init_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.backbone_mode not in BACKBONE_MODES:
            raise ConfigError(f"backbone_mode must be one of {BACKBONE_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.init_mode == "pretrained" and not self.init_path:
            raise ConfigError("init_mode 'pretrained' needs a checkpoint path")


@dataclass(frozen=True)
class PretextOptions:
    mask_fraction: float = 0.5
    epochs: int = 5
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    # source-signal generator
    num_segments: int = 512
    min_components: int = 3
    max_components: int = 8
    freq_range_hz: tuple[float, float] = (0.5, 20.0)
    noise_level: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError(f"mask_fraction must be in (0, 1), got {self.mask_fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.num_segments < 1:
            raise ConfigError("epochs, batch_size and num_segments must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 1 <= self.min_components <= self.max_components:
            raise ConfigError("need 1 <= min_components <= max_components")


@dataclass
class TrainHistory:
    """Per-epoch records; every list has one entry per completed epoch."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_mae_sbp: list[float] = field(default_factory=list)
    val_mae_dbp: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss: float, val_loss=None, val_mae_sbp=None, val_mae_dbp=None):
        self.train_loss.append(train_loss)
        if val_loss is not None:
            self.val_loss.append(val_loss)
            self.val_mae_sbp.append(val_mae_sbp)
            self.val_mae_dbp.append(val_mae_dbp)

    def records(self) -> list[dict]:
        out = []
        for i, loss in enumerate(self.train_loss):
            record = {"epoch": i + 1, "train_loss": loss}
            if i < len(self.val_loss):
                record.update(
                    val_loss=self.val_loss[i],
                    val_mae_sbp=self.val_mae_sbp[i],
                    val_mae_dbp=self.val_mae_dbp[i],
                )
            out.append(record)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def write(self, path: str) -> int:
        return atomic_write_text(path, self.to_jsonl())


# ---------------------------------------------------------------------------
# Targets and loss
# ---------------------------------------------------------------------------


def fit_target_norm(labels: np.ndarray) -> TargetNorm:
    """Per-target mean and population sd of [N, 2] training labels."""
    labels = np.asarray(labels, dtype=np.float64)
    means, sds = labels.mean(axis=0), labels.std(axis=0)
    if not (np.all(np.isfinite(sds)) and np.all(sds > 0)):
        raise ConfigError(f"Training targets have no spread (sd={sds.tolist()})")
    return TargetNorm(float(means[0]), float(sds[0]), float(means[1]), float(sds[1]))


def _check_norm(norm: TargetNorm) -> None:
    values = (norm.sbp_mean, norm.sbp_sd, norm.dbp_mean, norm.dbp_sd)
    if not all(math.isfinite(v) for v in values):
        raise ConfigError("Target normalization must be finite")
    if norm.sbp_sd <= 0 or norm.dbp_sd <= 0:
        raise ConfigError(f"Target sd must be > 0, got ({norm.sbp_sd}, {norm.dbp_sd})")


def normalize(values: np.ndarray, norm: TargetNorm) -> np.ndarray:
    """mmHg [..., 2] -> z-scored units."""
    _check_norm(norm)
    return (np.asarray(values, dtype=np.float64) - norm.means) / norm.sds


def denormalize(predictions: np.ndarray, norm: TargetNorm) -> np.ndarray:
    """z-scored [..., 2] -> mmHg as x*sd + mean per target.

    Raises:
        ConfigError: If either sd is <= 0 or any statistic is non-finite.
    """
    _check_norm(norm)
    return np.asarray(predictions, dtype=np.float64) * norm.sds + norm.means


def mse_loss(predictions: Tensor, targets) -> Tensor:
    """Mean squared error over batch and both targets."""
    return mean(square(sub(predictions, targets)))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam over a named subset of tensors; everything else is never written."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def trainable_set(model: EncoderModel, backbone_mode: str) -> set[str]:
    """Names of the tensors that train in ``backbone_mode``.

    Frozen keeps positional and channel embeddings fixed along with every block.
    """
    if backbone_mode == "frozen":
        return set(FROZEN_TRAINABLE)
    if backbone_mode == "unfrozen":
        return set(model.params)
    raise ConfigError(f"backbone_mode must be one of {BACKBONE_MODES}, got {backbone_mode!r}")


def _set_trainable(model: EncoderModel, names: set[str]) -> None:
    for name, p in model:
        p.requires_grad = p.tracked = name in names


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def initial_model(cfg: ModelConfig, opts: TrainOptions) -> EncoderModel:
    """Xavier init for scratch runs, the checkpoint for pretrained runs."""
    if opts.init_mode == "scratch":
        return init_xavier(cfg, opts.seed)
    model = load_model(opts.init_path)
    if replace(model.cfg, size_tag=cfg.size_tag) != cfg:
        raise ConfigError(
            f"Checkpoint {opts.init_path} was built for {model.cfg}, not the requested config"
        )
    return model


def validation_metrics(model: EncoderModel, ds: SegmentDataset, norm: TargetNorm, batch_size=64):
    """(loss in normalized units, MAE SBP mmHg, MAE DBP mmHg)."""
    preds = predict(model, ds.signals, batch_size)
    targets = normalize(ds.labels, norm)
    val_loss = float(np.mean((preds - targets) ** 2))
    mae = np.abs(denormalize(preds, norm) - ds.labels).mean(axis=0)
    return val_loss, float(mae[0]), float(mae[1])


def train(
    model: EncoderModel,
    train_ds: SegmentDataset,
    val_ds: Optional[SegmentDataset],
    opts: TrainOptions,
    norm: Optional[TargetNorm] = None,
) -> tuple[EncoderModel, TrainHistory]:
    """Mini-batch Adam on a copy of ``model``.

    Args:
        model: Starting weights (Xavier init or a loaded checkpoint); not modified.
        train_ds: Training split; target normalization is fitted on it unless given.
        val_ds: Optional validation split, evaluated after every epoch.
        opts: Training options.
        norm: Fixed target normalization (defaults to the training split's statistics).

    Returns:
        (trained model carrying the target normalization, per-epoch history)

    Raises:
        DivergenceError: If a batch loss becomes non-finite.
    """
    norm = norm or fit_target_norm(train_ds.labels)
    model = replace(model.copy(), target_norm=norm)
    names = trainable_set(model, opts.backbone_mode)
    _set_trainable(model, names)
    optimizer = Adam({n: model.params[n] for n in model.params if n in names}, opts.learning_rate)

    signals = train_ds.signals
    targets = normalize(train_ds.labels, norm).astype(model.dtype)
    rng = np.random.default_rng(opts.seed)
    history = TrainHistory()
    log(
        "Training started",
        segments=len(train_ds),
        epochs=opts.epochs,
        backbone_mode=opts.backbone_mode,
        init_mode=opts.init_mode,
        trainable=len(names),
    )

    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(train_ds))
        total = 0.0
        for start in range(0, len(order), opts.batch_size):
            idx = order[start : start + opts.batch_size]
            with GradTape() as tape:
                loss = mse_loss(model.forward_tensor(signals[idx]), targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"Training loss became non-finite at epoch {epoch}")
            optimizer.step(tape.backward(loss, optimizer.params))
            total += value * len(idx)

        train_loss = total / len(order)
        if val_ds is not None:
            val_loss, mae_sbp, mae_dbp = validation_metrics(model, val_ds, norm)
            history.append(train_loss, val_loss, mae_sbp, mae_dbp)
            log(
                f"Epoch {epoch}/{opts.epochs}: train_loss={train_loss:.4f} val_loss={val_loss:.4f}",
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_mae_sbp=mae_sbp,
                val_mae_dbp=mae_dbp,
            )
        else:
            history.append(train_loss)
            log(
                f"Epoch {epoch}/{opts.epochs}: train_loss={train_loss:.4f}",
                epoch=epoch,
                train_loss=train_loss,
            )

    _set_trainable(model, set(model.params))
    return model, history


# ---------------------------------------------------------------------------
# Masked-patch pre-training
# ---------------------------------------------------------------------------


def _one_over_f_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1]
    noise = np.fft.irfft(spectrum / np.sqrt(freqs), n)
    return noise / noise.std()


def generate_pretext_signals(n: int, cfg: ModelConfig, opts: PretextOptions) -> np.ndarray:
    """[n, 2, seq_len] z-scored sinusoid mixtures (3-8 components each) plus 1/f noise."""
    rng = np.random.default_rng(opts.seed)
    t = np.arange(cfg.seq_len) / SAMPLE_RATE_HZ
    out = np.empty((n, cfg.num_channels, cfg.seq_len))
    for i in range(n):
        for c in range(cfg.num_channels):
            k = int(rng.integers(opts.min_components, opts.max_components + 1))
            freqs = rng.uniform(*opts.freq_range_hz, size=k)
            amps = rng.uniform(0.2, 1.0, size=k)
            phases = rng.uniform(0.0, 2 * np.pi, size=k)
            wave = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
            out[i, c] = wave + opts.noise_level * _one_over_f_noise(rng, cfg.seq_len)
    return zscore(out).astype(np.float32)


def sample_patch_mask(rng: np.random.Generator, batch: int, cfg: ModelConfig, fraction: float):
    """[batch, C, P] booleans, round(fraction * C * P) masked tokens per segment, at least 1."""
    tokens = cfg.num_channels * cfg.num_patches
    count = min(tokens, max(1, int(round(fraction * tokens))))
    scores = rng.random((batch, tokens))
    ranks = np.argsort(np.argsort(scores, axis=1), axis=1)
    return (ranks < count).reshape(batch, cfg.num_channels, cfg.num_patches)


def pretrain_pretext(cfg: ModelConfig, opts: PretextOptions) -> tuple[EncoderModel, TrainHistory]:
    """Train encoder + linear reconstruction head on masked-patch MSE.

    Returns:
        (encoder with the reconstruction head and mask vector dropped, loss history)
    """
    rng = np.random.default_rng(opts.seed + 1)
    model = init_xavier(cfg, opts.seed)
    dtype = model.dtype
    limit = math.sqrt(6.0 / (cfg.embed_dim + cfg.patch_len))
    extras = {
        "mask_token": Tensor(
            (0.02 * rng.standard_normal(cfg.embed_dim)).astype(dtype), requires_grad=True
        ),
        "recon.weight": Tensor(
            rng.uniform(-limit, limit, (cfg.embed_dim, cfg.patch_len)).astype(dtype),
            requires_grad=True,
        ),
        "recon.bias": Tensor(np.zeros(cfg.patch_len, dtype=dtype), requires_grad=True),
    }
    for name, t in extras.items():
        t.name = name
    optimizer = Adam({**model.params, **extras}, opts.learning_rate)

    patches_all = tokenize(generate_pretext_signals(opts.num_segments, cfg, opts), cfg)
    history = TrainHistory()
    log(
        "Pre-training started",
        segments=opts.num_segments,
        epochs=opts.epochs,
        mask_fraction=opts.mask_fraction,
    )

    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(opts.num_segments)
        total = 0.0
        for start in range(0, len(order), opts.batch_size):
            idx = order[start : start + opts.batch_size]
            patches = Tensor(patches_all[idx], dtype=dtype)
            mask = sample_patch_mask(rng, len(idx), cfg, opts.mask_fraction)
            weights = mask[..., None] / (mask.sum() * cfg.patch_len)
            with GradTape() as tape:
                tokens = encode_tokens(
                    model.params, cfg, patches, model.linear,
                    token_mask=mask, mask_token=extras["mask_token"],
                )
                recon = add(matmul(tokens, extras["recon.weight"]), extras["recon.bias"])
                loss = sum_all(mul(square(sub(recon, patches)), weights.astype(dtype)))
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"Pre-training loss became non-finite at epoch {epoch}")
            optimizer.step(tape.backward(loss, optimizer.params))
            total += value * len(idx)

        epoch_loss = total / len(order)
        history.append(epoch_loss)
        log(
            f"Pretext epoch {epoch}/{opts.epochs}: masked_mse={epoch_loss:.4f}",
            epoch=epoch,
            train_loss=epoch_loss,
        )

    return model, history
