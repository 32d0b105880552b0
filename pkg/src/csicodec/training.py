"""Losses and the multi-dataset, multi-user, multi-rate pre-training loop.

Per epoch and per dataset one (bit width, group size) pair is drawn fresh;
samples are shuffled, each sample's users are split into groups of K_m, and
groups are batched so one optimizer step consumes about `batch_size` user
channels. The straight-through quantizer sits between encoder and decoder so
gradients cross the feedback link.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import pipeline
from .autodiff import Tape, backward
from .errors import (ConflictingToggles, DivergedLoss, InvalidConfig,
                     ShapeMismatch)
from .model import FeedbackCodec, RoutingCollector, save_checkpoint
from .optim import AdamState, adam_step, cosine_lr

log = logging.getLogger(__name__)

# Keep G * heads * (K*L)^2 attention elements per sub-batch under this budget.
ATTENTION_ELEMENT_BUDGET = 8_000_000

FROZEN_BACKBONE_PREFIXES = ("head.", "down.", "up.")


@dataclass
class PretrainConfig:
    bit_range: tuple = (3, 7)
    user_range: tuple = (2, 6)
    epochs: int = 100
    batch_size: int = 64
    beta1: float = 0.01
    lr_min: float = 1e-6
    lr_max: float = 1e-5
    lr_period: int = 100
    seed: int = 0
    profile: str = "paper"
    mu: float = 255.0
    val_fraction: float = 0.1
    val_bits: int = 7
    val_groups: int = 24
    max_batches_per_dataset: int | None = None
    max_grad_norm: float | None = None
    checkpoint_every: int = 0
    target_val_nmse_db: float | None = None

    def __post_init__(self):
        if self.bit_range[0] > self.bit_range[1] or self.user_range[0] > self.user_range[1]:
            raise InvalidConfig("ranges must be non-empty")
        if self.beta1 < 0:
            raise InvalidConfig("beta1 must be >= 0")


def desk_profile(**overrides):
    """Laptop-scale profile: hotter learning rate, bounded epoch size,
    smaller group sizes, and gradient clipping for stability."""
    defaults = dict(profile="desk", lr_min=1e-4, lr_max=1e-3, epochs=20,
                    lr_period=20, batch_size=32, user_range=(2, 4),
                    max_batches_per_dataset=45, max_grad_norm=5000.0)
    defaults.update(overrides)
    return PretrainConfig(**defaults)


@dataclass
class LossBreakdown:
    reconstruction: float
    load_balance: float
    total: float


@dataclass
class RoutingStats:
    """Batch-level routing summary for one MoE layer."""

    token_fraction: np.ndarray   # f_i
    mean_probability: np.ndarray  # P_i
    token_count: int


def routing_stats_from_probabilities(probs):
    """Recount f and P from raw gate probabilities (T, N)."""
    probs = np.asarray(probs, dtype=np.float64)
    t, n = probs.shape
    top = np.argmax(probs, axis=1)
    f = np.bincount(top, minlength=n) / t
    return RoutingStats(token_fraction=f, mean_probability=probs.mean(axis=0),
                        token_count=t)


def reconstruction_loss(predicted, truth):
    """(1/K) * sum_k ||H_hat_k - H_k||^2 over real and imaginary parts."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeMismatch(f"{predicted.shape} != {truth.shape}")
    k = predicted.shape[0]
    return float((np.abs(predicted - truth) ** 2).sum() / k)


def load_balance_loss(stats, n_experts):
    """N * sum_i f_i * P_i; 1.0 under uniform routing, N under collapse."""
    return float(n_experts * (stats.token_fraction * stats.mean_probability).sum())


def total_loss(parts, beta1):
    return LossBreakdown(reconstruction=parts.reconstruction,
                         load_balance=parts.load_balance,
                         total=parts.reconstruction + beta1 * parts.load_balance)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    COLUMNS = ("epoch", "dataset_id", "b", "K_m", "loss_rec", "loss_lb",
               "loss_total", "lr", "nmse_val_db")

    def add(self, **kwargs):
        self.rows.append({c: kwargs.get(c, "") for c in self.COLUMNS})

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)


def draw_epoch_settings(rng, cfg, dataset_user_count):
    """Fresh (bit width, group size) pair for one dataset in one epoch."""
    b = int(rng.integers(cfg.bit_range[0], cfg.bit_range[1] + 1))
    k_hi = min(cfg.user_range[1], dataset_user_count)
    k_lo = min(cfg.user_range[0], k_hi)
    k_m = int(rng.integers(k_lo, k_hi + 1))
    return b, k_m


def _build_groups(channels, k_m, rng):
    """Split each sample's users into groups of k_m; returns (G, k_m, Nt, Nc)."""
    s, k = channels.shape[:2]
    picks = []
    for i in range(s):
        perm = rng.permutation(k)
        for start in range(0, k - k_m + 1, k_m):
            picks.append((i, perm[start:start + k_m]))
    order = rng.permutation(len(picks))
    sample_idx = np.array([picks[i][0] for i in order])
    user_idx = np.stack([picks[i][1] for i in order])
    stored = channels[sample_idx[:, None], user_idx]
    return pipeline.stored_to_codec(stored).astype(np.complex128)


def _attention_group_cap(model, k_m, shape):
    n_t, n_c = shape
    l = model.cfg.latent_length(n_t, n_c) // model.cfg.latent_channels
    tokens = k_m * l
    heads = max(model.cfg.enc_heads, model.cfg.dec_heads)
    return max(1, ATTENTION_ELEMENT_BUDGET // (heads * tokens * tokens))


def _clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        if p.array.grad is not None:
            total += float((p.array.grad ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.array.grad is not None:
                p.array.grad *= scale
    return norm


def _train_batch(model, batch, b, cfg, adam, lr):
    """One optimizer step over a batch of groups, sub-batched for memory."""
    g_total = batch.shape[0]
    cap = _attention_group_cap(model, batch.shape[1], batch.shape[2:])
    model.zero_grads()
    rec_sum = lb_sum = 0.0
    for start in range(0, g_total, cap):
        block = batch[start:start + cap]
        weight = block.shape[0] / g_total
        collector = RoutingCollector()
        with Tape() as tape:
            total, rec, lb = pipeline.group_loss_graph(
                model, block, b, cfg.mu, cfg.beta1, collector)
            weighted = total * weight
        backward(tape, weighted)
        rec_sum += float(rec.values) * weight
        lb_sum += (float(lb.values) if lb is not None else 0.0) * weight
    if not math.isfinite(rec_sum):
        raise DivergedLoss(f"reconstruction loss is not finite: {rec_sum}")
    trainable = model.trainable_parameters()
    if cfg.max_grad_norm is not None:
        _clip_gradients(trainable, cfg.max_grad_norm)
    adam_step(trainable, None, adam, lr)
    return rec_sum, lb_sum


def validation_nmse_db(model, datasets, cfg):
    """Mean linear NMSE over held-out groups at the validation bit width."""
    ratios = []
    for ds in datasets:
        val = _val_split(ds, cfg)
        if val.sample_count == 0:
            continue
        users = min(ds.user_count, cfg.user_range[1])
        r = pipeline.nmse_ratios(model, val.channels, cfg.val_bits, users,
                                 mu=cfg.mu, max_groups=cfg.val_groups)
        ratios.extend(r.tolist())
    if not ratios:
        return float("nan")
    return 10.0 * math.log10(float(np.mean(ratios)))


def _val_split(ds, cfg):
    n_val = int(round(ds.sample_count * cfg.val_fraction))
    return ds.subset(slice(ds.sample_count - n_val, None)) if n_val else ds.subset(slice(0, 0))


def _train_split(ds, cfg):
    n_val = int(round(ds.sample_count * cfg.val_fraction))
    return ds.subset(slice(0, ds.sample_count - n_val))


def pretrain(datasets, model, cfg, log_csv=None, checkpoint_path=None,
             progress=None):
    """Self-supervised pre-training over heterogeneous datasets.

    Deterministic for a fixed seed and single-threaded execution. Returns the
    TrainingLog; the model is updated in place.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    tlog = TrainingLog()
    tlog.notes.append(f"profile={cfg.profile}")
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.lr_period, cfg.lr_min, cfg.lr_max)
        epoch_rows = []
        for ds in datasets:
            b, k_m = draw_epoch_settings(rng, cfg, ds.user_count)
            train = _train_split(ds, cfg)
            groups = _build_groups(train.channels, k_m, rng)
            per_batch = max(1, cfg.batch_size // k_m)
            n_batches = math.ceil(groups.shape[0] / per_batch)
            if cfg.max_batches_per_dataset is not None:
                n_batches = min(n_batches, cfg.max_batches_per_dataset)
            rec_mean = lb_mean = 0.0
            for bi in range(n_batches):
                batch = groups[bi * per_batch:(bi + 1) * per_batch]
                rec, lb = _train_batch(model, batch, b, cfg, adam, lr)
                rec_mean += rec / n_batches
                lb_mean += lb / n_batches
                step += 1
            epoch_rows.append((ds.dataset_id, b, k_m, rec_mean, lb_mean))
        val_db = validation_nmse_db(model, datasets, cfg)
        for dataset_id, b, k_m, rec_mean, lb_mean in epoch_rows:
            tlog.add(epoch=epoch, dataset_id=dataset_id, b=b, K_m=k_m,
                     loss_rec=f"{rec_mean:.12g}", loss_lb=f"{lb_mean:.12g}",
                     loss_total=f"{rec_mean + cfg.beta1 * lb_mean:.12g}",
                     lr=f"{lr:.6g}", nmse_val_db=f"{val_db:.4f}")
        log.info("epoch %d lr %.2e val NMSE %.2f dB", epoch, lr, val_db)
        if progress is not None:
            progress(epoch, val_db)
        if cfg.checkpoint_every and checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
        if cfg.target_val_nmse_db is not None and val_db <= cfg.target_val_nmse_db:
            tlog.notes.append(f"early stop at epoch {epoch}: {val_db:.2f} dB")
            break
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    if log_csv:
        tlog.save_csv(log_csv)
    return tlog


FINETUNE_MODES = ("full", "frozen_backbone", "scratch")


def finetune(model, dataset, mode, epochs, cfg=None):
    """Adapt to one dataset; `mode` controls which parameters may move.

    frozen_backbone trains only the output head and the up/down-sampling
    projections; scratch reinitializes the model instead of using the loaded
    weights. Returns (model, TrainingLog).
    """
    if mode not in FINETUNE_MODES:
        raise InvalidConfig(f"unknown finetune mode {mode!r}; options: {FINETUNE_MODES}")
    if cfg is None:
        cfg = PretrainConfig(epochs=epochs, profile="finetune")
    else:
        cfg = replace(cfg, epochs=epochs)
    if mode == "scratch":
        model = FeedbackCodec(model.cfg, seed=cfg.seed + 1)
    if mode == "frozen_backbone":
        model.set_trainable(lambda name: name.startswith(FROZEN_BACKBONE_PREFIXES))
        frac = sum(p.array.size for p in model.trainable_parameters()) / \
            sum(p.array.size for p in model.parameters())
        if frac >= 0.15:
            raise InvalidConfig(f"frozen-backbone trainable fraction {frac:.3f} >= 0.15")
    else:
        model.set_trainable(lambda name: True)
    tlog = pretrain([dataset], model, cfg)
    tlog.notes.append(f"finetune mode={mode}")
    return model, tlog


def ablation_toggles(model_cfg, train_cfg, routed_off=False, shared_off=False,
                     multi_user_off=False, multi_rate_off=False):
    """Derive the single-toggle ablation variants of the paper's study.

    routed_off / shared_off reshape the decoder's S-R MoE; multi_user_off
    forces single-user groups; multi_rate_off pins the bit width to the
    midpoint of the training range.
    """
    toggles = [routed_off, shared_off, multi_user_off, multi_rate_off]
    if sum(bool(t) for t in toggles) > 1:
        raise ConflictingToggles("enable at most one ablation toggle at a time")
    m_cfg, t_cfg = model_cfg, train_cfg
    if routed_off:
        m_cfg = replace(m_cfg, decoder_routed_enabled=False)
    if shared_off:
        m_cfg = replace(m_cfg, decoder_shared_enabled=False)
    if multi_user_off:
        t_cfg = replace(t_cfg, user_range=(1, 1))
    if multi_rate_off:
        mid = (t_cfg.bit_range[0] + t_cfg.bit_range[1]) // 2
        t_cfg = replace(t_cfg, bit_range=(mid, mid))
    return m_cfg, t_cfg
