"""Reconstruction and link-level evaluation: NMSE, ZF spectral efficiency,
and effective spectral efficiency (SE discounted by feedback airtime)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import pipeline
from .channel import achievable_rate, zf_precode
from .errors import RankDeficient, ShapeMismatch, ZeroReference

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkBudget:
    uplink_rate_bps_per_hz: float
    bandwidth_hz: float
    coherence_time_s: float
    noise_power: float
    power_budget: float

    def __post_init__(self):
        for name in ("uplink_rate_bps_per_hz", "bandwidth_hz", "coherence_time_s",
                     "noise_power", "power_budget"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def feedback_bit_budget(self):
        return self.uplink_rate_bps_per_hz * self.bandwidth_hz * self.coherence_time_s


@dataclass
class MetricsRecord:
    nmse_db: float
    se_bits: float
    ese_bits: float
    eta: float
    feedback_bits: int
    per_user: list = field(default_factory=list)


def nmse(predicted, truth):
    """||H_hat - H||^2 / ||H||^2; returns (linear ratio, dB).

    A perfect reconstruction reports -inf dB as the sentinel.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeMismatch(f"{predicted.shape} != {truth.shape}")
    ref = float((np.abs(truth) ** 2).sum())
    if ref == 0.0:
        raise ZeroReference("reference channel has zero energy")
    ratio = float((np.abs(predicted - truth) ** 2).sum()) / ref
    db = 10.0 * math.log10(ratio) if ratio > 0 else -math.inf
    return ratio, db


def nmse_db_from_ratios(ratios):
    """Dataset-level figure: linear mean of per-sample ratios, then dB."""
    mean = float(np.mean(np.asarray(ratios, dtype=np.float64)))
    return 10.0 * math.log10(mean) if mean > 0 else -math.inf


def se_from_feedback(true_channels, reconstructed_channels, budget):
    """Per-user SE with ZF precoders computed from the reconstructed CSI.

    Both arguments are stored-layout (K, N_c, N_t); precoding mismatch against
    the true channel captures the cost of feedback error.
    """
    truth = np.asarray(true_channels)
    recon = np.asarray(reconstructed_channels)
    if truth.shape != recon.shape:
        raise ShapeMismatch(f"{truth.shape} != {recon.shape}")
    k, n_c, n_t = truth.shape
    precoders = np.empty((n_c, n_t, k), dtype=np.complex128)
    for n in range(n_c):
        precoders[n] = zf_precode(recon[:, n, :], budget.power_budget)
    return achievable_rate(truth, precoders, budget.noise_power)


def ese(se, feedback_bits, budget):
    """Effective SE: eta = 1 - B_k / (R_u * W * T_c), clamped at zero."""
    eta = 1.0 - feedback_bits / budget.feedback_bit_budget
    if eta < 0:
        log.warning("feedback bits %d exceed the budget %.0f; eta clamped to 0",
                    feedback_bits, budget.feedback_bit_budget)
        eta = 0.0
    return eta, se * eta


def bit_sweep(model, dataset, b_values, budget, users=None, max_samples=50,
              mu=255.0):
    """Evaluate one weight set at several bit widths.

    Returns one MetricsRecord per b with dataset-mean NMSE, mean per-user SE,
    eta and ESE (feedback cost B_k = b * D_L per user). Samples whose
    reconstruction is ZF-infeasible are skipped and counted in the log.
    """
    if users is None:
        users = dataset.user_count
    stored = dataset.channels[:max_samples, :users].astype(np.complex128)
    latent_len = model.cfg.latent_length(*dataset.shape)
    records = []
    for b in b_values:
        groups = pipeline.stored_to_codec(stored)
        recon_codec = _reconstruct_in_blocks(model, groups, b, mu)
        recon = pipeline.codec_to_stored(recon_codec)
        err = (np.abs(recon - stored) ** 2).sum(axis=(1, 2, 3))
        ref = (np.abs(stored) ** 2).sum(axis=(1, 2, 3))
        nmse_db = nmse_db_from_ratios(err / ref)
        se_users = []
        skipped = 0
        for s in range(stored.shape[0]):
            try:
                se_users.append(se_from_feedback(stored[s], recon[s], budget))
            except RankDeficient:
                skipped += 1
        if skipped:
            log.warning("bit sweep b=%d: skipped %d rank-deficient samples", b, skipped)
        per_user = np.mean(np.stack(se_users), axis=0) if se_users else np.zeros(users)
        feedback_bits = b * latent_len
        eta, _ = ese(1.0, feedback_bits, budget)
        se_mean = float(per_user.mean())
        records.append(MetricsRecord(
            nmse_db=nmse_db, se_bits=se_mean, ese_bits=se_mean * eta, eta=eta,
            feedback_bits=feedback_bits,
            per_user=[{"user": u, "se": float(per_user[u]),
                       "ese": float(per_user[u]) * eta} for u in range(users)]))
    return records


def _reconstruct_in_blocks(model, groups, bits, mu, block=16):
    out = np.empty_like(groups)
    for start in range(0, groups.shape[0], block):
        out[start:start + block] = pipeline.reconstruct_groups(
            model, groups[start:start + block], bits, mu=mu)
    return out
