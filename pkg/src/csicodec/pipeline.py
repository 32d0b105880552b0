"""Shared encode -> quantize -> decode plumbing for training and evaluation.

Each channel matrix is scaled by 1/max(|re|, |im|) before encoding; the loss
and NMSE are computed on the normalized pair (NMSE is invariant to the common
scale), and link-level evaluation multiplies the scale back in.

Dataset files store rows h_{k,n}^H in (K, N_c, N_t) layout; the codec consumes
H_k in (N_t, N_c) with columns h_{k,n}, so the boundary transform is a
conjugate transpose each way.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import quantizer as qz
from .model import realify, unrealify


def stored_to_codec(channels):
    """(..., K, N_c, N_t) stored h^H rows -> (..., K, N_t, N_c) complex H_k."""
    return np.conj(np.swapaxes(np.asarray(channels), -1, -2))


def codec_to_stored(h):
    """Inverse of stored_to_codec."""
    return np.conj(np.swapaxes(np.asarray(h), -1, -2))


def normalize_channels(h):
    """Scale each (N_t, N_c) matrix into [-1, 1]; returns (normalized, scales)."""
    h = np.asarray(h, dtype=np.complex128)
    mag = np.maximum(np.abs(h.real), np.abs(h.imag))
    scale = mag.max(axis=(-2, -1), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    return h / scale, scale


def group_loss_graph(model, groups, bits, mu, beta1, collector):
    """Build the training loss for a batch of groups.

    groups: complex (G, K, N_t, N_c), already in codec layout and raw scale.
    Returns (total, reconstruction, load_balance) DifferentiableArrays. The
    latent passes through the straight-through quantizer at `bits`; bits=None
    bypasses quantization (used by the strict gradient check).
    """
    g, k, n_t, n_c = groups.shape
    normed, _ = normalize_channels(groups)
    truth = realify(normed)                              # (G, K, 2, N_t, N_c)
    x = ad.constant(truth.reshape(g * k, 2, n_t, n_c))
    z = model.encode(x, collector=collector)             # (G*K, D_L)
    if bits is not None:
        z = qz.ste_quantize(z, qz.QuantizerConfig(mu=mu, bits=bits))
    z = ad.reshape(z, (g, k, z.shape[-1]))
    recon = model.decode(z, (n_t, n_c), collector=collector)
    rec = ad.sum_of_squares(recon - ad.constant(truth)) / (g * k)
    lb = load_balance_graph(collector)
    total = rec + beta1 * lb if lb is not None else rec
    return total, rec, lb


def load_balance_graph(collector):
    """Mean over MoE layers of N * sum_i f_i * P_i, differentiable via P."""
    if collector is None or not collector.layers:
        return None
    terms = []
    for layer in collector.layers:
        f = ad.constant(layer.token_fraction * layer.n_experts)
        terms.append(ad.sum_(ad.mul(f, layer.mean_probability_graph)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / len(terms)


def reconstruct_groups(model, groups, bits, mu=qz.DEFAULT_MU, user_ids=None):
    """Hard-quantized evaluation path; returns reconstruction at raw scale.

    groups: complex (G, K, N_t, N_c). `bits` is an int applied to every user
    or a length-K sequence of per-user bit widths. Exercises the packed
    bitstream representation end to end.
    """
    g, k, n_t, n_c = groups.shape
    normed, scales = normalize_channels(groups)
    x = realify(normed).reshape(g * k, 2, n_t, n_c)
    z = model.encode(ad.constant(x)).values.reshape(g, k, -1)
    per_user = [int(bits)] * k if np.isscalar(bits) else [int(b) for b in bits]
    z_hat = np.empty_like(z)
    for u in range(k):
        cfg = qz.QuantizerConfig(mu=mu, bits=per_user[u])
        for gi in range(g):
            stream = qz.quantize_vector(z[gi, u], cfg)
            z_hat[gi, u] = qz.dequantize_vector(
                qz.Bitstream.from_bytes(stream.to_bytes()), cfg)
    recon = model.decode(ad.constant(z_hat), (n_t, n_c), user_ids=user_ids).values
    return unrealify(recon) * scales


def nmse_ratios(model, channels, bits, users, mu=qz.DEFAULT_MU,
                max_groups=None, group_batch=16):
    """Per-user-channel NMSE linear ratios over a dataset slice.

    channels: stored layout (S, K, N_c, N_t); each sample contributes one
    group of its first `users` users.
    """
    h = stored_to_codec(channels[:, :users]).astype(np.complex128)
    if max_groups is not None:
        h = h[:max_groups]
    ratios = []
    for start in range(0, h.shape[0], group_batch):
        block = h[start:start + group_batch]
        recon = reconstruct_groups(model, block, bits, mu=mu)
        err = np.abs(recon - block) ** 2
        ref = np.abs(block) ** 2
        ratios.extend((err.sum(axis=(2, 3)) / ref.sum(axis=(2, 3))).ravel().tolist())
    return np.asarray(ratios)
