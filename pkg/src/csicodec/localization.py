"""Indoor-localization case study: regress 2D positions from CSI features.

Features come from four extraction stages of the codec (raw CSI, pooled
encoder tokens, the compressed latent, and the quantized latent) and feed
identical regression heads so the comparison isolates the representation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quantizer as qz
from .autodiff import Parameter, Tape, backward
from .errors import InsufficientSamples, InvalidConfig
from .model import realify
from .optim import AdamState, adam_step
from .pipeline import normalize_channels, stored_to_codec


class FeatureStage(enum.Enum):
    RAW_CSI = "raw_csi"
    ENCODED = "encoded"
    COMPRESSED = "compressed"
    QUANTIZED = "quantized"


@dataclass(frozen=True)
class LocalizerHead:
    layers: int = 1
    hidden: int = 128

    def __post_init__(self):
        if self.layers not in (1, 3):
            raise InvalidConfig("head must have 1 or 3 layers")


def feature_dimension(stage, model, shape):
    n_t, n_c = shape
    if stage is FeatureStage.RAW_CSI:
        return 2 * n_t * n_c
    if stage is FeatureStage.ENCODED:
        return model.cfg.enc_width
    return model.cfg.latent_length(n_t, n_c)


def extract_features(model, h_complex, stage, bits=5, mu=qz.DEFAULT_MU):
    """One feature vector per channel matrix; h is complex (..., N_t, N_c)."""
    h = np.asarray(h_complex, dtype=np.complex128)
    single = h.ndim == 2
    if single:
        h = h[None]
    normed, _ = normalize_channels(h)
    x = ad.constant(realify(normed))
    if stage is FeatureStage.RAW_CSI:
        feats = x.values.reshape(h.shape[0], -1)
    elif stage is FeatureStage.ENCODED:
        tokens = model.patch_embed(x)
        from .model import sinusoidal_pe
        tokens = tokens + ad.constant(sinusoidal_pe(tokens.shape[1], model.cfg.enc_width))
        feats = model.encoder_forward(tokens).values.mean(axis=1)
    else:
        z = model.encode(x).values
        if stage is FeatureStage.QUANTIZED:
            cfg = qz.QuantizerConfig(mu=mu, bits=bits)
            z = np.stack([qz.dequantize_vector(qz.quantize_vector(v, cfg), cfg)
                          for v in z])
        feats = z
    return feats[0] if single else feats


def extract_dataset_features(model, dataset, stage, bits=5, max_samples=None):
    """Flatten (sample, user) pairs into (X features, y positions)."""
    channels = dataset.channels if max_samples is None else dataset.channels[:max_samples]
    positions = dataset.positions if max_samples is None else dataset.positions[:max_samples]
    s, k = channels.shape[:2]
    h = stored_to_codec(channels).reshape(s * k, *stored_to_codec(channels).shape[2:])
    feats = extract_features(model, h, stage, bits=bits)
    return feats, positions.reshape(s * k, 2).astype(np.float64)


def _build_head(head, in_dim, rng):
    params = []
    dims = [in_dim, 2] if head.layers == 1 else [in_dim, head.hidden, head.hidden, 2]
    for i in range(len(dims) - 1):
        bound = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        params.append(Parameter(ad.variable(rng.uniform(-bound, bound, (dims[i], dims[i + 1]))),
                                f"loc.w{i}"))
        params.append(Parameter(ad.variable(np.zeros(dims[i + 1])), f"loc.b{i}"))
    return params


def _head_forward(params, x, layers):
    out = x
    n_linear = 1 if layers == 1 else 3
    for i in range(n_linear):
        out = ad.matmul(out, params[2 * i].array) + params[2 * i + 1].array
        if i < n_linear - 1:
            out = ad.gelu(out)
    return out


def train_localizer(features, positions, head, epochs=300, seed=0, lr=1e-2,
                    val_fraction=0.2):
    """Full-batch Adam on coordinate MSE; reports held-out mean error in meters.

    Features are standardized with train-split statistics. Returns
    (parameters, per-epoch training-loss curve, validation mean error).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(positions, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise InvalidConfig("feature and position counts differ")
    if x.shape[0] < 10:
        raise InsufficientSamples(f"need >= 10 samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_val = max(1, int(round(x.shape[0] * val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd < 1e-9] = 1.0
    y_mu = y[train_idx].mean(axis=0)
    x_train = ad.constant((x[train_idx] - mu) / sd)
    y_train = ad.constant(y[train_idx] - y_mu)
    params = _build_head(head, x.shape[1], rng)
    adam = AdamState()
    curve = []
    for _ in range(epochs):
        for p in params:
            p.array.grad = None
        with Tape() as tape:
            pred = _head_forward(params, x_train, head.layers)
            loss = ad.sum_of_squares(pred - y_train) / (2 * len(train_idx))
        backward(tape, loss)
        curve.append(float(loss.values))
        adam_step(params, None, adam, lr)
    x_val = ad.constant((x[val_idx] - mu) / sd)
    pred = _head_forward(params, x_val, head.layers).values + y_mu
    err = float(np.linalg.norm(pred - y[val_idx], axis=1).mean())
    return params, curve, err


def compare_stages(model, dataset, head_depths=(1, 3), bits=5, epochs=300,
                   max_samples=None, seed=0):
    """Mean localization error per (stage, head); identical budget per cell."""
    rows = []
    for stage in FeatureStage:
        x, y = extract_dataset_features(model, dataset, stage, bits=bits,
                                        max_samples=max_samples)
        for depth in head_depths:
            _, _, err = train_localizer(x, y, LocalizerHead(layers=depth),
                                        epochs=epochs, seed=seed)
            rows.append({"stage": stage.value, "head_layers": depth,
                         "mean_error_m": err, "samples": x.shape[0],
                         "feature_dim": x.shape[1]})
    return rows
