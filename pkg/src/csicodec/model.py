"""Patch-token autoencoder with MoE transformer blocks for CSI feedback.

Encoder (UE side): realify -> non-overlapping patch embedding -> absolute
positional encoding -> post-norm transformer blocks with routed-expert MoE
FFNs -> pointwise downsampling to a tanh-bounded latent of length
2*CR*N_t*N_c. Decoder (BS side): pointwise upsampling per user, positional
plus user-identity encodings, concatenation of all users along the sequence,
transformer blocks with shared+routed expert FFNs, and one unified linear
head back to patch pixels.

One weight set serves every (N_t, N_c) divisible by the patch and any user
count; nothing is re-instantiated across shapes.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import (CorruptCheckpoint,InconsistentLatentLength,
                     IndivisibleShape, InvalidConfig, IoError, MixedShapesInGroup,
                     NonIntegerLatentChannels, OddWidth, ShapeMismatch)

CHECKPOINT_MAGIC = b"WFCK"
CHECKPOINT_VERSION = 1

RMSNORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    enc_depth: int = 2
    enc_width: int = 64
    enc_heads: int = 8
    dec_depth: int = 2
    dec_width: int = 64
    dec_heads: int = 8
    n_shared: int = 1      # shared experts in the decoder S-R MoE
    top_k: int = 1         # activated routed experts per token
    n_routed: int = 31     # routed experts per MoE layer
    patch: tuple = (4, 4)  # (p_n antennas, p_f subcarriers)
    compression_ratio: float = 1.0 / 32.0
    ffn_expansion: int = 2
    decoder_routed_enabled: bool = True
    decoder_shared_enabled: bool = True

    def __post_init__(self):
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise InvalidConfig("width must be divisible by head count")
        if self.n_routed >= 1 and self.top_k > self.n_routed:
            raise InvalidConfig(f"top_k {self.top_k} exceeds routed expert count {self.n_routed}")
        if self.n_routed < 1:
            raise InvalidConfig("encoder MoE needs at least one routed expert")
        c = self.compression_ratio * 2 * self.patch[0] * self.patch[1]
        if abs(c - round(c)) > 1e-9 or round(c) < 1:
            raise NonIntegerLatentChannels(
                f"CR*2*p_n*p_f = {c} is not a positive integer")
        if not self.decoder_shared_enabled and not self.decoder_routed_enabled:
            raise InvalidConfig("decoder needs shared or routed experts")

    @property
    def latent_channels(self):
        return round(self.compression_ratio * 2 * self.patch[0] * self.patch[1])

    def token_grid(self, n_t, n_c):
        p_n, p_f = self.patch
        if n_t % p_n or n_c % p_f:
            raise IndivisibleShape(
                f"shape ({n_t}, {n_c}) not divisible by patch {self.patch}")
        return n_t // p_n, n_c // p_f

    def latent_length(self, n_t, n_c):
        g_n, g_f = self.token_grid(n_t, n_c)
        return g_n * g_f * self.latent_channels

    def to_json_dict(self):
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        d["patch"] = tuple(d["patch"])
        return cls(**d)

    @classmethod
    def small(cls, **overrides):
        return cls(enc_depth=2, enc_width=64, enc_heads=8,
                   dec_depth=2, dec_width=64, dec_heads=8,
                   n_shared=1, top_k=1, n_routed=31, **overrides)

    @classmethod
    def base(cls, **overrides):
        return cls(enc_depth=2, enc_width=128, enc_heads=8,
                   dec_depth=4, dec_width=128, dec_heads=8,
                   n_shared=1, top_k=3, n_routed=31, **overrides)

    @classmethod
    def large(cls, **overrides):
        return cls(enc_depth=4, enc_width=128, enc_heads=8,
                   dec_depth=4, dec_width=128, dec_heads=8,
                   n_shared=1, top_k=7, n_routed=31, **overrides)


SIZE_PRESETS = {"small": ModelConfig.small, "base": ModelConfig.base,
                "large": ModelConfig.large}


# ---------------------------------------------------------------------------
# Shape converters and encodings
# ---------------------------------------------------------------------------

def realify(h):
    """Complex (..., N_t, N_c) -> real (..., 2, N_t, N_c): [real, imag]."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-3).astype(np.float64)


def unrealify(x):
    """Inverse of realify."""
    x = np.asarray(x)
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def sinusoidal_pe(length, width):
    """Absolute positional table, (length, width); pairs are (sin, cos)."""
    if width % 2:
        raise OddWidth(f"positional encoding width must be even, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, width, 2) / width)[None, :]
    table = np.empty((length, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def user_id_encoding(user_index, length, width):
    """Row `user_index` of the sinusoidal table, replicated across tokens."""
    if user_index < 0:
        raise InvalidConfig("user index must be >= 0")
    row = sinusoidal_pe(user_index + 1, width)[user_index]
    return np.tile(row, (length, 1))


def gate_decide(probabilities, top_k):
    """Top-k expert indices per token; ties resolve to the lower index."""
    order = np.argsort(-probabilities, axis=-1, kind="stable")
    return order[:, :top_k]


@dataclass
class GateDecision:
    probabilities: np.ndarray  # (T, N_r)
    selected: np.ndarray       # (T, top_k)
    weights: np.ndarray        # (T, top_k)


@dataclass
class LayerRouting:
    """Per-MoE-layer routing record for one forward pass."""

    name: str
    n_experts: int
    token_count: int
    token_fraction: np.ndarray       # f_i, from the argmax route
    mean_probability_graph: object   # DifferentiableArray (N_r,), P_i
    selected: np.ndarray             # (T, top_k)
    eval_counts: np.ndarray          # tokens evaluated per routed expert


class RoutingCollector:
    def __init__(self):
        self.layers = []

    def add(self, record):
        self.layers.append(record)


# ---------------------------------------------------------------------------
# Functional layers (shared by the model and the tests)
# ---------------------------------------------------------------------------

def expert_forward(x2d, w1, b1, w2, b2):
    h = ad.gelu(ad.matmul(x2d, w1.array) + b1.array)
    return ad.matmul(h, w2.array) + b2.array


def sr_moe_ffn(x2d, shared, routed, gate_w, top_k, collector=None, name=""):
    """Shared + routed expert mixture on flattened tokens (T, d).

    Output = sum of all shared experts plus the gated top-k routed sum;
    unselected routed experts are never evaluated. With no shared experts
    this is exactly the encoder's routed-only MoE-FFN.
    """
    t = x2d.shape[0]
    out = None
    if routed:
        n_routed = len(routed)
        k = min(top_k, n_routed)
        logits = ad.matmul(x2d, gate_w.array)
        probs = ad.softmax_lastdim(logits)
        selected = gate_decide(probs.values, k)
        eval_counts = np.zeros(n_routed, dtype=np.int64)
        for e in range(n_routed):
            rows = np.flatnonzero((selected == e).any(axis=1))
            if rows.size == 0:
                continue
            eval_counts[e] = rows.size
            xe = ad.take_rows(x2d, rows)
            ye = expert_forward(xe, *routed[e])
            we = ad.slice_(ad.take_rows(probs, rows), (slice(None), slice(e, e + 1)))
            contrib = ad.scatter_rows(ad.mul(ye, we), rows, t)
            out = contrib if out is None else out + contrib
        if collector is not None:
            f = np.bincount(selected[:, 0], minlength=n_routed) / t
            collector.add(LayerRouting(
                name=name, n_experts=n_routed, token_count=t,
                token_fraction=f, mean_probability_graph=ad.mean(probs, axis=0),
                selected=selected, eval_counts=eval_counts))
    for params in shared:
        ys = expert_forward(x2d, *params)
        out = ys if out is None else out + ys
    return out


def moe_ffn(x2d, experts, gate_w, top_k, collector=None, name=""):
    """Routed-expert MoE-FFN (no shared term)."""
    return sr_moe_ffn(x2d, (), experts, gate_w, top_k, collector=collector, name=name)


# ---------------------------------------------------------------------------
# The codec
# ---------------------------------------------------------------------------

class _Block:
    """Post-norm transformer block: attention + MoE FFN, RMSNorm after adds."""

    def __init__(self, attn, norm1, moe_params, norm2, heads, top_k, name):
        self.attn = attn            # dict with wq..bo Parameters
        self.norm1 = norm1
        self.moe = moe_params       # (shared tuple, routed tuple, gate Parameter)
        self.norm2 = norm2
        self.heads = heads
        self.top_k = top_k
        self.name = name

    def _attention(self, x):
        b, t, d = x.shape
        hd = d // self.heads
        scale = 1.0 / math.sqrt(hd)
        p = self.attn
        # bias-free projections; scale q instead of the T x T score matrix
        q = ad.mul(ad.matmul(x, p["wq"].array), scale)
        k = ad.matmul(x, p["wk"].array)
        v = ad.matmul(x, p["wv"].array)
        q = ad.transpose(ad.reshape(q, (b, t, self.heads, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, t, self.heads, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, t, self.heads, hd)), (0, 2, 1, 3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.softmax_lastdim(scores)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return ad.matmul(ctx, p["wo"].array)

    def forward(self, x, collector=None):
        b, t, d = x.shape
        u = ad.rmsnorm(self._attention(x) + x, self.norm1.array, RMSNORM_EPS)
        shared, routed, gate = self.moe
        flat = ad.reshape(u, (b * t, d))
        m = sr_moe_ffn(flat, shared, routed, gate, self.top_k,
                       collector=collector, name=self.name)
        return ad.rmsnorm(ad.reshape(m, (b, t, d)) + u, self.norm2.array, RMSNORM_EPS)


class FeedbackCodec:
    """Shape-flexible multi-user CSI autoencoder."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        p_n, p_f = cfg.patch
        pixels = 2 * p_n * p_f
        c_lat = cfg.latent_channels

        embed = self._new(rng, "embed.w", (pixels, cfg.enc_width))
        embed.array.values *= 4.0  # keep patch signal comparable to the PE
        self._zeros("embed.b", (cfg.enc_width,))
        self.enc_blocks = [self._build_block(rng, f"enc.{i}", cfg.enc_width,
                                             cfg.enc_heads, n_shared=0)
                           for i in range(cfg.enc_depth)]
        down = self._new(rng, "down.w", (cfg.enc_width, c_lat))
        down.array.values *= 0.25  # keep tanh latents unsaturated at init
        self._zeros("down.b", (c_lat,))
        up = self._new(rng, "up.w", (c_lat, cfg.dec_width))
        up.array.values *= 4.0  # latent amplitude must compete with the PE
        self._zeros("up.b", (cfg.dec_width,))
        self.dec_blocks = [self._build_block(
            rng, f"dec.{i}", cfg.dec_width, cfg.dec_heads,
            n_shared=cfg.n_shared if cfg.decoder_shared_enabled else 0,
            routed_enabled=cfg.decoder_routed_enabled)
            for i in range(cfg.dec_depth)]
        self._new(rng, "head.w", (cfg.dec_width, pixels))
        self._zeros("head.b", (pixels,))

    # -- parameter plumbing -------------------------------------------------

    def _register(self, name, values):
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter name {name}")
        p = Parameter(ad.variable(values), name)
        self.params[name] = p
        return p

    def _new(self, rng, name, shape):
        bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return self._register(name, rng.uniform(-bound, bound, size=shape))

    def _zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def _ones(self, name, shape):
        return self._register(name, np.ones(shape))

    def _build_expert(self, rng, prefix, width):
        hidden = self.cfg.ffn_expansion * width
        w1 = self._new(rng, f"{prefix}.w1", (width, hidden))
        b1 = self._zeros(f"{prefix}.b1", (hidden,))
        w2 = self._new(rng, f"{prefix}.w2", (hidden, width))
        w2.array.values *= 0.5  # damp residual branches at init
        b2 = self._zeros(f"{prefix}.b2", (width,))
        return (w1, b1, w2, b2)

    def _build_block(self, rng, prefix, width, heads, n_shared, routed_enabled=True):
        attn = {}
        for nm in ("wq", "wk", "wv", "wo"):
            attn[nm] = self._new(rng, f"{prefix}.attn.{nm}", (width, width))
        attn["wo"].array.values *= 0.5
        norm1 = self._ones(f"{prefix}.norm1.gain", (width,))
        shared = tuple(self._build_expert(rng, f"{prefix}.moe.shared{j}", width)
                       for j in range(n_shared))
        if routed_enabled:
            routed = tuple(self._build_expert(rng, f"{prefix}.moe.expert{e}", width)
                           for e in range(self.cfg.n_routed))
            # upcycling-style start: identical experts behave as one dense FFN
            # until the router differentiates them
            for expert in routed[1:]:
                for dst, src in zip(expert, routed[0]):
                    dst.array.values[:] = src.array.values
            gate = self._new(rng, f"{prefix}.moe.gate.w", (width, self.cfg.n_routed))
        else:
            routed, gate = (), None
        norm2 = self._ones(f"{prefix}.norm2.gain", (width,))
        return _Block(attn, norm1, (shared, routed, gate), norm2, heads,
                      self.cfg.top_k, prefix)

    def parameters(self):
        return list(self.params.values())

    def trainable_parameters(self):
        return [p for p in self.params.values() if p.trainable]

    def zero_grads(self):
        for p in self.params.values():
            p.array.grad = None

    def set_trainable(self, predicate):
        """Flip trainable flags; predicate takes a parameter name."""
        for p in self.params.values():
            p.trainable = bool(predicate(p.name))

    # -- forward passes -----------------------------------------------------

    def patch_embed(self, x):
        """Real (B, 2, N_t, N_c) -> tokens (B, L, d_enc), row-major grid order."""
        if not isinstance(x, ad.DifferentiableArray):
            x = ad.constant(x)
        b, two, n_t, n_c = x.shape
        if two != 2:
            raise ShapeMismatch(f"expected channel axis of size 2, got {two}")
        g_n, g_f = self.cfg.token_grid(n_t, n_c)
        p_n, p_f = self.cfg.patch
        x = ad.reshape(x, (b, 2, g_n, p_n, g_f, p_f))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
        x = ad.reshape(x, (b, g_n * g_f, 2 * p_n * p_f))
        return ad.matmul(x, self.params["embed.w"].array) + self.params["embed.b"].array

    def encoder_forward(self, tokens, collector=None):
        for blk in self.enc_blocks:
            tokens = blk.forward(tokens, collector=collector)
        return tokens

    def downsample_latent(self, tokens):
        """Tokens (B, L, d_enc) -> tanh-bounded latents (B, L*c_lat)."""
        b, l, _ = tokens.shape
        z = ad.matmul(tokens, self.params["down.w"].array) + self.params["down.b"].array
        return ad.tanh(ad.reshape(z, (b, l * self.cfg.latent_channels)))

    def encode(self, x, collector=None):
        """Real (B, 2, N_t, N_c) -> latents (B, D_L)."""
        tokens = self.patch_embed(x)
        l = tokens.shape[1]
        tokens = tokens + ad.constant(sinusoidal_pe(l, self.cfg.enc_width))
        tokens = self.encoder_forward(tokens, collector=collector)
        return self.downsample_latent(tokens)

    def upsample_tokens(self, latents, shape):
        """Latents (..., D_L) -> tokens (..., L, d_dec) for the given (N_t, N_c)."""
        n_t, n_c = shape
        g_n, g_f = self.cfg.token_grid(n_t, n_c)
        l = g_n * g_f
        c_lat = self.cfg.latent_channels
        if latents.shape[-1] != l * c_lat:
            raise InconsistentLatentLength(
                f"latent length {latents.shape[-1]} != {l * c_lat} for shape {shape}")
        lead = latents.shape[:-1]
        x = ad.reshape(latents, lead + (l, c_lat))
        return ad.matmul(x, self.params["up.w"].array) + self.params["up.b"].array

    def decode(self, latents, shape, user_ids=None, collector=None):
        """Latents (G, K, D_L) -> reconstructed real (G, K, 2, N_t, N_c)."""
        g, k, _ = latents.shape
        n_t, n_c = shape
        g_n, g_f = self.cfg.token_grid(n_t, n_c)
        l = g_n * g_f
        d = self.cfg.dec_width
        if user_ids is None:
            user_ids = list(range(k))
        x = self.upsample_tokens(latents, shape)  # (G, K, L, d_dec)
        x = x + ad.constant(sinusoidal_pe(l, d))
        uid = sinusoidal_pe(max(user_ids) + 1, d)[np.asarray(user_ids)]
        x = x + ad.constant(uid[None, :, None, :])
        x = ad.reshape(x, (g, k * l, d))
        for blk in self.dec_blocks:
            x = blk.forward(x, collector=collector)
        y = ad.matmul(x, self.params["head.w"].array) + self.params["head.b"].array
        p_n, p_f = self.cfg.patch
        y = ad.reshape(y, (g, k, g_n, g_f, 2, p_n, p_f))
        y = ad.transpose(y, (0, 1, 4, 2, 5, 3, 6))
        return ad.reshape(y, (g, k, 2, n_t, n_c))

    # -- single-item conveniences (evaluation mode, numpy in/out) -----------

    def encode_user(self, h_complex):
        """Complex (N_t, N_c) -> latent vector (D_L,)."""
        x = realify(np.asarray(h_complex))[None]
        return self.encode(x).values[0]

    def decode_group(self, latent_vectors, shape, user_ids=None):
        """List of K latent vectors -> list of K complex (N_t, N_c) channels."""
        lengths = {np.asarray(z).size for z in latent_vectors}
        if len(lengths) != 1:
            raise MixedShapesInGroup(f"latent lengths differ within group: {sorted(lengths)}")
        z = ad.constant(np.stack([np.asarray(v, dtype=np.float64)
                                  for v in latent_vectors])[None])
        out = self.decode(z, shape, user_ids=user_ids).values[0]
        return [unrealify(out[k]) for k in range(out.shape[0])]

    # -- accounting ----------------------------------------------------------

    def count_parameters(self):
        """(total, activated): activated = non-expert + shared + top_k routed."""
        total = sum(p.array.size for p in self.params.values())
        activated = 0
        for name, p in self.params.items():
            if ".moe.expert" not in name:
                activated += p.array.size
        per_expert = None
        for blk in self.enc_blocks + self.dec_blocks:
            _, routed, _ = blk.moe
            if routed:
                per_expert = sum(q.array.size for q in routed[0])
                activated += min(self.cfg.top_k, len(routed)) * per_expert
        return total, activated


# ---------------------------------------------------------------------------
# Checkpoint I/O ("WFCK": magic, version, config JSON, parameter table)
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_blob = json.dumps(model.cfg.to_json_dict()).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nm = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<B", p.array.ndim))
        for dim in p.array.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(p.array.values, dtype="<f8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"failed writing checkpoint: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"failed reading checkpoint: {exc}") from exc
    view = io.BytesIO(blob)

    def need(n):
        data = view.read(n)
        if len(data) != n:
            raise CorruptCheckpoint(f"checkpoint truncated: {path}")
        return data

    if need(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"bad checkpoint magic: {path}")
    (version,) = struct.unpack("<I", need(4))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", need(4))
    try:
        cfg = ModelConfig.from_json_dict(json.loads(need(cfg_len).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"invalid config block: {exc}") from exc
    model = FeedbackCodec(cfg, seed=0)
    (count,) = struct.unpack("<I", need(4))
    if count != len(model.params):
        raise CorruptCheckpoint(
            f"checkpoint has {count} parameters, model expects {len(model.params)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", need(1))
        shape = tuple(struct.unpack("<I", need(4))[0] for _ in range(rank))
        n_vals = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(need(8 * n_vals), dtype="<f8").reshape(shape)
        if name not in model.params:
            raise CorruptCheckpoint(f"unknown parameter {name!r} in checkpoint")
        if model.params[name].array.shape != shape:
            raise CorruptCheckpoint(
                f"parameter {name!r} has shape {shape}, model expects "
                f"{model.params[name].array.shape}")
        model.params[name].array.values = values.copy()
    return model
