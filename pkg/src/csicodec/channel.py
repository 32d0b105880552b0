"""Cluster-based multipath channel generation and ZF link-level evaluation.

Synthetic multi-user snapshots: one shared cluster set per cell plus per-user
offsets scaled by the configured spreads, so users within a sample are
spatially correlated and joint decoding has something to exploit. User
positions are drawn in a disk; the bearing of each user shifts its cluster
azimuths, which makes the CSI position-informative when the angle spread is
nonzero.

Dataset files use the "WFCF" binary layout: header, then per sample the
K x N_c x N_t complex entries as interleaved float32 (re, im) little-endian,
then K x 2 float32 positions. Row n of a user's matrix is h_{k,n}^H, so the
per-subcarrier stack channels[:, n, :] is exactly the K x N_t matrix that ZF
inverts.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import (EmptyClusterSet, InvalidConfig, IoError, RankDeficient,
                     ShapeMismatch)

DATASET_MAGIC = b"WFCF"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")  # magic, version, N_t, N_c, K, sample_count

CELL_RADIUS_M = 100.0
MIN_USER_RADIUS_M = 5.0
ZF_CONDITION_LIMIT = 1e8


@dataclass(frozen=True)
class ArrayGeometry:
    element_count: int
    spacing_wavelengths: float = 0.5
    layout: str = "uniform-linear"

    def __post_init__(self):
        if self.element_count < 1:
            raise InvalidConfig("element_count must be >= 1")
        if self.spacing_wavelengths <= 0:
            raise InvalidConfig("spacing_wavelengths must be > 0")
        if self.layout != "uniform-linear":
            raise InvalidConfig(f"unsupported layout: {self.layout!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    carrier_hz: float
    subcarrier_spacing_hz: float
    subcarrier_count: int
    cluster_count: int
    paths_per_cluster: int
    angle_spread_deg: float
    delay_spread_s: float
    user_count: int
    seed: int

    def __post_init__(self):
        if min(self.subcarrier_count, self.cluster_count,
               self.paths_per_cluster, self.user_count) < 1:
            raise InvalidConfig("all counts must be >= 1")
        if self.angle_spread_deg < 0 or self.delay_spread_s < 0:
            raise InvalidConfig("spreads must be >= 0")


@dataclass
class ClusterSet:
    """Flat per-path records; gains normalized to unit total power."""

    gain: np.ndarray          # complex (P,)
    delay_s: np.ndarray       # (P,)
    phase_rad: np.ndarray     # (P,)
    azimuth_rad: np.ndarray   # (P,)
    elevation_rad: np.ndarray  # (P,)

    def __len__(self):
        return self.gain.size


@dataclass
class MultiUserSample:
    channels: np.ndarray      # complex (K, N_c, N_t), rows are h_{k,n}^H
    positions_m: np.ndarray   # (K, 2)


@dataclass
class DatasetManifest:
    dataset_id: str
    scenario: ScenarioConfig
    geometry: ArrayGeometry
    sample_count: int
    file_path: str
    format_version: int = DATASET_VERSION

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["scenario"] = ScenarioConfig(**d["scenario"])
        d["geometry"] = ArrayGeometry(**d["geometry"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def steering_vector(azimuth_rad, elevation_rad, geom):
    """ULA steering vector; element n has phase -2*pi*d*n*sin(az)*cos(el)."""
    n = np.arange(geom.element_count)
    phase = -2.0j * np.pi * geom.spacing_wavelengths * n * (
        np.sin(azimuth_rad) * np.cos(elevation_rad))
    return np.exp(phase)


def channel_response(clusters, frequency_hz, geom):
    """h(f) = sum over paths of beta * exp(-j2pi f tau) * exp(j Phi) * a(theta, phi)."""
    if len(clusters) == 0:
        raise EmptyClusterSet("cluster set has no paths")
    amp = clusters.gain * np.exp(1j * clusters.phase_rad) * np.exp(
        -2.0j * np.pi * frequency_hz * clusters.delay_s)
    n = np.arange(geom.element_count)
    spatial = np.exp(-2.0j * np.pi * geom.spacing_wavelengths * np.outer(
        np.sin(clusters.azimuth_rad) * np.cos(clusters.elevation_rad), n))
    return amp @ spatial


def sample_cluster_set(cfg, rng):
    """Shared per-cell draw: cluster geometry, path delays, gains, phases."""
    m, p = cfg.cluster_count, cfg.paths_per_cluster
    total = m * p
    cluster_az = rng.uniform(-np.pi / 3, np.pi / 3, size=m)
    cluster_delay = rng.exponential(cfg.delay_spread_s, size=m) if cfg.delay_spread_s > 0 \
        else np.zeros(m)
    azimuth = np.repeat(cluster_az, p)
    delay = np.repeat(cluster_delay, p)
    if cfg.delay_spread_s > 0:
        delay = delay + 0.25 * cfg.delay_spread_s * rng.exponential(1.0, size=total)
    spread_rad = np.deg2rad(cfg.angle_spread_deg)
    elevation = 0.25 * spread_rad * rng.standard_normal(total)
    gain = (rng.standard_normal(total) + 1j * rng.standard_normal(total)) / np.sqrt(2.0)
    if cfg.delay_spread_s > 0:
        gain = gain * np.exp(-delay / (2.0 * cfg.delay_spread_s))
    gain = gain / np.sqrt((np.abs(gain) ** 2).sum())  # unit total power per user
    phase = rng.uniform(0.0, 2.0 * np.pi, size=total)
    return ClusterSet(gain=gain, delay_s=delay, phase_rad=phase,
                      azimuth_rad=azimuth, elevation_rad=elevation)


def _user_positions(k, rng):
    radius = MIN_USER_RADIUS_M + (CELL_RADIUS_M - MIN_USER_RADIUS_M) * np.sqrt(
        rng.uniform(size=k))
    bearing = rng.uniform(-np.pi, np.pi, size=k)
    return np.stack([radius * np.cos(bearing), radius * np.sin(bearing)], axis=1)


def generate_sample_group(cfg, geom, rng):
    """One synchronized multi-user snapshot with shared clusters.

    Per-user views of the shared cluster set get angle/delay offsets scaled by
    the spreads plus a bearing-proportional azimuth shift, and one global
    random phase per user. With zero spreads all users therefore see the same
    channel up to that global phase.
    """
    if cfg.user_count > geom.element_count:
        raise InvalidConfig(
            f"user_count {cfg.user_count} exceeds antenna count {geom.element_count} (ZF infeasible)")
    base = sample_cluster_set(cfg, rng)
    positions = _user_positions(cfg.user_count, rng)
    bearing = np.arctan2(positions[:, 1], positions[:, 0])
    spread_rad = np.deg2rad(cfg.angle_spread_deg)
    k, total = cfg.user_count, len(base)

    f = cfg.carrier_hz + np.arange(cfg.subcarrier_count) * cfg.subcarrier_spacing_hz
    channels = np.empty((k, cfg.subcarrier_count, geom.element_count), dtype=np.complex128)
    for u in range(k):
        az_jitter = 0.25 * spread_rad * rng.standard_normal(total)
        delay_jitter = 0.1 * cfg.delay_spread_s * np.abs(rng.standard_normal(total))
        global_phase = rng.uniform(0.0, 2.0 * np.pi)
        view = ClusterSet(
            gain=base.gain,
            delay_s=np.maximum(base.delay_s + delay_jitter, 0.0),
            phase_rad=base.phase_rad,
            azimuth_rad=base.azimuth_rad + spread_rad * (bearing[u] / np.pi) + az_jitter,
            elevation_rad=base.elevation_rad,
        )
        amp = view.gain * np.exp(1j * (view.phase_rad + global_phase))
        delay_phase = np.exp(-2.0j * np.pi * np.outer(view.delay_s, f))  # (P, N_c)
        n = np.arange(geom.element_count)
        spatial = np.exp(-2.0j * np.pi * geom.spacing_wavelengths * np.outer(
            np.sin(view.azimuth_rad) * np.cos(view.elevation_rad), n))  # (P, N_t)
        h = np.einsum("p,pn,pt->nt", amp, delay_phase, spatial)  # h_{k,n} at [n, :]
        channels[u] = np.conj(h)  # store h^H rows
    return MultiUserSample(channels=channels, positions_m=positions)


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def generate_dataset(manifest, progress=None):
    """Write the manifest's samples to disk; returns the count written."""
    cfg, geom = manifest.scenario, manifest.geometry
    path = manifest.file_path
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"output directory does not exist: {parent}")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DATASET_MAGIC, manifest.format_version,
                                  geom.element_count, cfg.subcarrier_count,
                                  cfg.user_count, manifest.sample_count))
            for i in range(manifest.sample_count):
                sample = generate_sample_group(cfg, geom, _sample_rng(cfg.seed, i))
                fh.write(np.ascontiguousarray(
                    sample.channels.astype("<c8")).tobytes())
                fh.write(np.ascontiguousarray(
                    sample.positions_m.astype("<f4")).tobytes())
                if progress is not None:
                    progress(i + 1, manifest.sample_count)
    except OSError as exc:
        raise IoError(f"failed writing dataset: {exc}") from exc
    return manifest.sample_count


@dataclass
class Dataset:
    channels: np.ndarray      # complex64 (S, K, N_c, N_t)
    positions: np.ndarray     # float32 (S, K, 2)
    manifest: DatasetManifest | None = None
    dataset_id: str = ""

    @property
    def sample_count(self):
        return self.channels.shape[0]

    @property
    def user_count(self):
        return self.channels.shape[1]

    @property
    def shape(self):
        """(N_t, N_c) as the codec sees it."""
        return self.channels.shape[3], self.channels.shape[2]

    def subset(self, index_range):
        return Dataset(channels=self.channels[index_range],
                       positions=self.positions[index_range],
                       manifest=self.manifest, dataset_id=self.dataset_id)


def load_dataset(path, manifest=None):
    try:
        with open(path, "rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                raise IoError(f"dataset file truncated: {path}")
            magic, version, n_t, n_c, k, count = _HEADER.unpack(header)
            if magic != DATASET_MAGIC:
                raise IoError(f"bad magic in dataset file: {path}")
            if version != DATASET_VERSION:
                raise IoError(f"unsupported dataset version {version}")
            chan_bytes = k * n_c * n_t * 8
            pos_bytes = k * 2 * 4
            channels = np.empty((count, k, n_c, n_t), dtype=np.complex64)
            positions = np.empty((count, k, 2), dtype=np.float32)
            for i in range(count):
                blob = fh.read(chan_bytes + pos_bytes)
                if len(blob) < chan_bytes + pos_bytes:
                    raise IoError(f"dataset file truncated at sample {i}: {path}")
                channels[i] = np.frombuffer(blob, dtype="<c8", count=k * n_c * n_t
                                            ).reshape(k, n_c, n_t)
                positions[i] = np.frombuffer(blob, dtype="<f4", offset=chan_bytes
                                             ).reshape(k, 2)
    except OSError as exc:
        raise IoError(f"failed reading dataset: {exc}") from exc
    dataset_id = manifest.dataset_id if manifest is not None else os.path.basename(path)
    return Dataset(channels=channels, positions=positions, manifest=manifest,
                   dataset_id=dataset_id)


def zf_precode(per_subcarrier_channels, power_budget):
    """V = gamma * H^H (H H^H)^-1 with gamma fixing trace(V V^H) = P exactly."""
    h = np.asarray(per_subcarrier_channels)
    if h.ndim != 2:
        raise ShapeMismatch(f"expected a K x N_t matrix, got shape {h.shape}")
    k, n_t = h.shape
    if k > n_t:
        raise RankDeficient(f"K={k} users exceed N_t={n_t} antennas")
    gram = h @ h.conj().T
    if np.linalg.cond(gram) > ZF_CONDITION_LIMIT:
        raise RankDeficient("channel matrix is rank deficient for ZF")
    v0 = h.conj().T @ np.linalg.inv(gram)
    gamma = np.sqrt(power_budget / np.real(np.trace(v0 @ v0.conj().T)))
    return gamma * v0


def achievable_rate(true_channels, precoders, noise_power):
    """Per-user rates, summing log2(1 + SINR) over subcarriers.

    true_channels: (K, N_c, N_t) with rows h^H; precoders: (N_c, N_t, K).
    """
    h = np.asarray(true_channels)
    v = np.asarray(precoders)
    if h.ndim != 3 or v.ndim != 3:
        raise ShapeMismatch("true_channels must be (K,N_c,N_t), precoders (N_c,N_t,K)")
    k, n_c, n_t = h.shape
    if v.shape != (n_c, n_t, k):
        raise ShapeMismatch(f"precoders shape {v.shape} != {(n_c, n_t, k)}")
    # cross[k, n, i] = h_{k,n}^H v_{i,n}
    cross = np.einsum("knt,nti->kni", h, v)
    power = np.abs(cross) ** 2
    signal = np.einsum("knk->kn", power)
    interference = power.sum(axis=2) - signal
    sinr = signal / (interference + noise_power)
    return np.log2(1.0 + sinr).sum(axis=1)
