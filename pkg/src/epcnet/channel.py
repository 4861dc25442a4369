"""Channel realization generators and the dataset container.

Three fading/geometry models are provided, all parameterised by a
:class:`SystemConfig`:

* ``rayleigh``  -- i.i.d. unit-variance circularly-symmetric Gaussian
  coefficients, so squared gains are exponential with mean 1;
* ``rician``    -- a deterministic line-of-sight component (uniform phase
  per entry) mixed with a scattered component according to a linear
  K-factor, total mean power 1;
* ``geometry``  -- transmitters and receivers dropped uniformly on a
  square, pathloss 1 / (1 + d^2) on top of Rayleigh small-scale fading.

All randomness flows through a caller-supplied ``numpy.random.Generator``
(PCG64 via ``np.random.default_rng(seed)``); identical (config, seed)
pairs reproduce bit-identical samples on one platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

DATASET_MAGIC = b"EPCNETDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SystemConfig:
    """Static system parameters: user count, power budget, noise floor."""

    k: int
    noise_power: float
    pmax: float = 1.0
    esn0_db: Optional[float] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.pmax > 0.0 and np.isfinite(self.pmax)):
            raise ValueError("pmax must be finite and > 0")
        if not (self.noise_power > 0.0 and np.isfinite(self.noise_power)):
            raise ValueError("noise_power must be finite and > 0")
        if self.esn0_db is not None:
            expected = esn0_to_noise(self.esn0_db, self.pmax)
            if abs(self.noise_power - expected) > 1e-12 * expected:
                raise ValueError(
                    f"noise_power {self.noise_power} inconsistent with "
                    f"esn0_db {self.esn0_db} (expected {expected})"
                )

    @classmethod
    def from_esn0(cls, k: int, esn0_db: float, pmax: float = 1.0) -> "SystemConfig":
        return cls(k=k, noise_power=esn0_to_noise(esn0_db, pmax), pmax=pmax,
                   esn0_db=esn0_db)


@dataclass(frozen=True)
class ChannelSample:
    """One channel realization: squared gains plus the noise floor.

    ``gains[j, i]`` is the squared magnitude of the link from transmitter
    j to receiver i; the diagonal holds the direct links.
    """

    gains: np.ndarray
    noise_power: float

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"gains must be square, got shape {g.shape}")
        if np.any(g < 0.0):
            raise ValueError("gains must be nonnegative")
        if np.any(np.diag(g) <= 0.0):
            raise ValueError("direct-link gains must be positive")
        if not (self.noise_power > 0.0 and np.isfinite(self.noise_power)):
            raise ValueError("noise_power must be finite and > 0")
        object.__setattr__(self, "gains", g)

    @property
    def k(self) -> int:
        return self.gains.shape[0]


@dataclass(frozen=True)
class GeometryConfig:
    """Square deployment area; pathloss follows 1 / (1 + d^2)."""

    area_side: float = 10.0
    pathloss: str = "inverse-square-plus-one"

    def __post_init__(self):
        if not (self.area_side > 0.0):
            raise ValueError("area_side must be > 0")
        if self.pathloss != "inverse-square-plus-one":
            raise ValueError(f"unknown pathloss law {self.pathloss!r}")


def esn0_to_noise(esn0_db: float, pmax: float) -> float:
    """Linear noise power for a given SNR in dB: pmax / 10^(esn0/10)."""
    if not np.isfinite(esn0_db) or not np.isfinite(pmax):
        raise ValueError("esn0_db and pmax must be finite")
    if pmax <= 0.0:
        raise ValueError("pmax must be > 0")
    return pmax / 10.0 ** (esn0_db / 10.0)


def _complex_gains(rng: np.random.Generator, shape) -> np.ndarray:
    """Squared magnitudes of i.i.d. CN(0, 1) draws."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return 0.5 * (re * re + im * im)


def sample_rayleigh_batch(config: SystemConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """n gain matrices under i.i.d. Rayleigh fading, shape (n, K, K).

    The squared magnitude of a unit-variance circularly-symmetric
    Gaussian coefficient is exponential with mean 1, so the gains are
    drawn as exponentials directly.
    """
    return rng.exponential(1.0, (n, config.k, config.k))


def sample_rayleigh(config: SystemConfig, rng: np.random.Generator) -> ChannelSample:
    """One Rayleigh-fading realization; gains are exponential(1)."""
    return ChannelSample(sample_rayleigh_batch(config, 1, rng)[0], config.noise_power)


def sample_rician_batch(
    config: SystemConfig, k_factor_db: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n gain matrices under Rician fading with the given linear-dB K-factor.

    Each coefficient is sqrt(kappa/(1+kappa)) * exp(j*phi) plus
    sqrt(1/(1+kappa)) * CN(0,1), with the line-of-sight phase phi drawn
    uniformly per entry per sample; total mean power is 1.
    """
    if not np.isfinite(k_factor_db):
        raise ValueError("k_factor_db must be finite")
    kappa = 10.0 ** (k_factor_db / 10.0)
    shape = (n, config.k, config.k)
    phase = rng.uniform(0.0, 2.0 * np.pi, shape)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    los = np.sqrt(kappa / (1.0 + kappa))
    scat = np.sqrt(1.0 / (1.0 + kappa)) / np.sqrt(2.0)
    h_re = los * np.cos(phase) + scat * re
    h_im = los * np.sin(phase) + scat * im
    return h_re * h_re + h_im * h_im


def sample_rician(
    config: SystemConfig, k_factor_db: float, rng: np.random.Generator
) -> ChannelSample:
    return ChannelSample(
        sample_rician_batch(config, k_factor_db, 1, rng)[0], config.noise_power
    )


def _geometry_parts(
    config: SystemConfig, geo: GeometryConfig, n: int, rng: np.random.Generator
):
    """Positions, pathloss and fading powers behind the geometry model.

    Returns (distances, fading_power, gains), each of shape (n, K, K)
    with [s, j, i] indexing transmitter j -> receiver i.
    """
    k = config.k
    tx = rng.uniform(0.0, geo.area_side, (n, k, 2))
    rx = rng.uniform(0.0, geo.area_side, (n, k, 2))
    delta = tx[:, :, None, :] - rx[:, None, :, :]
    dist = np.sqrt((delta * delta).sum(axis=-1))
    fading = _complex_gains(rng, (n, k, k))
    gains = fading / (1.0 + dist * dist)
    return dist, fading, gains


def sample_geometry_batch(
    config: SystemConfig, geo: GeometryConfig, n: int, rng: np.random.Generator
) -> np.ndarray:
    return _geometry_parts(config, geo, n, rng)[2]


def sample_geometry(
    config: SystemConfig, geo: GeometryConfig, rng: np.random.Generator
) -> ChannelSample:
    return ChannelSample(
        sample_geometry_batch(config, geo, 1, rng)[0], config.noise_power
    )


def sample_batch(
    config: SystemConfig,
    model: str,
    n: int,
    rng: np.random.Generator,
    k_factor_db: float = 0.0,
    geometry: Optional[GeometryConfig] = None,
) -> np.ndarray:
    """Dispatch on the model tag; returns gains of shape (n, K, K)."""
    if model == "rayleigh":
        return sample_rayleigh_batch(config, n, rng)
    if model == "rician":
        return sample_rician_batch(config, k_factor_db, n, rng)
    if model == "geometry":
        return sample_geometry_batch(config, geometry or GeometryConfig(), n, rng)
    raise ValueError(f"unknown channel model {model!r}")


@dataclass
class Dataset:
    """A stack of channel realizations plus their noise powers.

    ``meta`` carries at least: format version, k, model tag, seed,
    count, and either a scalar noise power / EsN0 or an EsN0 list.
    """

    gains: np.ndarray
    noise_powers: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gains = np.ascontiguousarray(self.gains, dtype=np.float64)
        self.noise_powers = np.ascontiguousarray(self.noise_powers, dtype=np.float64)
        if self.gains.ndim != 3 or self.gains.shape[1] != self.gains.shape[2]:
            raise ValueError(f"gains must be (N, K, K), got {self.gains.shape}")
        if self.noise_powers.shape != (self.gains.shape[0],):
            raise ValueError("noise_powers must have one entry per sample")

    @property
    def count(self) -> int:
        return self.gains.shape[0]

    @property
    def k(self) -> int:
        return self.gains.shape[1]

    def sample(self, i: int) -> ChannelSample:
        return ChannelSample(self.gains[i], float(self.noise_powers[i]))

    def iter_samples(self) -> Iterator[ChannelSample]:
        for i in range(self.count):
            yield self.sample(i)

    def subset(self, idx) -> "Dataset":
        meta = dict(self.meta)
        sub = Dataset(self.gains[idx], self.noise_powers[idx], meta)
        meta["count"] = sub.count
        return sub


def save_dataset(path, dataset: Dataset) -> None:
    """Write a dataset file.

    Byte layout (little-endian):
      [0:8)    magic b"EPCNETDS"
      [8:12)   format version, uint32
      [12:16)  JSON header length H, uint32
      [16:16+H) UTF-8 JSON header (sorted keys)
      then count*K*K float64 gains, row-major (sample, tx row, rx col)
      then count float64 noise powers
    """
    meta = dict(dataset.meta)
    meta["format_version"] = DATASET_VERSION
    meta["count"] = dataset.count
    meta["k"] = dataset.k
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        fh.write(dataset.gains.astype("<f8", copy=False).tobytes())
        fh.write(dataset.noise_powers.astype("<f8", copy=False).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    meta = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    count, k = meta["count"], meta["k"]
    body = raw[16 + hlen :]
    gains_bytes = count * k * k * 8
    expected = gains_bytes + count * 8
    if len(body) != expected:
        raise ValueError(f"{path}: body has {len(body)} bytes, expected {expected}")
    gains = np.frombuffer(body[:gains_bytes], dtype="<f8").reshape(count, k, k)
    noise = np.frombuffer(body[gains_bytes:], dtype="<f8")
    return Dataset(gains.copy(), noise.copy(), meta)
