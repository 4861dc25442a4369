"""Achievable rates, SINR, and QoS feasibility algebra for the K-user
interference channel.

Conventions used throughout the package:

* ``gains[j, i]`` is the squared channel magnitude from transmitter ``j``
  to receiver ``i``; the diagonal holds the direct links.
* Rates are in bits per channel use (base-2 logarithms), which is forced
  by the minimum-SINR relation ``gamma = 2**r - 1``.
* Power profiles are plain float64 vectors of length K, constrained to
  the box ``[0, pmax]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import ChannelSample

# Absolute tolerance on rate constraints; float64 headroom without
# masking real violations.
RATE_TOL = 1e-9

SPECTRAL_RADIUS_TOL = 1e-10
SPECTRAL_RADIUS_MAX_ITER = 10_000


@dataclass(frozen=True)
class QosSpec:
    """Per-user minimum rates and the equivalent minimum SINRs."""

    r_min: np.ndarray
    gamma_min: np.ndarray = field(init=False)

    def __post_init__(self):
        r = np.asarray(self.r_min, dtype=np.float64)
        if r.ndim != 1 or np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("r_min must be a 1-D vector of finite rates >= 0")
        object.__setattr__(self, "r_min", r)
        object.__setattr__(self, "gamma_min", np.exp2(r) - 1.0)

    @property
    def k(self) -> int:
        return self.r_min.shape[0]


@dataclass(frozen=True)
class FeasibilityResult:
    """Outcome of the closed-form QoS feasibility test.

    ``p_hat`` is the minimal power profile meeting every active SINR
    target with equality; present iff the instance is feasible.
    ``p_tilde`` is ``p_hat`` rescaled so its largest entry is ``pmax``.
    """

    feasible: bool
    b_matrix: np.ndarray
    spectral_radius: float
    p_hat: Optional[np.ndarray] = None
    p_tilde: Optional[np.ndarray] = None


def _check_dims(sample: ChannelSample, powers: np.ndarray) -> np.ndarray:
    powers = np.asarray(powers, dtype=np.float64)
    if powers.shape != (sample.k,):
        raise ValueError(
            f"power profile has shape {powers.shape}, expected ({sample.k},)"
        )
    return powers


def batch_rates(gains: np.ndarray, powers: np.ndarray, noise_power) -> np.ndarray:
    """Per-user rates for a batch: ``gains`` (..., K, K), ``powers`` (..., K).

    ``noise_power`` may be a scalar or an array broadcastable to the batch
    shape. Returns rates with shape (..., K).
    """
    gains = np.asarray(gains, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    # Total received power at receiver i: sum_j P_j * g[j, i].
    received = (powers[..., None, :] @ gains)[..., 0, :]
    signal = powers * np.diagonal(gains, axis1=-2, axis2=-1)
    noise = np.asarray(noise_power, dtype=np.float64)
    if noise.ndim:
        noise = noise[..., None]
    sinr = signal / (noise + received - signal)
    return np.log2(1.0 + sinr)


def batch_sum_rates(gains: np.ndarray, powers: np.ndarray, noise_power) -> np.ndarray:
    """Sum rate for each batch element; shape (...,)."""
    return batch_rates(gains, powers, noise_power).sum(axis=-1)


def per_user_rates(sample: ChannelSample, powers: np.ndarray) -> np.ndarray:
    """Achievable rate of each receiver under treating-interference-as-noise."""
    powers = _check_dims(sample, powers)
    return batch_rates(sample.gains, powers, sample.noise_power)


def sum_rate(sample: ChannelSample, powers: np.ndarray) -> float:
    """Total achievable rate of the power profile on this channel."""
    return float(per_user_rates(sample, powers).sum())


def spectral_radius_batch(mats: np.ndarray) -> np.ndarray:
    """Spectral radius of a batch of nonnegative matrices, shape (..., K, K).

    Power iteration runs on the shifted matrix B + I: for nonnegative B
    the Perron root of B + I is strictly dominant, whereas plain
    iteration on B can oscillate forever when -rho(B) is also an
    eigenvalue (e.g. the two-user anti-diagonal coupling matrix). Rows
    that fail to converge within the cap fall back to a dense
    eigensolver.
    """
    mats = np.asarray(mats, dtype=np.float64)
    k = mats.shape[-1]
    batch_shape = mats.shape[:-2]
    a = mats + np.eye(k)
    x = np.full(batch_shape + (k,), 1.0 / np.sqrt(k))
    lam = np.zeros(batch_shape)
    done = np.zeros(batch_shape, dtype=bool)
    for _ in range(SPECTRAL_RADIUS_MAX_ITER):
        active = ~done
        y = (a @ x[..., None])[..., 0]
        norm = np.linalg.norm(y, axis=-1)
        conv = np.abs(norm - lam) <= SPECTRAL_RADIUS_TOL * np.maximum(1.0, norm)
        lam = np.where(active, norm, lam)
        safe = np.where(norm > 0.0, norm, 1.0)
        x = np.where(active[..., None], y / safe[..., None], x)
        done |= conv & active
        if done.all():
            break
    if not done.all():
        for pos in np.argwhere(~done):
            lam[tuple(pos)] = np.max(np.abs(np.linalg.eigvals(mats[tuple(pos)]))) + 1.0
    return lam - 1.0


def spectral_radius(mat: np.ndarray) -> float:
    """Spectral radius of one nonnegative matrix."""
    return float(spectral_radius_batch(np.asarray(mat)[None])[0])


def coupling_matrix_batch(gains: np.ndarray, qos: QosSpec) -> np.ndarray:
    """SINR-target coupling matrices B for a batch of channels.

    B[i, j] = gamma_i * g[j, i] / g[i, i] off the diagonal, zero on it.
    """
    gains = np.asarray(gains, dtype=np.float64)
    k = gains.shape[-1]
    diag = np.diagonal(gains, axis1=-2, axis2=-1)
    b = qos.gamma_min[:, None] * gains.swapaxes(-1, -2) / diag[..., :, None]
    b[..., np.eye(k, dtype=bool)] = 0.0
    return b


def qos_feasibility_batch(gains: np.ndarray, noise_power, qos: QosSpec, pmax: float):
    """Vectorised feasibility test over a batch of channels (N, K, K).

    Returns ``(feasible, rho, p_hat, p_tilde)``; rows of ``p_hat`` and
    ``p_tilde`` are NaN for infeasible instances.
    """
    gains = np.asarray(gains, dtype=np.float64)
    k = gains.shape[-1]
    if qos.k != k:
        raise ValueError(f"qos has {qos.k} users, channel has {k}")
    noise = np.broadcast_to(np.asarray(noise_power, dtype=np.float64), gains.shape[:-2])
    diag = np.diagonal(gains, axis1=-2, axis2=-1)
    b = coupling_matrix_batch(gains, qos)
    rho = spectral_radius_batch(b)
    u = qos.gamma_min * noise[..., None] / diag

    p_hat = np.full(gains.shape[:-1], np.nan)
    candidates = rho < 1.0
    if np.any(candidates):
        lhs = np.eye(k) - b[candidates]
        try:
            sol = np.linalg.solve(lhs, u[candidates][..., None])[..., 0]
        except np.linalg.LinAlgError as exc:  # cannot occur when rho < 1
            raise np.linalg.LinAlgError(
                f"singular I - B despite spectral radius < 1: {exc}"
            ) from exc
        p_hat[candidates] = sol
    # rho < 1 guarantees a nonnegative solution; the explicit bound also
    # guards the decision when rho is estimated right at the boundary.
    feasible = candidates & np.all((p_hat >= 0.0) & (p_hat <= pmax), axis=-1)
    p_hat[~feasible] = np.nan

    p_tilde = np.full_like(p_hat, np.nan)
    row_max = np.where(np.isnan(p_hat), 0.0, p_hat).max(axis=-1)
    nonzero = feasible & (row_max > 0.0)
    if np.any(nonzero):
        p_tilde[nonzero] = scale_feasible_batch(p_hat[nonzero], pmax)
    degenerate = feasible & ~nonzero
    if np.any(degenerate):
        p_tilde[degenerate] = 0.0
    return feasible, rho, p_hat, p_tilde


def qos_feasibility(sample: ChannelSample, qos: QosSpec, pmax: float) -> FeasibilityResult:
    """Closed-form QoS feasibility check for one channel realization.

    The instance is feasible iff rho(B) < 1 and the minimal profile
    (I - B)^-1 u fits inside the power box; at that profile every user
    with a positive target meets its SINR target with equality.
    """
    if qos.k != sample.k:
        raise ValueError(f"qos has {qos.k} users, sample has {sample.k}")
    feasible, rho, p_hat, p_tilde = qos_feasibility_batch(
        sample.gains[None], sample.noise_power, qos, pmax
    )
    b = coupling_matrix_batch(sample.gains[None], qos)[0]
    if not feasible[0]:
        return FeasibilityResult(False, b, float(rho[0]))
    return FeasibilityResult(True, b, float(rho[0]), p_hat[0], p_tilde[0])


def scale_feasible_batch(p_hat: np.ndarray, pmax: float) -> np.ndarray:
    """Row-wise version of :func:`scale_feasible` for (N, K) profiles."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    top = p_hat.max(axis=-1, keepdims=True)
    if np.any(top <= 0.0):
        raise ValueError("scale_feasible requires a nonzero profile")
    out = p_hat * (pmax / top)
    # Pin the max entry to exactly pmax regardless of rounding.
    out[np.arange(out.shape[0]), p_hat.argmax(axis=-1)] = pmax
    return out


def scale_feasible(p_hat: np.ndarray, pmax: float) -> np.ndarray:
    """Scale a feasible profile so the largest entry sits at pmax.

    Raising every power by a common factor >= 1 never reduces any rate
    here, so the scaled profile stays feasible and its sum rate is at
    least that of the input.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.ndim != 1:
        raise ValueError("expected a 1-D power profile")
    return scale_feasible_batch(p_hat[None], pmax)[0]


def check_profile_feasible(
    sample: ChannelSample, powers: np.ndarray, qos: QosSpec, pmax: float
) -> bool:
    """True iff the profile is inside the box and meets every rate target."""
    powers = _check_dims(sample, powers)
    if np.any(powers < 0.0) or np.any(powers > pmax):
        return False
    rates = per_user_rates(sample, powers)
    return bool(np.all(rates >= qos.r_min - RATE_TOL))


def check_profile_feasible_batch(
    gains: np.ndarray, noise_power, powers: np.ndarray, qos: QosSpec, pmax: float
) -> np.ndarray:
    """Vectorised feasibility check; returns a boolean array of shape (...,)."""
    powers = np.asarray(powers, dtype=np.float64)
    in_box = np.all((powers >= 0.0) & (powers <= pmax), axis=-1)
    rates = batch_rates(gains, powers, noise_power)
    return in_box & np.all(rates >= qos.r_min - RATE_TOL, axis=-1)
