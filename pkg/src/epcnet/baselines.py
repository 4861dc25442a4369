"""Classical power-control solvers used as comparison baselines.

All solvers are pure per-sample functions; the *_batch variants run the
identical recursions vectorised across samples (and restarts) and give
bit-identical results to the scalar paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .channel import ChannelSample
from .errors import CapacityError
from .metrics import RATE_TOL, QosSpec, batch_sum_rates, sum_rate

OPTBPC_MAX_USERS = 22
GRID_MAX_USERS = 4
GRID_MAX_POINTS = 101


@dataclass(frozen=True)
class WmmseConfig:
    """Stopping rule of the iterative solver: relative sum-rate change
    per sweep at most ``stop_tol``, hard cap ``max_iterations``."""

    stop_tol: float = 1e-4
    max_iterations: int = 500

    def __post_init__(self):
        if not (self.stop_tol > 0.0):
            raise ValueError("stop_tol must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class WmmseResult:
    powers: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class LandscapeStats:
    """Spread of the solver's local optima under random restarts."""

    mean: float
    variance: float
    cv: float


def wmmse_batch(
    gains: np.ndarray,
    noise_powers,
    pmax: float,
    inits: np.ndarray,
    config: WmmseConfig = WmmseConfig(),
):
    """Scalar weighted-MMSE recursion, vectorised over N problem rows.

    ``inits`` holds transmit amplitudes in [0, sqrt(pmax)], shape (N, K).
    One sweep updates receiver gains u, MSE weights w, then amplitudes v
    for all users simultaneously; per row, sweeping stops once the
    relative sum-rate change drops below the tolerance.

    Returns (powers (N, K), converged (N,), iterations (N,)).
    """
    gains = np.asarray(gains, dtype=np.float64)
    n, k = gains.shape[0], gains.shape[1]
    noise = np.broadcast_to(np.asarray(noise_powers, dtype=np.float64), (n,))
    v = np.asarray(inits, dtype=np.float64).copy()
    if v.shape != (n, k):
        raise ValueError(f"inits must be (N, K) = ({n}, {k}), got {v.shape}")
    root_pmax = np.sqrt(pmax)
    sq = np.sqrt(np.diagonal(gains, axis1=-2, axis2=-1))

    prev_rate = batch_sum_rates(gains, v * v, noise)
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    for _ in range(config.max_iterations):
        active = ~converged
        p = v * v
        total = noise[:, None] + (p[:, None, :] @ gains)[:, 0, :]
        u = sq * v / total
        w = 1.0 / (1.0 - u * sq * v)
        uw = u * u * w
        denom = (gains @ uw[:, :, None])[:, :, 0]
        # A zero denominator only happens for an all-silent row, which
        # is a (degenerate) fixed point; keep it unchanged.
        v_new = np.divide(w * u * sq, denom, out=v.copy(), where=denom > 0.0)
        np.clip(v_new, 0.0, root_pmax, out=v_new)
        v = np.where(active[:, None], v_new, v)
        iterations += active
        rate = batch_sum_rates(gains, v * v, noise)
        converged |= (np.abs(rate - prev_rate) <= config.stop_tol * prev_rate) & active
        prev_rate = rate
        if converged.all():
            break
    return v * v, converged, iterations


def wmmse(
    sample: ChannelSample,
    pmax: float,
    config: WmmseConfig = WmmseConfig(),
    init: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> WmmseResult:
    """One solver run from a given (or randomly drawn) amplitude init."""
    if init is None:
        if rng is None:
            raise ValueError("wmmse needs an explicit init or an rng")
        init = rng.uniform(0.0, np.sqrt(pmax), sample.k)
    powers, conv, iters = wmmse_batch(
        sample.gains[None], sample.noise_power, pmax,
        np.asarray(init, dtype=np.float64)[None], config,
    )
    return WmmseResult(powers[0], bool(conv[0]), int(iters[0]))


def wmmse_restart_rates(
    gains: np.ndarray,
    noise_powers,
    pmax: float,
    n_runs: int,
    rng: np.random.Generator,
    config: WmmseConfig = WmmseConfig(),
):
    """Run the solver ``n_runs`` times per sample with i.i.d. uniform
    amplitude inits.

    Returns (rates (n_runs, N), powers (n_runs, N, K), converged
    (n_runs, N)). Restart r consumes the r-th block of rng draws, so the
    first m restarts of a longer run reproduce a shorter run exactly.
    """
    gains = np.asarray(gains, dtype=np.float64)
    n, k = gains.shape[0], gains.shape[1]
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    inits = np.stack(
        [rng.uniform(0.0, np.sqrt(pmax), (n, k)) for _ in range(n_runs)]
    )
    noise = np.broadcast_to(np.asarray(noise_powers, dtype=np.float64), (n,))
    big_gains = np.broadcast_to(gains, (n_runs,) + gains.shape).reshape(-1, k, k)
    big_noise = np.broadcast_to(noise, (n_runs, n)).reshape(-1)
    powers, conv, _ = wmmse_batch(
        big_gains, big_noise, pmax, inits.reshape(-1, k), config
    )
    powers = powers.reshape(n_runs, n, k)
    rates = batch_sum_rates(gains[None], powers, noise[None])
    return rates, powers, conv.reshape(n_runs, n)


def wmmse_multi(
    sample: ChannelSample,
    pmax: float,
    n_inits: int,
    rng: np.random.Generator,
    config: WmmseConfig = WmmseConfig(),
) -> WmmseResult:
    """Best-of-n restarts by achieved sum rate; ``iterations`` reports
    the total sweeps across restarts are not tracked and is set to -1."""
    rates, powers, conv = wmmse_restart_rates(
        sample.gains[None], sample.noise_power, pmax, n_inits, rng, config
    )
    best = int(np.argmax(rates[:, 0]))
    return WmmseResult(powers[best, 0], bool(conv[best, 0]), -1)


def wmmse_multi_batch(
    gains: np.ndarray,
    noise_powers,
    pmax: float,
    n_inits: int,
    rng: np.random.Generator,
    config: WmmseConfig = WmmseConfig(),
):
    """Best-of-n restarts per sample; returns (powers (N, K), rates (N,),
    converged fraction over all runs)."""
    rates, powers, conv = wmmse_restart_rates(
        gains, noise_powers, pmax, n_inits, rng, config
    )
    best = rates.argmax(axis=0)
    cols = np.arange(rates.shape[1])
    return powers[best, cols], rates[best, cols], float(conv.mean())


def gbpc_batch(gains: np.ndarray, noise_powers, pmax: float) -> np.ndarray:
    """Greedy binary power control, vectorised over samples.

    Starting from the empty active set, repeatedly switch on (at pmax)
    the user whose activation gives the largest strict sum-rate
    increase; stop when no activation improves. Ties pick the lowest
    user index.
    """
    gains = np.asarray(gains, dtype=np.float64)
    n, k = gains.shape[0], gains.shape[1]
    noise = np.broadcast_to(np.asarray(noise_powers, dtype=np.float64), (n,))
    active = np.zeros((n, k), dtype=bool)
    best_rate = np.zeros(n)
    growing = np.ones(n, dtype=bool)
    for _ in range(k):
        cand_rates = np.full((n, k), -np.inf)
        for user in range(k):
            untried = growing & ~active[:, user]
            if not np.any(untried):
                continue
            trial = active[untried].copy()
            trial[:, user] = True
            cand_rates[untried, user] = batch_sum_rates(
                gains[untried], trial * pmax, noise[untried]
            )
        best_user = cand_rates.argmax(axis=1)
        best_cand = cand_rates[np.arange(n), best_user]
        improves = growing & (best_cand > best_rate)
        active[improves, best_user[improves]] = True
        best_rate = np.where(improves, best_cand, best_rate)
        growing &= improves
        if not growing.any():
            break
    return active * pmax


def gbpc(sample: ChannelSample, pmax: float) -> np.ndarray:
    return gbpc_batch(sample.gains[None], sample.noise_power, pmax)[0]


def _codes_to_profiles(codes: np.ndarray, k: int, pmax: float) -> np.ndarray:
    bits = (codes[:, None].astype(np.uint32) >> np.arange(k, dtype=np.uint32)) & 1
    return bits.astype(np.float64) * pmax


def optbpc_batch(gains: np.ndarray, noise_powers, pmax: float,
                 sample_chunk: int = 256, profile_chunk: int = 8192):
    """Exhaustive binary search over all 2^K on/off profiles.

    Returns (powers (N, K), rates (N,)). Ties resolve to the lowest
    profile code (user j maps to bit j).
    """
    gains = np.asarray(gains, dtype=np.float64)
    n, k = gains.shape[0], gains.shape[1]
    if k > OPTBPC_MAX_USERS:
        raise CapacityError(f"exhaustive binary search capped at K <= {OPTBPC_MAX_USERS}")
    noise = np.broadcast_to(np.asarray(noise_powers, dtype=np.float64), (n,))
    total = 2 ** k
    best_rate = np.full(n, -np.inf)
    best_code = np.zeros(n, dtype=np.int64)
    for s0 in range(0, n, sample_chunk):
        s1 = min(s0 + sample_chunk, n)
        g = gains[s0:s1]
        nz = noise[s0:s1]
        diag = np.diagonal(g, axis1=-2, axis2=-1)
        for c0 in range(0, total, profile_chunk):
            codes = np.arange(c0, min(c0 + profile_chunk, total))
            profiles = _codes_to_profiles(codes, k, pmax)
            # received[c, s, i] = sum_j profile[c, j] * g[s, j, i]
            received = np.einsum("cj,sji->csi", profiles, g)
            signal = profiles[:, None, :] * diag
            rates = np.log2(1.0 + signal / (nz[None, :, None] + received - signal))
            chunk_rates = rates.sum(axis=2)
            chunk_best = chunk_rates.argmax(axis=0)
            chunk_max = chunk_rates[chunk_best, np.arange(s1 - s0)]
            better = chunk_max > best_rate[s0:s1]
            best_rate[s0:s1] = np.where(better, chunk_max, best_rate[s0:s1])
            best_code[s0:s1] = np.where(better, codes[chunk_best], best_code[s0:s1])
    return _codes_to_profiles(best_code, k, pmax), best_rate


def optbpc(sample: ChannelSample, pmax: float) -> np.ndarray:
    """Exact argmax of the sum rate over {0, pmax}^K for one channel."""
    return optbpc_batch(sample.gains[None], sample.noise_power, pmax)[0][0]


def _golden_section_max(f, lo: float, hi: float, tol: float = 1e-6):
    """Argmax of f on [lo, hi] to interval width tol (unimodal assumed)."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def rr_coordinate_ascent(
    sample: ChannelSample,
    pmax: float,
    stop_tol: float = 1e-4,
    grid_points: int = 1001,
    max_sweeps: int = 500,
) -> np.ndarray:
    """Cyclic one-user-at-a-time sum-rate ascent.

    Each inner step maximises the sum rate over one user's power on
    [0, pmax] by a dense grid search refined with golden-section to
    1e-6, keeping the current power if nothing beats it, so the sum
    rate never decreases. The outer loop stops once the relative
    sum-rate change per sweep falls below ``stop_tol``.
    """
    gains = sample.gains
    k = sample.k
    noise = sample.noise_power
    powers = np.full(k, pmax)
    grid = np.linspace(0.0, pmax, grid_points)
    diag = np.diag(gains)
    prev = sum_rate(sample, powers)

    def coord_objective(i, others):
        # Sum rate as a function of user i's power, all others fixed.
        base_i = noise + others @ gains[:, i] - others[i] * gains[i, i]
        signal_m = others * diag
        base_m = noise + others @ gains - signal_m - others[i] * gains[i, :]
        signal_m = signal_m.copy()
        signal_m[i] = 0.0  # receiver i is covered by the base_i term
        base_m[i] = 1.0

        def values(ps):
            ps = np.atleast_1d(np.asarray(ps, dtype=np.float64))
            own = np.log2(1.0 + ps * diag[i] / base_i)
            cross = np.log2(
                1.0 + signal_m / (base_m + ps[:, None] * gains[i, :])
            )
            return own + cross.sum(axis=1)

        return values

    for _ in range(max_sweeps):
        for i in range(k):
            values = coord_objective(i, powers)
            on_grid = values(grid)
            j = int(on_grid.argmax())
            lo = grid[max(j - 1, 0)]
            hi = grid[min(j + 1, grid_points - 1)]
            refined = _golden_section_max(lambda p: values(p)[0], lo, hi)
            candidates = np.array([powers[i], grid[j], refined])
            powers[i] = candidates[int(values(candidates).argmax())]
        rate = sum_rate(sample, powers)
        if abs(rate - prev) <= stop_tol * prev:
            break
        prev = rate
    return powers


def grid_oracle_srm_qc(
    sample: ChannelSample,
    qos: QosSpec,
    pmax: float,
    points_per_axis: int = 51,
) -> Tuple[Optional[np.ndarray], bool]:
    """Exhaustive grid search for the QoS-constrained problem at small K.

    The grid is linspace(0, pmax, points_per_axis) per axis, so the box
    corners (all binary profiles) are always included. Returns
    (best_feasible_profile, True), or (None, False) if no grid point
    meets every rate target.
    """
    k = sample.k
    if k > GRID_MAX_USERS:
        raise CapacityError(f"grid oracle capped at K <= {GRID_MAX_USERS}")
    if points_per_axis > GRID_MAX_POINTS:
        raise CapacityError(f"points_per_axis capped at {GRID_MAX_POINTS}")
    axes = np.linspace(0.0, pmax, points_per_axis)
    total = points_per_axis ** k
    diag = np.diag(sample.gains)
    best_profile = None
    best_val = -np.inf
    chunk = 262_144
    for c0 in range(0, total, chunk):
        codes = np.arange(c0, min(c0 + chunk, total), dtype=np.int64)
        idx = np.empty((codes.size, k), dtype=np.int64)
        rem = codes
        for axis in range(k - 1, -1, -1):
            idx[:, axis] = rem % points_per_axis
            rem = rem // points_per_axis
        p = axes[idx]
        received = p @ sample.gains
        signal = p * diag
        rates = np.log2(1.0 + signal / (sample.noise_power + received - signal))
        ok = np.all(rates >= qos.r_min - RATE_TOL, axis=1)
        if not np.any(ok):
            continue
        sums = rates[ok].sum(axis=1)
        j = int(sums.argmax())
        if sums[j] > best_val:
            best_val = float(sums[j])
            best_profile = p[ok][j].copy()
    return best_profile, best_profile is not None


def landscape_stats_batch(
    gains: np.ndarray,
    noise_powers,
    pmax: float,
    n_runs: int,
    rng: np.random.Generator,
    config: WmmseConfig = WmmseConfig(),
):
    """Mean / variance / coefficient of variation of restart sum rates,
    per sample. Returns arrays (mean (N,), variance (N,), cv (N,))."""
    if n_runs < 2:
        raise ValueError("landscape statistics need n_runs >= 2")
    rates, _, _ = wmmse_restart_rates(gains, noise_powers, pmax, n_runs, rng, config)
    mean = rates.mean(axis=0)
    var = rates.var(axis=0)
    # A constant sample has zero variance exactly; np.var's summation
    # would otherwise leave one-ulp noise behind.
    constant = rates.max(axis=0) == rates.min(axis=0)
    var = np.where(constant, 0.0, var)
    std = np.sqrt(var)
    cv = np.divide(std, mean, out=np.zeros_like(std), where=std > 0.0)
    return mean, var, cv


def landscape_stats(
    sample: ChannelSample,
    pmax: float,
    n_runs: int,
    rng: np.random.Generator,
    config: WmmseConfig = WmmseConfig(),
) -> LandscapeStats:
    """Restart-spread statistics of the iterative solver on one channel."""
    mean, var, cv = landscape_stats_batch(
        sample.gains[None], sample.noise_power, pmax, n_runs, rng, config
    )
    return LandscapeStats(float(mean[0]), float(var[0]), float(cv[0]))
