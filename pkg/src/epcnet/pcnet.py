"""Neural power controllers and their unsupervised training loop.

A controller maps a channel realization to a power profile: the input
vector is the row-major flattening of the channel magnitudes (square
roots of the stored squared gains), optionally followed by the noise
power for the generalized variant; the sigmoid output layer is scaled
by pmax.

Two training objectives are supported:

* plain sum-rate maximization: loss = -mean(sum rate);
* QoS-constrained sum-rate maximization: the same term plus
  lambda * sum_i ReLU(r_min_i - R_i) penalising unmet rate targets.

Both are differentiated exactly through the rate equation and the
network, so training needs no labelled optima.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import channel as channel_mod
from . import nnet
from .channel import ChannelSample
from .errors import TrainingDivergenceError
from .metrics import (
    QosSpec,
    batch_sum_rates,
    check_profile_feasible,
    check_profile_feasible_batch,
    qos_feasibility,
    qos_feasibility_batch,
)

PCNET = "pcnet"
PCNET_PLUS = "pcnet_plus"
TASK_SRM = "srm"
TASK_SRM_QC = "srm_qc"

_LN2 = np.log(2.0)

# A channel source yields (gains (n, K, K), noise_powers (n,)) batches.
ChannelSource = Callable[[int, np.random.Generator], Tuple[np.ndarray, np.ndarray]]


class FadingStream:
    """Channel source with one fixed noise power.

    ``model`` is one of rayleigh | rician | geometry; extra model
    parameters ride along unchanged.
    """

    def __init__(self, config: channel_mod.SystemConfig, model: str = "rayleigh",
                 k_factor_db: float = 0.0,
                 geometry: Optional[channel_mod.GeometryConfig] = None):
        self.config = config
        self.model = model
        self.k_factor_db = k_factor_db
        self.geometry = geometry

    def __call__(self, n: int, rng: np.random.Generator):
        gains = channel_mod.sample_batch(
            self.config, self.model, n, rng,
            k_factor_db=self.k_factor_db, geometry=self.geometry,
        )
        return gains, np.full(n, self.config.noise_power)


class MixedEsn0Stream:
    """Channel source cycling a set of EsN0 values in equal proportion.

    Noise powers are assigned round-robin across the stream, so over any
    window that is a multiple of the set size every EsN0 appears equally
    often; the assignment is deterministic and independent of the rng.
    """

    def __init__(self, k: int, esn0_db_set: Sequence[float], pmax: float = 1.0,
                 model: str = "rayleigh", k_factor_db: float = 0.0,
                 geometry: Optional[channel_mod.GeometryConfig] = None):
        if not esn0_db_set:
            raise ValueError("esn0_db_set must not be empty")
        self.noise_values = np.array(
            [channel_mod.esn0_to_noise(e, pmax) for e in esn0_db_set]
        )
        self.config = channel_mod.SystemConfig(
            k=k, noise_power=float(self.noise_values[0]), pmax=pmax
        )
        self.model = model
        self.k_factor_db = k_factor_db
        self.geometry = geometry
        self._offset = 0

    def __call__(self, n: int, rng: np.random.Generator):
        gains = channel_mod.sample_batch(
            self.config, self.model, n, rng,
            k_factor_db=self.k_factor_db, geometry=self.geometry,
        )
        idx = (self._offset + np.arange(n)) % self.noise_values.size
        self._offset = (self._offset + n) % self.noise_values.size
        return gains, self.noise_values[idx]


class FeasibleStream:
    """Rejection-filter wrapper keeping only QoS-feasible realizations.

    Tracks accepted/rejected counts; raises once the observed rejection
    rate exceeds 99.9% with enough evidence, since such a QoS target is
    effectively unsatisfiable under the channel distribution.
    """

    def __init__(self, base: ChannelSource, qos: QosSpec, pmax: float):
        self.base = base
        self.qos = qos
        self.pmax = pmax
        self.accepted = 0
        self.rejected = 0

    def __call__(self, n: int, rng: np.random.Generator):
        out_gains, out_noise = [], []
        have = 0
        while have < n:
            gains, noise = self.base(n - have, rng)
            ok, _, _, _ = qos_feasibility_batch(gains, noise, self.qos, self.pmax)
            kept = int(ok.sum())
            self.accepted += kept
            self.rejected += ok.size - kept
            drawn = self.accepted + self.rejected
            if drawn >= 10_000 and self.accepted < 0.001 * drawn:
                raise ValueError(
                    f"qos rejection rate {self.rejected / drawn:.4%}: "
                    "targets are effectively unsatisfiable"
                )
            if kept:
                out_gains.append(gains[ok])
                out_noise.append(noise[ok])
                have += kept
        return np.concatenate(out_gains), np.concatenate(out_noise)


def default_shape(k: int) -> Tuple[int, ...]:
    """Hidden/output node counts for a K-user controller.

    K = 20 uses the reference shape {400, 400, 200, 20}; other sizes
    follow the same proportions as the K = 5 and K = 10 references:
    {K^2, 2K^2, K^2, K}.
    """
    if k == 20:
        return (400, 400, 200, 20)
    return (k * k, 2 * k * k, k * k, k)


@dataclass
class PcnetModel:
    """A trained or initialized power-control network plus its task tags."""

    params: nnet.NetworkParams
    variant: str
    k: int
    task: str
    pmax: float
    qos: Optional[QosSpec] = None
    penalty_weight: Optional[float] = None

    def __post_init__(self):
        if self.variant not in (PCNET, PCNET_PLUS):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.task not in (TASK_SRM, TASK_SRM_QC):
            raise ValueError(f"unknown task {self.task!r}")
        expected_in = self.k * self.k + (1 if self.variant == PCNET_PLUS else 0)
        if self.params.in_dim != expected_in:
            raise ValueError(
                f"input dim {self.params.in_dim} != {expected_in} for {self.variant}"
            )
        if self.params.out_dim != self.k:
            raise ValueError(f"output dim {self.params.out_dim} != K={self.k}")
        if self.task == TASK_SRM_QC:
            if self.qos is None or self.penalty_weight is None:
                raise ValueError("srm_qc model needs qos and penalty_weight")
            if self.penalty_weight < 0:
                raise ValueError("penalty_weight must be >= 0")
        elif self.penalty_weight is not None:
            raise ValueError("penalty_weight is only meaningful for srm_qc")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(s.out_dim for s in self.params.specs)


def build_model(
    k: int,
    rng: np.random.Generator,
    variant: str = PCNET,
    task: str = TASK_SRM,
    pmax: float = 1.0,
    shape: Optional[Sequence[int]] = None,
    qos: Optional[QosSpec] = None,
    penalty_weight: Optional[float] = None,
) -> PcnetModel:
    """Assemble a fresh Xavier-initialized controller."""
    shape = tuple(shape) if shape is not None else default_shape(k)
    if shape[-1] != k:
        raise ValueError(f"output layer must have K={k} nodes, got {shape[-1]}")
    in_dim = k * k + (1 if variant == PCNET_PLUS else 0)
    specs = nnet.make_specs((in_dim,) + shape)
    params = nnet.init_network(specs, rng)
    return PcnetModel(params, variant, k, task, pmax, qos, penalty_weight)


def build_input(sample: ChannelSample, variant: str = PCNET) -> np.ndarray:
    """Flatten channel magnitudes row-major: input[j*K + i] = |h_{j,i}|.

    The generalized variant appends the noise power as the last element.
    """
    return build_input_batch(
        sample.gains[None], np.asarray([sample.noise_power]), variant
    )[0]


def build_input_batch(gains: np.ndarray, noise_powers, variant: str) -> np.ndarray:
    gains = np.asarray(gains, dtype=np.float64)
    n, k = gains.shape[0], gains.shape[1]
    x = np.sqrt(gains).reshape(n, k * k)
    if variant == PCNET_PLUS:
        noise = np.broadcast_to(
            np.asarray(noise_powers, dtype=np.float64), (n,)
        )
        x = np.concatenate([x, noise[:, None]], axis=1)
    elif variant != PCNET:
        raise ValueError(f"unknown variant {variant!r}")
    return x


def infer_batch(model: PcnetModel, gains: np.ndarray, noise_powers) -> np.ndarray:
    """Inference-mode power profiles for a batch of channels, shape (N, K)."""
    x = build_input_batch(gains, noise_powers, model.variant)
    return model.pmax * nnet.forward(model.params, x, mode="inference")


def infer(model: PcnetModel, sample: ChannelSample) -> np.ndarray:
    """Deterministic power profile for one channel; entries in (0, pmax)."""
    if sample.k != model.k:
        raise ValueError(f"sample has K={sample.k}, model expects {model.k}")
    return infer_batch(model, sample.gains[None], sample.noise_power)[0]


def round_binary(powers: np.ndarray, pmax: float, threshold_frac: float = 0.5) -> np.ndarray:
    """Round each entry to pmax or 0 at the given fraction of pmax.

    Ties at the threshold round up.
    """
    powers = np.asarray(powers, dtype=np.float64)
    return np.where(powers >= threshold_frac * pmax, pmax, 0.0)


def _rate_terms(gains, noise_powers, powers):
    """Per-user rates plus the receiver-side totals used by the gradient.

    T[b, i] is noise plus all received power at receiver i; D[b, i] is
    the same minus the direct-link term, so R = log2(T / D).
    """
    received = (powers[:, None, :] @ gains)[:, 0, :]
    diag = np.diagonal(gains, axis1=-2, axis2=-1)
    noise = np.asarray(noise_powers, dtype=np.float64)
    t = (noise[:, None] if noise.ndim else noise) + received
    d = t - powers * diag
    rates = (np.log(t) - np.log(d)) / _LN2
    return rates, t, d, diag


def _weighted_rate_grad(gains, t, d, diag, weights):
    """d/dP_j of sum_i w_i R_i for per-sample, per-user weights (B, K)."""
    wt = weights / t
    wd = weights / d
    gt = (gains @ wt[..., None])[..., 0]
    gd = (gains @ wd[..., None])[..., 0]
    return (gt - gd + diag * wd) / _LN2


def srm_objective(gains, noise_powers, powers):
    """Mean sum rate of a batch of profiles and its gradient w.r.t. powers.

    Returns (mean_sum_rate, grad) with grad[b, j] the derivative of the
    MEAN (over the batch) of the sum rates.
    """
    gains = np.asarray(gains, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    rates, t, d, diag = _rate_terms(gains, noise_powers, powers)
    ones = np.ones_like(rates)
    grad = _weighted_rate_grad(gains, t, d, diag, ones) / gains.shape[0]
    return rates.sum(axis=1).mean(), grad


def srm_qc_objective(gains, noise_powers, powers, qos: QosSpec, penalty_weight: float):
    """Mean of [-sum rate + lambda * sum_i ReLU(r_min_i - R_i)] and its
    gradient w.r.t. powers (gradient of the mean, shape (B, K)).

    The ReLU subgradient at the kink is taken as 0, so exactly-met
    constraints contribute nothing.
    """
    gains = np.asarray(gains, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    rates, t, d, diag = _rate_terms(gains, noise_powers, powers)
    shortfall = qos.r_min - rates
    violated = shortfall > 0.0
    penalty = penalty_weight * np.where(violated, shortfall, 0.0).sum(axis=1)
    loss = (-rates.sum(axis=1) + penalty).mean()
    b = gains.shape[0]
    weights = np.ones_like(rates) + penalty_weight * violated
    grad = -_weighted_rate_grad(gains, t, d, diag, weights) / b
    return loss, grad


def loss_srm(model: PcnetModel, gains: np.ndarray, noise_powers):
    """Train-mode SRM loss and parameter gradients for a batch of channels."""
    x = build_input_batch(gains, noise_powers, model.variant)
    out, cache = nnet.forward(model.params, x, mode="train")
    powers = model.pmax * out
    mean_rate, dmean_dp = srm_objective(gains, noise_powers, powers)
    loss = -mean_rate
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite SRM loss {loss}")
    grads = nnet.backward(model.params, cache, -model.pmax * dmean_dp)
    return loss, grads


def loss_srm_qc(model: PcnetModel, gains: np.ndarray, noise_powers,
                qos: Optional[QosSpec] = None,
                penalty_weight: Optional[float] = None):
    """Train-mode QoS-penalised loss and parameter gradients.

    With penalty weight 0 this reduces exactly to :func:`loss_srm`.
    """
    qos = qos if qos is not None else model.qos
    lam = penalty_weight if penalty_weight is not None else model.penalty_weight
    if qos is None or lam is None:
        raise ValueError("loss_srm_qc needs a qos spec and penalty weight")
    if lam < 0:
        raise ValueError("penalty weight must be >= 0")
    x = build_input_batch(gains, noise_powers, model.variant)
    out, cache = nnet.forward(model.params, x, mode="train")
    powers = model.pmax * out
    loss, dloss_dp = srm_qc_objective(gains, noise_powers, powers, qos, lam)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite SRM-QC loss {loss}")
    grads = nnet.backward(model.params, cache, model.pmax * dloss_dp)
    return loss, grads


def srm_qc_output(model: PcnetModel, sample: ChannelSample,
                  qos: Optional[QosSpec] = None) -> Tuple[np.ndarray, bool]:
    """Deployed profile for a feasible QoS instance.

    Returns (profile, hit): the raw network output when it satisfies all
    constraints (hit), otherwise the scaled closed-form feasible profile
    (miss). Raises on instances that are infeasible to begin with.
    """
    qos = qos if qos is not None else model.qos
    if qos is None:
        raise ValueError("srm_qc_output needs a qos spec")
    feas = qos_feasibility(sample, qos, model.pmax)
    if not feas.feasible:
        raise ValueError("srm_qc_output called on an infeasible instance")
    powers = infer(model, sample)
    if check_profile_feasible(sample, powers, qos, model.pmax):
        return powers, True
    return feas.p_tilde, False


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run; the seed drives both the fresh
    per-iteration data stream and the fixed validation set."""

    total_iterations: int
    seed: int
    batch_size: int = 1000
    validation_every: int = 50
    validation_set_size: int = 10_000
    esn0_db_set: Tuple[float, ...] = (10.0,)
    learning_rate: float = 1e-3

    def __post_init__(self):
        if min(self.total_iterations, self.batch_size,
               self.validation_every, self.validation_set_size) < 1:
            raise ValueError("all counts must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch norm")
        if not self.esn0_db_set:
            raise ValueError("esn0_db_set must not be empty")

    def config_hash(self) -> str:
        blob = json.dumps(
            {
                "total_iterations": self.total_iterations,
                "seed": self.seed,
                "batch_size": self.batch_size,
                "validation_every": self.validation_every,
                "validation_set_size": self.validation_set_size,
                "esn0_db_set": list(self.esn0_db_set),
                "learning_rate": self.learning_rate,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainHistory:
    """Validation trace: (iteration, deployed-objective) pairs."""

    iterations: List[int] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    best_iteration: int = -1
    best_objective: float = -np.inf

    def record(self, iteration: int, objective: float) -> bool:
        self.iterations.append(iteration)
        self.objectives.append(objective)
        if objective > self.best_objective:
            self.best_objective = objective
            self.best_iteration = iteration
            return True
        return False


def deployed_mean_rate(model: PcnetModel, gains, noise_powers,
                       p_tilde: Optional[np.ndarray] = None) -> float:
    """Mean sum rate of the deployed profiles on a dataset.

    SRM models deploy rounded-binary profiles; QoS models deploy the raw
    output with infeasible rows replaced by the precomputed fallback.
    """
    powers = infer_batch(model, gains, noise_powers)
    if model.task == TASK_SRM:
        deployed = round_binary(powers, model.pmax)
    else:
        if p_tilde is None:
            _, _, _, p_tilde = qos_feasibility_batch(
                gains, noise_powers, model.qos, model.pmax
            )
        ok = check_profile_feasible_batch(
            gains, noise_powers, powers, model.qos, model.pmax
        )
        deployed = np.where(ok[:, None], powers, p_tilde)
    return float(batch_sum_rates(gains, deployed, noise_powers).mean())


def train(model: PcnetModel, config: TrainConfig, source: ChannelSource
          ) -> Tuple[PcnetModel, TrainHistory]:
    """Run the unsupervised training loop and return the best checkpoint.

    Fresh mini-batches are drawn from ``source`` at every iteration and
    never reused. Every ``validation_every`` steps the deployed
    objective (see :func:`deployed_mean_rate`) is measured on a fixed
    held-out set drawn once at the start; the parameters achieving the
    best objective are returned.
    """
    if model.variant == PCNET and len(config.esn0_db_set) != 1:
        raise ValueError("plain variant trains on a single EsN0")
    data_ss, val_ss = np.random.SeedSequence(config.seed).spawn(2)
    data_rng = np.random.default_rng(data_ss)
    val_rng = np.random.default_rng(val_ss)

    val_gains, val_noise = source(config.validation_set_size, val_rng)
    val_p_tilde = None
    if model.task == TASK_SRM_QC:
        _, _, _, val_p_tilde = qos_feasibility_batch(
            val_gains, val_noise, model.qos, model.pmax
        )

    loss_fn = loss_srm if model.task == TASK_SRM else loss_srm_qc
    state = nnet.AdamState.init(model.params, lr=config.learning_rate)
    history = TrainHistory()
    best_params = model.params.copy()

    for it in range(1, config.total_iterations + 1):
        gains, noise = source(config.batch_size, data_rng)
        try:
            _, grads = loss_fn(model, gains, noise)
            nnet.adam_step(model.params, grads, state)
        except TrainingDivergenceError as exc:
            exc.history = history
            raise
        if it % config.validation_every == 0:
            obj = deployed_mean_rate(model, val_gains, val_noise, val_p_tilde)
            if history.record(it, obj):
                best_params = model.params.copy()

    return replace(model, params=best_params), history


def save_pcnet(path, model: PcnetModel, config_hash: Optional[str] = None,
               extra_meta: Optional[dict] = None) -> None:
    meta = {
        "variant": model.variant,
        "task": model.task,
        "k": model.k,
        "pmax": model.pmax,
        "r_min": None if model.qos is None else model.qos.r_min.tolist(),
        "penalty_weight": model.penalty_weight,
        "config_hash": config_hash,
    }
    if extra_meta:
        meta.update(extra_meta)
    nnet.save_model(path, model.params, meta)


def load_pcnet(path) -> PcnetModel:
    params, meta = nnet.load_model(path)
    qos = None if meta.get("r_min") is None else QosSpec(np.asarray(meta["r_min"]))
    return PcnetModel(
        params,
        meta["variant"],
        meta["k"],
        meta["task"],
        meta["pmax"],
        qos,
        meta.get("penalty_weight"),
    )
