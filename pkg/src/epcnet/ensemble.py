"""Ensembles of independently trained power controllers.

Every member maps the channel to its deployed profile (rounded binary
for plain sum-rate models, raw output for QoS models); the selector
keeps the candidate with the highest sum rate. For QoS tasks,
infeasible member outputs never compete, and the scaled closed-form
feasible profile steps in when no member produces a feasible one, so
the selected profile is always feasible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .channel import ChannelSample, Dataset
from .metrics import (
    QosSpec,
    batch_sum_rates,
    check_profile_feasible_batch,
    qos_feasibility_batch,
)
from .pcnet import (
    PcnetModel,
    TASK_SRM,
    TASK_SRM_QC,
    infer_batch,
    load_pcnet,
    round_binary,
)

FALLBACK_INDEX = -1


@dataclass
class Ensemble:
    """Ordered collection of homogeneous members."""

    members: List[PcnetModel]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        head = self.members[0]
        for m in self.members[1:]:
            if (m.k, m.variant, m.task, m.shape) != (
                head.k, head.variant, head.task, head.shape,
            ):
                raise ValueError("ensemble members must share K, variant, task, shape")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def k(self) -> int:
        return self.members[0].k

    @property
    def task(self) -> str:
        return self.members[0].task

    @property
    def pmax(self) -> float:
        return self.members[0].pmax

    @property
    def qos(self) -> Optional[QosSpec]:
        return self.members[0].qos

    def prefix(self, m: int) -> "Ensemble":
        return Ensemble(self.members[:m])


@dataclass(frozen=True)
class SelectionRecord:
    """Per-sample audit of the selector's decision.

    ``chosen`` is the member index, or FALLBACK_INDEX when the shared
    feasible fallback was deployed (QoS task, no feasible member).
    """

    chosen: int
    member_rates: np.ndarray
    tie: bool


def _member_deployments(ensemble: Ensemble, gains, noise_powers):
    """Deployed candidate profiles of every member, shape (M, N, K),
    plus the per-member eligibility mask (N, M)."""
    profiles = []
    for member in ensemble.members:
        powers = infer_batch(member, gains, noise_powers)
        if ensemble.task == TASK_SRM:
            powers = round_binary(powers, member.pmax)
        profiles.append(powers)
    stacked = np.stack(profiles)
    n = stacked.shape[1]
    if ensemble.task == TASK_SRM_QC:
        eligible = np.stack(
            [
                check_profile_feasible_batch(
                    gains, noise_powers, stacked[m], ensemble.qos, ensemble.pmax
                )
                for m in range(ensemble.size)
            ],
            axis=1,
        )
    else:
        eligible = np.ones((n, ensemble.size), dtype=bool)
    return stacked, eligible


def select_batch(
    ensemble: Ensemble,
    gains: np.ndarray,
    noise_powers,
    rng: np.random.Generator,
    p_tilde: Optional[np.ndarray] = None,
):
    """Vectorised selection over a batch of channels.

    Returns (profiles (N, K), chosen (N,), member_rates (N, M),
    ties (N,)). For QoS tasks ``p_tilde`` may carry precomputed fallback
    profiles; otherwise they are derived on demand.
    """
    gains = np.asarray(gains, dtype=np.float64)
    candidates, eligible = _member_deployments(ensemble, gains, noise_powers)
    member_rates = np.stack(
        [batch_sum_rates(gains, candidates[m], noise_powers)
         for m in range(ensemble.size)],
        axis=1,
    )
    n = gains.shape[0]
    rated = np.where(eligible, member_rates, -np.inf)

    need_fallback = ~eligible.any(axis=1)
    if np.any(need_fallback):
        if p_tilde is None:
            feasible, _, _, p_tilde = qos_feasibility_batch(
                gains, noise_powers, ensemble.qos, ensemble.pmax
            )
            if not np.all(feasible[need_fallback]):
                raise ValueError("selection hit an infeasible QoS instance")

    profiles = np.empty((n, ensemble.k))
    chosen = np.empty(n, dtype=np.int64)
    ties = np.zeros(n, dtype=bool)
    for i in range(n):
        if need_fallback[i]:
            profiles[i] = p_tilde[i]
            chosen[i] = FALLBACK_INDEX
            continue
        row = rated[i]
        winners = np.flatnonzero(row == row.max())
        if winners.size > 1:
            ties[i] = True
            pick = winners[rng.integers(winners.size)]
        else:
            pick = winners[0]
        chosen[i] = pick
        profiles[i] = candidates[pick, i]
    return profiles, chosen, member_rates, ties


def select(
    ensemble: Ensemble, sample: ChannelSample, rng: np.random.Generator
) -> Tuple[np.ndarray, SelectionRecord]:
    """Deployed profile for one channel plus the selection audit record."""
    profiles, chosen, member_rates, ties = select_batch(
        ensemble, sample.gains[None], sample.noise_power, rng
    )
    return profiles[0], SelectionRecord(int(chosen[0]), member_rates[0], bool(ties[0]))


def hit_rate(ensemble: Ensemble, dataset: Dataset, qos: QosSpec) -> float:
    """Fraction of instances where at least one member's raw output
    already satisfies every rate target (before any fallback)."""
    feasible, _, _, _ = qos_feasibility_batch(
        dataset.gains, dataset.noise_powers, qos, ensemble.pmax
    )
    if not np.all(feasible):
        raise ValueError("hit_rate requires a dataset of feasible instances")
    any_hit = np.zeros(dataset.count, dtype=bool)
    for member in ensemble.members:
        powers = infer_batch(member, dataset.gains, dataset.noise_powers)
        any_hit |= check_profile_feasible_batch(
            dataset.gains, dataset.noise_powers, powers, qos, ensemble.pmax
        )
    return float(any_hit.mean())


def selection_histogram(
    ensemble: Ensemble, dataset: Dataset, rng: np.random.Generator
) -> np.ndarray:
    """How often each member wins the selection over the dataset.

    Returns M counts for plain sum-rate ensembles; QoS ensembles get an
    extra trailing bin counting fallback deployments. Counts always sum
    to the dataset size.
    """
    _, chosen, _, _ = select_batch(
        ensemble, dataset.gains, dataset.noise_powers, rng
    )
    if ensemble.task == TASK_SRM_QC:
        counts = np.bincount(
            np.where(chosen == FALLBACK_INDEX, ensemble.size, chosen),
            minlength=ensemble.size + 1,
        )
    else:
        counts = np.bincount(chosen, minlength=ensemble.size)
    return counts


@dataclass
class PrefixEvaluation:
    """Selection statistics for every nested prefix of the ensemble.

    ``selected_rates[m - 1]`` are the per-sample deployed rates of the
    first m members (QoS tasks fall back to the scaled feasible profile
    where no member is feasible); ``hit_fraction`` is the per-prefix raw
    feasibility coverage (QoS tasks only).
    """

    member_rates: np.ndarray      # (N, M)
    eligible: np.ndarray          # (N, M)
    selected_rates: np.ndarray    # (M, N)
    hit_fraction: Optional[np.ndarray]  # (M,) or None
    chosen_full: np.ndarray       # (N,) winner under the full ensemble


def evaluate_prefixes(
    ensemble: Ensemble,
    gains: np.ndarray,
    noise_powers,
    rng: np.random.Generator,
    p_tilde: Optional[np.ndarray] = None,
) -> PrefixEvaluation:
    """Evaluate all nested prefixes M = 1..size in one pass.

    Member deployments and rates are computed once; since exact ties
    share the same rate, prefix rates are plain running maxima and the
    rng only arbitrates the reported winner indices of the full
    ensemble.
    """
    gains = np.asarray(gains, dtype=np.float64)
    candidates, eligible = _member_deployments(ensemble, gains, noise_powers)
    member_rates = np.stack(
        [batch_sum_rates(gains, candidates[m], noise_powers)
         for m in range(ensemble.size)],
        axis=1,
    )
    rated = np.where(eligible, member_rates, -np.inf)
    selected = np.maximum.accumulate(rated, axis=1).T.copy()

    hit_fraction = None
    if ensemble.task == TASK_SRM_QC:
        covered = np.cumsum(eligible, axis=1) > 0
        hit_fraction = covered.mean(axis=0)
        uncovered = ~covered
        if np.any(uncovered):
            if p_tilde is None:
                feasible, _, _, p_tilde = qos_feasibility_batch(
                    gains, noise_powers, ensemble.qos, ensemble.pmax
                )
                if not np.all(feasible[uncovered.any(axis=1)]):
                    raise ValueError("evaluation hit an infeasible QoS instance")
            fallback_rates = batch_sum_rates(gains, p_tilde, noise_powers)
            selected = np.where(uncovered.T, fallback_rates[None, :], selected)

    n = gains.shape[0]
    chosen_full = np.empty(n, dtype=np.int64)
    full = rated
    for i in range(n):
        row = full[i]
        top = row.max()
        if not np.isfinite(top):
            chosen_full[i] = FALLBACK_INDEX
            continue
        winners = np.flatnonzero(row == top)
        chosen_full[i] = (
            winners[rng.integers(winners.size)] if winners.size > 1 else winners[0]
        )
    return PrefixEvaluation(member_rates, eligible, selected, hit_fraction, chosen_full)


def combined_hash(member_paths: Sequence) -> str:
    digest = hashlib.sha256()
    for path in member_paths:
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def save_manifest(path, member_paths: Sequence, meta: Optional[dict] = None) -> None:
    """Write the ensemble manifest: ordered member files + combined hash."""
    payload = {
        "members": [Path(p).name for p in member_paths],
        "combined_hash": combined_hash(member_paths),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_ensemble(manifest_path) -> Ensemble:
    manifest_path = Path(manifest_path)
    payload = json.loads(manifest_path.read_text())
    paths = [manifest_path.parent / name for name in payload["members"]]
    if combined_hash(paths) != payload["combined_hash"]:
        raise ValueError(f"{manifest_path}: member files do not match manifest hash")
    return Ensemble([load_pcnet(p) for p in paths])
