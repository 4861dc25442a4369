"""Report assembly: empirical CDFs, CSV/JSON serialization.

Serialized artifacts are deterministic: JSON is dumped with sorted
keys, floats are written with shortest round-trip repr, and wall-clock
measurements are kept out of the deterministic files (they go to a
separate timings sidecar).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

CDF_POINTS = 1001


def quantile_grid(values: np.ndarray, points: int = CDF_POINTS) -> np.ndarray:
    """Empirical quantile function sampled on a fixed probability grid.

    Serialization view of a distribution: entry i is the quantile at
    probability i / (points - 1); non-decreasing by construction.
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    probs = np.linspace(0.0, 1.0, points)
    return np.quantile(values, probs)


def empirical_cdf_integral(values: np.ndarray) -> float:
    """Exact integral of the empirical quantile function.

    Equals the sample mean; kept as an independent identity check on
    report assembly.
    """
    values = np.asarray(values, dtype=np.float64)
    return float(values.sum() / values.size)


@dataclass
class ControllerResult:
    """Per-controller evaluation outcome; keeps the full rate vector in
    memory so summaries can always be recomputed."""

    name: str
    rates: np.ndarray
    hit_rate: Optional[float] = None
    nonconverged: Optional[int] = None

    @property
    def mean(self) -> float:
        return float(self.rates.mean())

    @property
    def stderr(self) -> float:
        n = self.rates.size
        return float(self.rates.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    def cdf(self) -> np.ndarray:
        return quantile_grid(self.rates)


@dataclass
class EvalReport:
    """Aggregate statistics of every controller over one test set."""

    controllers: Dict[str, ControllerResult] = field(default_factory=dict)
    mean_rate_vs_m: List[dict] = field(default_factory=list)
    selection_counts: Optional[np.ndarray] = None
    reference: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def add(self, result: ControllerResult) -> None:
        self.controllers[result.name] = result

    def diff_rates(self, name: str, reference: str) -> np.ndarray:
        return self.controllers[name].rates - self.controllers[reference].rates

    def validate(self) -> None:
        """Internal consistency: CDF grids are monotone and the mean
        matches the integral of the full empirical CDF."""
        for res in self.controllers.values():
            grid = res.cdf()
            if np.any(np.diff(grid) < 0.0):
                raise AssertionError(f"{res.name}: CDF grid not monotone")
            if abs(res.mean - empirical_cdf_integral(res.rates)) > 1e-6:
                raise AssertionError(f"{res.name}: mean/CDF-integral mismatch")


def format_float(x) -> str:
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            format_float(v) if isinstance(v, (float, np.floating)) else str(v)
            for v in row
        ))
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_cdf_csv(path, columns: Dict[str, np.ndarray]) -> None:
    """One probability column plus one quantile column per controller."""
    names = sorted(columns)
    probs = np.linspace(0.0, 1.0, CDF_POINTS)
    header = ["prob"] + names
    rows = []
    for i in range(CDF_POINTS):
        rows.append([probs[i]] + [columns[n][i] for n in names])
    write_csv(path, header, rows)


def summary_payload(report: EvalReport) -> dict:
    controllers = {}
    for name in sorted(report.controllers):
        res = report.controllers[name]
        entry = {
            "mean_sum_rate": res.mean,
            "stderr": res.stderr,
            "samples": int(res.rates.size),
        }
        if res.hit_rate is not None:
            entry["hit_rate"] = res.hit_rate
        if res.nonconverged is not None:
            entry["nonconverged"] = res.nonconverged
        controllers[name] = entry
    payload = {
        "controllers": controllers,
        "mean_rate_vs_m": report.mean_rate_vs_m,
        "reference": report.reference,
        "meta": report.meta,
    }
    if report.selection_counts is not None:
        payload["selection_counts"] = [int(c) for c in report.selection_counts]
    return payload
