"""Experiment orchestration: dataset generation, ensemble training,
evaluation, penalty-weight sweeps, restart-landscape analysis, and
runtime benchmarks.

Every command takes an :class:`ExperimentConfig` (parsed from a JSON
file plus dotted-key overrides) and writes its artifacts under the
config's output directory. All randomness is derived from the config
seed through named seed sequences, so reruns with identical configs
produce byte-identical artifacts; wall-clock measurements are the one
exception and live in separate ``timings``/benchmark files.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import baselines as bl
from . import channel as ch
from . import ensemble as ens
from . import pcnet as pc
from . import reports as rp
from .errors import CapacityError, ConfigError, TrainingDivergenceError
from .metrics import QosSpec, batch_sum_rates, qos_feasibility_batch

SRM_BASELINES = ("wmmse", "wmmse_multi", "rr", "gbpc", "optbpc")
SRM_QC_BASELINES = ("grid_oracle", "p_tilde")


@dataclass
class TrainSettings:
    batch_size: int = 1000
    total_iterations: int = 20_000
    validation_every: int = 50
    validation_set_size: int = 1000
    learning_rate: float = 1e-3


@dataclass
class EvalSettings:
    test_size: int = 10_000
    baselines: List[str] = field(default_factory=lambda: ["wmmse", "gbpc"])
    wmmse_inits: int = 10
    wmmse_stop_tol: float = 1e-4
    wmmse_max_iterations: int = 500
    rr_stop_tol: float = 1e-4
    grid_points_per_axis: int = 51
    reference: str = "wmmse"


@dataclass
class LandscapeSettings:
    samples: int = 1000
    restarts: int = 30
    esn0_db_list: List[float] = field(default_factory=lambda: [0.0, 10.0])


@dataclass
class ExperimentConfig:
    task: str = "srm"
    k: int = 10
    pmax: float = 1.0
    variant: str = "pcnet"
    channel_model: str = "rayleigh"
    esn0_db: float = 10.0
    esn0_db_set: Optional[List[float]] = None
    rician_k_factor_db: float = 0.0
    geometry_area_side: float = 10.0
    r_min: Optional[List[float]] = None
    penalty_weight: float = 10.0
    ensemble_size: int = 5
    shape: Optional[List[int]] = None
    splits: Dict[str, int] = field(default_factory=lambda: {"test": 10_000})
    seed: Optional[int] = None
    out_dir: str = "runs/out"
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    landscape: LandscapeSettings = field(default_factory=LandscapeSettings)

    def __post_init__(self):
        if self.task not in (pc.TASK_SRM, pc.TASK_SRM_QC):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in (pc.PCNET, pc.PCNET_PLUS):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.channel_model not in ("rayleigh", "rician", "geometry"):
            raise ConfigError(f"unknown channel model {self.channel_model!r}")
        if self.k < 1 or self.pmax <= 0 or self.ensemble_size < 1:
            raise ConfigError("k, pmax and ensemble_size must be positive")
        if self.task == pc.TASK_SRM_QC:
            if self.r_min is None:
                raise ConfigError("srm_qc needs r_min")
            if len(self.r_min) != self.k:
                raise ConfigError("r_min length must equal k")
            if self.penalty_weight < 0:
                raise ConfigError("penalty_weight must be >= 0")
        if self.variant == pc.PCNET_PLUS and not self.esn0_db_set:
            raise ConfigError("pcnet_plus needs esn0_db_set")
        if self.variant == pc.PCNET and self.esn0_db_set and len(self.esn0_db_set) > 1:
            raise ConfigError("plain pcnet trains on a single EsN0")

    @property
    def qos(self) -> Optional[QosSpec]:
        return None if self.r_min is None else QosSpec(np.asarray(self.r_min))

    @property
    def esn0_values(self) -> List[float]:
        return list(self.esn0_db_set) if self.esn0_db_set else [self.esn0_db]

    def digest(self) -> str:
        payload = asdict(self)
        payload.pop("out_dir")  # artifacts must not depend on their location
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()
        ).hexdigest()

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("this command requires an explicit seed")
        return self.seed


def _apply_override(data: dict, dotted: str, value_text: str) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-object")
    try:
        node[keys[-1]] = json.loads(value_text)
    except json.JSONDecodeError:
        node[keys[-1]] = value_text


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    nested = {
        "train": TrainSettings, "eval": EvalSettings, "landscape": LandscapeSettings,
    }
    kwargs = {}
    for key, cls in nested.items():
        sub = data.pop(key, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{key!r} must be an object")
        try:
            kwargs[key] = cls(**sub)
        except TypeError as exc:
            raise ConfigError(f"bad {key} settings: {exc}") from None
    valid = set(ExperimentConfig.__dataclass_fields__) - set(nested)
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**data, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        dotted, _, value = item.partition("=")
        _apply_override(data, dotted, value)
    return config_from_dict(data)


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _name_entropy(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def make_stream(config: ExperimentConfig, filtered: bool = True) -> pc.ChannelSource:
    """Channel source implied by the config (feasibility-filtered for
    the QoS task unless ``filtered`` is disabled)."""
    geometry = ch.GeometryConfig(area_side=config.geometry_area_side)
    if config.variant == pc.PCNET_PLUS:
        base: pc.ChannelSource = pc.MixedEsn0Stream(
            config.k, config.esn0_values, config.pmax, config.channel_model,
            config.rician_k_factor_db, geometry,
        )
    else:
        sys_cfg = ch.SystemConfig.from_esn0(config.k, config.esn0_db, config.pmax)
        base = pc.FadingStream(
            sys_cfg, config.channel_model, config.rician_k_factor_db, geometry
        )
    if config.task == pc.TASK_SRM_QC and filtered:
        return pc.FeasibleStream(base, config.qos, config.pmax)
    return base


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def dataset_path(config: ExperimentConfig, split: str) -> Path:
    return _out_dir(config) / f"dataset_{split}.chan"


def cmd_generate(config: ExperimentConfig) -> List[Path]:
    """Write one dataset file per configured split, each from an
    independent seed stream; QoS datasets are feasibility-filtered and
    record the rejection count in their header."""
    seed = config.require_seed()
    out = _out_dir(config)
    paths = []
    for split in sorted(config.splits):
        count = config.splits[split]
        stream = make_stream(config)
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _name_entropy(f"generate:{split}")])
        )
        try:
            gains, noise = stream(count, rng)
        except ValueError as exc:
            raise ConfigError(f"split {split!r}: {exc}") from None
        meta = {
            "model": config.channel_model,
            "seed": seed,
            "split": split,
            "task": config.task,
            "esn0_db": config.esn0_values if config.esn0_db_set else config.esn0_db,
            "noise_power": (
                None if config.esn0_db_set
                else ch.esn0_to_noise(config.esn0_db, config.pmax)
            ),
            "pmax": config.pmax,
        }
        if config.channel_model == "rician":
            meta["k_factor_db"] = config.rician_k_factor_db
        if config.channel_model == "geometry":
            meta["area_side"] = config.geometry_area_side
        if isinstance(stream, pc.FeasibleStream):
            meta["r_min"] = list(config.r_min)
            meta["rejections"] = stream.rejected
            meta["accepted"] = stream.accepted
        dataset = ch.Dataset(gains, noise, meta)
        path = out / f"dataset_{split}.chan"
        ch.save_dataset(path, dataset)
        paths.append(path)
    return paths


def train_members(config: ExperimentConfig, lambdas: Optional[float] = None,
                  tag: str = "") -> List[Path]:
    """Train the configured number of members with distinct seeds and
    independent data streams; returns the saved model paths.

    Members that diverge are skipped with a warning; at least one must
    survive.
    """
    seed = config.require_seed()
    out = _out_dir(config)
    lam = config.penalty_weight if lambdas is None else lambdas
    paths = []
    for m in range(config.ensemble_size):
        init_rng = np.random.default_rng(
            np.random.SeedSequence([seed, _name_entropy("init"), m])
        )
        model = pc.build_model(
            config.k, init_rng, config.variant, config.task, config.pmax,
            config.shape,
            qos=config.qos if config.task == pc.TASK_SRM_QC else None,
            penalty_weight=lam if config.task == pc.TASK_SRM_QC else None,
        )
        train_cfg = pc.TrainConfig(
            total_iterations=config.train.total_iterations,
            seed=_derived_seed(seed, _name_entropy("train"), m),
            batch_size=config.train.batch_size,
            validation_every=config.train.validation_every,
            validation_set_size=config.train.validation_set_size,
            esn0_db_set=tuple(config.esn0_values),
            learning_rate=config.train.learning_rate,
        )
        source = make_stream(config)
        try:
            model, history = pc.train(model, train_cfg, source)
        except TrainingDivergenceError as exc:
            print(f"warning: member {m} diverged ({exc}); skipping", file=sys.stderr)
            continue
        path = out / f"member_{tag}{m}.model"
        pc.save_pcnet(path, model, config_hash=train_cfg.config_hash(),
                      extra_meta={"member": m, "experiment": config.digest()})
        rp.write_csv(
            out / f"history_{tag}{m}.csv",
            ["iteration", "objective"],
            zip(history.iterations, history.objectives),
        )
        paths.append(path)
    if not paths:
        raise TrainingDivergenceError("every ensemble member diverged")
    return paths


def cmd_train(config: ExperimentConfig) -> Path:
    """Train the ensemble and write its manifest."""
    member_paths = train_members(config)
    manifest = _out_dir(config) / "ensemble.manifest.json"
    ens.save_manifest(
        manifest, member_paths,
        meta={"k": config.k, "task": config.task, "variant": config.variant,
              "experiment": config.digest()},
    )
    return manifest


def _load_eval_inputs(config, manifest_path, dataset_file):
    ensemble = ens.load_ensemble(manifest_path)
    dataset = ch.load_dataset(dataset_file)
    if ensemble.k != dataset.k:
        raise ConfigError(
            f"manifest K={ensemble.k} does not match dataset K={dataset.k}"
        )
    if config.k != dataset.k:
        raise ConfigError(f"config K={config.k} does not match dataset K={dataset.k}")
    return ensemble, dataset


def _controller_rng(seed: Optional[int], name: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed or 0, _name_entropy(name)])
    )


def run_baseline(name: str, config: ExperimentConfig, dataset: ch.Dataset,
                 p_tilde: Optional[np.ndarray] = None) -> rp.ControllerResult:
    """Evaluate one classical controller over the dataset."""
    wcfg = bl.WmmseConfig(config.eval.wmmse_stop_tol, config.eval.wmmse_max_iterations)
    gains, noise = dataset.gains, dataset.noise_powers
    if name == "wmmse":
        rng = _controller_rng(config.seed, "eval:wmmse")
        inits = rng.uniform(0.0, np.sqrt(config.pmax), (dataset.count, dataset.k))
        powers, conv, _ = bl.wmmse_batch(gains, noise, config.pmax, inits, wcfg)
        rates = batch_sum_rates(gains, powers, noise)
        return rp.ControllerResult(name, rates, nonconverged=int((~conv).sum()))
    if name == "wmmse_multi":
        rng = _controller_rng(config.seed, "eval:wmmse_multi")
        _, rates, conv_frac = bl.wmmse_multi_batch(
            gains, noise, config.pmax, config.eval.wmmse_inits, rng, wcfg
        )
        nonconv = int(round((1.0 - conv_frac) * dataset.count * config.eval.wmmse_inits))
        return rp.ControllerResult(name, rates, nonconverged=nonconv)
    if name == "gbpc":
        powers = bl.gbpc_batch(gains, noise, config.pmax)
        return rp.ControllerResult(name, batch_sum_rates(gains, powers, noise))
    if name == "optbpc":
        _, rates = bl.optbpc_batch(gains, noise, config.pmax)
        return rp.ControllerResult(name, rates)
    if name == "rr":
        rates = np.empty(dataset.count)
        for i, sample in enumerate(dataset.iter_samples()):
            powers = bl.rr_coordinate_ascent(
                sample, config.pmax, config.eval.rr_stop_tol
            )
            rates[i] = batch_sum_rates(sample.gains, powers, sample.noise_power)
        return rp.ControllerResult(name, rates)
    if name == "grid_oracle":
        # On a feasibility-filtered dataset the grid can still miss a
        # thin feasible sliver (resolution boundary); those samples fall
        # back to the scaled closed-form feasible profile.
        qos = config.qos
        if qos is None:
            raise ConfigError("grid_oracle baseline needs r_min")
        if p_tilde is None:
            feasible, _, _, p_tilde = qos_feasibility_batch(
                gains, noise, qos, config.pmax
            )
            if not np.all(feasible):
                raise ConfigError("grid_oracle baseline hit an infeasible instance")
        rates = np.empty(dataset.count)
        fallbacks = 0
        for i, sample in enumerate(dataset.iter_samples()):
            profile, on_grid = bl.grid_oracle_srm_qc(
                sample, qos, config.pmax, config.eval.grid_points_per_axis
            )
            if not on_grid:
                profile = p_tilde[i]
                fallbacks += 1
            rates[i] = batch_sum_rates(sample.gains, profile, sample.noise_power)
        return rp.ControllerResult(name, rates, nonconverged=fallbacks)
    if name == "p_tilde":
        if p_tilde is None:
            feasible, _, _, p_tilde = qos_feasibility_batch(
                gains, noise, config.qos, config.pmax
            )
            if not np.all(feasible):
                raise ConfigError("p_tilde baseline hit an infeasible instance")
        return rp.ControllerResult(name, batch_sum_rates(gains, p_tilde, noise))
    raise ConfigError(f"unknown baseline {name!r}")


def build_eval_report(config: ExperimentConfig, ensemble: ens.Ensemble,
                      dataset: ch.Dataset, timings: Optional[dict] = None
                      ) -> rp.EvalReport:
    """Evaluate the ensemble (all nested prefixes) and the configured
    baselines on a shared test set."""
    report = rp.EvalReport(reference=config.eval.reference)
    report.meta = {
        "task": config.task, "k": config.k, "test_size": dataset.count,
        "experiment": config.digest(),
    }
    gains, noise = dataset.gains, dataset.noise_powers

    p_tilde = None
    if config.task == pc.TASK_SRM_QC:
        feasible, _, _, p_tilde = qos_feasibility_batch(
            gains, noise, config.qos, config.pmax
        )
        if not np.all(feasible):
            raise ConfigError("QoS evaluation requires a feasibility-filtered dataset")

    t0 = time.perf_counter()
    prefix = ens.evaluate_prefixes(
        ensemble, gains, noise, _controller_rng(config.seed, "eval:select"), p_tilde
    )
    epcnet_secs = time.perf_counter() - t0
    for m in range(ensemble.size):
        row = {"m": m + 1, "mean_sum_rate": float(prefix.selected_rates[m].mean())}
        if prefix.hit_fraction is not None:
            row["hit_rate"] = float(prefix.hit_fraction[m])
        report.mean_rate_vs_m.append(row)
    full = rp.ControllerResult(
        "epcnet", prefix.selected_rates[-1],
        hit_rate=(None if prefix.hit_fraction is None
                  else float(prefix.hit_fraction[-1])),
    )
    report.add(full)
    counts = np.bincount(
        np.where(prefix.chosen_full == ens.FALLBACK_INDEX,
                 ensemble.size, prefix.chosen_full),
        minlength=ensemble.size + 1,
    )
    report.selection_counts = counts if config.task == pc.TASK_SRM_QC else counts[:-1]

    if timings is not None:
        timings["epcnet"] = epcnet_secs
    for name in config.eval.baselines:
        t0 = time.perf_counter()
        report.add(run_baseline(name, config, dataset, p_tilde))
        if timings is not None:
            timings[name] = time.perf_counter() - t0
    return report


def write_eval_artifacts(config: ExperimentConfig, report: rp.EvalReport,
                         timings: Optional[dict] = None, tag: str = "") -> Path:
    out = _out_dir(config)
    rows = []
    for row in report.mean_rate_vs_m:
        rows.append([row["m"], row["mean_sum_rate"], row.get("hit_rate", "")])
    rp.write_csv(out / f"mean_rate_vs_m{tag}.csv",
                 ["m", "mean_sum_rate", "hit_rate"], rows)

    cdf_cols = {name: res.cdf() for name, res in report.controllers.items()}
    rp.write_cdf_csv(out / f"cdf_rates{tag}.csv", cdf_cols)

    ref = report.reference
    if ref in report.controllers:
        diff_cols = {
            f"epcnet_minus_{name}": rp.quantile_grid(report.diff_rates("epcnet", name))
            for name in report.controllers if name != "epcnet"
        }
        if diff_cols:
            rp.write_cdf_csv(out / f"cdf_diff{tag}.csv", diff_cols)

    if report.selection_counts is not None:
        rp.write_csv(
            out / f"selection_histogram{tag}.csv",
            ["member", "count"],
            list(enumerate(report.selection_counts)),
        )
    summary_path = out / f"eval_summary{tag}.json"
    rp.write_json(summary_path, rp.summary_payload(report))
    if timings is not None:
        per_10k = {
            name: secs / max(report.meta["test_size"], 1) * 1e4
            for name, secs in timings.items()
        }
        rp.write_json(out / f"timings{tag}.json",
                      {"seconds": timings, "seconds_per_10k_samples": per_10k})
    return summary_path


def cmd_eval(config: ExperimentConfig, manifest_path, dataset_file) -> Path:
    ensemble, dataset = _load_eval_inputs(config, manifest_path, dataset_file)
    timings: dict = {}
    report = build_eval_report(config, ensemble, dataset, timings)
    report.validate()
    return write_eval_artifacts(config, report, timings)


def cmd_lambda_sweep(config: ExperimentConfig, lambdas: Sequence[float]) -> Path:
    """Train one ensemble per penalty weight with shared seeds and
    data streams; report deployed mean rate and hit rate per (lambda, M)."""
    if config.task != pc.TASK_SRM_QC:
        raise ConfigError("lambda sweep only applies to the srm_qc task")
    if not lambdas:
        raise ConfigError("lambda sweep needs at least one value")
    out = _out_dir(config)
    test_file = out / "dataset_test.chan"
    if not test_file.exists():
        cmd_generate(config)
    dataset = ch.load_dataset(test_file)
    feasible, _, _, p_tilde = qos_feasibility_batch(
        dataset.gains, dataset.noise_powers, config.qos, config.pmax
    )
    if not np.all(feasible):
        raise ConfigError("lambda sweep test set must be feasibility-filtered")

    rows = []
    for lam in lambdas:
        tag = f"lam{rp.format_float(lam)}_"
        member_paths = train_members(config, lambdas=lam, tag=tag)
        members = [pc.load_pcnet(p) for p in member_paths]
        e = ens.Ensemble(members)
        prefix = ens.evaluate_prefixes(
            e, dataset.gains, dataset.noise_powers,
            _controller_rng(config.seed, f"lambda:{lam}"), p_tilde,
        )
        for m in range(e.size):
            rows.append([
                lam, m + 1,
                float(prefix.selected_rates[m].mean()),
                float(prefix.hit_fraction[m]),
            ])
    path = out / "lambda_sweep.csv"
    rp.write_csv(path, ["lambda", "m", "mean_sum_rate", "hit_rate"], rows)
    return path


def cmd_landscape(config: ExperimentConfig) -> Path:
    """Restart-spread statistics of the iterative solver per EsN0.

    The same channel draws are reused across EsN0 levels (paired
    comparison); per level the per-sample variance and coefficient of
    variation CDFs plus their medians are reported.
    """
    seed = config.require_seed()
    out = _out_dir(config)
    ls = config.landscape
    sys_cfg = ch.SystemConfig.from_esn0(config.k, ls.esn0_db_list[0], config.pmax)
    geometry = ch.GeometryConfig(area_side=config.geometry_area_side)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _name_entropy("landscape:data")])
    )
    gains = ch.sample_batch(
        sys_cfg, config.channel_model, ls.samples, rng,
        k_factor_db=config.rician_k_factor_db, geometry=geometry,
    )
    wcfg = bl.WmmseConfig(config.eval.wmmse_stop_tol, config.eval.wmmse_max_iterations)
    medians = []
    for esn0 in ls.esn0_db_list:
        noise = ch.esn0_to_noise(esn0, config.pmax)
        run_rng = np.random.default_rng(
            np.random.SeedSequence([seed, _name_entropy(f"landscape:{esn0}")])
        )
        _, var, cv = bl.landscape_stats_batch(
            gains, noise, config.pmax, ls.restarts, run_rng, wcfg
        )
        tag = rp.format_float(esn0)
        rp.write_cdf_csv(out / f"landscape_cdf_esn0_{tag}.csv",
                         {"variance": rp.quantile_grid(var),
                          "cv": rp.quantile_grid(cv)})
        medians.append({
            "esn0_db": esn0,
            "median_variance": float(np.median(var)),
            "median_cv": float(np.median(cv)),
        })
    path = out / "landscape_summary.json"
    rp.write_json(path, {
        "medians": medians,
        "samples": ls.samples,
        "restarts": ls.restarts,
        "k": config.k,
        "experiment": config.digest(),
    })
    return path


def cmd_bench(config: ExperimentConfig, manifest_path=None) -> Path:
    """Wall-clock per controller over the test split.

    Timing output is inherently non-deterministic and excluded from the
    byte-identical artifact contract. When no manifest is given, a
    freshly initialized controller stands in: inference cost does not
    depend on the weight values.
    """
    out = _out_dir(config)
    test_file = out / "dataset_test.chan"
    if not test_file.exists():
        cmd_generate(config)
    dataset = ch.load_dataset(test_file)
    if manifest_path is not None:
        members = ens.load_ensemble(manifest_path).members
        model = members[0]
    else:
        init_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed or 0, _name_entropy("bench:init")])
        )
        model = pc.build_model(
            config.k, init_rng, config.variant, config.task, config.pmax,
            config.shape,
            qos=config.qos if config.task == pc.TASK_SRM_QC else None,
            penalty_weight=(config.penalty_weight
                            if config.task == pc.TASK_SRM_QC else None),
        )

    rows = []

    def timed(name, fn):
        t0 = time.perf_counter()
        fn()
        secs = time.perf_counter() - t0
        rows.append([name, dataset.count, secs, secs / dataset.count * 1e4])

    timed("pcnet_inference",
          lambda: pc.infer_batch(model, dataset.gains, dataset.noise_powers))
    for name in config.eval.baselines:
        timed(name, lambda n=name: run_baseline(n, config, dataset))
    path = out / "bench.csv"
    rp.write_csv(path, ["controller", "samples", "seconds", "seconds_per_10k"], rows)
    rp.write_json(out / "bench_env.json", {
        "python": sys.version,
        "numpy": np.__version__,
        "experiment": config.digest(),
    })
    return path
