"""Sum-rate power control on the K-user interference channel.

Neural controllers trained without labels on the negated sum rate,
ensembles of them, and the classical solvers they are benchmarked
against (iterative weighted-MMSE, greedy/exhaustive binary control,
round-robin coordinate ascent), for the plain and the QoS-constrained
problem.
"""

from .channel import (
    ChannelSample,
    Dataset,
    GeometryConfig,
    SystemConfig,
    esn0_to_noise,
    load_dataset,
    sample_geometry,
    sample_rayleigh,
    sample_rician,
    save_dataset,
)
from .ensemble import Ensemble, SelectionRecord, hit_rate, select, selection_histogram
from .errors import CapacityError, ConfigError, TrainingDivergenceError
from .metrics import (
    FeasibilityResult,
    QosSpec,
    check_profile_feasible,
    per_user_rates,
    qos_feasibility,
    scale_feasible,
    sum_rate,
)
from .pcnet import (
    PcnetModel,
    TrainConfig,
    TrainHistory,
    build_input,
    build_model,
    infer,
    load_pcnet,
    loss_srm,
    loss_srm_qc,
    round_binary,
    save_pcnet,
    srm_qc_output,
    train,
)
from .baselines import (
    LandscapeStats,
    WmmseConfig,
    WmmseResult,
    gbpc,
    grid_oracle_srm_qc,
    landscape_stats,
    optbpc,
    rr_coordinate_ascent,
    wmmse,
    wmmse_multi,
)

__version__ = "0.1.0"
