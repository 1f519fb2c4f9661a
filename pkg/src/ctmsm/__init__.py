"""Continuous-time joint marginal structural survival models for
multiple intermittent treatments.

The package simulates counting-process panels with recurrent treatment
initiations, derives eligibility schedules, estimates continuous-time
stabilized inverse-probability weights through four intensity-model
backends, fits the weighted structural Cox model with robust sandwich
inference, converts fits into counterfactual survival curves and RMSTs,
and benchmarks everything against a discrete-time comparator.
"""

from .benchmark import BenchmarkRow, benchmark_to_csv, parse_method, run_benchmark
from .errors import (
    ConfigError,
    CtmsmError,
    DataValidationError,
    NonIdentifiableError,
    NumericalError,
    PositivityError,
    SeparationError,
)
from .estimands import (
    CounterfactualCurve,
    Regimen,
    counterfactual_survival,
    curve_to_csv,
    estimand_report,
    rmst,
    survival_at,
)
from .forest import ForestParams, LtrcForest, fit_binary_forest, fit_ltrc_forest, node_deviance
from .intensity import (
    BaselineIntensity,
    MultiplicativeIntensityModel,
    StepPath,
    conditional_survival_density,
    fit_cox_intensity,
    kernel_smooth,
    model_from_json,
    model_to_json,
    nelson_aalen,
    select_bandwidth,
)
from .msmfit import PsiEstimate, StructuralModelSpec, bootstrap_ci, fit_weighted_cox, robust_sandwich
from .panel import (
    ColumnSchema,
    CountingProcessPanel,
    EligibilitySchedule,
    FollowupAnchor,
    ObservationRow,
    PseudoSubject,
    PseudoSubjectSet,
    derive_eligibility,
    discretize,
    eligibility_to_csv,
    followup_anchor,
    ingest_panel,
    to_pseudosubjects,
    write_panel,
)
from .simulate import RaggedSpec, SimConfig, make_ragged, null_config, simulate_rectangular
from .weights import (
    OrderingSpec,
    SubjectHistory,
    WeightConfig,
    WeightFactor,
    WeightTable,
    censoring_weight,
    discrete_time_weights,
    estimate_weights,
    joint_weight,
    treatment_weight,
)

__version__ = "0.1.0"
