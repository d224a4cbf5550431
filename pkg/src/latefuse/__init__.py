"""Late-fusion multi-task estimation for semiparametric models.

Per-task cross-fitted estimating-equation estimators are reduced to
quadratic surrogates and aggregated at a central node under a group-norm
fusion penalty; infinite-dimensional nuisance functions can be fused the
same way on a shared evaluation grid. A simulated federation runtime
orchestrates the exchange without moving raw samples between nodes.
"""

from .data import (
    FoldPlan,
    ModelKind,
    ParamEstimate,
    SimilarityConfig,
    TaskDataset,
    make_fold_plan,
    read_dataset_csv,
    write_dataset_csv,
)
from .errors import (
    ConfigurationError,
    DataFormatError,
    DegenerateDesignError,
    FederationViolation,
    IllConditionedError,
    NumericalError,
    OrientationError,
)
from .federation import AuditLog, FederationMessage, run_pipeline, validate_message
from .fusion import (
    FusionProblem,
    FusionSolution,
    prox_group,
    solve_fusion,
    solve_quadratic_fusion,
    tune_lambda,
    weighted_geometric_median,
)
from .kernels import KernelFit, cv_bandwidth, local_linear_predict, nw_predict
from .moments import (
    BandwidthPolicy,
    InitialFit,
    NuisanceSet,
    QuadraticSurrogate,
    build_surrogate,
    cate_sim_moment,
    fit_initial_plm,
    fit_initial_single_index,
    plm_moment,
    sim_moment,
)
from .nuisance import (
    EvaluationGrid,
    NuisanceGridFit,
    build_grid,
    fuse_nuisance,
    local_grid_stats,
    predict_nearest,
    tune_nuisance,
)
from .pipeline import PipelineConfig, PipelineResult, fit_direct
from .scenarios import ScenarioConfig, ScenarioDraw, generate_scenario
from .experiment import MetricsRecord, evaluate, run_experiment

__version__ = "0.1.0"
