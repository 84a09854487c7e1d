"""graphvar: forecasting multidimensional time series that live on graphs.

Library surface: graph shift operators and product graphs (:mod:`.graphs`),
polynomial graph filters (:mod:`.filters`), the graph-based VAR model
families (:mod:`.models`), least-squares and joint estimation
(:mod:`.estimation`), the sliding-window evaluation harness
(:mod:`.evaluation`), and data ingestion plus synthetic generation
(:mod:`.data`).  The ``graphvar`` command line is in :mod:`.cli`.
"""

from .data import (
    FEATURES,
    DataError,
    Station,
    StationConfig,
    SyntheticSpec,
    companion_spectral_radius,
    generate_synthetic,
    load_air_quality,
    load_panel,
    rescaled_to_radius,
    save_panel,
    station_distances,
)
from .estimation import (
    EstimationError,
    JointFitConfig,
    JointFitResult,
    LsFitResult,
    RegressionSystem,
    SfStepConfig,
    build_regression,
    fit_model,
    joint_fit,
    ls_fit,
    objective_value,
    sf_objective_gradient,
    sf_objective_gradient_fd,
    sf_step,
    unpack_coefficients,
)
from .evaluation import (
    EvaluationError,
    EvaluationReport,
    WindowPlan,
    evaluate,
    grid_search,
    plan_windows,
    rnmse,
)
from .filters import FilterError, FilterTaps, apply_filter, mimo_shift_apply
from .graphs import (
    DistanceMatrix,
    GraphError,
    GraphShiftOperator,
    GsoKind,
    ProductGraphSpec,
    correlation_feature_graph,
    knn_gaussian_graph,
    normalized_laplacian,
    product_gso,
)
from .models import (
    CoefficientSet,
    Family,
    FittedModel,
    ModelError,
    ModelSpec,
    canonical_pg_g_var,
    lag_matrices,
    load_model,
    param_count,
    predict,
    predict_series,
    save_model,
)
from .panel import SignalPanel, unvec_by_feature, vec_by_feature

__version__ = "0.1.0"
