"""MaTE: macroscopic traffic estimation from partial link measurements.

A differentiable network-flow model that jointly learns trip generation,
destination and route choice, O-D flows and link performance functions from
traffic counts and travel times, while driving the implied link flows
toward an equilibrium fixed point.
"""

from .network import (
    IncidenceMatrices,
    Link,
    Network,
    ParseError,
    PathSet,
    build_incidences,
    k_shortest_paths,
    parse_tntp,
    parse_tntp_files,
    paths_from_csv,
    paths_to_csv,
)
from .observations import (
    ObservationSet,
    Sample,
    features_from_csv,
    features_to_csv,
    observations_from_csv,
    observations_to_csv,
)
from .params import (
    GroupSpec,
    ModelParams,
    ParamSpec,
    checkpoint_dumps,
    checkpoint_loads,
    default_spec,
    initialize,
    project,
)
from .forward import (
    ForwardOutputs,
    LossReport,
    LossWeights,
    NumericError,
    forward_pass,
    loss,
    relative_gap,
)
from .train import (
    AdamState,
    TrainConfig,
    TrainTrace,
    adam_step,
    assign_stalogit,
    fit,
    gradients,
    infer,
    solve_equilibrium,
)
from .datagen import (
    SyntheticData,
    SyntheticSpec,
    generate,
    ground_truth_json,
    load_sioux_falls,
    solve_fixed_point,
)
from .eval import (
    EvalRecord,
    FoldPlan,
    baseline_historical_mean,
    baseline_linear_regression,
    kfold,
    lambda_sweep,
    mape,
    mdape,
    mse,
    plan_folds,
    r2,
    records_to_csv,
)

__version__ = "1.0.0"
