"""Deterministic desk-scale simulator for distributed SGD whose workers see
relaxed-consistency views of a shared parameter.

The package tracks one auxiliary global parameter per run, lets a pluggable
distribution scheme decide which gradients each worker's view absorbs and
when, measures the squared consistency gap along the way, and checks the
measurements against closed-form constants and convergence-rate bounds.
"""

from .compression import Compressor, ef_update, make_identity, make_onebit, make_topk, parse_compressor
from .errors import ConfigError, InvariantError
from .harness import (
    BoundCheck,
    ConvergenceCheck,
    ExperimentConfig,
    ExperimentResult,
    LowerBoundCell,
    check_bound,
    check_convergence,
    describe_objective,
    lower_bound_study,
    run_experiment,
    sweep,
    write_run_csv,
)
from .kernel import (
    IterationRecord,
    RunConfig,
    RunMetrics,
    SimState,
    WorkerState,
    consistency_gap,
    empirical_B,
    empirical_B_detail,
    init_run,
    run_trial,
    step,
)
from .objectives import (
    CosineQuadraticObjective,
    LogisticObjective,
    Objective,
    ObjectiveConstants,
    QuadraticObjective,
    make_cosine_quadratic,
    make_logistic,
    make_quadratic,
    measure_constants,
    objective_from_config,
)
from .relaxations import (
    SCHEME_NAMES,
    RelaxationConfig,
    Scheme,
    StepReport,
    build_scheme,
    plan_from_events,
    plan_from_file,
)
from .rng import substream
from .theory import (
    RATE_TAGS,
    ConsistencyBound,
    SchedulePreconditionError,
    bound_B,
    lr_schedule,
    rhs_bound,
    rhs_terms,
)

__version__ = "0.1.0"
