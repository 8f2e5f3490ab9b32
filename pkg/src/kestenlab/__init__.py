"""Tail constants, first passages and extremes of multivariate stochastic recurrences.

The recursion ``V_n = M_n V_{n-1} + Q_n`` is driven by i.i.d. draws from a
finite mixture of nonnegative matrix/vector atoms. The package computes
the tail index and transfer-operator eigendata, samples the exponentially
shifted walk, estimates the tail constants by simulation and compares
them with brute-force experiments on the original recursion.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArithmeticDetected,
    ConfigParse,
    DegenerateQ,
    EstimatorError,
    InsufficientTailSamples,
    InterpolationOutOfRange,
    KestenError,
    NoConvergence,
    NonContractive,
    NoRoot,
    NotAllowable,
    NotPositivelyRegular,
    RegularityNotReached,
    RejectionTooCostly,
    TruncationDominates,
    UnknownCommand,
    UnreachableSet,
    ValidationError,
)
from .model import (  # noqa: E402
    Atom,
    CycleConfig,
    HalfSpace,
    Intersection,
    ModelDiagnostics,
    ModelSpec,
    Norm,
    NormBallComplement,
    TargetSet,
    gauge,
    k_step_model,
    load_model,
    model_to_dict,
    parse_model,
    positivity_depth,
    regularity_horizon,
    validate_model,
)
from .spectral import (  # noqa: E402
    SpectralSolution,
    SphereGrid,
    apply_adjoint,
    apply_transfer,
    duality_residual,
    eigenvalue,
    find_alpha,
    lambda_prime,
    lambda_prime_mc,
    make_grid,
    solve_alpha,
    solve_eigen,
    transfer_matrix,
)
from .shifted import (  # noqa: E402
    Estimate,
    PathView,
    ShiftedKernel,
    WalkState,
    dual_expectation,
    shifted_step,
    stationary_start,
    unshift_weight,
)
from .simulate import (  # noqa: E402
    ConstantsReport,
    Outcome,
    Trajectory,
    absz_coupled,
    backward_direction,
    crude_cycle_probability,
    estimate_absZ,
    estimate_C,
    estimate_constants,
    estimate_D_A,
    first_passage,
    overjump_samples,
    return_time,
    shifted_path,
    simulate_path,
    stationary_sample,
)
from .extremes import (  # noqa: E402
    ConditioningWindow,
    conditioned_path_experiment,
    empirical_law_experiment,
    extremal_index,
    passage_law_experiment,
    passage_times,
    renewal_identity_check,
    tail_experiment,
    two_sample_passage,
)
from .streams import make_rng  # noqa: E402
