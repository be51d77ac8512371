"""Hypergradients for bilevel problems whose lower level is a fixed-point map.

Public surface: the problem abstraction and oracles (bilevel), lower-level
map builders and iteration (lower), the ITD/AID engines (hypergrad), the
error-bound calculators (bounds), the synthetic benchmark suite (suite), the
equilibrium model (eqm), and the experiment runners behind the CLI
(experiments, plotting, cli).
"""

from .bilevel import (
    BilevelProblem,
    DenseJacobians,
    Hypergradient,
    Method,
    check_contraction,
    exact_hypergrad,
    fd_hypergrad,
)
from .bounds import (
    BoundConstants,
    BoundValues,
    aid_bound,
    aid_fp_bound,
    constants_for_quadratic_br,
    itd_bound,
)
from .eqm import EqmConfig, EqmParams, eqm_phi, eqm_train, make_blobs, make_eqm_problem, project_spectral
from .errors import (
    CgBreakdownError,
    ConfigError,
    DivergedError,
    FpgradError,
    InvalidConstantsError,
    InvalidLabelsError,
    NoConvergenceError,
    NotSymmetricError,
    SchemaError,
    SingularMatrixError,
)
from .hypergrad import Adjoint, AdjointSolveReport, aid, cg, cg_normal, fp_adjoint, fp_forward_check, itd
from .lower import (
    GdMapSpec,
    HeavyBallSpec,
    LowerObjective,
    OuterObjective,
    Trajectory,
    gd_map_constants,
    gd_problem,
    heavy_ball_constants,
    heavy_ball_problem,
    iterate,
)
from .numkit import Mat, Rng, Vec, sample_normal, solve_dense, spectral_norm, svd
from .suite import (
    LAMBDA_RANGES,
    ProblemConfig,
    SynthData,
    br_closed_form_hypergrad,
    gen_data,
    make_br,
    make_hr,
    make_krr,
    make_lr,
    make_problem,
    reference_hypergrad,
    sample_lambdas,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
