"""sgdlab: exact phase-space dynamics of momentum SGD on quadratic problems.

Builds quadratic regression problems, simulates discrete SGD, evaluates the
exact Gaussian phase-space model of its continuous-time limit, splits the
drift into diffusive and circulating parts, and predicts displacement
statistics — each closed form backed by an independent numerical oracle in
the test suite.
"""

from .problem import (
    CovarianceMode,
    NoiseModel,
    QuadraticModel,
    RegressionDataset,
    SingularModelError,
    batch_gradient,
    build_quadratic,
    full_gradient,
    generate_regression,
    noise_covariance_empirical,
)
from .spectral import EigenBasis, hvp, project_phase, subspace_iteration
from .simulate import (
    DivergenceError,
    OptimizerConfig,
    PhaseState,
    TrajectoryRecord,
    finite_difference_residual,
    run,
    run_ensemble,
    sgd_step,
)
from .ou_theory import (
    ModeBlock,
    OUModel,
    Regime,
    block_exponential,
    build_ou,
    cross_covariance,
    mean,
    mode_mean,
    sample_exact,
    sample_stationary,
    variance,
)
from .decomposition import (
    Balance,
    Decomposition,
    DecompositionError,
    closed_form_qu,
    kwon_decompose,
    modified_loss,
    probability_current,
    stationarity_certificate,
)
from .diffusion import (
    DiffusionReport,
    damping_profile,
    equipartition_report,
    estimate_sigma_tr_h,
    expected_global_displacement,
    expected_local_displacement,
    fit_power_law,
    velocity_autocorrelation,
)
from .config import ConfigError, ExperimentConfig

__version__ = "0.1.0"
