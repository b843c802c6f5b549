"""Robust moment-based estimation via spectral gradient reweighting.

A reweighting primitive computes outlier-resistant observation weights for
per-observation gradient clouds through an entropy-regularized matrix
game; an estimation driver embeds it in moment-matching optimization; a
low-rank Gaussian mixture specialization, baselines, and a benchmark CLI
sit on top.
"""

from . import errors
from .engine import (
    BoundInputs,
    DriverConfig,
    FitReport,
    MomentModel,
    finite_sample_bound,
    fit,
    identification_probe,
)
from .dgmm import (
    DgmmConfig,
    DgmmModel,
    MixtureParams,
    PrecomputedMoments,
    em_fit,
    mixture_errors,
    naive_fit,
    noise_aware_fit,
    robust_fit,
)
from .datagen import CloudSpec, MixtureSpec, make_cloud, make_mixture_data, rng_contract
from .optim import LbfgsState, lbfgs_step, reset_memory, stabilization_test
from .sgr import (
    GradientCloud,
    SgrConfig,
    SgrReport,
    gain_matrix,
    mw_loss,
    normalizing_scale,
    run_mw_mmw,
    run_sgr,
    theory_constants,
)
from .specmat import (
    DensityMatrix,
    EigenPair,
    gibbs_state,
    op_norm,
    sym_eigen,
    trace_inner,
)
from .weights import (
    WeightVector,
    geometric_median,
    kl_project,
    outlier_mass,
    uniform,
)

__version__ = "0.1.0"
