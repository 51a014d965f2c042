"""Weakly-supervised multi-output GP regression via convolved sparse GPs."""

from ._backend import BACKEND
from .baselines import BaselineKind, fit_omgp, fit_omgp_ws, fit_scmgp
from .bounds import (
    DMatrix,
    compute_D,
    elbo_cvb,
    exact_marglik_oracle,
    kl_acuteness,
    scmgp_loglik,
    vterm,
)
from .gradients import (
    GradientBundle,
    finite_diff_check,
    grad_cvb,
    grad_svb,
    grad_vterm,
)
from .kernels import (
    CovBlocks,
    HyperParams,
    IndependentSEHyperParams,
    InducingInputs,
    LatentKernelParams,
    NoiseParams,
    OutputKernelParams,
    SEKernelParams,
    assemble_cov,
    eval_cross_ff,
    eval_cross_fu,
    eval_kuu,
    eval_smoothing,
)
from .model import (
    Dataset,
    ModelConfig,
    VariationalState,
    init_state,
    make_dataset,
    validate_dataset,
)
from .predict import Prediction, posterior_predict
from .svi import QfMoments, elbo_svb, gaussian_kl_u, optimal_qu, qf_moments
from .trainer import FitReport, OptimizerConfig, fit_cvb, fit_svb_em, transform_params
from .experiments import (
    SyntheticConfig,
    generate_synthetic,
    ingest_csv,
    label_accuracy,
    rmse_eval,
    run_benchmark,
)

__version__ = "0.1.0"
