"""Physics-guided diffusion inversion of seismic velocity fields.

Forward acoustic modeling with absorbing boundaries, adjoint-state misfit
gradients (least-squares and trace-transport variants), a from-scratch
variance-preserving diffusion stack, two guided samplers, two deterministic
descent baselines, and a config-driven experiment harness.
"""

from .geometry import (
    AcquisitionGeometry,
    Grid,
    SourceWavelet,
    VelocityField,
    ricker_wavelet,
    surface_acquisition,
)
from .wavesim import (
    DivergenceError,
    ShotGather,
    SolverConfig,
    StabilityError,
    add_noise,
    check_cfl,
    forward_operator,
    simulate_shot,
)
from .adjoint import MisfitGradient, forward_jvp, forward_vjp, misfit_and_gradient
from .misfit import (
    MisfitKind,
    MisfitSpec,
    amplitude_weights,
    apply_weights,
    mse_misfit,
    obs_scale,
    ot_objective,
    quantile,
    trace_to_density,
    w2_distance,
)
from .diffusion import (
    DiffusionSchedule,
    FieldScaler,
    GaussianScore,
    GmmScore,
    ScoreModel,
    clean_estimate,
    forward_noising,
    gaussian_score,
    gmm_score,
    make_schedule,
    scale_from_model,
    scale_to_model,
)
from .scorenet import (
    NetConfig,
    TrainedScore,
    TrainingError,
    dsm_train,
    load_checkpoint,
    save_checkpoint,
)
from .samplers import (
    GuidanceConfig,
    Potential,
    SamplerTrace,
    ancestral_step,
    diag_preconditioner,
    dps_sample,
    guidance_gradient,
    guidance_scale,
    make_pde_potential,
    otwepdps_sample,
    tv_indicator,
)
from .baselines import DescentConfig, otwe_tv_descent, tv_subgradient, w2_tv_descent
from .metrics import PSNR_CAP, MetricsRecord, psnr, rel_l2_error, ssim
from .arrayio import (
    ArrayIOError,
    NpyMagicError,
    NpyTruncatedError,
    NpyUnsupportedError,
    npy_read,
    npy_write,
    read_pgm,
    render_field,
    write_csv,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    parse_config_text,
    run_experiment,
    simulate_observations,
    train_prior,
)

__version__ = "0.1.0"
