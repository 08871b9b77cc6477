"""Desk-scale solar-wind radial velocity surrogates.

A spherical spectral neural operator trained autoregressively against an
upwind finite-difference baseline, with the full evaluation-metric suite and
a synthetic heliospheric cube generator so everything runs end to end without
external data.
"""

from .sphere_grid import (
    AU_RSUN,
    R_SUN_KM,
    CubeMeta,
    LatLonGrid,
    RadialGrid,
    VelocityCube,
    VelocityMap,
    build_gauss_legendre_grid,
    build_radial_grid,
)
from .sht import BandLimitError, SpectralCoeffs, legendre_table, sht_analysis, sht_synthesis
from .hux import CflError, HuxConfig, hux_accelerate_boundary, hux_forward
from .sfno import (
    ForwardTape,
    OperatorConfig,
    OperatorParams,
    backward,
    forward,
    init_params,
    param_count,
    spectral_conv,
)
from .training import (
    NormBounds,
    TrainConfig,
    TrainSample,
    adam_step,
    cross_validate,
    denormalize,
    loss_l2_2d,
    make_teacher_forced_samples,
    normalize,
    train,
)
from .rollout import RolloutDivergedError, rollout, rollout_plan, rollout_teacher_eval
from .metrics import (
    EdgeMaskConfig,
    MetricsConfig,
    MetricsReport,
    edge_mse,
    emd,
    evaluate_cube,
    mse,
    sobel_edge_mask,
    uiqi,
)
from .dataio import (
    SynthConfig,
    generate_boundary,
    generate_dataset,
    load_checkpoint,
    load_cube,
    save_checkpoint,
    save_cube,
    split_dataset,
)

__version__ = "0.1.0"
