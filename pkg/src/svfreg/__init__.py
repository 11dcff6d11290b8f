"""svfreg: diffeomorphic 3D registration with stationary velocity fields,
Monte Carlo dropout uncertainty, and test-time adaptation."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

from .diffeo import (DisplacementField, IntegrationTape, compose,
                     folding_fraction, integrate_svf, integrate_svf_backward,
                     invert_via_negation, jacobian_determinant, warp)
from .engine import (AdaptConfig, AdaptReport, NumericalFailure, OptState,
                     adam_step, adapt, pretrain, register)
from .grid import (GridPoint, ScalarVolume, VectorField, central_gradient,
                   clip_rescale, resample, resample_to, trilinear_sample,
                   trilinear_sample_adjoint, upsample_field)
from .metrics import (BinaryMask, MetricsReport, assd, dice, edt,
                      evaluate_registration, inverse_consistency_error,
                      warp_mask)
from .objective import LossBreakdown, bending_energy, mse_loss, total_loss
from .phantom import PhantomCase, make_phantom_pair, smooth_random_svf
from .predictor import (Architecture, DropoutMask, ForwardTape,
                        PredictorParams, init_params, load_checkpoint,
                        sample_dropout_mask, save_checkpoint)
from .uncertainty import McEnsemble, UncertaintyMap, mc_sample, mean_variance, weight_map
from .volio import RunManifest, VolumeFormatError, read_volume, write_volume

__all__ = [
    "kernel_backend", "__version__",
    "ScalarVolume", "VectorField", "GridPoint", "trilinear_sample",
    "trilinear_sample_adjoint", "central_gradient", "resample", "resample_to",
    "upsample_field", "clip_rescale",
    "DisplacementField", "IntegrationTape", "compose", "integrate_svf",
    "integrate_svf_backward", "warp", "invert_via_negation",
    "jacobian_determinant", "folding_fraction",
    "Architecture", "PredictorParams", "DropoutMask", "ForwardTape",
    "init_params", "sample_dropout_mask", "save_checkpoint", "load_checkpoint",
    "LossBreakdown", "mse_loss", "bending_energy", "total_loss",
    "McEnsemble", "UncertaintyMap", "mc_sample", "mean_variance", "weight_map",
    "AdaptConfig", "AdaptReport", "OptState", "NumericalFailure", "adam_step",
    "pretrain", "adapt", "register",
    "PhantomCase", "make_phantom_pair", "smooth_random_svf",
    "BinaryMask", "MetricsReport", "dice", "assd", "edt", "warp_mask",
    "inverse_consistency_error", "evaluate_registration",
    "RunManifest", "VolumeFormatError", "read_volume", "write_volume",
]
