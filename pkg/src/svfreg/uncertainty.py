"""Monte Carlo dropout uncertainty.

Repeated stochastic forward passes (independent dropout masks) give an
ensemble of velocity fields; the per-voxel population mean and variance of
the ensemble are the Bayesian field estimate and the model uncertainty.
Ensembles are collected at the coarse head resolution, where the dropout
noise actually lives; the channel-summed variance is converted into a
spatial confidence weight 1/(variance + floor), upsampled to the image
grid, and normalized to mean one so the weighted similarity loss keeps its
scale (and the regularizer trade-off stays meaningful).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .grid import Dims, ScalarVolume, VectorField, resample_to
from .predictor import PredictorParams, forward, sample_dropout_mask


@dataclass
class McEnsemble:
    """Velocity-field samples from stochastic forward passes, with the
    per-sample mask seeds that produced them."""

    fields: list
    seeds: list

    def __len__(self) -> int:
        return len(self.fields)


@dataclass
class UncertaintyMap:
    """Channel-summed velocity variance and the derived confidence weight."""

    variance: ScalarVolume
    weight: ScalarVolume
    variance_floor: float


def mc_sample(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume,
              n_samples: int, seed: int) -> McEnsemble:
    """Run ``n_samples`` dropout forward passes; deterministic given
    (params, inputs, n_samples, seed), and the sample sequence is a prefix
    of any longer run with the same seed."""
    if n_samples < 1:
        raise ValueError(f"need at least one sample, got {n_samples}")
    seed_gen = rng.stream(seed, rng.MC_STREAM)
    mask_seeds = [int(s) for s in seed_gen.integers(0, 2**62, size=n_samples)]
    fields = []
    for mask_seed in mask_seeds:
        mask = sample_dropout_mask(params, mask_seed)
        _, tape = forward(params, fixed, moving, mask)
        fields.append(VectorField(tape.svf_coarse, tape.coarse_spacing))
    return McEnsemble(fields, mask_seeds)


def mean_variance(ensemble: McEnsemble):
    """Population mean field and per-voxel channel-summed population
    variance (both divide by the sample count)."""
    n = len(ensemble)
    if n < 2:
        raise ValueError("variance needs >= 2 samples")
    stack = np.stack([f.data for f in ensemble.fields])
    # shifted two-pass: identical samples give exactly zero variance
    shifted = stack - stack[0]
    shifted_mean = shifted.mean(axis=0)
    mean = stack[0] + shifted_mean
    var = np.mean((shifted - shifted_mean) ** 2, axis=0)
    spacing = ensemble.fields[0].spacing
    return (VectorField(mean, spacing),
            ScalarVolume(var.sum(axis=0), spacing))


def weight_map(variance: ScalarVolume, variance_floor: float,
               image_dims: Dims | None = None) -> ScalarVolume:
    """Confidence weights 1/(variance + floor), optionally upsampled to the
    image grid, then normalized to mean one."""
    if not variance_floor > 0:
        raise ValueError(f"variance floor must be > 0, got {variance_floor}")
    if variance.data.min() < 0:
        raise ValueError("variance must be non-negative")
    w = ScalarVolume(1.0 / (variance.data + variance_floor), variance.spacing)
    if image_dims is not None and tuple(image_dims) != variance.dims:
        w = resample_to(w, image_dims)
    return ScalarVolume(w.data / w.data.mean(), w.spacing)


def estimate(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume,
             n_samples: int, seed: int, variance_floor: float) -> UncertaintyMap:
    """Ensemble -> variance -> weight map in one call (the pre-loop stage
    of the adaptation driver)."""
    ensemble = mc_sample(params, fixed, moving, n_samples, seed)
    _, variance = mean_variance(ensemble)
    weight = weight_map(variance, variance_floor, image_dims=fixed.dims)
    return UncertaintyMap(variance, weight, variance_floor)
