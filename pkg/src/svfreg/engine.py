"""Optimization drivers: Adam, pretraining, and uncertainty-aware
test-time adaptation.

Adaptation for one image pair runs in two phases. First the model
uncertainty is estimated once (MC dropout ensemble -> variance -> frozen
confidence weight map); then the parameters take ``adapt_steps`` Adam
steps on the confidence-weighted objective in the requested direction,
with dropout disabled inside the loop. The input parameters are never
mutated; each pair adapts its own fresh copy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .diffeo import integrate_svf, invert_via_negation, warp
from .grid import ScalarVolume
from .objective import total_loss
from .predictor import (Architecture, PredictorParams, forward, init_params,
                        sample_dropout_mask, with_lineage)
from .uncertainty import UncertaintyMap, estimate


class NumericalFailure(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class AdaptConfig:
    """All pipeline hyperparameters."""

    reg_weight: float = 0.2
    squaring_steps: int = 10
    mc_samples: int = 20
    adapt_steps: int = 30
    learning_rate: float = 2e-4
    dropout_rate: float = 0.2
    variance_floor: float = 1e-6
    direction: str = "forward"
    seed: int = 0
    regularize: str = "displacement"
    refresh_every: int = 0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("regularization weight must be >= 0")
        if self.squaring_steps < 0:
            raise ValueError("squaring steps must be >= 0")
        if self.mc_samples < 2:
            raise ValueError("need >= 2 MC samples")
        if self.adapt_steps < 0:
            raise ValueError("adaptation steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if not self.variance_floor > 0:
            raise ValueError("variance floor must be > 0")
        if self.direction not in ("forward", "inverse"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.regularize not in ("displacement", "velocity"):
            raise ValueError(f"unknown regularize mode {self.regularize!r}")
        if self.refresh_every < 0:
            raise ValueError("refresh interval must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "reg_weight", "squaring_steps", "mc_samples", "adapt_steps",
            "learning_rate", "dropout_rate", "variance_floor", "direction",
            "seed", "regularize", "refresh_every")}


@dataclass
class OptState:
    """Adam moment accumulators, bias-corrected at each step."""

    first: dict
    second: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(params: PredictorParams) -> OptState:
    return OptState({k: np.zeros_like(v) for k, v in params.blocks.items()},
                    {k: np.zeros_like(v) for k, v in params.blocks.items()})


def adam_step(params: PredictorParams, grads: dict, state: OptState,
              learning_rate: float):
    """One bias-corrected adaptive-moment update. Pure: returns fresh
    params and state."""
    if set(grads) != set(params.blocks):
        raise ValueError("gradient blocks do not match parameter blocks")
    t = state.step + 1
    new_first, new_second, new_blocks = {}, {}, {}
    for name, theta in params.blocks.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {theta.shape}")
        m = state.beta1 * state.first[name] + (1 - state.beta1) * g
        v = state.beta2 * state.second[name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_blocks[name] = theta - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_first[name] = m
        new_second[name] = v
    new_params = PredictorParams(params.arch, new_blocks, params.lineage)
    return new_params, OptState(new_first, new_second, t,
                                state.beta1, state.beta2, state.eps)


def pretrain(dataset, config: AdaptConfig, epochs: int, seed: int):
    """Train a fresh predictor on (fixed, moving) pairs with the unweighted
    objective and training-time dropout (one fresh mask per step).

    Returns (params, loss_curve) where loss_curve[0] is the deterministic
    pre-training loss over the dataset and each later entry is one epoch's
    mean training loss. Deterministic given the seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    arch = Architecture(dropout_rate=config.dropout_rate)
    params = init_params(arch, seed)
    state = init_opt_state(params)
    gen = rng.stream(seed, rng.TRAIN_STREAM)

    def eval_loss(p):
        vals = []
        for fixed, moving in dataset:
            bd, _ = total_loss(fixed, moving, p, mask=None,
                               reg_weight=config.reg_weight,
                               direction="forward",
                               squaring_steps=config.squaring_steps,
                               regularize=config.regularize)
            vals.append(bd.total)
        return float(np.mean(vals))

    curve = [eval_loss(params)]
    for _ in range(epochs):
        order = gen.permutation(len(dataset))
        epoch_losses = []
        for idx in order:
            fixed, moving = dataset[idx]
            mask = sample_dropout_mask(params, int(gen.integers(0, 2**62)))
            bd, grads = total_loss(fixed, moving, params, mask=mask,
                                   reg_weight=config.reg_weight,
                                   direction="forward",
                                   squaring_steps=config.squaring_steps,
                                   regularize=config.regularize)
            if not np.isfinite(bd.total):
                raise NumericalFailure(f"non-finite training loss: {bd.total}")
            params, state = adam_step(params, grads, state, config.learning_rate)
            epoch_losses.append(bd.total)
        curve.append(float(np.mean(epoch_losses)))
    return with_lineage(params, f"pretrain:{seed}"), curve


@dataclass
class AdaptReport:
    """Per-step loss trajectory of one adaptation run, wall-clock per step,
    the frozen uncertainty products, and optional parameter snapshots.
    ``final_metrics`` is a hook for callers that evaluate the adapted
    registration afterwards (e.g. the CLI eval stage)."""

    steps: list
    step_seconds: list
    uncertainty: UncertaintyMap
    snapshots: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)

    def trajectory(self) -> list:
        return [{"step": i + 1, "mse": bd.mse, "bending": bd.bending,
                 "total": bd.total} for i, bd in enumerate(self.steps)]


def adapt(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume,
          config: AdaptConfig, snapshot_steps=()):
    """Uncertainty-aware test-time adaptation of one image pair.

    Estimates the confidence weight map once up front, then runs
    ``config.adapt_steps`` deterministic weighted-loss Adam steps in
    ``config.direction``. With ``refresh_every=N`` the weight map is
    re-estimated every N steps (extension, off by default). The input
    params are copied, never mutated. ``snapshot_steps`` requests copies of
    the parameters after the listed step counts (0 = before any step);
    because the weight map is frozen and steps are deterministic, the
    snapshot after step t equals the result of a run with adapt_steps=t.
    """
    work = params.copy()
    unc = estimate(work, fixed, moving, config.mc_samples, config.seed,
                   config.variance_floor)
    state = init_opt_state(work)
    refresh_gen = rng.stream(config.seed, rng.MC_STREAM, 999)

    snapshots = {}
    if 0 in snapshot_steps:
        snapshots[0] = work.copy()
    steps, seconds = [], []
    for step in range(1, config.adapt_steps + 1):
        if config.refresh_every and step > 1 and (step - 1) % config.refresh_every == 0:
            unc = estimate(work, fixed, moving, config.mc_samples,
                           int(refresh_gen.integers(0, 2**62)),
                           config.variance_floor)
        t0 = time.perf_counter()
        bd, grads = total_loss(fixed, moving, work, mask=None,
                               reg_weight=config.reg_weight,
                               weight=unc.weight,
                               direction=config.direction,
                               squaring_steps=config.squaring_steps,
                               regularize=config.regularize)
        if not np.isfinite(bd.total):
            raise NumericalFailure(f"non-finite adaptation loss at step {step}")
        work, state = adam_step(work, grads, state, config.learning_rate)
        seconds.append(time.perf_counter() - t0)
        steps.append(bd)
        if step in snapshot_steps:
            snapshots[step] = work.copy()
    report = AdaptReport(steps, seconds, unc, snapshots)
    return with_lineage(work, f"adapt:{config.seed}:{config.direction}"), report


def register(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume,
             direction: str = "forward", squaring_steps: int = 10):
    """Pure inference: deterministic pass, integration (negated field for
    the inverse direction), warp of the direction-appropriate source image.

    Returns (displacement, deformed). Forward warps the moving image toward
    the fixed one; inverse warps the fixed image toward the moving one.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"unknown direction {direction!r}")
    v, _ = forward(params, fixed, moving, None)
    if direction == "forward":
        disp, _ = integrate_svf(v, squaring_steps)
        source = moving
    else:
        disp = invert_via_negation(v, squaring_steps)
        source = fixed
    return disp, warp(source, disp)
