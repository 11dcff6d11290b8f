"""Synthetic inspiration/expiration phantom pairs with known ground truth.

A phantom case is built from a textured ellipsoidal "lung": the moving
image is the fully inflated state, the ground-truth velocity field is a
radial log-scale field (whose flow is an exact exponential rescaling on
the window interior) plus a smooth random perturbation, and the fixed
image is the moving image warped by the integrated field. Masks are
thresholded before/after warping, and the relative mask-volume change
stands in for the physiological volume change between breath-hold states.

Texture inside the mask is deliberate: intensity registration of
homogeneous blobs is ill-posed, and the low-frequency pattern plus
vessel-like bright curves make overlap improvements attributable to true
alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng
from .diffeo import folding_fraction, integrate_svf, jacobian_determinant, warp
from .grid import Dims, ScalarVolume, VectorField, identity_coords
from .metrics import warp_mask


@dataclass
class PhantomCase:
    """One synthetic registration case with ground truth."""

    fixed: ScalarVolume
    moving: ScalarVolume
    fixed_mask: ScalarVolume
    moving_mask: ScalarVolume
    true_velocity: VectorField
    volume_change: float  # 1 - fixed mask volume / moving mask volume
    radial_scale: float
    seed: int


def smooth_random_svf(dims: Dims, amplitude: float, smoothness: float,
                      seed: int) -> VectorField:
    """White noise per channel, Gaussian-smoothed with the given standard
    deviation (voxels), rescaled so the maximum vector magnitude equals
    ``amplitude`` exactly."""
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    if smoothness < 1:
        raise ValueError(f"smoothness must be >= 1, got {smoothness}")
    gen = rng.stream(seed, rng.PHANTOM_STREAM, 0)
    noise = gen.normal(size=(3,) + tuple(dims))
    for c in range(3):
        noise[c] = gaussian_filter(noise[c], smoothness)
    if amplitude == 0:
        return VectorField(np.zeros_like(noise))
    peak = np.linalg.norm(noise, axis=0).max()
    return VectorField(noise * (amplitude / peak))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _vessel_pattern(dims: Dims, center: np.ndarray, semi_axes: np.ndarray,
                    gen: np.random.Generator) -> np.ndarray:
    """A handful of bright curved strands from near the center outward."""
    canvas = np.zeros(dims)
    n_curves = 6
    for _ in range(n_curves):
        direction = gen.normal(size=3)
        direction /= np.linalg.norm(direction)
        p0 = center + gen.normal(scale=1.5, size=3)
        p2 = center + direction * semi_axes * gen.uniform(0.55, 0.85)
        p1 = 0.5 * (p0 + p2) + gen.normal(scale=2.5, size=3)
        ts = np.linspace(0.0, 1.0, 160)[:, None]
        pts = ((1 - ts) ** 2) * p0 + 2 * ts * (1 - ts) * p1 + (ts ** 2) * p2
        ij = np.round(pts).astype(int)
        keep = np.all((ij >= 0) & (ij < np.array(dims)), axis=1)
        canvas[ij[keep, 0], ij[keep, 1], ij[keep, 2]] = 1.0
    canvas = gaussian_filter(canvas, 0.8)
    peak = canvas.max()
    return canvas / peak if peak > 0 else canvas


def _moving_image(dims: Dims, center: np.ndarray, semi_axes: np.ndarray,
                  seed: int):
    gen = rng.stream(seed, rng.PHANTOM_STREAM, 1)
    coords = identity_coords(dims).reshape(3, *dims)
    rho = np.sqrt(sum(((coords[a] - center[a]) / semi_axes[a]) ** 2
                      for a in range(3)))

    pattern = gaussian_filter(gen.normal(size=dims), 2.5)
    pattern *= 0.12 / max(pattern.std(), 1e-12)
    vessels = 0.3 * _vessel_pattern(dims, center, semi_axes, gen)

    # feather the lung border over ~1.5 voxels
    feather = 1.5 / semi_axes.mean()
    inside = _smoothstep((1.0 - rho) / feather)
    img = -0.95 + inside * (0.6 + pattern + vessels)
    img = np.clip(gaussian_filter(img, 0.6), -1.0, 1.0)

    mask = (rho <= 1.0).astype(np.float64)
    return ScalarVolume(img), ScalarVolume(mask)


def make_phantom_pair(dims: Dims, radial_scale: float = 0.85,
                      random_amplitude: float = 1.0, smoothness: float = 4.0,
                      seed: int = 0, squaring_steps: int = 10) -> PhantomCase:
    """Generate one phantom case.

    ``radial_scale`` in [0.5, 1.0] is the linear contraction of the lung
    between the moving and fixed states (mask volume ratio ~ scale^3);
    the random perturbation adds case-specific structure on top. If the
    integrated ground-truth field folds inside the fixed mask, the
    perturbation amplitude is halved and generation retried (up to 5 times).
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 24:
        raise ValueError(f"phantom dims must be >= 24 per axis, got {dims}")
    if not 0.5 <= radial_scale <= 1.0:
        raise ValueError(f"radial scale must be in [0.5, 1.0], got {radial_scale}")

    center = (np.array(dims) - 1.0) / 2.0
    semi_axes = 0.34 * np.array(dims, dtype=np.float64)
    moving, moving_mask = _moving_image(dims, center, semi_axes, seed)

    coords = identity_coords(dims)
    rho = np.sqrt(sum(((coords[a] - center[a]) / semi_axes[a]) ** 2
                      for a in range(3))).reshape(dims)
    # support window: 1 out to rho 1.15 (covers every fixed-mask
    # trajectory), feathered to 0 by rho 2.45. The wide feather keeps the
    # roll-off curvature (and with it the ground-truth bending energy)
    # small, so a field that fits the phantom well is also cheap to
    # regularize
    window = _smoothstep((2.45 - rho) / 1.30)

    # pull-back convention: sampling the moving image along the *outward*
    # flow shrinks its content, so the physical contraction by
    # `radial_scale` needs the positive log coefficient here
    radial = -math.log(radial_scale) * (coords - center[:, None]).reshape(3, *dims)
    radial *= window[None]

    amplitude = float(random_amplitude)
    for attempt in range(6):
        # the perturbation is windowed like the radial part: all of its
        # amplitude lands on the anatomy, and the field vanishes at the
        # grid border so clamping never distorts the ground truth
        bump = smooth_random_svf(dims, amplitude, smoothness, seed + attempt).data
        velocity = VectorField(radial + bump * window[None])
        disp, _ = integrate_svf(velocity, squaring_steps)
        fixed = warp(moving, disp)
        fixed_mask = warp_mask(moving_mask, disp)
        if fixed_mask.data.sum() == 0:
            raise ValueError("degenerate phantom: fixed mask is empty")
        folded = folding_fraction(jacobian_determinant(disp), fixed_mask)
        if folded == 0.0:
            break
        amplitude *= 0.5
    else:
        raise ValueError(f"phantom generation kept folding after retries (seed {seed})")

    volume_change = 1.0 - fixed_mask.data.sum() / moving_mask.data.sum()
    return PhantomCase(fixed, moving, fixed_mask, moving_mask, velocity,
                       float(volume_change), radial_scale, seed)
