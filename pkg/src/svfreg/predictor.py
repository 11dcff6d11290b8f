"""The learnable velocity-field predictor.

A small fully-convolutional network maps a (fixed, moving) image pair to a
three-channel stationary velocity field: the pair is stacked as two
channels, average-pooled down by ``pool_factor``, pushed through two
3x3x3 conv + leaky-ReLU + channel dropout stages and a final 3-channel
conv head, and the coarse field is trilinearly upsampled back to the input
grid with per-axis component rescaling. The head is zero-initialized so a
fresh network predicts the identity transform.

Dropout is channel-wise (spatial) and inverted: at sampling time surviving
channels are scaled by 1/(1-p), and a ``None`` mask means a plain
deterministic pass. Forward passes record the activations needed for the
manual reverse-mode gradients in ``backward``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels, rng
from .grid import Dims, ScalarVolume, VectorField, _resample_coords, upsample_field

CHECKPOINT_MAGIC = "SVFREG-CKPT1"

# parameter blocks in a fixed order; checkpoints and optimizer state rely on it
BLOCK_NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
               "head.weight", "head.bias")


@dataclass(frozen=True)
class Architecture:
    """Shape of the predictor: channel widths, pooling factor and dropout."""

    in_channels: int = 2
    hidden_channels: int = 16
    out_channels: int = 3
    pool_factor: int = 4
    dropout_rate: float = 0.2
    leaky_slope: float = 0.2

    def __post_init__(self):
        if min(self.in_channels, self.hidden_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.pool_factor < 1:
            raise ValueError(f"pool factor must be >= 1, got {self.pool_factor}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    def block_shapes(self) -> dict[str, tuple]:
        c_in, c_h, c_out = self.in_channels, self.hidden_channels, self.out_channels
        return {
            "conv1.weight": (c_h, c_in, 3, 3, 3), "conv1.bias": (c_h,),
            "conv2.weight": (c_h, c_h, 3, 3, 3), "conv2.bias": (c_h,),
            "head.weight": (c_out, c_h, 3, 3, 3), "head.bias": (c_out,),
        }


@dataclass
class PredictorParams:
    """Learnable weights plus the architecture they belong to."""

    arch: Architecture
    blocks: dict[str, np.ndarray]
    lineage: tuple[str, ...] = ()

    def __post_init__(self):
        shapes = self.arch.block_shapes()
        if set(self.blocks) != set(shapes):
            raise ValueError(f"parameter blocks {sorted(self.blocks)} do not match "
                             f"architecture blocks {sorted(shapes)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.blocks[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"block {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"block {name} contains non-finite values")
            self.blocks[name] = arr

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.arch,
                               {k: v.copy() for k, v in self.blocks.items()},
                               self.lineage)


@dataclass(frozen=True)
class DropoutMask:
    """Binary keep-masks for the two dropout layers, plus the seed that
    produced them."""

    masks: tuple
    seed: int | None = None


@dataclass
class ForwardTape:
    """Activations cached by ``forward`` for the manual backward pass."""

    pooled_input: np.ndarray
    pre_act1: np.ndarray
    hidden1: np.ndarray
    pre_act2: np.ndarray
    hidden2: np.ndarray
    svf_coarse: np.ndarray
    coarse_spacing: tuple
    full_dims: Dims
    mask: DropoutMask | None


def init_params(arch: Architecture, seed: int) -> PredictorParams:
    """He-style fan-in uniform kernels, zero biases, zero head: the fresh
    network predicts v = 0 (identity transform). Deterministic per seed."""
    gen = rng.stream(seed, rng.INIT_STREAM)
    blocks = {}
    for name, shape in arch.block_shapes().items():
        if name.startswith("head") or name.endswith("bias"):
            blocks[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * 27
            limit = math.sqrt(6.0 / fan_in)
            blocks[name] = gen.uniform(-limit, limit, size=shape)
    return PredictorParams(arch, blocks, lineage=(f"init:{seed}",))


def sample_dropout_mask(params: PredictorParams, seed: int) -> DropoutMask:
    """Channel keep-masks for both dropout layers; each channel survives
    independently with probability 1 - dropout_rate."""
    p = params.arch.dropout_rate
    gen = rng.stream(seed, rng.DROPOUT_STREAM)
    c_h = params.arch.hidden_channels
    masks = tuple((gen.random(c_h) >= p).astype(np.float64) for _ in range(2))
    return DropoutMask(masks, seed)


def _check_mask(params: PredictorParams, mask: DropoutMask) -> None:
    c_h = params.arch.hidden_channels
    if len(mask.masks) != 2 or any(m.shape != (c_h,) for m in mask.masks):
        raise ValueError("dropout mask incompatible with architecture")


def _avg_pool(arr: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling; trailing partial blocks average over their
    actual size."""
    if factor == 1:
        return arr.copy()
    out = arr
    sizes = []
    for axis in range(1, 4):
        n = out.shape[axis]
        starts = np.arange(0, n, factor)
        out = np.add.reduceat(out, starts, axis=axis)
        sizes.append(np.diff(np.append(starts, n)).astype(np.float64))
    counts = sizes[0][:, None, None] * sizes[1][None, :, None] * sizes[2][None, None, :]
    return out / counts


def _dropout_scale(mask: DropoutMask | None, layer: int, p: float):
    """Per-channel multiplier of an inverted-dropout layer; None when the
    pass is deterministic."""
    if mask is None:
        return None
    keep = mask.masks[layer]
    if p == 0.0:
        return keep  # all-ones by construction
    return keep / (1.0 - p)


def forward(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume,
            mask: DropoutMask | None = None):
    """Predict the velocity field for an image pair.

    Returns (v, tape) where v is a VectorField on the input grid (voxel
    units) and tape caches everything ``backward`` needs. ``mask=None``
    disables dropout (deterministic pass, no inverted-dropout scaling).
    """
    if fixed.dims != moving.dims:
        raise ValueError(f"dims mismatch: {fixed.dims} vs {moving.dims}")
    if mask is not None:
        _check_mask(params, mask)
    lo = min(fixed.data.min(), moving.data.min())
    hi = max(fixed.data.max(), moving.data.max())
    if lo < -1.0 - 1e-9 or hi > 1.0 + 1e-9:
        warnings.warn(f"input intensities outside [-1, 1] (range [{lo:.3g}, {hi:.3g}]); "
                      "did you forget clip_rescale?", stacklevel=2)

    arch = params.arch
    b = params.blocks
    slope = arch.leaky_slope
    p = arch.dropout_rate

    x0 = _avg_pool(np.stack([fixed.data, moving.data]), arch.pool_factor)
    if min(x0.shape[1:]) < 2:
        raise ValueError(f"input dims {fixed.dims} too small for pool factor "
                         f"{arch.pool_factor}")

    z1 = _kernels.conv3d_forward(x0, b["conv1.weight"], b["conv1.bias"])
    a1 = np.where(z1 > 0, z1, slope * z1)
    s1 = _dropout_scale(mask, 0, p)
    h1 = a1 if s1 is None else a1 * s1[:, None, None, None]

    z2 = _kernels.conv3d_forward(h1, b["conv2.weight"], b["conv2.bias"])
    a2 = np.where(z2 > 0, z2, slope * z2)
    s2 = _dropout_scale(mask, 1, p)
    h2 = a2 if s2 is None else a2 * s2[:, None, None, None]

    svf_coarse = _kernels.conv3d_forward(h2, b["head.weight"], b["head.bias"])

    coarse_dims = svf_coarse.shape[1:]
    coarse_spacing = tuple(s * n / c for s, n, c
                           in zip(fixed.spacing, fixed.dims, coarse_dims))
    v = upsample_field(VectorField(svf_coarse, coarse_spacing), fixed.dims)

    tape = ForwardTape(x0, z1, h1, z2, h2, svf_coarse, coarse_spacing,
                       fixed.dims, mask)
    return v, tape


def backward(params: PredictorParams, tape: ForwardTape, dl_dv) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of ``forward`` w.r.t. every parameter
    block, given the upstream gradient on the full-resolution field."""
    g = dl_dv.data if isinstance(dl_dv, VectorField) else np.asarray(dl_dv, dtype=np.float64)
    full_dims = tape.full_dims
    if g.shape != (3,) + tuple(full_dims):
        raise ValueError(f"upstream gradient shape {g.shape} does not match "
                         f"forward dims {full_dims}")
    arch = params.arch
    b = params.blocks
    slope = arch.leaky_slope
    p = arch.dropout_rate
    mask = tape.mask
    coarse_dims = tape.svf_coarse.shape[1:]

    # adjoint of the upsample: scale components, scatter onto the coarse grid
    coords = _resample_coords(coarse_dims, full_dims)
    scale = np.array([n / o for o, n in zip(coarse_dims, full_dims)])
    g_scaled = g.reshape(3, -1) * scale[:, None]
    d_svf = _kernels.scatter(coarse_dims, coords[0], coords[1], coords[2], g_scaled)

    dw3, db3 = _kernels.conv3d_backward_params(tape.hidden2, d_svf)
    d_h2 = _kernels.conv3d_backward_input(d_svf, b["head.weight"])

    s2 = _dropout_scale(mask, 1, p)
    d_a2 = d_h2 if s2 is None else d_h2 * s2[:, None, None, None]
    d_z2 = d_a2 * np.where(tape.pre_act2 > 0, 1.0, slope)

    dw2, db2 = _kernels.conv3d_backward_params(tape.hidden1, d_z2)
    d_h1 = _kernels.conv3d_backward_input(d_z2, b["conv2.weight"])

    s1 = _dropout_scale(mask, 0, p)
    d_a1 = d_h1 if s1 is None else d_h1 * s1[:, None, None, None]
    d_z1 = d_a1 * np.where(tape.pre_act1 > 0, 1.0, slope)

    dw1, db1 = _kernels.conv3d_backward_params(tape.pooled_input, d_z1)

    return {"conv1.weight": dw1, "conv1.bias": db1,
            "conv2.weight": dw2, "conv2.bias": db2,
            "head.weight": dw3, "head.bias": db3}


def save_checkpoint(path, params: PredictorParams) -> None:
    """Write a checkpoint: one JSON manifest line (architecture, dropout
    rate, seed lineage, block order) followed by raw little-endian float64
    parameter blocks in manifest order."""
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "arch": {
            "in_channels": params.arch.in_channels,
            "hidden_channels": params.arch.hidden_channels,
            "out_channels": params.arch.out_channels,
            "pool_factor": params.arch.pool_factor,
            "dropout_rate": params.arch.dropout_rate,
            "leaky_slope": params.arch.leaky_slope,
        },
        "dropout_rate": params.arch.dropout_rate,
        "seed_lineage": list(params.lineage),
        "blocks": [{"name": n, "shape": list(params.blocks[n].shape)}
                   for n in BLOCK_NAMES],
        "dtype": "f64",
        "byteorder": "little",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest) + "\n").encode("utf-8"))
        for name in BLOCK_NAMES:
            fh.write(params.blocks[name].astype("<f8").tobytes())


def load_checkpoint(path) -> PredictorParams:
    """Read a checkpoint written by ``save_checkpoint``."""
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable checkpoint manifest: {exc}") from exc
        if manifest.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {manifest.get('magic')!r}")
        arch = Architecture(**manifest["arch"])
        blocks = {}
        for entry in manifest["blocks"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("truncated checkpoint payload")
            blocks[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return PredictorParams(arch, blocks, tuple(manifest.get("seed_lineage", ())))


def with_lineage(params: PredictorParams, entry: str) -> PredictorParams:
    """A copy of ``params`` with one more lineage entry."""
    return replace(params, lineage=params.lineage + (entry,))
