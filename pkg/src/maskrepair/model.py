"""Appearance-conditioned implicit occupancy network.

One learnable latent vector per shape is decoded by a small convolutional
decoder into a pyramid of dense feature grids (4^3 doubling up to 32^3 by
default).  A query point trilinearly samples every pyramid level; the
concatenated [coordinates, features, appearance] vector goes through a light
MLP ending in a sigmoid, giving the probability that the point lies inside
the shape.  The shape surface is the ``t`` level set of that probability
field.

Forward evaluation, the training loss, and exact reverse-mode gradients for
the whole fixed graph live here; the optimizer and the epoch loop are in
:mod:`maskrepair.train`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import NumericError, ShapeMismatchError
from .volume import trilinear_weights

PROB_EPS = 1e-7  # probability clamp applied before logs in the loss


@dataclass
class ArchitectureConfig:
    """Sizes of the decoder and head.

    The default matches the reference setup: 128-dim latents, a 4^3 x 256
    seed grid, three upsampling blocks (nearest-neighbor 2x then a 3^3
    convolution) with 128/64/32 channels topping out at 32^3, a 16-channel
    projection per scale, and a [*, 128, 128, 1] head.
    """

    latent_dim: int = 128
    seed_channels: int = 256
    block_channels: tuple[int, ...] = (128, 64, 32)
    feature_channels: int = 16
    head_hidden: tuple[int, ...] = (128, 128)
    use_appearance: bool = True
    seed_resolution: int = 4

    @classmethod
    def desk(cls, use_appearance: bool = True) -> "ArchitectureConfig":
        """Compact variant sized for CPU-only experiments on 64^3 volumes.

        Keeps the default's 4:1 ratio between volume resolution and the top
        feature map (16^3 for 64^3 inputs): feature cells coarser than the
        annotation artefacts are what make the decoder a shape prior instead
        of a memorizer.
        """
        return cls(latent_dim=32, seed_channels=48, block_channels=(32, 16),
                   feature_channels=8, head_hidden=(64, 64),
                   use_appearance=use_appearance)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return (self.seed_channels, *self.block_channels)

    @property
    def num_levels(self) -> int:
        return 1 + len(self.block_channels)

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.seed_resolution * 2 ** i for i in range(self.num_levels))

    @property
    def head_input_dim(self) -> int:
        return 3 + self.num_levels * self.feature_channels + (1 if self.use_appearance else 0)

    @property
    def head_widths(self) -> tuple[int, ...]:
        return (self.head_input_dim, *self.head_hidden, 1)

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "seed_channels": self.seed_channels,
            "block_channels": list(self.block_channels),
            "feature_channels": self.feature_channels,
            "head_hidden": list(self.head_hidden),
            "use_appearance": self.use_appearance,
            "seed_resolution": self.seed_resolution,
        }

    @classmethod
    def from_dict(cls, d) -> "ArchitectureConfig":
        kwargs = dict(d)
        for key in ("block_channels", "head_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def parameter_shapes(arch: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in canonical (checkpoint) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    seed_out = arch.seed_channels * arch.seed_resolution ** 3
    shapes["decoder.seed.weight"] = (arch.latent_dim, seed_out)
    shapes["decoder.seed.bias"] = (seed_out,)
    chans = arch.level_channels
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        shapes[f"decoder.block{i}.conv.weight"] = (27, cin, cout)
        shapes[f"decoder.block{i}.conv.bias"] = (cout,)
    for i, ch in enumerate(chans):
        shapes[f"decoder.proj{i}.weight"] = (ch, arch.feature_channels)
        shapes[f"decoder.proj{i}.bias"] = (arch.feature_channels,)
    widths = arch.head_widths
    for j, (win, wout) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"head.layer{j}.weight"] = (win, wout)
        shapes[f"head.layer{j}.bias"] = (wout,)
    return shapes


def _fan_in(name: str, shape) -> int:
    if "conv.weight" in name:
        return shape[0] * shape[1]  # 27 offsets x input channels
    if name.endswith("bias"):
        return 0  # handled alongside its weight
    return shape[0]


def init_model(arch: ArchitectureConfig, n_shapes: int, rng: np.random.Generator,
               dtype=np.float32):
    """Fresh parameters plus one latent row per training shape.

    Weights and biases draw from the fan-in-scaled uniform distribution
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); latent components draw from
    N(0, 0.01^2).
    """
    if n_shapes < 1:
        raise ValueError(f"n_shapes must be >= 1, got {n_shapes}")
    params: dict[str, np.ndarray] = {}
    shapes = parameter_shapes(arch)
    for name, shape in shapes.items():
        if name.endswith("bias"):
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        bias_name = name.replace("weight", "bias")
        params[bias_name] = rng.uniform(-bound, bound, size=shapes[bias_name]).astype(dtype)
    latents = (0.01 * rng.standard_normal((n_shapes, arch.latent_dim))).astype(dtype)
    return params, latents


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _offsets():
    for off in range(27):
        dz, rem = divmod(off, 9)
        dy, dx = divmod(rem, 3)
        yield off, dz, dy, dx


def _conv3(x_flat, R, w, b):
    """3^3 same-padding convolution in channels-last layout.

    ``x_flat`` is (R^3, cin) viewed as an (R, R, R, cin) grid; ``w`` is
    (27, cin, cout) with offsets enumerated z-major.  Returns the (R^3, cout)
    output plus the 27 shifted input views the backward pass reuses.
    """
    cin = w.shape[1]
    xp = np.zeros((R + 2, R + 2, R + 2, cin), dtype=x_flat.dtype)
    xp[1:-1, 1:-1, 1:-1] = x_flat.reshape(R, R, R, cin)
    out = np.tile(b, (R ** 3, 1))
    slices = []
    for off, dz, dy, dx in _offsets():
        sl = np.ascontiguousarray(
            xp[dz:dz + R, dy:dy + R, dx:dx + R]).reshape(R ** 3, cin)
        slices.append(sl)
        out += sl @ w[off]
    return out, slices


def _conv3_backward(dout_flat, slices, w, R):
    """Gradients of _conv3: returns (dw, db, dx_flat)."""
    cin = w.shape[1]
    dw = np.empty_like(w)
    db = dout_flat.sum(axis=0)
    dxp = np.zeros((R + 2, R + 2, R + 2, cin), dtype=dout_flat.dtype)
    for off, dz, dy, dx in _offsets():
        dw[off] = slices[off].T @ dout_flat
        dxp[dz:dz + R, dy:dy + R, dx:dx + R] += (dout_flat @ w[off].T).reshape(R, R, R, cin)
    dx = np.ascontiguousarray(dxp[1:-1, 1:-1, 1:-1]).reshape(R ** 3, cin)
    return dw, db, dx


def _upsample2(x_flat, R):
    """Nearest-neighbor doubling, channels-last: (R^3, c) -> ((2R)^3, c)."""
    c = x_flat.shape[1]
    g = x_flat.reshape(R, R, R, c)
    g = g.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)
    return g.reshape((2 * R) ** 3, c)


def _upsample2_backward(g_flat, R2):
    c = g_flat.shape[1]
    R = R2 // 2
    g = g_flat.reshape(R, 2, R, 2, R, 2, c).sum(axis=(1, 3, 5))
    return g.reshape(R ** 3, c)


@dataclass
class ForwardRecord:
    """Intermediates of one forward pass, consumed by :func:`backward`.

    Dense decoder grids are kept flat in channels-last layout: an (R, R, R,
    ch) grid is stored as its (R^3, ch) view.
    """

    z: np.ndarray
    n_points: int
    h_flats: list = field(default_factory=list)      # per level: (R^3, ch)
    conv_inputs: list = field(default_factory=list)  # per block: padded grid
    level_flats: list = field(default_factory=list)  # per level: (R^3, k)
    samplers: list = field(default_factory=list)     # per level: (N, R^3) CSR
    head_acts: list = field(default_factory=list)    # input + hidden activations
    logits: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def _decode(params, arch: ArchitectureConfig, z, rec: ForwardRecord):
    """Latent -> per-level flat feature grids (R^3, k); fills ``rec``."""
    dtype = params["decoder.seed.weight"].dtype
    z = np.asarray(z, dtype=dtype)
    if z.shape != (arch.latent_dim,):
        raise ShapeMismatchError(
            f"latent has shape {z.shape}, expected ({arch.latent_dim},)")
    rec.z = z
    R = arch.seed_resolution
    h = _relu(z @ params["decoder.seed.weight"] + params["decoder.seed.bias"])
    rec.h_flats.append(h.reshape(R ** 3, arch.seed_channels))
    for i in range(len(arch.block_channels)):
        up = _upsample2(rec.h_flats[-1], R)
        R *= 2
        out_flat, slices = _conv3(up, R, params[f"decoder.block{i}.conv.weight"],
                                  params[f"decoder.block{i}.conv.bias"])
        rec.conv_inputs.append(slices)
        rec.h_flats.append(_relu(out_flat))
    for i, h_flat in enumerate(rec.h_flats):
        rec.level_flats.append(
            h_flat @ params[f"decoder.proj{i}.weight"] + params[f"decoder.proj{i}.bias"])
    return rec.level_flats


def decode_features(params, arch: ArchitectureConfig, z):
    """Decode a latent into the feature pyramid as (k, R, R, R) grids."""
    rec = ForwardRecord(z=None, n_points=0)
    flats = _decode(params, arch, z, rec)
    out = []
    for flat, R in zip(flats, arch.level_resolutions):
        out.append(np.ascontiguousarray(
            flat.reshape(R, R, R, arch.feature_channels).transpose(3, 0, 1, 2)))
    return out


def _interp_operator(shape3, points, dtype):
    """Sparse (N, R^3) matrix applying trilinear interpolation at ``points``.

    Multiplying it with a flat channels-last grid gathers features; its
    transpose scatters per-point gradients back onto the 8 corner cells.
    """
    idx, w = trilinear_weights(shape3, points)
    n = len(idx)
    return sparse.csr_matrix(
        (w.astype(dtype).ravel(), idx.ravel(), np.arange(0, 8 * n + 1, 8)),
        shape=(n, int(np.prod(shape3))))


def sample_pyramid(levels_or_flats, arch: ArchitectureConfig, points,
                   rec: Optional[ForwardRecord] = None):
    """Trilinearly sample every pyramid level at normalized points.

    Accepts either flat (R^3, k) arrays or (k, R, R, R) grids.  Returns
    (N, num_levels * k) features.
    """
    feats = []
    for flat, R in zip(levels_or_flats, arch.level_resolutions):
        if flat.ndim != 2:
            flat = flat.reshape(arch.feature_channels, -1).T
        op = _interp_operator((R, R, R), points, flat.dtype)
        feats.append(op @ flat)
        if rec is not None:
            rec.samplers.append(op)
    return np.concatenate(feats, axis=1)


def query(params, arch: ArchitectureConfig, z, points, appearance=None,
          record: bool = False, return_logits: bool = False):
    """Occupancy probabilities at normalized points.

    ``appearance`` (values in [0, 1], sampled from the image at the same
    points) is required when the architecture is appearance-conditioned.
    With ``record=True`` also returns the ForwardRecord that
    :func:`backward` consumes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    dtype = params["decoder.seed.weight"].dtype
    rec = ForwardRecord(z=None, n_points=n)
    flats = _decode(params, arch, z, rec)
    feats = sample_pyramid(flats, arch, points, rec)

    columns = [points.astype(dtype), feats]
    if arch.use_appearance:
        if appearance is None:
            raise ValueError("this architecture needs per-point appearance values")
        appearance = np.asarray(appearance, dtype=dtype).reshape(n)
        if appearance.size and (appearance.min() < 0 or appearance.max() > 1):
            raise ValueError("appearance values must lie in [0, 1]")
        columns.append(appearance[:, None])
    x = np.concatenate(columns, axis=1)

    rec.head_acts.append(x)
    n_layers = len(arch.head_widths) - 1
    act = x
    for j in range(n_layers - 1):
        act = _relu(act @ params[f"head.layer{j}.weight"] + params[f"head.layer{j}.bias"])
        rec.head_acts.append(act)
    j = n_layers - 1
    logits = (act @ params[f"head.layer{j}.weight"] + params[f"head.layer{j}.bias"]).reshape(n)
    probs = _sigmoid(logits)
    rec.logits, rec.probs = logits, probs

    out = logits if return_logits else probs
    return (out, rec) if record else out


def loss(probs, labels, z, lam: float) -> float:
    """Mean binary cross-entropy plus ``lam`` times the latent L2 norm.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pc = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    bce = float(np.mean(-(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc))))
    return bce + lam * float(np.linalg.norm(np.asarray(z, dtype=np.float64)))


def backward(params, arch: ArchitectureConfig, rec: ForwardRecord, labels,
             lam: float):
    """Exact gradients of :func:`loss` for every parameter and the latent.

    Returns a dict keyed like ``params`` plus ``"z"``.  Gradient flows
    through the trilinear feature interpolation to the pyramid grids; the
    appearance column and the raw coordinates receive none.  Raises
    NumericError if any gradient comes out non-finite.
    """
    dtype = params["decoder.seed.weight"].dtype
    n = rec.n_points
    labels = np.asarray(labels, dtype=dtype).reshape(n)
    probs = rec.probs
    pc = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    inside_clamp = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    dpc = (pc - labels) / (pc * (1.0 - pc)) / n
    dlogits = (dpc * inside_clamp * probs * (1.0 - probs)).astype(dtype)

    grads: dict[str, np.ndarray] = {}
    n_layers = len(arch.head_widths) - 1
    dact = dlogits[:, None]
    for j in range(n_layers - 1, -1, -1):
        act_in = rec.head_acts[j]
        if j < n_layers - 1:
            dact = dact * (rec.head_acts[j + 1] > 0)
        grads[f"head.layer{j}.weight"] = act_in.T @ dact
        grads[f"head.layer{j}.bias"] = dact.sum(axis=0)
        dact = dact @ params[f"head.layer{j}.weight"].T

    # split the head-input gradient into coordinate / feature / appearance
    # columns; only the feature block propagates further.
    k = arch.feature_channels
    dh_flats = [None] * arch.num_levels
    for i in range(arch.num_levels):
        dfeat = np.ascontiguousarray(dact[:, 3 + i * k: 3 + (i + 1) * k])
        dlvl = rec.samplers[i].T @ dfeat
        wp = params[f"decoder.proj{i}.weight"]
        grads[f"decoder.proj{i}.weight"] = rec.h_flats[i].T @ dlvl
        grads[f"decoder.proj{i}.bias"] = dlvl.sum(axis=0)
        dh_flats[i] = dlvl @ wp.T

    for i in range(len(arch.block_channels) - 1, -1, -1):
        lvl = i + 1
        R = arch.level_resolutions[lvl]
        dh = dh_flats[lvl] * (rec.h_flats[lvl] > 0)
        w = params[f"decoder.block{i}.conv.weight"]
        dw, db, dup = _conv3_backward(dh, rec.conv_inputs[i], w, R)
        grads[f"decoder.block{i}.conv.weight"] = dw
        grads[f"decoder.block{i}.conv.bias"] = db
        dh_flats[lvl - 1] = dh_flats[lvl - 1] + _upsample2_backward(dup, R)

    ds = (dh_flats[0] * (rec.h_flats[0] > 0)).ravel()
    grads["decoder.seed.weight"] = np.outer(rec.z, ds)
    grads["decoder.seed.bias"] = ds
    dz = params["decoder.seed.weight"] @ ds
    z64 = rec.z.astype(np.float64)
    z_norm = np.linalg.norm(z64)
    if z_norm > 0:
        dz = dz + (lam * z64 / z_norm).astype(dtype)
    grads["z"] = dz

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}", tensor=name)
    return grads
