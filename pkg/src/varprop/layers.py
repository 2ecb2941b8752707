"""Network stages that carry (mean, variance) pairs through the tape.

The forward pass is a single fused recursion: the mean path evaluates every
weight and gate at its expectation, and the variance path reuses those
mean-pass intermediates. Gates are recomputed from the current mean pass on
every call and enter the graph as constants, so gradients flow only through
weight means and variances.

Convolution is dense_moments applied to extracted patches (one formula, one
code path) and max-pooling selects, per window, the entry whose mean is
largest, routing both moments and their gradients through that index.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import moments, tape
from .moments import GateState, MomentPair


@dataclass
class GaussianParamLayer:
    """Factorized Gaussian over one affine stage's weights.

    Row layout: one row per input unit plus a final bias row (a fixed input
    of mean 1 and variance 0). sigma is parameterized by its logarithm.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    prior_precision: float

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise tape.ShapeError(
                f"mu shape {self.mu.shape} != log_sigma shape {self.log_sigma.shape}"
            )


class TapeLayer(NamedTuple):
    """One affine stage's parameters as graph nodes."""

    mu: tape.Tensor
    log_sigma: tape.Tensor


def wrap_params(layers, trainable: bool = True) -> list[TapeLayer]:
    lift = tape.parameter if trainable else tape.constant
    return [TapeLayer(lift(l.mu), lift(l.log_sigma)) for l in layers]


# ---------------------------------------------------------------------------
# Stages

@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv2d:
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool:
    window: int


@dataclass(frozen=True)
class Gate:
    kind: str = "relu"  # relu | leaky
    slope: float = 0.0


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered stages plus the per-example input shape ((d,) or (c,h,w))."""

    input_shape: tuple
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages or not isinstance(self.stages[-1], Dense):
            raise ValueError("network must end with a dense stage (linear output)")
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Per-stage output shapes; raises if consecutive stages do not conform."""
        shape = self.input_shape
        out = []
        for stage in self.stages:
            if isinstance(stage, Dense):
                if len(shape) != 1:
                    raise tape.ShapeError(f"dense needs flat input, got shape {shape}")
                shape = (stage.units,)
            elif isinstance(stage, Conv2d):
                if len(shape) != 3:
                    raise tape.ShapeError(f"conv2d needs (c,h,w) input, got shape {shape}")
                c, h, w = shape
                h2, w2 = h + 2 * stage.padding, w + 2 * stage.padding
                if stage.kernel > h2 or stage.kernel > w2:
                    raise tape.ShapeError(
                        f"kernel {stage.kernel} larger than padded input {(h2, w2)}"
                    )
                shape = (
                    stage.filters,
                    (h2 - stage.kernel) // stage.stride + 1,
                    (w2 - stage.kernel) // stage.stride + 1,
                )
            elif isinstance(stage, MaxPool):
                if len(shape) != 3:
                    raise tape.ShapeError(f"maxpool needs (c,h,w) input, got shape {shape}")
                c, h, w = shape
                if h % stage.window or w % stage.window:
                    raise tape.ShapeError(
                        f"pool window {stage.window} does not divide spatial extent {(h, w)}"
                    )
                shape = (c, h // stage.window, w // stage.window)
            elif isinstance(stage, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(stage, Gate):
                if stage.kind not in ("relu", "leaky"):
                    raise ValueError(f"unknown gate kind {stage.kind!r}")
            else:
                raise TypeError(f"unknown stage {stage!r}")
            out.append(shape)
        return out

    def param_shapes(self) -> list[tuple[int, int]]:
        """(fan_in + 1, fan_out) per parameterized stage, bias row included."""
        shape = self.input_shape
        out = []
        for stage, after in zip(self.stages, self.shapes()):
            if isinstance(stage, Dense):
                out.append((shape[0] + 1, stage.units))
            elif isinstance(stage, Conv2d):
                out.append((shape[0] * stage.kernel * stage.kernel + 1, stage.filters))
            shape = after
        return out


# ---------------------------------------------------------------------------
# Moment propagation

def _augment(pair: MomentPair) -> tuple[tape.Tensor, tape.Tensor | None]:
    """Append the bias unit (mean 1, variance 0) as a trailing column."""
    n = pair.mean.shape[0]
    mean = tape.concat([pair.mean, tape.constant(np.ones((n, 1)))], axis=1)
    if pair.variance is None:
        return mean, None
    var = tape.concat([pair.variance, tape.constant(np.zeros((n, 1)))], axis=1)
    return mean, var


def dense_moments(layer: TapeLayer, pair: MomentPair) -> MomentPair:
    """Affine stage over independent inputs and weights.

    mean_j = Σ_i μ_ij E[h_i]
    var_j  = Σ_i (μ_ij² + σ_ij²) var[h_i] + σ_ij² E[h_i]²

    A None input variance means identically zero (the input layer); the
    output variance then keeps the exact σ²-only form.
    """
    m_aug, v_aug = _augment(pair)
    sig2 = tape.exp(tape.scale(layer.log_sigma, 2.0))
    mean = tape.matmul(m_aug, layer.mu)
    var = tape.matmul(tape.square(m_aug), sig2)
    if v_aug is not None:
        var = tape.add(tape.matmul(v_aug, tape.add(tape.square(layer.mu), sig2)), var)
    return MomentPair(mean, var)


def gate_apply(pair: MomentPair, gate: GateState, slope: float = 0.0) -> MomentPair:
    """Multiply by the gate variable c = slope + (1−slope)·z, z ⊥ pre.

    mean = E[c]∘pre.mean; var = E[c²]∘pre.var + var[c]∘pre.mean².
    Gate moments are constants: the gate update happens at the function
    level, not through the gradient.
    """
    e_c, var_c, e_c2 = moments.leaky_gate_moments(gate, slope)
    if e_c.shape != tuple(pair.mean.shape):
        raise tape.ShapeError(f"gate shape {e_c.shape} != pre shape {tuple(pair.mean.shape)}")
    mean = tape.mul(pair.mean, tape.constant(e_c))
    var = None if pair.variance is None else tape.mul(pair.variance, tape.constant(e_c2))
    if np.any(var_c != 0.0):
        extra = tape.mul(tape.square(pair.mean), tape.constant(var_c))
        var = extra if var is None else tape.add(var, extra)
    return MomentPair(mean, var)


@lru_cache(maxsize=32)
def _patch_indices(n: int, c: int, h: int, w: int, k: int, stride: int):
    """Flat gather indices turning (n,c,h,w) into (n, oh·ow, c·k·k) patches."""
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    base = np.arange(n * c * h * w).reshape(n, c, h, w)
    r = (np.arange(oh) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    s = (np.arange(ow) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    patches = base[:, :, r, s]  # (n, c, oh, ow, k, k)
    idx = patches.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
    return idx, oh, ow


def conv2d_moments(layer: TapeLayer, pair: MomentPair, kernel: int, stride: int = 1,
                   padding: int = 0) -> MomentPair:
    """Convolution as dense_moments on sliding-window patches (valid mode
    after optional zero padding), so the dense formula is the single source
    of truth for the moment algebra."""
    mean, var = pair.mean, pair.variance
    if padding:
        mean = tape.pad2d(mean, padding)
        var = None if var is None else tape.pad2d(var, padding)
    n, c, h, w = mean.shape
    if kernel > h or kernel > w:
        raise tape.ShapeError(f"kernel {kernel} larger than padded input {(h, w)}")
    idx, oh, ow = _patch_indices(n, c, h, w, kernel, stride)
    cols = c * kernel * kernel
    pm = tape.reshape(tape.gather(mean, idx), (n * oh * ow, cols))
    pv = None if var is None else tape.reshape(tape.gather(var, idx), (n * oh * ow, cols))
    out = dense_moments(layer, MomentPair(pm, pv))
    f = out.mean.shape[1]

    def to_maps(t):
        t = tape.transpose(tape.reshape(t, (n, oh * ow, f)), (0, 2, 1))
        return tape.reshape(t, (n, f, oh, ow))

    return MomentPair(to_maps(out.mean), to_maps(out.variance))


def maxpool_moments(pair: MomentPair, window: int, record: list | None = None) -> MomentPair:
    """Window max by the mean: both output moments are the input moments at
    the argmax-of-means index (first index wins ties); gradients route only
    through the selected entries."""
    n, c, h, w = pair.mean.shape
    if h % window or w % window:
        raise tape.ShapeError(f"pool window {window} does not divide spatial extent {(h, w)}")
    oh, ow = h // window, w // window
    wins = (
        np.arange(n * c * h * w)
        .reshape(n, c, oh, window, ow, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, window * window)
    )
    vals = pair.mean.value.reshape(-1)[wins]
    pick = np.argmax(vals, axis=-1)
    chosen = np.take_along_axis(wins, pick[..., None], axis=-1)[..., 0]
    if record is not None:
        record.append({"kind": "pool", "chosen": chosen})
    out_mean = tape.gather(pair.mean, chosen)
    out_var = None if pair.variance is None else tape.gather(pair.variance, chosen)
    return MomentPair(out_mean, out_var)


def network_forward(spec: NetworkSpec, params, x, *, gate_mode: str = "hard",
                    gate_c: float | None = None, input_variance=None,
                    record: list | None = None) -> MomentPair:
    """Propagate (mean, variance) through every stage.

    params: TapeLayer list aligned with the parameterized stages (wrap
    GaussianParamLayers with wrap_params; non-trainable wrapping gives a
    pure evaluation pass). Gates are computed from the running mean pass.
    record, when a list, receives one entry per gate stage with the
    pre-activation moments and the fitted gate (plain arrays, off-tape).
    """
    mean = x if isinstance(x, tape.Tensor) else tape.constant(x)
    var = input_variance
    if var is not None and not isinstance(var, tape.Tensor):
        var = tape.constant(var)
    pair = MomentPair(mean, var)
    pi = 0
    for stage in spec.stages:
        if isinstance(stage, Dense):
            pair = dense_moments(params[pi], pair)
            pi += 1
        elif isinstance(stage, Conv2d):
            pair = conv2d_moments(params[pi], pair, stage.kernel, stage.stride, stage.padding)
            pi += 1
        elif isinstance(stage, Gate):
            state = moments.gate_moments(pair.mean.value, gate_mode, gate_c)
            if record is not None:
                record.append({
                    "kind": "gate",
                    "pre_mean": pair.mean.value.copy(),
                    "pre_var": None if pair.variance is None else pair.variance.value.copy(),
                    "gate": state,
                })
            pair = gate_apply(pair, state, stage.slope if stage.kind == "leaky" else 0.0)
        elif isinstance(stage, MaxPool):
            pair = maxpool_moments(pair, stage.window, record)
        elif isinstance(stage, Flatten):
            n = pair.mean.shape[0]
            flat = int(np.prod(pair.mean.shape[1:]))
            pair = MomentPair(
                tape.reshape(pair.mean, (n, flat)),
                None if pair.variance is None else tape.reshape(pair.variance, (n, flat)),
            )
        else:
            raise TypeError(f"unknown stage {stage!r}")
    if pi != len(params):
        raise ValueError(f"{len(params)} parameter layers for {pi} parameterized stages")
    return pair
