"""Comparison inference engines over the same parameters and objectives.

Both baselines reuse the affine moment code (dense/conv stages) and the
weight KL; they differ only in how nonlinearities meet uncertainty:

* dvi_forward: moment matching. Pre-activations are treated as Gaussian
  (CLT argument) and ReLU output moments are computed in closed form.
  Mean-field and homoscedastic; max-pool has no closed form here and is
  rejected.
* varout_sample_forward: local reparameterization. Pre-activations are
  sampled elementwise from their analytic mean/variance given the sampled
  previous layer, then deterministic ReLU applies. One draw per call;
  the trainer averages draws.

Neither path mutates parameters; mode switching is free.
"""
from __future__ import annotations

import numpy as np

from . import layers, objectives, tape
from .moments import MomentPair, relu_gaussian_moments

# Variance floor inside sqrt/div so exactly-deterministic nets stay finite.
_VAR_FLOOR = 1e-14


def dvi_forward(spec, params, x, *, input_variance=None) -> MomentPair:
    """Propagate (mean, variance) with Gaussian moment matching at ReLUs.

    Affine stages are identical to the gated engine; each ReLU maps the
    incoming Gaussian (mean, variance) to the exact moments of max(0, f).
    """
    mean = x if isinstance(x, tape.Tensor) else tape.constant(x)
    var = input_variance
    if var is not None and not isinstance(var, tape.Tensor):
        var = tape.constant(var)
    pair = MomentPair(mean, var)
    pi = 0
    for stage in spec.stages:
        if isinstance(stage, layers.Dense):
            pair = layers.dense_moments(params[pi], pair)
            pi += 1
        elif isinstance(stage, layers.Conv2d):
            pair = layers.conv2d_moments(params[pi], pair, stage.kernel, stage.stride,
                                         stage.padding)
            pi += 1
        elif isinstance(stage, layers.Gate):
            if stage.kind != "relu":
                raise ValueError(f"gate kind {stage.kind!r} unsupported in dvi mode")
            v = pair.variance
            if v is None:
                v = tape.constant(np.zeros(pair.mean.shape))
            sigma = tape.sqrt(tape.add(v, tape.constant(_VAR_FLOOR)))
            m, vv = relu_gaussian_moments(pair.mean, sigma)
            pair = MomentPair(m, vv)
        elif isinstance(stage, layers.Flatten):
            n = pair.mean.shape[0]
            flat = int(np.prod(pair.mean.shape[1:]))
            pair = MomentPair(
                tape.reshape(pair.mean, (n, flat)),
                None if pair.variance is None else tape.reshape(pair.variance, (n, flat)),
            )
        elif isinstance(stage, layers.MaxPool):
            raise ValueError("max-pool unsupported in dvi mode")
        else:
            raise TypeError(f"unknown stage {stage!r}")
    return pair


def varout_sample_forward(spec, params, x, rng) -> tape.Tensor:
    """One sampled forward pass with local reparameterization.

    Per affine stage: f = mean + sqrt(var)·ε with ε drawn from rng, where
    (mean, var) are the stage moments given the sampled previous
    activations. ReLU/leaky and pooling act on the sampled values.
    """
    h = x if isinstance(x, tape.Tensor) else tape.constant(x)
    pi = 0
    for stage in spec.stages:
        if isinstance(stage, (layers.Dense, layers.Conv2d)):
            if isinstance(stage, layers.Dense):
                out = layers.dense_moments(params[pi], MomentPair(h, None))
            else:
                out = layers.conv2d_moments(params[pi], MomentPair(h, None),
                                            stage.kernel, stage.stride, stage.padding)
            pi += 1
            eps = rng.standard_normal(out.mean.shape)
            h = tape.add(out.mean, tape.mul(tape.sqrt(out.variance), tape.constant(eps)))
        elif isinstance(stage, layers.Gate):
            if stage.kind == "leaky":
                h = tape.add(tape.scale(tape.relu(h), 1.0 - stage.slope),
                             tape.scale(h, stage.slope))
            else:
                h = tape.relu(h)
        elif isinstance(stage, layers.MaxPool):
            # Selection by the sampled values themselves (plain max-pool).
            h = layers.maxpool_moments(MomentPair(h, None), stage.window).mean
        elif isinstance(stage, layers.Flatten):
            h = tape.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        else:
            raise TypeError(f"unknown stage {stage!r}")
    return h


def varout_data_fit(spec, params, x, y, likelihood: str, *, beta=None, samples: int = 1,
                    rng=None) -> tape.Tensor:
    """Data fit averaged over sampled forward passes.

    Each draw scores the exact likelihood at its sampled outputs; with one
    sample this is the usual doubly-stochastic estimator.
    """
    if samples < 1:
        raise ValueError(f"need at least one sample, got {samples}")
    total = None
    for _ in range(samples):
        f = varout_sample_forward(spec, params, x, rng)
        pair = MomentPair(f, None)
        if likelihood == "regression":
            fit = objectives.regression_data_fit(y, pair, beta)
        else:
            fit = objectives.classification_data_fit(y, pair)
        total = fit if total is None else tape.add(total, fit)
    return tape.scale(total, 1.0 / samples)
