"""Elementwise moment algebra for gated-linear networks.

Three ingredient families used by the closed-form forward passes:

* gate moments: a ReLU is written as max(0,x) = x·1(x>0); the indicator is
  relaxed to a Bernoulli variable z with success probability sigmoid(C·a)
  and becomes a point mass on 1(a>0) as C grows. The moments here are of z
  under that distribution, evaluated at the pre-activation mean.
* product moments: mean and variance of a product of two independent
  variables, the identity the layer variance recursion is built from.
* Gaussian ReLU moments: E and var of max(0,f) for Gaussian f, the
  moment-matching rule the DVI-style baseline uses at each nonlinearity.

All functions are pure, operate elementwise on float64 arrays, and clamp
computed variances at 0 to absorb catastrophic cancellation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from . import tape


@dataclass(frozen=True)
class GateState:
    """Bernoulli gate moments; z is binary so E[z²] = E[z] always.

    mode is "hard" (point mass on the sign of the mean, ties off) or
    "soft" with steepness c. Hard gates have var_z identically 0.
    """

    e_z: np.ndarray
    var_z: np.ndarray
    e_z2: np.ndarray
    mode: str
    c: float | None = None


@dataclass(frozen=True)
class MomentPair:
    """Mean and variance arrays of identical shape (tape tensors or plain)."""

    mean: object
    variance: object


def gate_moments(preact_mean, mode: str = "hard", c: float | None = None) -> GateState:
    """Closed-form gate update from the mean pass.

    Hard mode: e_z = 1(mean > 0); a mean of exactly 0 leaves the unit off,
    matching max(0,0) = 0. Soft mode: e_z = sigmoid(c·mean).
    """
    m = np.asarray(preact_mean, dtype=np.float64)
    if mode == "hard":
        e = (m > 0.0).astype(np.float64)
        v = np.zeros_like(e)
        return GateState(e, v, e, "hard")
    if mode == "soft":
        if c is None or c <= 0.0:
            raise ValueError(f"soft gate needs positive steepness, got {c}")
        e = _special.expit(float(c) * m)
        return GateState(e, e * (1.0 - e), e, "soft", float(c))
    raise ValueError(f"unknown gate mode {mode!r}")


def product_moments(ea, va, eb, vb):
    """Moments of a·b for independent a, b.

    mean = E[a]E[b]; var = E[a²]var[b] + var[a]E[b]².
    """
    ea, va = np.asarray(ea, dtype=np.float64), np.asarray(va, dtype=np.float64)
    eb, vb = np.asarray(eb, dtype=np.float64), np.asarray(vb, dtype=np.float64)
    if np.any(va < 0.0) or np.any(vb < 0.0):
        raise ValueError("product_moments: negative input variance")
    var = (ea * ea + va) * vb + va * (eb * eb)
    return ea * eb, np.maximum(var, 0.0)


def relu_gaussian_moments(mu, sigma):
    """Moments of max(0,f) for f ~ N(mu, sigma²), elementwise.

    mean = mu·Φ(mu/sigma) + sigma·φ(mu/sigma)
    var  = (mu² + sigma²)·Φ(mu/sigma) + mu·sigma·φ(mu/sigma) − mean²

    Accepts tape tensors (adds the formula to the graph, variance clamped
    via max-with-zero) or plain arrays (sigma must be positive).
    """
    if isinstance(mu, tape.Tensor) or isinstance(sigma, tape.Tensor):
        r = tape.div(mu, sigma)
        cdf, pdf = tape.normal_cdf(r), tape.normal_pdf(r)
        mean = tape.add(tape.mul(mu, cdf), tape.mul(sigma, pdf))
        second = tape.add(
            tape.mul(tape.add(tape.square(mu), tape.square(sigma)), cdf),
            tape.mul(tape.mul(mu, sigma), pdf),
        )
        return mean, tape.relu(tape.sub(second, tape.square(mean)))
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("relu_gaussian_moments: sigma must be positive")
    r = mu / sigma
    cdf = _special.ndtr(r)
    pdf = tape.normal_pdf_values(r)
    mean = mu * cdf + sigma * pdf
    var = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf - mean * mean
    return mean, np.maximum(var, 0.0)


def leaky_gate_moments(gate: GateState, slope: float):
    """Moments of the multiplier c = slope + (1−slope)·z.

    Returns (E[c], var[c], E[c²]); slope 0 reduces exactly to the gate.
    """
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must lie in [0,1), got {slope}")
    keep = 1.0 - slope
    e_c = slope + keep * gate.e_z
    var_c = keep * keep * gate.var_z
    return e_c, var_c, var_c + e_c * e_c
