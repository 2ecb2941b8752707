"""Independent verification oracles: Monte Carlo, quadrature, references.

Everything here deliberately avoids the analytic moment code paths it is
used to check. Network sampling draws weights from q(W) and gates from the
fitted q(Z) (gate probabilities taken from the analytic mean pass, then
sampled independently of the weights), because the engine's moments are
expectations under the factorized q(Z)q(W). Pool selections are likewise
fixed at their fitted indices: they are part of q(Z), not a max over
realizations.
"""
from __future__ import annotations

import numpy as np
from scipy import integrate

from . import layers


# ---------------------------------------------------------------------------
# Scalar oracles

def mc_product_moments(ea, va, eb, vb, draws: int = 10**6, rng=None):
    """Sample moments of a·b for independent Gaussians; returns estimates
    and standard errors: (mean, var, se_mean, se_var)."""
    rng = rng or np.random.default_rng(0)
    a = ea + np.sqrt(va) * rng.standard_normal(draws)
    b = eb + np.sqrt(vb) * rng.standard_normal(draws)
    x = a * b
    mean = x.mean()
    centered = x - mean
    m2 = np.mean(centered**2)
    m4 = np.mean(centered**4)
    se_mean = np.sqrt(m2 / draws)
    se_var = np.sqrt(max(m4 - m2 * m2, 0.0) / draws)
    return mean, m2, se_mean, se_var


def quad_relu_moments(mu: float, sigma: float):
    """Adaptive quadrature of E[max(0,f)] and var[max(0,f)], f ~ N(mu, sigma²).

    The integrand vanishes below 0, so integrate only [0, hi) and hint the
    density peak so a narrow bump far from the bounds is not missed.
    """
    density = lambda f: np.exp(-0.5 * ((f - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    hi = max(mu + 13 * sigma, 13 * sigma)
    pts = [p for p in (mu - 2 * sigma, mu, mu + 2 * sigma) if 0.0 < p < hi] or None
    e1, _ = integrate.quad(lambda f: f * density(f), 0.0, hi, points=pts, limit=200)
    e2, _ = integrate.quad(lambda f: f * f * density(f), 0.0, hi, points=pts, limit=200)
    return e1, max(e2 - e1 * e1, 0.0)


def quad_weight_kl(mu: float, sigma: float, alpha: float) -> float:
    """1-D quadrature of KL( N(mu, sigma²) || N(0, 1/alpha) ) for one weight."""
    def integrand(w):
        logq = -0.5 * np.log(2 * np.pi * sigma**2) - 0.5 * ((w - mu) / sigma) ** 2
        logp = 0.5 * np.log(alpha / (2 * np.pi)) - 0.5 * alpha * w * w
        return np.exp(logq) * (logq - logp)

    val, _ = integrate.quad(integrand, mu - 12 * sigma, mu + 12 * sigma, limit=200)
    return val


def _softplus(x):
    return np.logaddexp(0.0, x)


def mc_softplus_gap(mu: float, sigma: float, c: float, draws: int = 10**7, rng=None):
    """Sample estimate of E[soft(C·a)] − soft(C·E[a]), a ~ N(mu, sigma²).

    This is the definitional size of the dropped gate KL term. Returns
    (estimate, standard error).
    """
    rng = rng or np.random.default_rng(0)
    total = 0.0
    total_sq = 0.0
    left = draws
    while left:
        s = min(left, 2**20)
        vals = _softplus(c * (mu + sigma * rng.standard_normal(s)))
        total += vals.sum()
        total_sq += (vals * vals).sum()
        left -= s
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0)
    return mean - _softplus(c * mu), np.sqrt(var / draws)


def quad_softplus_gap(mu: float, sigma: float, c: float) -> float:
    """Quadrature version of the definitional gate-KL size."""
    density = lambda a: np.exp(-0.5 * ((a - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    val, _ = integrate.quad(lambda a: _softplus(c * a) * density(a),
                            mu - 14 * sigma, mu + 14 * sigma, limit=200)
    return val - _softplus(c * mu)


def mc_expected_lse(mean, var, draws: int = 10**6, rng=None):
    """Sample estimate of E[logsumexp(f)] for f ~ N(mean, diag var), one row.

    Returns (estimate, standard error).
    """
    rng = rng or np.random.default_rng(0)
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.asarray(var, dtype=np.float64))
    total = 0.0
    total_sq = 0.0
    left = draws
    while left:
        s = min(left, 2**18)
        f = mean + sd * rng.standard_normal((s, mean.size))
        m = f.max(axis=1, keepdims=True)
        vals = (m + np.log(np.exp(f - m).sum(axis=1, keepdims=True))).ravel()
        total += vals.sum()
        total_sq += (vals * vals).sum()
        left -= s
    est = total / draws
    sd_est = np.sqrt(max(total_sq / draws - est * est, 0.0))
    return est, sd_est / np.sqrt(draws)


# ---------------------------------------------------------------------------
# Network sampling under q(Z)·q(W)

def sample_network_outputs(spec, params, x, *, gate_mode="hard", gate_c=None,
                           draws=10**6, rng=None, chunk=8192, input_variance=None,
                           activation="gates"):
    """Yield chunks of sampled network outputs, shape (s, n_examples, out).

    Weights are drawn fresh per sample. With activation="gates" (the
    posterior the gated engine approximates) gate states are drawn from the
    fitted Bernoulli probabilities of the analytic mean pass, independent
    of the weights, and pool indices are the fitted selections. With
    activation="relu" the true nonlinearity is applied to the sampled
    values (plain ReLU/leaky, plain window max), the target distribution
    of the moment-matching baseline.
    """
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    record: list = []
    if activation == "gates":
        layers.network_forward(
            spec, layers.wrap_params(params, trainable=False), x,
            gate_mode=gate_mode, gate_c=gate_c, input_variance=input_variance, record=record,
        )
    n = x.shape[0]
    left = draws
    while left:
        s = min(left, chunk)
        h = np.broadcast_to(x, (s,) + x.shape).copy()
        if input_variance is not None:
            h += np.sqrt(np.asarray(input_variance)) * rng.standard_normal(h.shape)
        ri = iter(record)
        pi = 0
        for stage in spec.stages:
            if isinstance(stage, layers.Dense):
                h = _sample_affine(h, params[pi], rng)
                pi += 1
            elif isinstance(stage, layers.Conv2d):
                h = _sample_conv(h, params[pi], stage, rng)
                pi += 1
            elif isinstance(stage, layers.Gate):
                slope = stage.slope if stage.kind == "leaky" else 0.0
                if activation == "gates":
                    entry = next(ri)
                    assert entry["kind"] == "gate"
                    q = entry["gate"].e_z
                    z = (rng.random((s,) + q.shape) < q).astype(np.float64)
                    h = h * (slope + (1.0 - slope) * z)
                else:
                    h = np.where(h > 0.0, h, slope * h)
            elif isinstance(stage, layers.MaxPool):
                if activation == "gates":
                    entry = next(ri)
                    assert entry["kind"] == "pool"
                    h = h.reshape(s, -1)[:, entry["chosen"]]
                else:
                    sh = h.shape
                    k = stage.window
                    h = h.reshape(*sh[:3], sh[3] // k, k, sh[4] // k, k).max(axis=(4, 6))
            elif isinstance(stage, layers.Flatten):
                h = h.reshape(s, n, -1)
        yield h
        left -= s


def _sample_affine(h, layer, rng):
    s = h.shape[0]
    mu, sigma = layer.mu, np.exp(layer.log_sigma)
    w = mu + sigma * rng.standard_normal((s,) + mu.shape)
    h_aug = np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)
    return np.einsum("snf,sfo->sno", h_aug, w)


def _sample_conv(h, layer, stage, rng):
    s, n = h.shape[:2]
    if stage.padding:
        p = stage.padding
        h = np.pad(h, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    _, _, c, hh, ww = h.shape
    idx, oh, ow = layers._patch_indices(n, c, hh, ww, stage.kernel, stage.stride)
    patches = h.reshape(s, -1)[:, idx]  # (s, n, P, c·k·k)
    mu, sigma = layer.mu, np.exp(layer.log_sigma)
    w = mu + sigma * rng.standard_normal((s,) + mu.shape)
    aug = np.concatenate([patches, np.ones(patches.shape[:-1] + (1,))], axis=-1)
    out = np.einsum("snpf,sfo->snpo", aug, w)
    return out.transpose(0, 1, 3, 2).reshape(s, n, stage.filters, oh, ow)


def mc_network_moments(spec, params, x, *, gate_mode="hard", gate_c=None,
                       draws=10**6, rng=None, chunk=8192, input_variance=None,
                       activation="gates"):
    """Estimate output mean/variance per unit with standard errors.

    Returns dict with mean, var, se_mean, se_var arrays of shape (n, out).
    """
    s1 = s2 = s3 = s4 = 0.0
    for h in sample_network_outputs(spec, params, x, gate_mode=gate_mode, gate_c=gate_c,
                                    draws=draws, rng=rng, chunk=chunk,
                                    input_variance=input_variance, activation=activation):
        s1 = s1 + h.sum(axis=0)
        h2 = h * h
        s2 = s2 + h2.sum(axis=0)
        s3 = s3 + (h2 * h).sum(axis=0)
        s4 = s4 + (h2 * h2).sum(axis=0)
    mean = s1 / draws
    m2 = np.maximum(s2 / draws - mean**2, 0.0)
    m4 = s4 / draws - 4 * mean * (s3 / draws) + 6 * mean**2 * (s2 / draws) - 3 * mean**4
    se_mean = np.sqrt(m2 / draws)
    se_var = np.sqrt(np.maximum(m4 - m2 * m2, 0.0) / draws)
    return {"mean": mean, "var": m2, "se_mean": se_mean, "se_var": se_var}


def mc_regression_fit(spec, params, x, y, beta, *, gate_mode="hard", gate_c=None,
                      draws=10**5, rng=None, chunk=8192):
    """Sample estimate of E_q[ Σ_n log N(y_n | f(x_n), β⁻¹) ].

    Returns (estimate, standard error); the analytic data-fit term equals
    this expectation exactly, so 3-SE agreement is the correctness bar.
    """
    y = np.asarray(y, dtype=np.float64)
    const = -0.5 * np.log(2.0 * np.pi / beta) * y.shape[0]
    total = 0.0
    total_sq = 0.0
    for h in sample_network_outputs(spec, params, x, gate_mode=gate_mode, gate_c=gate_c,
                                    draws=draws, rng=rng, chunk=chunk):
        ll = const - 0.5 * beta * ((y[None, :, :] - h) ** 2).sum(axis=(1, 2))
        total += ll.sum()
        total_sq += (ll * ll).sum()
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0)
    return mean, np.sqrt(var / draws)


# ---------------------------------------------------------------------------
# Deterministic reference network

def reference_forward(spec, weights, x):
    """Plain deterministic forward pass (ordinary float net) using the given
    weight matrices (bias row last). ReLU/leaky are applied to values; pools
    take the window max of values. Used as the zero-variance identity check."""
    h = np.asarray(x, dtype=np.float64)
    pi = 0
    for stage in spec.stages:
        if isinstance(stage, layers.Dense):
            h = np.concatenate([h, np.ones((h.shape[0], 1))], axis=1) @ weights[pi]
            pi += 1
        elif isinstance(stage, layers.Conv2d):
            if stage.padding:
                p = stage.padding
                h = np.pad(h, ((0, 0), (0, 0), (p, p), (p, p)))
            n, c, hh, ww = h.shape
            idx, oh, ow = layers._patch_indices(n, c, hh, ww, stage.kernel, stage.stride)
            patches = h.reshape(-1)[idx]
            aug = np.concatenate([patches, np.ones(patches.shape[:-1] + (1,))], axis=-1)
            out = np.einsum("npf,fo->npo", aug, weights[pi])
            h = out.transpose(0, 2, 1).reshape(n, stage.filters, oh, ow)
            pi += 1
        elif isinstance(stage, layers.Gate):
            slope = stage.slope if stage.kind == "leaky" else 0.0
            h = np.where(h > 0.0, h, slope * h)
        elif isinstance(stage, layers.MaxPool):
            n, c, hh, ww = h.shape
            k = stage.window
            h = h.reshape(n, c, hh // k, k, ww // k, k).max(axis=(3, 5))
        elif isinstance(stage, layers.Flatten):
            h = h.reshape(h.shape[0], -1)
    return h
