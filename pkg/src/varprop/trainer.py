"""Gradient-ascent training loop shared by all three engine modes.

One seed drives four independent named streams: "init" (parameter draws),
"shuffle" (epoch permutations), "sampler" (per-step draws in the sampling
mode), and "eval" (predictive sampling). Evaluation cadence therefore never
perturbs the optimization trajectory, and identical seeds reproduce the
metrics stream bitwise.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import baselines, config as _config, layers, objectives, tape
from .layers import GaussianParamLayer, NetworkSpec
from .seeding import substream

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 3.0
BETA_MIN = 1e-6
BETA_MAX = 1e6

_MODES = ("vbp", "dvi", "varout")
_LIKELIHOODS = ("regression", "classification")


@dataclass
class TrainConfig:
    mode: str = "vbp"
    likelihood: str = "regression"
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 0.01
    alpha: float = 1.0
    beta_init: float = 1.0
    update_beta: bool = True  # regression only: re-fit the noise precision each epoch
    seed: int = 0
    online: bool = False  # single shuffled pass, each example seen once
    gate_mode: str = "hard"
    gate_c: float | None = None
    train_samples: int = 1  # sampling-mode draws per step
    eval_samples: int = 100  # predictive draws per example
    eval_predictive: str = "sampled"  # sampled | deterministic (classification)
    eval_batch: int = 256
    eval_every: int = 1  # 0: only after the final epoch
    input_variance: float | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.likelihood not in _LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.eval_predictive not in ("sampled", "deterministic"):
            raise ValueError(f"unknown predictive {self.eval_predictive!r}")
        if self.gate_mode == "soft" and (self.gate_c is None or self.gate_c <= 0.0):
            raise ValueError("soft gates need a positive gate_c")
        if self.online and self.epochs != 1:
            raise ValueError("online training is a single pass: epochs must be 1")
        if self.mode == "varout" and self.input_variance is not None:
            raise ValueError("input variance is only propagated by the closed-form modes")
        for name in ("epochs", "batch_size", "train_samples", "eval_samples", "eval_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.learning_rate <= 0.0 or self.alpha <= 0.0 or self.beta_init <= 0.0:
            raise ValueError("learning_rate, alpha and beta_init must be positive")


def init_params(spec: NetworkSpec, alpha: float, rng) -> list[GaussianParamLayer]:
    """Fan-in-scaled mean draws (bias rows zero) and near-deterministic
    variances: log σ² is drawn tightly around −9 so every weight starts
    almost point-valued but with a symmetry-breaking spread."""
    out = []
    for rows, cols in spec.param_shapes():
        fan_in = rows - 1
        mu = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(rows, cols))
        mu[-1, :] = 0.0
        log_sigma = 0.5 * rng.normal(-9.0, math.sqrt(1e-3), size=(rows, cols))
        out.append(GaussianParamLayer(mu, log_sigma, alpha))
    return out


class Adam:
    """Adam over a fixed list of arrays, stepping in the ascent direction."""

    def __init__(self, arrays, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = list(arrays)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.arrays):
            raise ValueError(f"{len(grads)} gradients for {len(self.arrays)} arrays")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            a += self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _flat_arrays(params):
    out = []
    for layer in params:
        out.extend((layer.mu, layer.log_sigma))
    return out


def _flat_tensors(wrapped):
    out = []
    for layer in wrapped:
        out.extend((layer.mu, layer.log_sigma))
    return out


def _input_variance(cfg: TrainConfig, x):
    if cfg.input_variance is None:
        return None
    return np.full(x.shape, cfg.input_variance)


def _analytic_forward(spec, wrapped, x, cfg: TrainConfig):
    if cfg.mode == "dvi":
        return baselines.dvi_forward(spec, wrapped, x, input_variance=_input_variance(cfg, x))
    return layers.network_forward(
        spec, wrapped, x, gate_mode=cfg.gate_mode, gate_c=cfg.gate_c,
        input_variance=_input_variance(cfg, x),
    )


def _batch_objective(spec, wrapped, x, y, cfg: TrainConfig, *, beta, n_total, rng):
    if cfg.mode in ("vbp", "dvi"):
        out = _analytic_forward(spec, wrapped, x, cfg)
        return objectives.elbo(y, out, wrapped, cfg.likelihood, alpha=cfg.alpha,
                               n_total=n_total, beta=beta)
    fit = baselines.varout_data_fit(spec, wrapped, x, y, cfg.likelihood, beta=beta,
                                    samples=cfg.train_samples, rng=rng)
    kl = objectives.weight_kl(wrapped, cfg.alpha)
    scale = n_total / x.shape[0]
    objective = tape.sub(tape.scale(fit, scale), kl)
    return objectives.ElboReport(objective, float(objective.value), float(fit.value),
                                 float(kl.value), scale)


def _check_finite(report, where: str):
    for name, value in (("data fit", report.data_fit),
                        ("weight KL", report.weight_kl),
                        ("objective", report.elbo)):
        if not math.isfinite(value):
            raise RuntimeError(f"{name} became non-finite at {where}")


# ---------------------------------------------------------------------------
# Noise precision

def fit_noise_precision(sq_err_plus_var) -> float:
    """β = 1 / mean[(y − mean)² + var], clamped to [1e-6, 1e6].

    This is the closed-form maximizer of the data fit in β; because the
    residual moments do not depend on β, a second application is already a
    fixed point.
    """
    inv = float(np.mean(np.asarray(sq_err_plus_var, dtype=np.float64)))
    if not math.isfinite(inv) or inv <= 0.0:
        return BETA_MAX if inv <= 1.0 / BETA_MAX else BETA_MIN
    return float(min(max(1.0 / inv, BETA_MIN), BETA_MAX))


def update_beta(spec, params, x, y, cfg: TrainConfig, *, rng=None) -> float:
    """Re-fit the observation precision from full-data residual moments.

    Closed-form modes use the propagated output variance; the sampling mode
    estimates E[(y − f)²] from train_samples draws per example.
    """
    if cfg.likelihood != "regression":
        raise ValueError("noise precision only applies to regression")
    wrapped = layers.wrap_params(params, trainable=False)
    total = 0.0
    n = x.shape[0]
    for start in range(0, n, cfg.eval_batch):
        xb = x[start:start + cfg.eval_batch]
        yb = y[start:start + cfg.eval_batch]
        if cfg.mode == "varout":
            if rng is None:
                raise ValueError("sampling mode needs an rng")
            acc = np.zeros_like(yb)
            for _ in range(cfg.train_samples):
                f = baselines.varout_sample_forward(spec, wrapped, xb, rng).value
                acc += (yb - f) ** 2
            total += float(np.sum(acc / cfg.train_samples))
        else:
            out = _analytic_forward(spec, wrapped, xb, cfg)
            total += float(np.sum((yb - out.mean.value) ** 2 + out.variance.value))
    return fit_noise_precision(total / n)


def full_elbo(spec, params, x, y, cfg: TrainConfig, *, beta=None, rng=None) -> dict:
    """Scale-1 ELBO over the whole set, accumulated in eval_batch chunks."""
    wrapped = layers.wrap_params(params, trainable=False)
    fit = 0.0
    n = x.shape[0]
    for start in range(0, n, cfg.eval_batch):
        xb = x[start:start + cfg.eval_batch]
        yb = y[start:start + cfg.eval_batch]
        if cfg.mode == "varout":
            part = baselines.varout_data_fit(spec, wrapped, xb, yb, cfg.likelihood,
                                             beta=beta, samples=cfg.train_samples, rng=rng)
            fit += float(part.value)
        else:
            out = _analytic_forward(spec, wrapped, xb, cfg)
            if cfg.likelihood == "regression":
                part = objectives.regression_data_fit(yb, out, beta)
            else:
                part = objectives.classification_data_fit(yb, out)
            fit += float(part.value)
    kl = float(objectives.weight_kl(wrapped, cfg.alpha).value)
    return {"data_fit": fit, "weight_kl": kl, "elbo": fit - kl}


# ---------------------------------------------------------------------------
# Evaluation

def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _taylor_class_probs(mean, var):
    """Second-order expansion of E[softmax(f)] around the mean logits,
    clipped and renormalized."""
    zeta = _softmax(mean)
    s2 = np.sum(var * zeta ** 2, axis=-1, keepdims=True)
    p = zeta + 0.5 * zeta * (var * (1.0 - zeta) * (1.0 - 2.0 * zeta)
                             - 2.0 * var * zeta ** 2 + 2.0 * s2)
    p = np.clip(p, 1e-12, None)
    return p / p.sum(axis=-1, keepdims=True)


def evaluate(spec, params, x, y, cfg: TrainConfig, *, beta=None, target_sd: float = 1.0,
             rng=None) -> dict:
    """Held-out log-likelihood and error.

    Regression reports the per-point predictive log density in the
    original target scale (−log target_sd per point) and the root mean
    squared error, also unscaled. Classification reports mean log p[label]
    and the misclassification rate; the sampling mode always scores by
    sampled passes regardless of eval_predictive.
    """
    wrapped = layers.wrap_params(params, trainable=False)
    n = x.shape[0]
    if cfg.likelihood == "regression":
        if beta is None:
            raise ValueError("regression evaluation needs beta")
        ll_sum = 0.0
        sq_sum = 0.0
        for start in range(0, n, cfg.eval_batch):
            xb = x[start:start + cfg.eval_batch]
            yb = y[start:start + cfg.eval_batch]
            if cfg.mode == "varout":
                if rng is None:
                    raise ValueError("sampling mode needs an rng")
                draws = np.stack([
                    baselines.varout_sample_forward(spec, wrapped, xb, rng).value
                    for _ in range(cfg.eval_samples)
                ])
                per = (-0.5 * (objectives.LOG_2PI - np.log(beta))
                       - 0.5 * beta * (yb[None] - draws) ** 2)
                ll = logsumexp_np(per, axis=0) - np.log(cfg.eval_samples)
                mean = draws.mean(axis=0)
            else:
                out = _analytic_forward(spec, wrapped, xb, cfg)
                mean = out.mean.value
                pvar = out.variance.value + 1.0 / beta
                ll = -0.5 * (objectives.LOG_2PI + np.log(pvar)) - (yb - mean) ** 2 / (2.0 * pvar)
            ll_sum += float(np.sum(ll))
            sq_sum += float(np.sum((yb - mean) ** 2))
        return {
            "test_ll": ll_sum / n - math.log(target_sd),
            "test_error": math.sqrt(sq_sum / n) * target_sd,
        }

    labels = np.argmax(y, axis=1)
    ll_sum = 0.0
    wrong = 0
    for start in range(0, n, cfg.eval_batch):
        xb = x[start:start + cfg.eval_batch]
        lb = labels[start:start + cfg.eval_batch]
        if cfg.mode == "varout":
            if rng is None:
                raise ValueError("sampling mode needs an rng")
            p = np.zeros((xb.shape[0], y.shape[1]))
            for _ in range(cfg.eval_samples):
                f = baselines.varout_sample_forward(spec, wrapped, xb, rng).value
                p += _softmax(f)
            p /= cfg.eval_samples
        else:
            out = _analytic_forward(spec, wrapped, xb, cfg)
            mean, var = out.mean.value, out.variance.value
            if cfg.eval_predictive == "deterministic":
                p = _taylor_class_probs(mean, var)
            else:
                if rng is None:
                    raise ValueError("sampled predictive needs an rng")
                eps = rng.standard_normal((cfg.eval_samples,) + mean.shape)
                p = _softmax(mean[None] + np.sqrt(var)[None] * eps).mean(axis=0)
        rows = np.arange(xb.shape[0])
        ll_sum += float(np.sum(np.log(np.maximum(p[rows, lb], 1e-12))))
        wrong += int(np.sum(np.argmax(p, axis=1) != lb))
    return {"test_ll": ll_sum / n, "test_error": wrong / n}


def logsumexp_np(a, axis):
    hi = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(hi, axis=axis) + np.log(np.sum(np.exp(a - hi), axis=axis))


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    params: list
    metrics: list
    beta: float
    spec: NetworkSpec
    config: TrainConfig


def train(spec: NetworkSpec, dataset, cfg: TrainConfig, *, initial_params=None,
          initial_beta=None, callback=None) -> TrainResult:
    """Run the configured optimization and return parameters plus one
    metrics row per epoch.

    dataset: any object with x_train/y_train/x_test/y_test, n_train and
    target_sd attributes. callback, when given, receives each metrics row
    as it is produced.
    """
    expected = "regression" if cfg.likelihood == "regression" else "classification"
    if getattr(dataset, "kind", expected) != expected:
        raise ValueError(f"{dataset.kind} dataset for a {cfg.likelihood} objective")
    init_rng = substream(cfg.seed, "init")
    shuffle_rng = substream(cfg.seed, "shuffle")
    sampler_rng = substream(cfg.seed, "sampler")
    eval_rng = substream(cfg.seed, "eval")

    params = initial_params if initial_params is not None else init_params(
        spec, cfg.alpha, init_rng)
    adam = Adam(_flat_arrays(params), cfg.learning_rate)
    beta = float(initial_beta) if initial_beta is not None else cfg.beta_init
    n = dataset.n_train
    metrics: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        fit_sum = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            wrapped = layers.wrap_params(params)
            report = _batch_objective(spec, wrapped, dataset.x_train[idx],
                                      dataset.y_train[idx], cfg, beta=beta,
                                      n_total=n, rng=sampler_rng)
            _check_finite(report, f"epoch {epoch} step {steps + 1}")
            grads = tape.backward(report.objective)
            adam.step([grads[t] for t in _flat_tensors(wrapped)])
            for layer in params:
                np.clip(layer.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=layer.log_sigma)
            fit_sum += report.data_fit
            steps += 1
        if cfg.likelihood == "regression" and cfg.update_beta:
            beta = update_beta(spec, params, dataset.x_train, dataset.y_train, cfg,
                               rng=sampler_rng)
        kl = float(objectives.weight_kl(
            layers.wrap_params(params, trainable=False), cfg.alpha).value)
        row = {
            "epoch": epoch,
            "steps": steps,
            "data_fit": fit_sum,
            "weight_kl": kl,
            "elbo": fit_sum - kl,
            "beta": beta,
        }
        if epoch == cfg.epochs or (cfg.eval_every and epoch % cfg.eval_every == 0):
            row.update(evaluate(spec, params, dataset.x_test, dataset.y_test, cfg,
                                beta=beta, target_sd=dataset.target_sd, rng=eval_rng))
        row["seconds"] = time.perf_counter() - t0
        metrics.append(row)
        if callback is not None:
            callback(row)
    return TrainResult(params, metrics, beta, spec, cfg)


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"VPCK0001"


def save_checkpoint(path, spec: NetworkSpec, params, *, alpha: float, beta=None,
                    cfg: TrainConfig | None = None, extra: dict | None = None):
    """Versioned binary container: magic, JSON header, raw float64 buffers.

    Buffers are little-endian C-order, so a round trip restores every
    parameter bit for bit.
    """
    entries = []
    buffers = []
    for i, layer in enumerate(params):
        for name, arr in (("mu", layer.mu), ("log_sigma", layer.log_sigma)):
            entries.append({"name": f"layer{i}.{name}", "shape": list(arr.shape)})
            buffers.append(np.ascontiguousarray(arr, dtype="<f8"))
    header = {
        "version": 1,
        "network": _config.network_to_tokens(spec.stages),
        "input_shape": list(spec.input_shape),
        "alpha": float(alpha),
        "beta": None if beta is None else float(beta),
        "arrays": entries,
    }
    if cfg is not None:
        header["train_config"] = asdict(cfg)
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf.tobytes())


def load_checkpoint(path):
    """Returns (spec, params, header). Rejects foreign files and truncation."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        spec = NetworkSpec(tuple(header["input_shape"]),
                           _config.parse_network_tokens(header["network"].split()))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated buffer for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after the last buffer")
    params = []
    alpha = float(header["alpha"])
    for i in range(len(header["arrays"]) // 2):
        params.append(GaussianParamLayer(arrays[f"layer{i}.mu"],
                                         arrays[f"layer{i}.log_sigma"], alpha))
    expected = [tuple(s) for s in spec.param_shapes()]
    if [p.mu.shape for p in params] != expected:
        raise ValueError(f"{path}: buffer shapes do not match the declared network")
    return spec, params, header
