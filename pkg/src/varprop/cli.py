"""Command-line front end.

    varprop train --config runs/boston.cfg --out model.ckpt --metrics m.jsonl
    varprop eval --checkpoint model.ckpt --config runs/boston.cfg
    varprop bench --config runs/boston.cfg --splits 5
    varprop moments-check --draws 200000

Metrics files are JSON lines: one header object, then one object per epoch.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import config as config_mod
from . import data, layers, moments, oracles, trainer


def build_dataset(cfg: dict, seed: int) -> data.Dataset:
    fmt = cfg.get("data_format")
    if fmt == "csv":
        features, targets = data.load_csv(
            config_mod.resolve_path(cfg, cfg["data_path"]),
            target_column=cfg.get("target_column", -1),
        )
        return data.make_regression_dataset(features, targets, seed,
                                            standardize=cfg.get("standardize", True))
    if fmt == "idx":
        return data.make_idx_dataset(
            config_mod.resolve_path(cfg, cfg["train_images"]),
            config_mod.resolve_path(cfg, cfg["train_labels"]),
            config_mod.resolve_path(cfg, cfg["test_images"]),
            config_mod.resolve_path(cfg, cfg["test_labels"]),
            num_classes=cfg.get("num_classes", 10),
        )
    if fmt == "cifar":
        train_paths = [config_mod.resolve_path(cfg, p.strip())
                       for p in cfg["cifar_train"].split(",") if p.strip()]
        return data.make_cifar_dataset(
            train_paths,
            config_mod.resolve_path(cfg, cfg["cifar_test"]),
            num_classes=cfg.get("num_classes", 10),
        )
    raise ValueError(f"config needs a data_format, got {fmt!r}")


_TRAIN_KEYS = ("mode", "epochs", "batch_size", "learning_rate", "alpha", "beta_init",
               "online", "gate_mode", "gate_c", "eval_predictive", "eval_samples",
               "eval_every", "train_samples", "input_variance")


def build_train_config(cfg: dict, seed: int) -> trainer.TrainConfig:
    likelihood = "regression" if cfg.get("data_format") == "csv" else "classification"
    kwargs = {k: cfg[k] for k in _TRAIN_KEYS if k in cfg}
    return trainer.TrainConfig(likelihood=likelihood, seed=seed, **kwargs)


def _network_spec(cfg: dict, dataset: data.Dataset) -> layers.NetworkSpec:
    if "network" not in cfg:
        raise ValueError("config needs a network line")
    return layers.NetworkSpec(dataset.input_shape, cfg["network"])


def _metrics_header(cfg: dict, tc: trainer.TrainConfig, spec) -> dict:
    return {
        "format": "varprop-metrics",
        "version": 1,
        "network": config_mod.network_to_tokens(spec.stages),
        "mode": tc.mode,
        "likelihood": tc.likelihood,
        "seed": tc.seed,
        "epochs": tc.epochs,
    }


def _print_row(row: dict):
    parts = [f"epoch {row['epoch']}", f"elbo {row['elbo']:.4f}", f"beta {row['beta']:.4g}"]
    if "test_ll" in row:
        parts.append(f"test_ll {row['test_ll']:.4f}")
        parts.append(f"test_error {row['test_error']:.4f}")
    print("  ".join(parts), flush=True)


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    dataset = build_dataset(cfg, seed)
    tc = build_train_config(cfg, seed)
    spec = _network_spec(cfg, dataset)

    sink = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    if sink:
        sink.write(json.dumps(_metrics_header(cfg, tc, spec), sort_keys=True) + "\n")

    def emit(row):
        if sink:
            sink.write(json.dumps(row, sort_keys=True) + "\n")
            sink.flush()
        if not args.quiet:
            _print_row(row)

    try:
        result = trainer.train(spec, dataset, tc, callback=emit)
    finally:
        if sink:
            sink.close()
    if args.out:
        trainer.save_checkpoint(args.out, spec, result.params, alpha=tc.alpha,
                                beta=result.beta, cfg=tc)
    final = {k: v for k, v in result.metrics[-1].items() if k != "seconds"}
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    spec, params, header = trainer.load_checkpoint(args.checkpoint)
    cfg = config_mod.load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    dataset = build_dataset(cfg, seed)
    if tuple(dataset.input_shape) != spec.input_shape:
        raise ValueError(f"dataset shape {dataset.input_shape} does not match "
                         f"checkpoint {spec.input_shape}")
    tc = build_train_config(cfg, seed)
    beta = header.get("beta") or tc.beta_init
    result = trainer.evaluate(spec, params, dataset.x_test, dataset.y_test, tc,
                              beta=beta, target_sd=dataset.target_sd,
                              rng=trainer.substream(seed, "eval"))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = config_mod.load_config(args.config)
    base = args.seed if args.seed is not None else cfg.get("seed", 0)
    rows = []
    for i in range(args.splits):
        seed = base + i
        dataset = build_dataset(cfg, seed)
        tc = build_train_config(cfg, seed)
        spec = _network_spec(cfg, dataset)
        result = trainer.train(spec, dataset, tc)
        last = result.metrics[-1]
        rows.append({"seed": seed, "test_ll": last["test_ll"],
                     "test_error": last["test_error"]})
        if not args.quiet:
            print(json.dumps(rows[-1], sort_keys=True), flush=True)
    summary = {"splits": args.splits}
    for key in ("test_ll", "test_error"):
        vals = np.array([r[key] for r in rows])
        summary[key] = float(vals.mean())
        summary[key + "_se"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_moments_check(args) -> int:
    """Self-test: random small networks against Monte Carlo, and the gating
    nonlinearity's closed-form moments against quadrature."""
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.networks):
        # one gate stage: the regime where the diagonal recursion is exact,
        # so any excess deviation is a defect rather than the documented
        # cross-covariance approximation of deeper stacks
        stages = (layers.Dense(int(rng.integers(3, 9))), layers.Gate(),
                  layers.Dense(int(rng.integers(1, 4))))
        spec = layers.NetworkSpec((int(rng.integers(2, 5)),), stages)
        params = []
        for rows, cols in spec.param_shapes():
            params.append(layers.GaussianParamLayer(
                rng.normal(0.0, 0.8, (rows, cols)),
                np.log(rng.uniform(0.1, 0.6, (rows, cols))), 1.0))
        x = rng.normal(0.0, 1.0, (2, spec.input_shape[0]))
        wrapped = layers.wrap_params(params, trainable=False)
        out = layers.network_forward(spec, wrapped, x)
        mc = oracles.mc_network_moments(spec, params, x, gate_mode="hard",
                                        draws=args.draws, rng=rng)
        for got, est, se in ((out.mean.value, mc["mean"], mc["se_mean"]),
                             (out.variance.value, mc["var"], mc["se_var"])):
            worst = max(worst, float(np.max(np.abs(got - est) / (se + 1e-12))))
    mus = np.linspace(-6.0, 6.0, 25)
    sigmas = (0.05, 0.5, 2.0)
    quad_err = 0.0
    for mu in mus:
        for sigma in sigmas:
            mean, var = moments.relu_gaussian_moments(mu, sigma)
            qm, qv = oracles.quad_relu_moments(mu, sigma)
            quad_err = max(quad_err, float(abs(mean - qm)), float(abs(var - qv)))
    ok = bool(worst < 5.0 and quad_err < 1e-6)
    print(json.dumps({"max_moment_deviation_se": worst,
                      "max_quadrature_error": quad_err,
                      "ok": ok}, sort_keys=True))
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="varprop",
                                     description="Closed-form variational training "
                                                 "for gated networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="JSONL metrics path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the config's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="repeat training over shifted seeds and summarize")
    p.add_argument("--config", required=True)
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("moments-check", help="compare propagated moments against "
                                             "Monte Carlo and quadrature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=200000)
    p.add_argument("--networks", type=int, default=3)
    p.set_defaults(func=cmd_moments_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
