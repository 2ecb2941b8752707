"""Sampling-free variational inference for ReLU networks.

The forward pass propagates means and variances in closed form instead of
drawing weight samples; activation gates get function-level updates from the
running mean pass. Sampling baselines (moment-matched Gaussian propagation
and local-reparameterization) share the same layer and trainer plumbing.
"""

__version__ = "0.1.0"
