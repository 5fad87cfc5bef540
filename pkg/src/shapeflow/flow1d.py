"""Standalone 1-D rectified-flow oracle.

For Gaussian endpoints the conditional-expectation velocity has a closed
form, so a small MLP trained on the plain flow-matching objective can be
graded against exact numbers: E[x - z0 | z_t] under z_t = t x + (1-t) z0
with x ~ N(mu, var) and z0 ~ N(0, 1) is linear in z_t for every t. This
is the independent ground truth the image model's objective is built on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .trainer import adamw_step, init_optimizer

MU1 = 2.0
VAR1 = 0.25


def closed_form_velocity(z, t, mu=MU1, var=VAR1):
    """E[x - z0 | z_t = z] for the joint-Gaussian coupling.

    z_t ~ N(mu t, var t^2 + (1-t)^2); regression coefficients follow from
    cov(x, z_t) = var t and cov(z0, z_t) = (1-t).
    """
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    s2 = var * t ** 2 + (1.0 - t) ** 2
    return mu + (var * t - (1.0 - t)) * (z - mu * t) / s2


def init_mlp(seed, hidden=64):
    rng = np.random.default_rng(seed)
    return {
        "w1": rng.normal(0.0, 1.0, size=(2, hidden)) / np.sqrt(2.0),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0, size=(hidden, 1)) / np.sqrt(hidden),
        "b2": np.zeros(1),
    }


def mlp_velocity(params, z, t):
    feat = np.stack([np.asarray(z, dtype=np.float64),
                     np.broadcast_to(t, np.shape(z)).astype(np.float64)], axis=-1)
    h, _ = nn.linear_fwd(feat, params["w1"], params["b1"])
    g, _ = nn.gelu_fwd(h)
    v, _ = nn.linear_fwd(g, params["w2"], params["b2"])
    return v[..., 0]


def train_velocity_mlp(seed=0, steps=4000, batch=1024, hidden=64, lr=3e-3,
                       mu=MU1, var=VAR1):
    """Fit the 2-layer MLP with the generic flow objective, uniform P(t)."""
    params = init_mlp(seed, hidden)
    opt = init_optimizer(params)
    rng = np.random.default_rng(seed + 1)
    for _ in range(steps):
        t = rng.uniform(0.0, 1.0, size=batch)
        z0 = rng.standard_normal(batch)
        x = mu + np.sqrt(var) * rng.standard_normal(batch)
        zt = t * x + (1.0 - t) * z0
        target = x - z0

        feat = np.stack([zt, t], axis=-1)
        h, c1 = nn.linear_fwd(feat, params["w1"], params["b1"])
        g, cg = nn.gelu_fwd(h)
        v, c2 = nn.linear_fwd(g, params["w2"], params["b2"])
        diff = v[:, 0] - target

        dv = (2.0 / batch) * diff[:, None]
        dg, dw2, db2 = nn.linear_bwd(dv, c2)
        dh = nn.gelu_bwd(dg, cg)
        _, dw1, db1 = nn.linear_bwd(dh, c1)
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        adamw_step(params, grads, opt, lr_t=lr, clip=0.0)
    return params


def grid_mse(params, mu=MU1, var=VAR1, n_t=10, n_z=15):
    """Mean squared deviation from the closed form over a (z, t) grid:
    t in [0.05, 0.95], z within 2.5 marginal std of the z_t mean."""
    errs = []
    for t in np.linspace(0.05, 0.95, n_t):
        s = np.sqrt(var * t ** 2 + (1.0 - t) ** 2)
        z = np.linspace(mu * t - 2.5 * s, mu * t + 2.5 * s, n_z)
        v_hat = mlp_velocity(params, z, t)
        v_star = closed_form_velocity(z, t, mu, var)
        errs.append((v_hat - v_star) ** 2)
    return float(np.mean(errs))


def euler_transport(params, n_samples=10_000, n_steps=100, seed=7):
    """Integrate dz/dt = v(z, t) from seeded N(0,1) noise; returns samples."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_samples)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        z = z + mlp_velocity(params, z, k * dt) * dt
    return z


@dataclass
class OracleResult:
    grid_mse: float
    sample_mean: float
    sample_var: float


def run_oracle_check(seed=0, steps=4000) -> OracleResult:
    params = train_velocity_mlp(seed=seed, steps=steps)
    z1 = euler_transport(params)
    return OracleResult(grid_mse=grid_mse(params),
                        sample_mean=float(z1.mean()),
                        sample_var=float(z1.var()))
