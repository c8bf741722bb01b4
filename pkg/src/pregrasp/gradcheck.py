"""Finite-difference audit of every analytic gradient used in training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .environment import ACTION_DIM, OBS_DIM, EnvConfig, observation_scale
from .neuralnet import backward, forward, gradient_error, numeric_gradient, predict
from .sac import (
    NET_NAMES,
    critic_loss_and_grads,
    make_bundle,
    policy_loss_and_grads,
    temperature_loss_and_grads,
    value_loss_and_grads,
)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    compared: int
    skipped: int


def _random_batch(rng, n, obs_dim, act_dim):
    return {
        "s": rng.standard_normal((n, obs_dim)),
        "a": rng.uniform(-0.99, 0.99, (n, act_dim)),
        "r": rng.standard_normal(n),
        "s2": rng.standard_normal((n, obs_dim)),
        "done": (np.arange(n) % 3 == 0).astype(float),
    }


def run_grad_check(hidden: Sequence[int] = (256, 256), batch_size: int = 4, seed: int = 0,
                   h: float = 1e-5, max_entries: Optional[int] = None,
                   obs_dim: int = OBS_DIM, act_dim: int = ACTION_DIM,
                   obs_scale: Optional[np.ndarray] = None) -> List[GradCheckResult]:
    """Compare analytic and central-difference gradients with frozen noise.

    Covers plain backpropagation through each network architecture and the
    value, critic, policy and temperature losses.  ``max_entries`` probes a
    random subset of each parameter array instead of every entry.  The
    networks carry the grasp task's input scale unless ``obs_scale`` is
    given or the dimensions differ from the task's.
    """
    if obs_scale is None and obs_dim == OBS_DIM:
        obs_scale = observation_scale(EnvConfig())
    rng = np.random.default_rng(seed)
    bundle = make_bundle(obs_dim, act_dim, hidden, rng, obs_scale=obs_scale)
    # move the nets away from their tiny initial output scale
    for name in NET_NAMES:
        for p in getattr(bundle, name).params():
            p += 0.05 * rng.standard_normal(p.shape)
    batch = _random_batch(rng, batch_size, obs_dim, act_dim)
    noise = rng.standard_normal((batch_size, act_dim))
    alpha, gamma, entropy = 0.2, 0.99, -float(act_dim)
    sub = np.random.default_rng(seed + 1)
    results = []

    def probe(name, loss_fn, grads, arrays):
        num = numeric_gradient(loss_fn, arrays, h, max_entries, sub)
        err, used, skipped = gradient_error(grads, num)
        results.append(GradCheckResult(name, err, used, skipped))

    for name, net, width in (("actor", bundle.actor, obs_dim), ("critic", bundle.critic1, obs_dim + act_dim),
                             ("value", bundle.value, obs_dim)):
        x = rng.standard_normal((batch_size, width))
        g_out = rng.standard_normal((batch_size, net.out_dim))
        _, cache = forward(net, x)
        grads, dx = backward(net, cache, g_out)
        probe(f"backprop/{name}", lambda: float(np.sum(predict(net, x) * g_out)), grads + [dx],
              net.params() + [x])

    _, gv = value_loss_and_grads(bundle, batch, alpha, noise=noise)
    probe("value_loss/value", lambda: value_loss_and_grads(bundle, batch, alpha, noise=noise)[0],
          gv, bundle.value.params())

    _, (g1, g2) = critic_loss_and_grads(bundle, batch, gamma)
    probe("critic_loss/critic1", lambda: critic_loss_and_grads(bundle, batch, gamma)[0][0],
          g1, bundle.critic1.params())
    probe("critic_loss/critic2", lambda: critic_loss_and_grads(bundle, batch, gamma)[0][1],
          g2, bundle.critic2.params())

    _, gp = policy_loss_and_grads(bundle, batch, alpha, noise=noise)
    probe("policy_loss/actor", lambda: policy_loss_and_grads(bundle, batch, alpha, noise=noise)[0],
          gp, bundle.actor.params())

    _, ga = temperature_loss_and_grads(bundle, batch, entropy, noise=noise)
    holder = np.array([bundle.log_alpha])

    def temp_loss():
        bundle.log_alpha = float(holder[0])
        return temperature_loss_and_grads(bundle, batch, entropy, noise=noise)[0]

    probe("temperature_loss/log_alpha", temp_loss, [np.array([ga])], [holder])
    bundle.log_alpha = float(holder[0])
    return results


def summarize(results: List[GradCheckResult]) -> Dict[str, float]:
    return {r.name: r.max_rel_error for r in results}
