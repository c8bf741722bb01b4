"""Small fully connected networks with hand-written backpropagation.

Everything is float64 and row-major: a batch of inputs is an ``(n, in)``
array and layer ``k`` computes ``h @ W[k] + b[k]``.  Hidden layers use ReLU,
the last layer is linear.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


# While a recorder is active every ReLU mask (and any other branch decision
# passed to note_branch) is logged, so finite differences can detect steps
# that cross a kink.
_branch_log: Optional[list] = None


@contextmanager
def branch_recorder():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())


@dataclass
class Network:
    """ReLU MLP.  ``input_scale``, when set, multiplies every input row
    elementwise before the first layer; it is fixed, not a trained parameter."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        if self.input_scale is not None:
            self.input_scale = np.asarray(self.input_scale, dtype=float)
            if self.input_scale.shape != (self.weights[0].shape[0],):
                raise ShapeError(f"input scale {self.input_scale.shape} != input width {self.weights[0].shape[0]}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k}: expects width {w.shape[0]}, "
                                 f"previous layer gives {self.weights[k - 1].shape[1]}")

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> List[np.ndarray]:
        """Parameter arrays in ``[W0, b0, W1, b1, ...]`` order (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self) -> List[str]:
        names = []
        for k in range(len(self.weights)):
            names.extend((f"W{k}", f"b{k}"))
        return names

    def copy(self) -> "Network":
        scale = None if self.input_scale is None else self.input_scale.copy()
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases], scale)

    def load(self, params: Sequence[np.ndarray]) -> None:
        mine = self.params()
        if len(params) != len(mine):
            raise ShapeError(f"expected {len(mine)} arrays, got {len(params)}")
        for name, dst, src in zip(self.param_names(), mine, params):
            if dst.shape != np.shape(src):
                raise ShapeError(f"{name}: shape {np.shape(src)} != {dst.shape}")
            dst[...] = src


def mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0,
        input_scale: Optional[np.ndarray] = None) -> Network:
    """Fan-in uniform initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if k == len(sizes) - 2:
            w *= out_scale
            b *= out_scale
        weights.append(w)
        biases.append(b)
    return Network(weights, biases, input_scale)


@dataclass
class Cache:
    """Layer inputs and pre-activations saved by :func:`forward`."""

    inputs: List[np.ndarray]
    preacts: List[np.ndarray]


def forward(net: Network, x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != network input {net.in_dim}")
    inputs, preacts = [], []
    h = x if net.input_scale is None else x * net.input_scale
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        if k < last:
            if _branch_log is not None:
                note_branch(z > 0.0)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return (h[0] if squeeze else h), Cache(inputs, preacts)


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    h = np.asarray(x, dtype=float)
    if net.input_scale is not None:
        h = h * net.input_scale
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < last:
            if _branch_log is not None:
                note_branch(h > 0.0)
            h = np.maximum(h, 0.0)
    return h


def backward(
    net: Network, cache: Cache, output_gradient: np.ndarray, param_grads: bool = True
) -> Tuple[Optional[List[np.ndarray]], np.ndarray]:
    """Reverse-mode gradients of ``sum(output * output_gradient)``.

    Returns ``(grads, input_gradient)`` where ``grads`` follows the
    :meth:`Network.params` ordering, or is ``None`` when ``param_grads`` is
    false (cheaper when only the input gradient is needed).
    """
    if len(cache.inputs) != len(net.weights):
        raise ShapeError("cache does not belong to this network")
    for k, (w, inp) in enumerate(zip(net.weights, cache.inputs)):
        if inp.shape[-1] != w.shape[0] or cache.preacts[k].shape[-1] != w.shape[1]:
            raise ShapeError(f"stale cache at layer {k}")
    g = np.asarray(output_gradient, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"output gradient {g.shape} != output {cache.preacts[-1].shape}")
    grads: List[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k < last:
            g = g * (cache.preacts[k] > 0.0)
        if param_grads:
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k].T
    if net.input_scale is not None:
        g = g * net.input_scale
    if np.ndim(output_gradient) == 1:
        g = g[0]
    return (grads if param_grads else None), g


# ------------------------------------------------------------------ #
# Squashed Gaussian policy head
# ------------------------------------------------------------------ #
@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    raw_log_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.raw_log_std is None:
            self.raw_log_std = self.log_std
        self.log_std = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_network_output(cls, out: np.ndarray) -> "GaussianPolicyOutput":
        half = out.shape[-1] // 2
        return cls(out[..., :half], out[..., half:])


def sample_squashed_action(out: GaussianPolicyOutput, noise: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``tanh(mean + noise * std)`` and its log-density.

    The density includes the change-of-variables term
    ``-sum(log(1 - a^2 + eps))`` for the tanh squashing.
    """
    noise = np.asarray(noise, dtype=float)
    std = np.exp(out.log_std)
    action = np.tanh(out.mean + noise * std)
    gauss = -0.5 * noise * noise - out.log_std - _HALF_LOG_2PI
    log_prob = np.sum(gauss - np.log(1.0 - action * action + SQUASH_EPS), axis=-1)
    return action, log_prob


# ------------------------------------------------------------------ #
# Adaptive-moment optimiser
# ------------------------------------------------------------------ #
@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "OptimizerState":
        return OptimizerState([m.copy() for m in self.m], [v.copy() for v in self.v],
                              self.step, self.beta1, self.beta2, self.eps)


def adam_update(
    opt: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float
) -> Tuple[Sequence[np.ndarray], OptimizerState]:
    """Bias-corrected Adam step; updates ``params`` and ``opt`` in place."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ShapeError("params, grads and optimiser state differ in length")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


# ------------------------------------------------------------------ #
# Finite differences
# ------------------------------------------------------------------ #
def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor turns the test into an absolute one for gradients smaller than
    ``floor``, where round-off in the difference quotient dominates.
    """
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(
    f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5,
    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Central differences of ``f`` w.r.t. entries of each array (perturbed in place).

    Returns per array ``(flat_indices, derivatives, valid)``.  An entry is
    invalid when the +h or -h evaluation took a different branch (ReLU
    mask, min selection) than the unperturbed one: the difference quotient
    then straddles a kink and says nothing about the derivative.  With
    ``max_entries`` a random subset of entries is probed.
    """
    if not h > 0:
        raise ValueError("step must be positive")

    def run():
        with branch_recorder() as rec:
            val = f()
        return val, rec

    _, base = run()
    out = []
    for arr in arrays:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        vals = np.empty(len(idx))
        valid = np.ones(len(idx), dtype=bool)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp, bp = run()
            flat[i] = old - h
            fm, bm = run()
            flat[i] = old
            vals[j] = (fp - fm) / (2.0 * h)
            valid[j] = bp == base and bm == base
        out.append((idx, vals, valid))
    return out


def gradient_error(analytic: Sequence[np.ndarray], probes) -> Tuple[float, int, int]:
    """``(max relative error, entries compared, entries skipped at kinks)``."""
    worst, used, skipped = 0.0, 0, 0
    for ana, (idx, num, ok) in zip(analytic, probes):
        a = np.asarray(ana).reshape(-1)[idx]
        worst = max(worst, relative_error(a[ok], num[ok]))
        used += int(ok.sum())
        skipped += int((~ok).sum())
    return worst, used, skipped


def finite_difference_check(
    net: Network, x: np.ndarray, h: float = 1e-5, output_gradient: Optional[np.ndarray] = None,
    grads: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Largest relative error of :func:`backward` against central differences.

    The scalar probed is ``sum(forward(net, x) * output_gradient)``.  Pass
    ``grads`` to check a supplied gradient bundle instead of a fresh one.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    if output_gradient is None:
        y, _ = forward(net, x)
        output_gradient = np.random.default_rng(1).standard_normal(y.shape)
    g_out = np.asarray(output_gradient, dtype=float).reshape(len(x), net.out_dim)
    _, cache = forward(net, x)
    analytic, dx = backward(net, cache, g_out)
    if grads is not None:
        analytic = list(grads)

    def f() -> float:
        return float(np.sum(predict(net, x) * g_out))

    worst, _, _ = gradient_error(analytic + [dx], numeric_gradient(f, net.params() + [x], h))
    return worst
