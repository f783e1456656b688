"""Dense networks with hand-derived reverse-mode gradients.

The model zoo in this package is small and fixed (coupling subnets, a cost
net, a policy net), so gradients are written out per layer instead of going
through a general tape.  Everything is float64; the finite-difference oracle
in this module is the reference every analytic gradient is checked against.

Parameter containers are plain numpy arrays.  Read-only sharing across
workers is safe; `Adam.step` mutates in place and needs exclusive access.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("dense layer expects a 2-d weight and 1-d bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseNet:
    """An ordered stack of dense layers whose dimensions chain."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeError(
                    f"layer dims do not chain: out {a.weight.shape[0]} -> in {b.weight.shape[1]}"
                )
        for layer in layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only allowed as the final activation")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        """Live (name, array) pairs in a stable order: w then b per layer."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}l{i}.w", layer.weight))
            out.append((f"{prefix}l{i}.b", layer.bias))
        return out


def dense_net(
    rng: np.random.Generator,
    dims: Sequence[int],
    hidden_activation: str = "relu",
    final_activation: str = "identity",
    zero_final: bool = False,
) -> DenseNet:
    """Build a net with the given layer widths, e.g. dims=(4, 32, 32, 2)."""
    if len(dims) < 2:
        raise ShapeError("need at least an input and an output dimension")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        w = glorot_uniform(rng, d_out, d_in)
        b = np.zeros(d_out)
        if last and zero_final:
            w = np.zeros((d_out, d_in))
        layers.append(DenseLayer(w, b, final_activation if last else hidden_activation))
    return DenseNet(layers)


def _softmax(pre: np.ndarray) -> np.ndarray:
    shifted = pre - pre.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    if name == "identity":
        return pre
    return _softmax(pre)


def _forward_cached(net: DenseNet, x: np.ndarray):
    """Forward pass keeping per-layer inputs, pre-activations and outputs."""
    caches = []
    h = x
    for k, layer in enumerate(net.layers):
        pre = h @ layer.weight.T + layer.bias
        out = _activate(layer.activation, pre)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output at layer {k}")
        caches.append((h, pre, out))
        h = out
    return h, caches


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on a single input (in,) or a batch (N, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input length {x.shape[-1]} != net in_dim {net.in_dim}")
    out, _ = _forward_cached(net, x)
    return out


def net_backward(
    net: DenseNet, x: np.ndarray, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for the scalar loss implied by `upstream`.

    Returns (param_grads, input_grad) where param_grads follows the order of
    ``net.parameters()`` (w then b per layer).  For batched inputs the
    parameter gradients are summed over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input length {x.shape[-1]} != net in_dim {net.in_dim}")
    if upstream.shape != x.shape[:-1] + (net.out_dim,):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match output shape"
        )
    _, caches = _forward_cached(net, x)

    grads: list[np.ndarray] = []
    delta = upstream
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        h_in, pre, out = caches[k]
        act = layer.activation
        if act == "relu":
            dpre = delta * (pre > 0.0)
        elif act == "tanh":
            dpre = delta * (1.0 - out * out)
        elif act == "identity":
            dpre = delta
        else:  # softmax
            inner = (delta * out).sum(axis=-1, keepdims=True)
            dpre = out * (delta - inner)
        if not np.all(np.isfinite(dpre)):
            raise NumericError(f"non-finite gradient at layer {k}")
        if h_in.ndim == 1:
            dw = np.outer(dpre, h_in)
            db = dpre.copy()
        else:
            dw = dpre.reshape(-1, dpre.shape[-1]).T @ h_in.reshape(-1, h_in.shape[-1])
            db = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        grads.append(db)
        grads.append(dw)
        delta = dpre @ layer.weight
    grads.reverse()
    return grads, delta


def finite_diff_grad(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-6,
) -> list[np.ndarray]:
    """Central-difference gradient of `loss_fn` w.r.t. arrays mutated in place.

    `loss_fn` must be deterministic and must read the live arrays in `params`.
    This is the test oracle: it never shares code with the analytic backward
    passes it checks.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            hi = loss_fn()
            flat_p[i] = orig - epsilon
            lo = loss_fn()
            flat_p[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("loss became non-finite during finite differencing")
            flat_g[i] = (hi - lo) / (2.0 * epsilon)
        grads.append(g)
    return grads


class Adam:
    """Adaptive first-order optimizer with bias-corrected moments."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1):
            raise ValueError("learning rate and decay coefficients must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(
        self,
        params: Sequence[np.ndarray],
        grads: Sequence[np.ndarray],
        names: Sequence[str] | None = None,
    ) -> None:
        """Apply one in-place update.  Deterministic given inputs."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ShapeError("parameter/gradient count does not match optimizer slots")
        for i, (p, g) in enumerate(zip(params, grads)):
            label = names[i] if names is not None else f"param[{i}]"
            if p.shape != g.shape or p.shape != self.m[i].shape:
                raise ShapeError(f"shape mismatch for {label}: {p.shape} vs {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {label}")
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**t)
            v_hat = self.v[i] / (1.0 - self.beta2**t)
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.learning_rate = float(state["learning_rate"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.step_count = int(state["step_count"])
        self.m = [np.asarray(a, dtype=np.float64).copy() for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64).copy() for a in state["v"]]


def optimizer_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: Adam
) -> tuple[Sequence[np.ndarray], Adam]:
    """Functional-style wrapper around `Adam.step` (updates happen in place)."""
    state.step(params, grads)
    return params, state
