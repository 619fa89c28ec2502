"""Dense networks with hand-written backprop, Adam, soft updates and a
finite-difference gradient checker.

Parameters of a :class:`DenseNet` live in one flat vector; the per-layer
weight and bias arrays are views into it. Optimizers, target updates and
checkpoints therefore work on a single contiguous array per network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class UsageError(RuntimeError):
    """An API was called out of order."""


class TrainingError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]


@dataclass
class Cache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]


def _layout(widths: Sequence[int]) -> list[tuple[int, int, int, int]]:
    spans = []
    offset = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w_end = offset + fan_in * fan_out
        spans.append((offset, w_end, w_end + fan_out, fan_in))
        offset = w_end + fan_out
    return spans


def param_count(widths: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


class DenseNet:
    """Fully connected network ``y = act_L(... act_1(x W_1 + b_1) ...)``.

    Args:
        widths: layer widths including input and output, e.g. ``[6, 64, 64, 2]``.
        activations: one tag per layer from ``relu``, ``tanh``, ``linear``.
        flat: optional preallocated parameter vector to view into.
    """

    def __init__(
        self,
        widths: Sequence[int],
        activations: Sequence[str],
        flat: np.ndarray | None = None,
        dtype=np.float32,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigurationError(f"bad widths {widths}")
        if len(activations) != len(widths) - 1:
            raise ConfigurationError(
                f"{len(widths) - 1} layers but {len(activations)} activations"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        self.widths = widths
        self.activations = list(activations)
        n = param_count(widths)
        if flat is None:
            flat = np.zeros(n, dtype=dtype)
        elif flat.shape != (n,):
            raise ConfigurationError(f"flat buffer has shape {flat.shape}, need ({n},)")
        self.flat = flat
        self._spans = _layout(widths)
        self.layers = self._bind(flat)

    def _bind(self, flat: np.ndarray) -> list[Layer]:
        layers = []
        for (w0, w1, b1, fan_in), act in zip(self._spans, self.activations):
            weight = flat[w0:w1].reshape(fan_in, -1)
            layers.append(Layer(weight, flat[w1:b1], act))
        return layers

    @property
    def n_params(self) -> int:
        return self.flat.size

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def init_uniform(self, rng: np.random.Generator, zero_last: bool = False) -> "DenseNet":
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
        for layer in self.layers:
            bound = 1.0 / np.sqrt(layer.in_width)
            layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
            layer.bias[...] = 0.0
        if zero_last:
            self.layers[-1].weight[...] = 0.0
        return self

    def copy(self) -> "DenseNet":
        return DenseNet(self.widths, self.activations, self.flat.copy())

    def astype(self, dtype) -> "DenseNet":
        return DenseNet(self.widths, self.activations, self.flat.astype(dtype))

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_width:
            raise ConfigurationError(
                f"input width {x.shape[-1]} does not match network input {self.in_width}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        h = x
        for layer in self.layers:
            h = _activate(h @ layer.weight + layer.bias, layer.activation)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        self._check_input(x)
        cache = Cache([], [])
        h = x
        for layer in self.layers:
            cache.inputs.append(h)
            h = _activate(h @ layer.weight + layer.bias, layer.activation)
            cache.outputs.append(h)
        return h, cache

    def backward(
        self,
        cache: Cache | None,
        grad_out: np.ndarray,
        need_input_grad: bool = True,
        need_param_grad: bool = True,
    ) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Backpropagate ``grad_out`` through a cached pass.

        Returns the flat parameter gradient and the gradient w.r.t. the input;
        either is ``None`` when not requested.
        """
        if cache is None or len(cache.inputs) != len(self.layers):
            raise UsageError("backward needs the cache of a forward_cached call")
        grad = np.zeros_like(self.flat) if need_param_grad else None
        g = grad_out
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            out = cache.outputs[idx]
            if layer.activation == "relu":
                g = g * (out > 0)
            elif layer.activation == "tanh":
                g = g * (1.0 - out * out)
            if grad is not None:
                w0, w1, b1, _ = self._spans[idx]
                grad[w0:w1] = (cache.inputs[idx].T @ g).ravel()
                grad[w1:b1] = g.sum(axis=0)
            if idx > 0 or need_input_grad:
                g = g @ layer.weight.T
        return grad, (g if need_input_grad else None)


def _activate(h: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(h, 0)
    if act == "tanh":
        return np.tanh(h)
    return h


def mlp(
    in_width: int,
    hidden: Sequence[int],
    out_width: int,
    rng: np.random.Generator,
    out_activation: str = "linear",
    zero_last: bool = False,
) -> DenseNet:
    widths = [in_width, *hidden, out_width]
    acts = ["relu"] * len(hidden) + [out_activation]
    return DenseNet(widths, acts).init_uniform(rng, zero_last=zero_last)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float, name: str = "params"
) -> None:
    """In-place Adam update of ``params`` with bias correction."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ConfigurationError(f"shape mismatch in Adam update of {name}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def soft_update(target: np.ndarray, online: np.ndarray, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau={tau} outside [0, 1]")
    if target.shape != online.shape:
        raise ConfigurationError(f"shape mismatch {target.shape} vs {online.shape}")
    if tau == 1.0:
        target[...] = online
    elif tau > 0.0:
        target += np.asarray(tau, dtype=target.dtype) * (online - target)


@dataclass
class GradReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _central_difference(loss_fn, flat: np.ndarray, i: int, h: float, tol: float) -> tuple[float, float]:
    """Central difference at entry ``i`` and its rounding resolution."""
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn()
    flat[i] = orig - h
    down = loss_fn()
    flat[i] = orig
    eps = np.finfo(flat.dtype).eps
    return (up - down) / (2 * h), 10 * eps * max(abs(up), abs(down)) / (h * tol)


def grad_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    tol: float = 1e-4,
    rel_step: float = 1e-5,
    floor: float = 1e-6,
) -> GradReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` reads the arrays in ``params`` (mutated in place here, then
    restored). Step per coordinate is ``rel_step * max(1, |p|)``. Errors are
    ``|a - n| / max(|a|, |n|, floor)``. The floor is the larger of ``floor``
    and the entry's difference resolution ``10 * eps * |loss| / (h * tol)``: an
    entry smaller than that cannot be resolved by central differences (the
    two loss sums each carry a few rounding units), so it is held to an
    absolute error of ten rounding units instead.

    Relu and min make losses piecewise smooth. A step that straddles a kink
    gives a difference quotient mixing two slopes, so an entry that fails is
    retried with steps 10x and 100x smaller and keeps its best error. Away
    from kinks every step converges to the true derivative, so a wrong
    analytic gradient still fails.
    """
    report = GradReport(tol=tol)
    for name, p in params.items():
        g = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        flat = p.reshape(-1)
        worst = 0.0
        finite = np.all(np.isfinite(g))
        for i in range(flat.size):
            h = rel_step * max(1.0, abs(float(flat[i])))
            best = np.inf
            for shrink in (1.0, 0.1, 0.01):
                numeric, resolution = _central_difference(loss_fn, flat, i, h * shrink, tol)
                finite = finite and np.isfinite(numeric)
                err = float(relative_error(g[i], numeric, max(resolution, floor)))
                best = min(best, err)
                if best < tol:
                    break
            worst = max(worst, best)
        report.max_rel_error[name] = worst if finite else float("inf")
    return report
