"""RealNVP-style affine coupling flow over projected behaviors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import AdamState, DenseNet, adam_step

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class Whitener:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Whitener":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-3) -> "Whitener":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def unapply(self, w: np.ndarray) -> np.ndarray:
        return w * self.scale + self.mean

    @property
    def log_det(self) -> float:
        """log |det| of ``apply``."""
        return -float(np.sum(np.log(self.scale)))


def coupling_masks(dim: int, n_layers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Alternating checkerboard split into (conditioning, transformed) indices.

    In two dimensions the checkerboard and channel masks both reduce to
    alternating which coordinate is transformed.
    """
    if dim < 2:
        raise ValueError("coupling flows need at least two dimensions")
    idx = np.arange(dim)
    out = []
    for layer in range(n_layers):
        keep = idx % 2 == layer % 2
        out.append((idx[keep], idx[~keep]))
    return out


class RealNVP:
    """Stack of affine coupling layers with a standard normal base.

    Each layer keeps the conditioning coordinates and maps the others to
    ``x * exp(s) + t`` where ``s = tanh(scale_net(cond))`` and
    ``t = shift_net(cond)``. Output layers of both subnets start at zero, so a
    fresh flow is the identity map.

    The scale and shift subnets of a layer are independent relu MLPs; their
    weights are stored stacked (leading axis 0 = scale, 1 = shift) so one
    batched matmul evaluates both.
    """

    def __init__(self, dim: int = 2, n_layers: int = 10, hidden: Sequence[int] = (64, 64), dtype=np.float32):
        self.dim = dim
        self.n_layers = n_layers
        self.hidden = tuple(hidden)
        self.masks = coupling_masks(dim, n_layers)
        shapes = []
        for cond, trans in self.masks:
            widths = [len(cond), *self.hidden, len(trans)]
            shapes.append([((2, i, o), (2, o)) for i, o in zip(widths[:-1], widths[1:])])
        total = sum(int(np.prod(w)) + int(np.prod(b)) for layer in shapes for w, b in layer)
        self.flat = np.zeros(total, dtype=dtype)
        # params[layer] = [(W, b), ...] views into flat, one pair per depth
        self.params: list[list[tuple[np.ndarray, np.ndarray]]] = []
        off = 0
        for layer in shapes:
            views = []
            for w_shape, b_shape in layer:
                nw, nb = int(np.prod(w_shape)), int(np.prod(b_shape))
                w = self.flat[off : off + nw].reshape(w_shape)
                b = self.flat[off + nw : off + nw + nb].reshape(b_shape)
                views.append((w, b))
                off += nw + nb
            self.params.append(views)
        self.whitener = Whitener.identity(dim)
        self.fitted = False

    def subnet(self, layer: int, which: int) -> DenseNet:
        """Copy of one subnet (0 = scale, 1 = shift) as a plain network."""
        views = self.params[layer]
        widths = [views[0][0].shape[1]] + [w.shape[2] for w, _ in views]
        acts = ["relu"] * (len(views) - 1) + ["tanh" if which == 0 else "linear"]
        net = DenseNet(widths, acts, dtype=self.flat.dtype)
        for (w, b), dst in zip(views, net.layers):
            dst.weight[...] = w[which]
            dst.bias[...] = b[which]
        return net

    def init(self, rng: np.random.Generator) -> "RealNVP":
        """Uniform(+-1/sqrt(fan_in)) hidden weights, zero biases and output layers."""
        for views in self.params:
            for depth, (w, b) in enumerate(views):
                bound = 1.0 / np.sqrt(w.shape[1])
                w[...] = 0.0 if depth == len(views) - 1 else rng.uniform(-bound, bound, size=w.shape)
                b[...] = 0.0
        return self

    def astype(self, dtype) -> "RealNVP":
        out = RealNVP(self.dim, self.n_layers, self.hidden, dtype=dtype)
        out.flat[...] = self.flat
        out.whitener = Whitener(self.whitener.mean.copy(), self.whitener.scale.copy())
        out.fitted = self.fitted
        return out

    def _conditioner(self, layer: int, h: np.ndarray, keep: bool):
        """Returns ``(s, t, cache)`` for conditioning input ``h`` of shape (n, c)."""
        views = self.params[layer]
        a = h[None]
        inputs = []
        for depth, (w, b) in enumerate(views):
            inputs.append(a)
            a = np.matmul(a, w) + b[:, None, :]
            if depth < len(views) - 1:
                a = np.maximum(a, 0)
        s = np.tanh(a[0])
        return s, a[1], (inputs, s) if keep else None

    def _conditioner_backward(self, layer: int, cache, g_s, g_t, grad_views):
        """Accumulates parameter grads into ``grad_views``; returns grad w.r.t. ``h``."""
        inputs, s = cache
        views = self.params[layer]
        g = np.stack([g_s * (1.0 - s * s), g_t])
        for depth in range(len(views) - 1, -1, -1):
            w, _ = views[depth]
            gw, gb = grad_views[depth]
            x = inputs[depth]
            if x.shape[0] == 1:
                gw[...] = np.matmul(x[0].T, g)
            else:
                gw[...] = np.matmul(x.transpose(0, 2, 1), g)
            gb[...] = g.sum(axis=1)
            g = np.matmul(g, w.transpose(0, 2, 1))
            if depth > 0:
                g = g * (x > 0)
        return g.sum(axis=0)

    # transforms -----------------------------------------------------------
    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map data-side ``x`` to base-side ``u``; returns ``(u, log|det J|)``."""
        u, logdet, _ = self._forward(x, keep=False)
        return u, logdet

    def _forward(self, x, keep: bool):
        x = np.asarray(x, dtype=self.flat.dtype)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite flow input")
        logdet = np.zeros(x.shape[0], dtype=x.dtype)
        caches = []
        for layer, (cond, trans) in enumerate(self.masks):
            s, t, cache = self._conditioner(layer, x[:, cond], keep)
            es = np.exp(s)
            y = x.copy()
            y[:, trans] = x[:, trans] * es + t
            logdet = logdet + s.sum(axis=1)
            if keep:
                caches.append((x[:, trans], es, cache))
            x = y
        return x, logdet, caches

    def inverse(self, u: np.ndarray) -> np.ndarray:
        y = np.asarray(u, dtype=self.flat.dtype)
        for layer in range(self.n_layers - 1, -1, -1):
            cond, trans = self.masks[layer]
            s, t, _ = self._conditioner(layer, y[:, cond], keep=False)
            x = y.copy()
            x[:, trans] = (y[:, trans] - t) * np.exp(-s)
            y = x
        return y

    def inverse_logdet(self, u: np.ndarray) -> np.ndarray:
        """log|det| of the inverse map at ``u``."""
        x = self.inverse(u)
        return -self.forward(x)[1]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log density in data coordinates, whitening included."""
        w = self.whitener.apply(np.asarray(x, dtype=np.float64))
        u, logdet = self.forward(w.astype(self.flat.dtype))
        u = u.astype(np.float64)
        base = -0.5 * np.sum(u * u, axis=1) - 0.5 * self.dim * LOG_2PI
        return base + logdet + self.whitener.log_det

    # training ---------------------------------------------------------------
    def nll_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean negative log-likelihood of whitened samples and its flat gradient."""
        n = len(w)
        u, logdet, caches = self._forward(w, keep=True)
        u64 = u.astype(np.float64)
        nll = float(np.mean(0.5 * np.sum(u64 * u64, axis=1) - logdet + 0.5 * self.dim * LOG_2PI))
        grad = np.zeros_like(self.flat)
        grad_views = _rebind(self, grad)
        g_y = u / n
        g_ld = np.full(n, -1.0 / n, dtype=u.dtype)
        for layer in range(self.n_layers - 1, -1, -1):
            cond, trans = self.masks[layer]
            x_t, es, cache = caches[layer]
            g_out_t = g_y[:, trans]
            g_s = g_out_t * x_t * es + g_ld[:, None]
            g_h = self._conditioner_backward(layer, cache, g_s, g_out_t, grad_views[layer])
            g_x = g_y.copy()
            g_x[:, trans] = g_out_t * es
            g_x[:, cond] += g_h
            g_y = g_x
        return nll, grad

    def fit(
        self,
        samples: np.ndarray,
        epochs: int = 30,
        seed: int = 0,
        lr: float = 1e-3,
        batch_size: int = 256,
    ) -> list[float]:
        """Refit from scratch by minibatch maximum likelihood.

        Returns the mean training NLL (data coordinates) per epoch. A
        non-finite loss stops training and keeps the last finite parameters.
        """
        samples = np.asarray(samples, dtype=np.float64)
        if len(samples) == 0:
            raise ValueError("cannot fit a flow without samples")
        rng = np.random.default_rng(seed)
        self.init(rng)
        self.whitener = Whitener.fit(samples)
        w = self.whitener.apply(samples).astype(self.flat.dtype)
        opt = AdamState.zeros_like(self.flat)
        good = self.flat.copy()
        trace = []
        n = len(w)
        for _ in range(epochs):
            perm = rng.permutation(n)
            total, seen = 0.0, 0
            ok = True
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                nll, grad = self.nll_and_grad(w[idx])
                if not (np.isfinite(nll) and np.all(np.isfinite(grad))):
                    ok = False
                    break
                good[...] = self.flat
                adam_step(opt, self.flat, grad, lr, name="flow")
                total += nll * len(idx)
                seen += len(idx)
            if not ok:
                log.warning("flow fit stopped on a non-finite loss; keeping last good parameters")
                self.flat[...] = good
                break
            trace.append(total / seen - self.whitener.log_det)
        self.fitted = True
        return trace


def _rebind(flow: RealNVP, flat: np.ndarray) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Views into ``flat`` with the same layout as ``flow.params``."""
    out, off = [], 0
    for views in flow.params:
        layer = []
        for w, b in views:
            gw = flat[off : off + w.size].reshape(w.shape)
            gb = flat[off + w.size : off + w.size + b.size].reshape(b.shape)
            layer.append((gw, gb))
            off += w.size + b.size
        out.append(layer)
    return out


def density_grid(flow: RealNVP, lo: float = -2.0, hi: float = 2.0, n: int = 81) -> np.ndarray:
    """Rows ``(x, y, log_density)`` on a regular grid."""
    axis = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return np.column_stack([pts, flow.log_density(pts)])
