"""Layered feed-forward networks with hand-written reverse-mode gradients.

Every learnable function in the package is an :class:`Mlp`.  Parameters of
one network live in a single flat vector; per-layer weights are views into
it, so optimizers and finite-difference checks work on one array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
OUTPUT_ACTIVATIONS = ("identity", "tanh")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
FD_FLOOR = 1e-6


class ShapeError(ValueError):
    """Input array does not match the network's declared widths."""


class UsageError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """A gradient or loss contained NaN or Inf."""


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    leaky_slope: float = 0.2
    batch_norm: bool | tuple[bool, ...] = False
    output_activation: str = "identity"
    zero_output: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_hidden = len(widths) - 2
        bn = self.batch_norm
        if isinstance(bn, bool):
            bn = (bn,) * n_hidden
        bn = tuple(bool(b) for b in bn)
        if len(bn) != n_hidden:
            raise ValueError(f"batch_norm needs {n_hidden} flags, got {len(bn)}")
        object.__setattr__(self, "batch_norm", bn)

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "leaky_slope": self.leaky_slope,
            "batch_norm": list(self.batch_norm),
            "output_activation": self.output_activation,
            "zero_output": self.zero_output,
        }


@dataclass
class _Layer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    offset: int = 0
    size: int = 0


def _init_bound(activation: str, fan_in: int, fan_out: int, slope: float) -> float:
    # He-uniform for rectifiers, Xavier-uniform otherwise.
    if activation == "relu":
        return float(np.sqrt(6.0 / fan_in))
    if activation == "leaky_relu":
        return float(np.sqrt(6.0 / ((1.0 + slope**2) * fan_in)))
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Mlp:
    """Feed-forward network: ``Linear -> [BatchNorm] -> act`` per hidden layer.

    ``forward`` retains the intermediates that ``backward`` needs; a second
    ``forward`` overwrites them.  Not safe for concurrent use.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        widths = spec.layer_widths
        n_layers = len(widths) - 1

        sizes = []
        for i in range(n_layers):
            size = widths[i] * widths[i + 1] + widths[i + 1]
            if i < n_layers - 1 and spec.batch_norm[i]:
                size += 2 * widths[i + 1]
            sizes.append(size)
        self.params = np.zeros(sum(sizes), dtype=self.dtype)

        self.layers: list[_Layer] = []
        offset = 0
        for i in range(n_layers):
            fi, fo = widths[i], widths[i + 1]
            chunk = self.params[offset : offset + sizes[i]]
            W = chunk[: fi * fo].reshape(fi, fo)
            b = chunk[fi * fo : fi * fo + fo]
            layer = _Layer(W=W, b=b, offset=offset, size=sizes[i])
            if i < n_layers - 1 and spec.batch_norm[i]:
                layer.gamma = chunk[fi * fo + fo : fi * fo + 2 * fo]
                layer.beta = chunk[fi * fo + 2 * fo :]
                layer.gamma[:] = 1.0
                layer.running_mean = np.zeros(fo, dtype=self.dtype)
                layer.running_var = np.ones(fo, dtype=self.dtype)
            self.layers.append(layer)
            offset += sizes[i]

        if rng is None:
            rng = np.random.default_rng(0)
        self.reinitialize(rng)
        self._cache = None

    # -- parameters -------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.params.size

    def reinitialize(self, rng: np.random.Generator) -> None:
        spec = self.spec
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            fi, fo = layer.W.shape
            act = spec.activation if i < last else spec.output_activation
            if i == last and spec.zero_output:
                layer.W[:] = 0.0
            else:
                bound = _init_bound(act, fi, fo, spec.leaky_slope)
                layer.W[:] = rng.uniform(-bound, bound, size=(fi, fo))
            layer.b[:] = 0.0
            if layer.gamma is not None:
                layer.gamma[:] = 1.0
                layer.beta[:] = 0.0
                layer.running_mean[:] = 0.0
                layer.running_var[:] = 1.0

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[:] = flat

    def unflatten(self, flat: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Split a flat vector shaped like ``params`` into per-layer arrays (copies)."""
        flat = np.asarray(flat)
        if flat.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} entries, got {flat.shape}")
        out = []
        for layer in self.layers:
            fi, fo = layer.W.shape
            chunk = flat[layer.offset : layer.offset + layer.size]
            d = {"W": chunk[: fi * fo].reshape(fi, fo).copy(), "b": chunk[fi * fo : fi * fo + fo].copy()}
            if layer.gamma is not None:
                d["gamma"] = chunk[fi * fo + fo : fi * fo + 2 * fo].copy()
                d["beta"] = chunk[fi * fo + 2 * fo :].copy()
            out.append(d)
        return out

    def flatten(self, per_layer: Sequence[dict[str, np.ndarray]]) -> np.ndarray:
        parts = []
        for layer, d in zip(self.layers, per_layer, strict=True):
            parts += [np.ravel(d["W"]), np.ravel(d["b"])]
            if layer.gamma is not None:
                parts += [np.ravel(d["gamma"]), np.ravel(d["beta"])]
        return np.concatenate(parts).astype(self.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"params": self.params.copy()}
        for i, layer in enumerate(self.layers):
            if layer.running_mean is not None:
                state[f"running_mean_{i}"] = layer.running_mean.copy()
                state[f"running_var_{i}"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.set_params(state["params"])
        for i, layer in enumerate(self.layers):
            if layer.running_mean is not None:
                layer.running_mean[:] = state[f"running_mean_{i}"]
                layer.running_var[:] = state[f"running_var_{i}"]

    # -- forward / backward ----------------------------------------------

    def _act(self, h: np.ndarray, name: str) -> np.ndarray:
        if name == "relu":
            return np.maximum(h, 0.0)
        if name == "leaky_relu":
            # slope < 1, so the max picks the right branch
            return np.maximum(h, self.spec.leaky_slope * h)
        if name == "tanh":
            return np.tanh(h)
        return h

    def _act_grad(self, h: np.ndarray, a: np.ndarray, g: np.ndarray, name: str) -> np.ndarray:
        if name == "relu":
            return g * (h > 0).astype(g.dtype, copy=False)
        if name == "leaky_relu":
            slope = self.spec.leaky_slope
            return g * ((h > 0) * (1.0 - slope) + slope).astype(g.dtype, copy=False)
        if name == "tanh":
            return g * (1.0 - a * a)
        return g

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        """Evaluate the network on a ``batch x in_dim`` array.

        In train mode batch-norm layers use batch statistics and update their
        running averages; otherwise the running averages are used.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(f"expected input of shape (batch, {self.spec.in_dim}), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        last = len(self.layers) - 1
        cache = []
        a = x
        for i, layer in enumerate(self.layers):
            inp = a
            h = inp @ layer.W + layer.b
            entry = {"inp": inp}
            if layer.gamma is not None:
                if train:
                    mu = h.mean(axis=0)
                    var = h.var(axis=0)
                    layer.running_mean *= BN_MOMENTUM
                    layer.running_mean += (1.0 - BN_MOMENTUM) * mu
                    layer.running_var *= BN_MOMENTUM
                    layer.running_var += (1.0 - BN_MOMENTUM) * var
                else:
                    mu, var = layer.running_mean, layer.running_var
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (h - mu) * inv_std
                entry.update(xhat=xhat, inv_std=inv_std, bn_train=train)
                h = xhat * layer.gamma + layer.beta
            act = self.spec.activation if i < last else self.spec.output_activation
            a = self._act(h, act)
            entry.update(h=h, a=a, act=act)
            cache.append(entry)
        self._cache = cache
        return a

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grads)`` where ``param_grads`` is flat and
        aligned with ``params``.  No batch averaging happens here; callers scale
        ``upstream`` by ``1/n`` for mean losses.
        """
        if self._cache is None:
            raise UsageError("backward() called without a preceding forward()")
        cache = self._cache
        g = np.asarray(upstream, dtype=self.dtype)
        out_shape = cache[-1]["a"].shape
        if g.shape != out_shape:
            raise ShapeError(f"upstream shape {g.shape} does not match output {out_shape}")
        grads = np.zeros_like(self.params)
        for layer, entry in zip(reversed(self.layers), reversed(cache)):
            g = self._act_grad(entry["h"], entry["a"], g, entry["act"])
            chunk = grads[layer.offset : layer.offset + layer.size]
            fi, fo = layer.W.shape
            if layer.gamma is not None:
                xhat = entry["xhat"]
                chunk[fi * fo + fo : fi * fo + 2 * fo] = (g * xhat).sum(axis=0)
                chunk[fi * fo + 2 * fo :] = g.sum(axis=0)
                gx = g * layer.gamma
                if entry["bn_train"]:
                    # batch statistics depend on every row
                    gx = entry["inv_std"] * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
                else:
                    gx = gx * entry["inv_std"]
                g = gx
            chunk[: fi * fo] = (entry["inp"].T @ g).ravel()
            chunk[fi * fo : fi * fo + fo] = g.sum(axis=0)
            g = g @ layer.W.T
        return grads, g


# -- optimizers ------------------------------------------------------------


@dataclass
class SGD:
    lr: float

    kind = "sgd"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        _check_grads(params, grads)
        params -= self.lr * grads


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    kind = "adam"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """Bias-corrected Adam update, in place.  Refuses non-finite gradients."""
        _check_grads(params, grads)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grads * grads)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _check_grads(params: np.ndarray, grads: np.ndarray) -> None:
    if grads.shape != params.shape:
        raise ShapeError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient entries; step refused")


def make_optimizer(kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- verification ----------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grads: np.ndarray,
    step: float = 1e-4,
) -> float:
    """Max over coordinates of ``|fd - an| / max(|fd| + |an|, FD_FLOOR)``.

    ``fd`` is the central difference of ``loss_fn`` with the given step.  The
    floor keeps exactly-zero gradients (e.g. a bias feeding batch norm) from
    turning roundoff into a unit relative error.  ``params`` is not modified.
    """
    p = np.array(params, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic_grads, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        up = float(loss_fn(p))
        p[i] = orig - step
        down = float(loss_fn(p))
        p[i] = orig
        fd = (up - down) / (2.0 * step)
        err = abs(fd - analytic[i]) / max(abs(fd) + abs(analytic[i]), FD_FLOOR)
        worst = max(worst, err)
    return worst
