"""Encoder, generator and discriminator assemblies.

A :class:`Transform` maps an input (``x`` for the encoder, ``z`` for the
generator) plus external noise to an output sample:

* ``deterministic``  -- ``net(inp)``
* ``gaussian``       -- ``mean(inp) + exp(logvar(inp) / 2) * eps``; the net
  emits the two heads side by side
* ``noise_concat``   -- ``net([inp, eps])``, an implicit conditional
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .nn import Mlp, MlpSpec, ShapeError, UsageError

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("deterministic", "gaussian", "noise_concat")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOGIT_CLAMP = 30.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    net: MlpSpec
    noise_dim: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "deterministic" and self.noise_dim != 0:
            raise ValueError("deterministic transforms take no noise")
        if self.kind == "noise_concat" and self.noise_dim <= 0:
            raise ValueError("noise_concat needs noise_dim > 0")
        if self.kind == "gaussian" and self.net.out_dim % 2:
            raise ValueError("gaussian transform net must emit mean and log-variance heads")

    @property
    def in_dim(self) -> int:
        return self.net.in_dim - (self.noise_dim if self.kind == "noise_concat" else 0)

    @property
    def out_dim(self) -> int:
        return self.net.out_dim // 2 if self.kind == "gaussian" else self.net.out_dim

    @classmethod
    def build(
        cls,
        kind: str,
        in_dim: int,
        out_dim: int,
        hidden=(),
        activation: str = "relu",
        batch_norm=False,
        output_activation: str = "identity",
        leaky_slope: float = 0.2,
        noise_dim: int | None = None,
    ) -> "TransformSpec":
        """Size the underlying net for the given transform kind."""
        if kind == "noise_concat":
            noise_dim = out_dim if noise_dim is None else noise_dim
            net_in = in_dim + noise_dim
        else:
            noise_dim = out_dim if kind == "gaussian" else 0
            net_in = in_dim
        net_out = 2 * out_dim if kind == "gaussian" else out_dim
        net = MlpSpec(
            layer_widths=(net_in, *hidden, net_out),
            activation=activation,
            leaky_slope=leaky_slope,
            batch_norm=batch_norm,
            output_activation=output_activation,
        )
        return cls(kind=kind, net=net, noise_dim=noise_dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_dim": self.noise_dim, "net": self.net.to_dict()}


class Transform:
    def __init__(self, spec: TransformSpec, rng: np.random.Generator | None = None, dtype=np.float64):
        self.spec = spec
        self.net = Mlp(spec.net, rng, dtype)
        self.clamp_count = 0
        self._state = None
        if spec.kind == "gaussian":
            # unit variance at start; random log-variance heads can begin
            # near the clamp and blow up the likelihood terms
            self.net.layers[-1].W[:, self.out_dim :] = 0.0

    kind = property(lambda self: self.spec.kind)
    in_dim = property(lambda self: self.spec.in_dim)
    out_dim = property(lambda self: self.spec.out_dim)

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def noise_dim(self) -> int:
        if self.kind == "gaussian":
            return self.out_dim
        return self.spec.noise_dim

    def draw_noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.noise_dim)).astype(self.net.dtype, copy=False)

    def _check(self, inp):
        inp = np.asarray(inp, dtype=self.net.dtype)
        if inp.ndim != 2 or inp.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {inp.shape}")
        return inp

    # -- gaussian heads ---------------------------------------------------

    def gaussian_heads(self, inp: np.ndarray, train: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Mean and clamped log-variance of a ``gaussian`` transform."""
        if self.kind != "gaussian":
            raise UsageError("gaussian_heads needs a gaussian transform")
        inp = self._check(inp)
        h = self.net.forward(inp, train)
        k = self.out_dim
        mean, raw = h[:, :k], h[:, k:]
        logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
        mask = logvar == raw
        n_clamped = int(mask.size - np.count_nonzero(mask))
        if n_clamped:
            self.clamp_count += n_clamped
            log.debug("log-variance clamp active on %d entries", n_clamped)
        self._state = {"mask": mask}
        return mean, logvar

    def backward_heads(self, g_mean: np.ndarray, g_logvar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._state is None or "mask" not in self._state:
            raise UsageError("backward_heads() without gaussian_heads()")
        g = np.concatenate([g_mean, g_logvar * self._state["mask"]], axis=1)
        return self.net.backward(g)

    def log_prob(self, out: np.ndarray, inp: np.ndarray, train: bool = False) -> np.ndarray:
        """Per-row ``log p(out | inp)`` for a gaussian transform."""
        mean, logvar = self.gaussian_heads(inp, train)
        sq = (np.asarray(out) - mean) ** 2 * np.exp(-logvar)
        return -0.5 * (sq + logvar + LOG_2PI).sum(axis=1)

    # -- sampling ---------------------------------------------------------

    def sample(
        self,
        inp: np.ndarray,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
        train: bool = True,
    ) -> np.ndarray:
        """Draw one output per input row (reparametrized)."""
        inp = self._check(inp)
        n = inp.shape[0]
        if self.kind == "deterministic":
            out = self.net.forward(inp, train)
            self._state = {"kind": "deterministic"}
            return out
        if noise is None:
            if rng is None:
                raise UsageError("stochastic transform needs rng or explicit noise")
            noise = self.draw_noise(n, rng)
        noise = np.asarray(noise, dtype=self.net.dtype)
        if noise.shape != (n, self.noise_dim):
            raise ShapeError(f"noise must have shape {(n, self.noise_dim)}, got {noise.shape}")
        if self.kind == "gaussian":
            mean, logvar = self.gaussian_heads(inp, train)
            std = np.exp(0.5 * logvar)
            self._state.update(kind="gaussian", eps=noise, std=std)
            return mean + std * noise
        out = self.net.forward(np.concatenate([inp, noise], axis=1), train)
        self._state = {"kind": "noise_concat"}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parameter and input gradients of ``sum(upstream * last sample)``."""
        if self._state is None or "kind" not in self._state:
            raise UsageError("backward() without a preceding sample()")
        st = self._state
        if st["kind"] == "gaussian":
            g_lv = upstream * st["eps"] * 0.5 * st["std"]
            return self.backward_heads(upstream, g_lv)
        gp, gi = self.net.backward(upstream)
        if st["kind"] == "noise_concat":
            gi = gi[:, : self.in_dim]
        return gp, gi


class Discriminator:
    """Logit ``D(x, z)`` from an MLP over the concatenation ``[x, z]``.

    ``z_dim = 0`` gives a data-only discriminator ``D(x)``.
    """

    def __init__(self, spec: MlpSpec, x_dim: int, z_dim: int, rng=None, dtype=np.float64):
        if spec.in_dim != x_dim + z_dim:
            raise ValueError(f"discriminator input width {spec.in_dim} != {x_dim} + {z_dim}")
        if spec.out_dim != 1:
            raise ValueError("discriminator must have a single output")
        self.x_dim, self.z_dim = x_dim, z_dim
        self.net = Mlp(spec, rng, dtype)

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def score(self, x: np.ndarray, z: np.ndarray | None = None, train: bool = True) -> np.ndarray:
        inp = x if self.z_dim == 0 else np.concatenate([x, z], axis=1)
        return self.net.forward(inp, train)[:, 0]

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(param_grads, dx, dz)`` of ``sum(upstream * D)``."""
        gp, gi = self.net.backward(np.asarray(upstream)[:, None])
        return gp, gi[:, : self.x_dim], gi[:, self.x_dim :]


class ExactCritic:
    """Stands in for a trained discriminator using a known log-ratio.

    ``logratio_fn(x, z) -> D`` and ``grad_fn(x, z) -> (dD/dx, dD/dz)``.
    """

    params = np.zeros(0)

    def __init__(self, logratio_fn, grad_fn):
        self._f = logratio_fn
        self._g = grad_fn
        self._last = None

    def score(self, x, z=None, train: bool = True):
        self._last = (x, z)
        return self._f(x, z)

    def backward(self, upstream):
        if self._last is None:
            raise UsageError("backward() before score()")
        gx, gz = self._g(*self._last)
        u = np.asarray(upstream)[:, None]
        return np.zeros(0), u * gx, (None if gz is None else u * gz)


@dataclass
class BigenModel:
    generator: Transform
    encoder: Transform | None
    discriminator: Discriminator | ExactCritic
    data_dim: int
    latent_dim: int

    def __post_init__(self):
        if self.generator.in_dim != self.latent_dim or self.generator.out_dim != self.data_dim:
            raise ValueError("generator must map latent_dim -> data_dim")
        if self.encoder is not None and (self.encoder.in_dim != self.data_dim or self.encoder.out_dim != self.latent_dim):
            raise ValueError("encoder must map data_dim -> latent_dim")

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim)).astype(self.generator.net.dtype, copy=False)

    def encoder_sample(self, x, rng=None, noise=None, train: bool = True) -> np.ndarray:
        return self.encoder.sample(x, rng, noise, train)

    def generator_sample(self, z, rng=None, noise=None, train: bool = True) -> np.ndarray:
        return self.generator.sample(z, rng, noise, train)

    def discriminator_score(self, x, z, train: bool = True, clamp: bool = True) -> np.ndarray:
        D = self.discriminator.score(x, z, train)
        return np.clip(D, -LOGIT_CLAMP, LOGIT_CLAMP) if clamp else D

    def networks(self) -> dict:
        nets = {"generator": self.generator, "discriminator": self.discriminator}
        if self.encoder is not None:
            nets["encoder"] = self.encoder
        return nets


def build_model(cfg: dict, rng: np.random.Generator, dtype=np.float64) -> BigenModel:
    """Construct a model from a config mapping.

    Keys: ``data_dim``, ``latent_dim``, ``generator`` / ``encoder`` (each with
    ``kind``, ``hidden``, ``activation``, ``batch_norm``, optional
    ``noise_dim``) and ``discriminator`` (``hidden``, ``activation``).
    ``encoder: null`` builds a generator-only model whose discriminator sees
    ``x`` alone.
    """
    d, k = int(cfg["data_dim"]), int(cfg["latent_dim"])

    def transform(sub, in_dim, out_dim):
        spec = TransformSpec.build(
            sub.get("kind", "deterministic"),
            in_dim,
            out_dim,
            hidden=tuple(sub.get("hidden", ())),
            activation=sub.get("activation", "relu"),
            batch_norm=sub.get("batch_norm", False),
            leaky_slope=sub.get("leaky_slope", 0.2),
            noise_dim=sub.get("noise_dim"),
        )
        return Transform(spec, rng, dtype)

    gen = transform(cfg["generator"], k, d)
    enc = transform(cfg["encoder"], d, k) if cfg.get("encoder") else None
    dcfg = cfg.get("discriminator", {})
    z_in = k if enc is not None else 0
    dspec = MlpSpec(
        layer_widths=(d + z_in, *dcfg.get("hidden", ()), 1),
        activation=dcfg.get("activation", "leaky_relu"),
        leaky_slope=dcfg.get("leaky_slope", 0.2),
        batch_norm=dcfg.get("batch_norm", False),
        zero_output=dcfg.get("zero_output", False),
    )
    disc = Discriminator(dspec, d, z_in, rng, dtype)
    return BigenModel(gen, enc, disc, d, k)


# -- analytic VAE objective ------------------------------------------------


@dataclass
class ElboResult:
    loss: float
    recon: float
    kl: float
    grad_encoder: np.ndarray | None = None
    grad_generator: np.ndarray | None = None


def gaussian_kl_to_standard(mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(N(mean, diag exp(logvar)) || N(0, I))``."""
    return 0.5 * (mean**2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)


def elbo_terms(
    encoder: Transform,
    generator: Transform,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
    noise: np.ndarray | None = None,
    train: bool = True,
    grads: bool = False,
) -> ElboResult:
    """Negative ELBO averaged over the batch, optionally with gradients.

    The reconstruction term uses ``n_samples`` reparametrized latent draws per
    datum; the KL to the standard normal prior is closed form.
    """
    if encoder.kind != "gaussian" or generator.kind != "gaussian":
        raise UsageError("analytic ELBO needs gaussian encoder and generator")
    x = np.asarray(x, dtype=encoder.net.dtype)
    xr = np.repeat(x, n_samples, axis=0) if n_samples > 1 else x
    N = xr.shape[0]
    mu, lv = encoder.gaussian_heads(xr, train)
    enc_mask = encoder._state["mask"]
    if noise is None:
        noise = encoder.draw_noise(N, rng)
    std = np.exp(0.5 * lv)
    z = mu + std * noise
    xm, xlv = generator.gaussian_heads(z, train)
    inv_var = np.exp(-xlv)
    diff = xr - xm
    nll = 0.5 * (diff**2 * inv_var + xlv + LOG_2PI).sum(axis=1)
    kl = gaussian_kl_to_standard(mu, lv)
    res = ElboResult(loss=float((nll + kl).mean()), recon=float(nll.mean()), kl=float(kl.mean()))
    if not grads:
        return res
    g_xm = -diff * inv_var / N
    g_xlv = 0.5 * (1.0 - diff**2 * inv_var) / N
    res.grad_generator, dz = generator.backward_heads(g_xm, g_xlv)
    g_mu = dz + mu / N
    g_lv = (dz * noise * 0.5 * std + 0.5 * (np.exp(lv) - 1.0) / N) * enc_mask
    res.grad_encoder, _ = encoder.net.backward(np.concatenate([g_mu, g_lv], axis=1))
    return res


def analytic_elbo(encoder, generator, x, rng=None, n_samples: int = 1, noise=None, train: bool = False) -> float:
    """``L_VAE`` on a batch: MC reconstruction NLL plus closed-form KL."""
    return elbo_terms(encoder, generator, x, rng, n_samples, noise, train).loss
