"""Closed-form Gaussian machinery used as an exact oracle.

With Gaussian data and linear-Gaussian encoder/generator both joints
``p_e(x, z)`` and ``p_g(x, z)`` are Gaussian, so log-ratios, their gradients
and several f-divergences are available exactly.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .divergences import get_divergence
from .models import LOGVAR_MAX, LOGVAR_MIN, BigenModel, Transform


class GaussianJoint:
    """Multivariate normal with a Cholesky-factored covariance."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float).ravel()
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of size {n}")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        self.precision = np.linalg.inv(self.cov)
        self.logdet = 2.0 * float(np.log(np.diag(self.chol)).sum())

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_prob(self, points) -> np.ndarray:
        y = np.atleast_2d(points) - self.mean
        sol = np.linalg.solve(self.chol, y.T)
        quad = (sol**2).sum(axis=0)
        return -0.5 * (quad + self.logdet + self.dim * math.log(2.0 * math.pi))

    def grad_log_prob(self, points) -> np.ndarray:
        return -(np.atleast_2d(points) - self.mean) @ self.precision

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T

    def marginal(self, idx) -> "GaussianJoint":
        idx = np.asarray(idx)
        return GaussianJoint(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def entropy(self) -> float:
        return 0.5 * (self.dim * (1.0 + math.log(2.0 * math.pi)) + self.logdet)


def gaussian_joint_logratio(pe: GaussianJoint, pg: GaussianJoint, points) -> np.ndarray:
    """Exact ``log p_e(y) - log p_g(y)``."""
    if pe.dim != pg.dim:
        raise ValueError("joints must have the same dimension")
    return pe.log_prob(points) - pg.log_prob(points)


def gaussian_logratio_grad(pe: GaussianJoint, pg: GaussianJoint, points) -> np.ndarray:
    return pe.grad_log_prob(points) - pg.grad_log_prob(points)


def kl_gaussian(p: GaussianJoint, q: GaussianJoint) -> float:
    """``KL(p || q)``."""
    diff = q.mean - p.mean
    return 0.5 * float(
        np.trace(q.precision @ p.cov) + diff @ q.precision @ diff - p.dim + q.logdet - p.logdet
    )


def hellinger2_gaussian(p: GaussianJoint, q: GaussianJoint) -> float:
    """``E_q[(sqrt(p/q) - 1)^2] = 2 (1 - BC(p, q))``."""
    avg = 0.5 * (p.cov + q.cov)
    diff = p.mean - q.mean
    sign, logdet_avg = np.linalg.slogdet(avg)
    bhatt = 0.125 * float(diff @ np.linalg.solve(avg, diff)) + 0.5 * (logdet_avg - 0.5 * (p.logdet + q.logdet))
    return 2.0 * (1.0 - math.exp(-bhatt))


def gauss_hermite_expectation(p: GaussianJoint, fn, n_nodes: int = 40) -> float:
    """``E_p[fn(y)]`` by tensor-product Gauss-Hermite quadrature."""
    u, w = hermegauss(n_nodes)
    w = w / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([u] * p.dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * p.dim), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    pts = p.mean + nodes @ p.chol.T
    return float(weights @ np.asarray(fn(pts), dtype=float))


def _softplus(t):
    return np.logaddexp(0.0, t)


def gaussian_fdivergence(div, pe: GaussianJoint, pg: GaussianJoint, n_nodes: int = 40) -> float:
    """``D_f(p_e, p_g)`` for Gaussian joints.

    KL, reverse KL and squared Hellinger are closed form.  Twice
    Jensen-Shannon has none and is integrated by quadrature in the bounded
    form ``E_pe[log 2 - softplus(-D)] + E_pg[log 2 - softplus(D)]``.
    """
    name = get_divergence(div).name
    if name == "kl":
        return kl_gaussian(pe, pg)
    if name == "revkl":
        return kl_gaussian(pg, pe)
    if name == "hellinger":
        return hellinger2_gaussian(pe, pg)
    if name == "js":
        def lr(y):
            return gaussian_joint_logratio(pe, pg, y)

        a = gauss_hermite_expectation(pe, lambda y: math.log(2.0) - _softplus(-lr(y)), n_nodes)
        b = gauss_hermite_expectation(pg, lambda y: math.log(2.0) - _softplus(lr(y)), n_nodes)
        return a + b
    raise ValueError(f"no Gaussian closed form for divergence {name!r}")


# -- linear-Gaussian bidirectional model ------------------------------------


def _linear_heads(t: Transform):
    if t.kind != "gaussian" or len(t.net.layers) != 1 or t.net.spec.output_activation != "identity":
        raise ValueError("oracle needs a single-layer gaussian transform")
    layer = t.net.layers[0]
    k = t.out_dim
    if np.any(layer.W[:, k:] != 0):
        raise ValueError("log-variance head must not depend on the input")
    lv = layer.b[k:]
    if np.any(lv < LOGVAR_MIN) or np.any(lv > LOGVAR_MAX):
        raise ValueError("log-variance outside the clamp range")
    return layer.W[:, :k].T.copy(), layer.b[:k].copy(), np.exp(lv)


def linear_gaussian_joints(model: BigenModel, data: GaussianJoint) -> tuple[GaussianJoint, GaussianJoint]:
    """Exact ``(p_e, p_g)`` over ``y = [x, z]``.

    Data ``x ~ data``; encoder ``z = A x + a + noise``; generator
    ``x = B z + b + noise`` with ``z ~ N(0, I)``.
    """
    A, a, ve = _linear_heads(model.encoder)
    B, b, vg = _linear_heads(model.generator)
    S = data.cov
    mz = A @ data.mean + a
    pe_cov = np.block([[S, S @ A.T], [A @ S, A @ S @ A.T + np.diag(ve)]])
    pe = GaussianJoint(np.concatenate([data.mean, mz]), _sym(pe_cov))
    k = model.latent_dim
    pg_cov = np.block([[B @ B.T + np.diag(vg), B], [B.T, np.eye(k)]])
    pg = GaussianJoint(np.concatenate([b, np.zeros(k)]), _sym(pg_cov))
    return pe, pg


def _sym(m):
    return 0.5 * (m + m.T)


def exact_critic(pe: GaussianJoint, pg: GaussianJoint, data_dim: int):
    """An :class:`~ages.models.ExactCritic` for the true log-ratio of two joints."""
    from .models import ExactCritic

    def join(x, z):
        return x if z is None else np.concatenate([x, z], axis=1)

    def f(x, z):
        return gaussian_joint_logratio(pe, pg, join(x, z))

    def g(x, z):
        grad = gaussian_logratio_grad(pe, pg, join(x, z))
        return grad[:, :data_dim], (None if z is None else grad[:, data_dim:])

    return ExactCritic(f, g)
