"""Evaluation metrics and the per-evaluation record."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import logsumexp

from .data import MoGSpec
from .models import LOG_2PI, BigenModel, elbo_terms

SCHEMA_VERSION = 1


@dataclass
class ModeAssignment:
    ids: np.ndarray  # -1 = unassigned
    distances: np.ndarray


def assign_modes(samples: np.ndarray, spec: MoGSpec, threshold: float = 4.0) -> ModeAssignment:
    """Nearest grid center per sample; farther than ``threshold * std`` is unassigned.

    Ties go to the lower component index.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    samples = np.asarray(samples, dtype=float)
    d2 = ((samples[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=2)
    ids = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(ids)), ids])
    ids = np.where(dist <= threshold * spec.component_std, ids, -1)
    return ModeAssignment(ids, dist)


@dataclass
class ModeMetrics:
    modes_covered: int | None
    mode_revkl: float | None
    reason: str = ""


def mode_metrics(assignment: ModeAssignment, true_mode_probs: np.ndarray) -> ModeMetrics:
    """Mode count and ``sum_m q(m) log(q(m)/p(m))`` over assigned samples."""
    p = np.asarray(true_mode_probs, dtype=float)
    ids = assignment.ids[assignment.ids >= 0]
    if ids.size == 0:
        return ModeMetrics(None, None, "no_assigned_samples")
    counts = np.bincount(ids, minlength=p.size)
    q = counts / counts.sum()
    nz = q > 0
    revkl = float((q[nz] * np.log(q[nz] / p[nz])).sum())
    return ModeMetrics(int(nz.sum()), revkl)


def estimate_lvae(model: BigenModel, test_x, rng, mc_samples: int = 1, batch: int = 5000) -> float:
    """Negative ELBO on held-out data (inference-mode networks)."""
    total, n = 0.0, len(test_x)
    for i in range(0, n, batch):
        xb = test_x[i : i + batch]
        total += elbo_terms(model.encoder, model.generator, xb, rng, mc_samples, train=False).loss * len(xb)
    return total / n


def _encode(model, x, rng):
    return model.encoder.sample(x, rng, train=False)


def estimate_cc(model: BigenModel, test_x, rng, mc_samples: int = 1) -> float | None:
    """``-E_x E_{z~p_e(z|x)} log p_g(x|z)``; None when the generator has no density."""
    if model.generator.kind != "gaussian":
        return None
    vals = []
    for _ in range(mc_samples):
        z = _encode(model, test_x, rng)
        vals.append(-model.generator.log_prob(test_x, z, train=False))
    return float(np.mean(vals))


def reconstruction_error(model: BigenModel, test_x, rng) -> float:
    """Mean squared distance ``||G(E(x)) - x||^2`` (generator mean when gaussian)."""
    z = _encode(model, test_x, rng)
    if model.generator.kind == "gaussian":
        xr, _ = model.generator.gaussian_heads(z, train=False)
    else:
        xr = model.generator.sample(z, rng, train=False)
    return float(((xr - test_x) ** 2).sum(axis=1).mean())


def nll_importance_bound(model: BigenModel, test_x, rng, n_proposals: int = 100, batch: int = 1000) -> float | None:
    """Upper bound on ``-E log p_g(x)`` by importance sampling with the encoder as proposal.

    A plain importance-weighted bound, not annealed importance sampling.
    """
    enc, gen = model.encoder, model.generator
    if enc is None or enc.kind != "gaussian" or gen.kind != "gaussian":
        return None
    out = []
    for i in range(0, len(test_x), batch):
        x = test_x[i : i + batch]
        n = len(x)
        mu, lv = enc.gaussian_heads(x, train=False)
        eps = rng.standard_normal((n_proposals, n, mu.shape[1]))
        z = mu + np.exp(0.5 * lv) * eps
        log_q = -0.5 * (eps**2 + lv + LOG_2PI).sum(axis=2)
        log_prior = -0.5 * (z**2 + LOG_2PI).sum(axis=2)
        zf = z.reshape(-1, mu.shape[1])
        xf = np.tile(x, (n_proposals, 1))
        log_lik = gen.log_prob(xf, zf, train=False).reshape(n_proposals, n)
        lw = log_lik + log_prior - log_q
        out.append(logsumexp(lw, axis=0) - math.log(n_proposals))
    return float(-np.concatenate(out).mean())


# -- records ---------------------------------------------------------------


@dataclass
class ExperimentRecord:
    trial: int
    seed: int
    step: int
    method: str
    divergence: str
    r0: float
    objective_lvae: float | None = None
    cc: float | None = None
    modes_covered: int | None = None
    mode_revkl: float | None = None
    recon_error: float | None = None
    wall_time: float | None = None
    nll_is_bound: float | None = None
    null_reasons: dict = field(default_factory=dict)

    METRICS = ("objective_lvae", "cc", "modes_covered", "mode_revkl", "recon_error", "nll_is_bound")

    @classmethod
    def columns(cls) -> list[str]:
        return ["schema_version", "config_hash"] + [f.name for f in fields(cls)]

    def set_metric(self, name: str, value, reason: str = "") -> None:
        if value is None or (isinstance(value, float) and not math.isfinite(value)):
            setattr(self, name, None)
            self.null_reasons[name] = reason or ("non_finite" if value is not None else "unavailable")
        else:
            setattr(self, name, value)

    def row(self, config_hash: str) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        vals = [str(SCHEMA_VERSION), config_hash]
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "null_reasons":
                vals.append(";".join(f"{k}:{r}" for k, r in sorted(v.items())))
            else:
                vals.append(fmt(v))
        return vals


class MoGEvaluator:
    """Computes the metric set for one trial at each evaluation point."""

    def __init__(
        self,
        spec: MoGSpec,
        test_x: np.ndarray,
        rng: np.random.Generator,
        n_generated: int = 10_000,
        mode_threshold: float = 4.0,
        mc_samples: int = 1,
        is_proposals: int = 0,
    ):
        self.spec = spec
        self.test_x = test_x
        self.rng = rng
        self.n_generated = n_generated
        self.mode_threshold = mode_threshold
        self.mc_samples = mc_samples
        self.is_proposals = is_proposals

    def __call__(self, model: BigenModel, step: int) -> dict:
        out: dict = {}
        reasons: dict = {}
        gaussian = model.encoder is not None and model.encoder.kind == "gaussian" and model.generator.kind == "gaussian"
        if gaussian:
            out["objective_lvae"] = estimate_lvae(model, self.test_x, self.rng, self.mc_samples)
        else:
            reasons["objective_lvae"] = "non_gaussian_model"
        if model.encoder is not None:
            cc = estimate_cc(model, self.test_x, self.rng, self.mc_samples)
            if cc is None:
                reasons["cc"] = "generator_density_undefined"
            else:
                out["cc"] = cc
            out["recon_error"] = reconstruction_error(model, self.test_x, self.rng)
        else:
            reasons["cc"] = reasons["recon_error"] = "no_encoder"
        z = model.sample_prior(self.n_generated, self.rng)
        xg = model.generator.sample(z, self.rng, train=False)
        mm = mode_metrics(assign_modes(xg, self.spec, self.mode_threshold), self.spec.weights)
        if mm.modes_covered is None:
            reasons["modes_covered"] = reasons["mode_revkl"] = mm.reason
        else:
            out["modes_covered"] = mm.modes_covered
            out["mode_revkl"] = mm.mode_revkl
        if self.is_proposals and gaussian:
            out["nll_is_bound"] = nll_importance_bound(model, self.test_x, self.rng, self.is_proposals)
        else:
            reasons["nll_is_bound"] = "disabled" if gaussian else "non_gaussian_model"
        out["null_reasons"] = reasons
        return out
