"""Training loops for AGES and its baselines.

Every generator/encoder update here has the same shape: evaluate the
discriminator on fresh encoder and generator pairs, turn the logits into
per-sample weights, and backpropagate ``weight * dD/dx`` through the
generator and ``weight * dD/dz`` through the encoder with the discriminator
held fixed.  The descended gradients are::

    theta: mean_i w_theta(D_g,i) * dD/dx(G(z_i), z_i) . dG/dtheta
    phi:   mean_i w_phi(D_e,i)   * dD/dz(x_i, E(x_i)) . dE/dphi

Methods differ only in ``w_theta`` / ``w_phi`` and in the discriminator loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import divergences as dv
from .models import BigenModel, Discriminator, elbo_terms
from .nn import MlpSpec, NonFiniteError, make_optimizer

log = logging.getLogger(__name__)

METHODS = ("ages", "ages_sc", "fgan_kl", "vae", "bigan_logd", "bigan_hinge", "bigan_saturating", "heuristic", "ages_uni")
D_LOSSES = ("logistic", "fgan_kl", "hinge")
MAX_CONSECUTIVE_REFUSALS = 100


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "ages"
    divergence: str = "kl"
    r0: float = 0.0
    batch_size: int = 500
    d_steps: int = 30
    epochs: float | None = None
    steps: int | None = None
    optimizer: str = "adam"
    lr_d: float = 1e-4
    lr_e: float = 5e-5
    lr_g: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    d_patience: int = 0
    elbo_samples: int = 1
    eval_every: int = 0
    stop_rel_change: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        dv.get_divergence(self.divergence)
        dv.ClipPolicy(self.r0)
        if self.method == "ages_sc" and not 0.0 < self.r0 <= 1.0:
            raise ValueError("ages_sc needs r0 in (0, 1]")
        if self.batch_size < 1 or self.d_steps < 1:
            raise ValueError("batch_size and d_steps must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def total_rounds(self, n_data: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        if self.epochs is None:
            raise ValueError("set either steps or epochs")
        return int(round(self.epochs * math.ceil(n_data / self.batch_size)))

    @property
    def uses_discriminator(self) -> bool:
        return self.method != "vae"

    @property
    def d_loss(self) -> str:
        if self.method == "fgan_kl":
            return "fgan_kl"
        if self.method == "bigan_hinge":
            return "hinge"
        return "logistic"


@dataclass
class GradientReport:
    grad_norm_g: float = 0.0
    grad_norm_e: float = 0.0
    s_theta: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    s_phi: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    clamped: int = 0
    clipped: int = 0
    excluded: int = 0
    overflow: int = 0
    d_loss: float = math.nan
    skipped: bool = False
    reason: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    x: np.ndarray
    z: np.ndarray
    eps_e: np.ndarray | None
    eps_g: np.ndarray | None

    @property
    def n(self) -> int:
        return self.x.shape[0]


class BatchSampler:
    """Cycles through shuffled epochs of a fixed dataset."""

    def __init__(self, data: np.ndarray, rng: np.random.Generator):
        self.data = np.asarray(data)
        self.rng = rng
        self._perm = rng.permutation(len(self.data))
        self._pos = 0

    def next(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._pos >= len(self._perm):
                self._perm = self.rng.permutation(len(self.data))
                self._pos = 0
            take = min(n, len(self._perm) - self._pos)
            out.append(self._perm[self._pos : self._pos + take])
            self._pos += take
            n -= take
        return self.data[np.concatenate(out)]


def draw_batch(model: BigenModel, sampler: BatchSampler, rng: np.random.Generator, n: int) -> Batch:
    x = sampler.next(n).astype(model.generator.net.dtype, copy=False)
    z = model.sample_prior(n, rng)
    eps_e = model.encoder.draw_noise(n, rng) if model.encoder is not None and model.encoder.noise_dim else None
    eps_g = model.generator.draw_noise(n, rng) if model.generator.noise_dim else None
    return Batch(x, z, eps_e, eps_g)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _softplus(t):
    # NaN logits pass through; callers refuse the step
    with np.errstate(invalid="ignore"):
        return np.logaddexp(0.0, t)


# -- discriminator ---------------------------------------------------------


def discriminator_loss(De: np.ndarray, Dg: np.ndarray, kind: str = "logistic") -> tuple[float, np.ndarray, np.ndarray, int]:
    """Loss and its derivatives w.r.t. the logits.

    ``De`` are logits on encoder pairs (label 1), ``Dg`` on generator pairs.
    Returns ``(loss, dL/dDe, dL/dDg, n_overflow_guarded)``.
    """
    ne, ng = De.size, Dg.size
    if kind == "logistic":
        loss = _softplus(-De).mean() + _softplus(Dg).mean()
        return float(loss), -_sigmoid(-De) / ne, _sigmoid(Dg) / ng, 0
    if kind == "fgan_kl":
        guarded = np.minimum(Dg, dv.LOGIT_CLAMP)
        e = np.exp(guarded - 1.0)
        loss = -De.mean() + e.mean()
        return float(loss), -np.ones_like(De) / ne, e / ng, int(np.count_nonzero(guarded != Dg))
    if kind == "hinge":
        loss = np.maximum(0.0, 1.0 - De).mean() + np.maximum(0.0, 1.0 + Dg).mean()
        return float(loss), -(De < 1.0).astype(De.dtype) / ne, (Dg > -1.0).astype(Dg.dtype) / ng, 0
    raise ValueError(f"unknown discriminator loss {kind!r}")


def _pairs(model: BigenModel, batch: Batch, train: bool = True):
    """Encoder pairs ``(x, E(x))`` and generator pairs ``(G(z), z)``."""
    xg = model.generator_sample(batch.z, noise=batch.eps_g, train=train)
    if model.encoder is None:
        return batch.x, None, xg, None
    ze = model.encoder_sample(batch.x, noise=batch.eps_e, train=train)
    return batch.x, ze, xg, batch.z


def discriminator_step(model: BigenModel, batch: Batch, optimizer, kind: str = "logistic") -> float:
    """One descent step on the discriminator loss; encoder/generator are constants.

    Raises :class:`NonFiniteError` (and leaves ``psi`` untouched) when the
    loss or its gradient is not finite.
    """
    xe, ze, xg, zg = _pairs(model, batch)
    n = batch.n
    x_all = np.concatenate([xe, xg], axis=0)
    z_all = None if ze is None else np.concatenate([ze, zg], axis=0)
    D = model.discriminator.score(x_all, z_all, train=True)
    loss, gDe, gDg, _ = discriminator_loss(D[:n], D[n:], kind)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite discriminator loss; step refused")
    grads, _, _ = model.discriminator.backward(np.concatenate([gDe, gDg]))
    optimizer.step(model.discriminator.params, grads)
    return loss


def discriminator_eval_loss(model: BigenModel, batch: Batch, kind: str = "logistic") -> float:
    xe, ze, xg, zg = _pairs(model, batch)
    De = model.discriminator.score(xe, ze, train=False)
    Dg = model.discriminator.score(xg, zg, train=False)
    return discriminator_loss(De, Dg, kind)[0]


def fit_logratio(
    pos: np.ndarray,
    neg: np.ndarray,
    rng: np.random.Generator,
    hidden=(32, 32),
    steps: int = 2000,
    batch_size: int = 500,
    lr: float = 1e-3,
) -> Discriminator:
    """Logistic regression of ``pos`` (label 1) against ``neg`` (label 0).

    At the optimum the logit is ``log p_pos(x) - log p_neg(x)``.  This is the
    discriminator objective on fixed sample sets, without any generator.
    """
    pos, neg = np.atleast_2d(np.asarray(pos, dtype=float)), np.atleast_2d(np.asarray(neg, dtype=float))
    dim = pos.shape[1]
    spec = MlpSpec((dim, *hidden, 1), activation="leaky_relu")
    disc = Discriminator(spec, dim, 0, rng)
    opt = make_optimizer("adam", lr)
    for _ in range(steps):
        xe = pos[rng.integers(0, len(pos), batch_size)]
        xg = neg[rng.integers(0, len(neg), batch_size)]
        D = disc.score(np.concatenate([xe, xg]))
        _, gDe, gDg, _ = discriminator_loss(D[:batch_size], D[batch_size:])
        grads, _, _ = disc.backward(np.concatenate([gDe, gDg]))
        opt.step(disc.params, grads)
    return disc


# -- generator / encoder ---------------------------------------------------

WeightFn = Callable[[np.ndarray], np.ndarray]


def _summary(w):
    w = w[np.isfinite(w)]
    if w.size == 0:
        return (math.nan, math.nan, math.nan)
    return (float(w.min()), float(w.mean()), float(w.max()))


def scaled_update(
    model: BigenModel,
    batch: Batch,
    weight_theta: Callable[[np.ndarray], tuple[np.ndarray, dv.ScalingStats | None]],
    weight_phi: Callable[[np.ndarray], tuple[np.ndarray, dv.ScalingStats | None]] | None,
    opt_g,
    opt_e,
    apply: bool = True,
) -> tuple[GradientReport, np.ndarray, np.ndarray | None]:
    """Shared plumbing for all discriminator-weighted generator/encoder steps.

    ``weight_*`` map raw logits to per-sample weights (NaN = exclude).  The
    gradients are computed for both networks before either is updated.
    Returns the report and the (theta, phi) gradients.
    """
    rep = GradientReport()
    D_net = model.discriminator

    xg = model.generator_sample(batch.z, noise=batch.eps_g, train=True)
    zg = batch.z if model.encoder is not None else None
    Dg = D_net.score(xg, zg, train=False)
    w_t, st = weight_theta(Dg)
    _merge(rep, st)
    ok_t = np.isfinite(w_t)
    rep.s_theta = _summary(w_t)
    grad_g = None
    if ok_t.any():
        u = np.where(ok_t, w_t, 0.0) / ok_t.sum()
        _, gx, _ = D_net.backward(u)
        grad_g, _ = model.generator.backward(gx)

    grad_e = None
    if weight_phi is not None and model.encoder is not None:
        ze = model.encoder_sample(batch.x, noise=batch.eps_e, train=True)
        De = D_net.score(batch.x, ze, train=False)
        w_p, sp = weight_phi(De)
        _merge(rep, sp)
        ok_p = np.isfinite(w_p)
        rep.s_phi = _summary(w_p)
        if ok_p.any():
            u = np.where(ok_p, w_p, 0.0) / ok_p.sum()
            _, _, gz = D_net.backward(u)
            grad_e, _ = model.encoder.backward(gz)
        elif grad_g is None:
            rep.skipped, rep.reason = True, "all samples excluded"
    elif grad_g is None:
        rep.skipped, rep.reason = True, "all samples excluded"

    if grad_g is not None:
        rep.grad_norm_g = float(np.linalg.norm(grad_g))
    if grad_e is not None:
        rep.grad_norm_e = float(np.linalg.norm(grad_e))
    if apply and not rep.skipped:
        for g, opt, params in ((grad_g, opt_g, model.generator.params), (grad_e, opt_e, model.encoder.params if model.encoder else None)):
            if g is not None and opt is not None:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite generator/encoder gradient; step refused")
        if grad_g is not None and opt_g is not None:
            opt_g.step(model.generator.params, grad_g)
        if grad_e is not None and opt_e is not None:
            opt_e.step(model.encoder.params, grad_e)
    return rep, grad_g, grad_e


def _merge(rep: GradientReport, st):
    if st is None:
        return
    if isinstance(st, dv.ScalingStats):
        rep.clamped += st.clamped
        rep.clipped += st.clipped
        rep.excluded += st.excluded
    else:
        rep.overflow += int(st)


def ages_weights(divergence, clip: dv.ClipPolicy | None = None, normalize: bool = False):
    """Weight functions for the adversarial gradient estimator."""
    div = dv.get_divergence(divergence)

    def w_theta(D):
        s_t, _, st = dv.scalings_from_logits(div, D, clip, normalize)
        return -s_t, st

    def w_phi(D):
        _, s_p, st = dv.scalings_from_logits(div, D, clip, normalize)
        return s_p, st

    return w_theta, w_phi


def ages_update(model, divergence, clip, batch, opt_g, opt_e, normalize: bool = False, apply: bool = True):
    """Ratio-scaled gradient step: ``-s_theta`` weights for G, ``+s_phi`` for E."""
    w_t, w_p = ages_weights(divergence, clip, normalize)
    return scaled_update(model, batch, w_t, w_p, opt_g, opt_e, apply)


def heuristic_update(model, divergence, batch, opt_g, opt_e, apply: bool = True):
    """Plug-in objective baseline that ignores the discriminator's dependence on parameters."""
    div = dv.get_divergence(divergence)

    def w_t(D):
        return dv.heuristic_scalings(div, D)[0], None

    def w_p(D):
        return dv.heuristic_scalings(div, D)[1], None

    return scaled_update(model, batch, w_t, w_p, opt_g, opt_e, apply)


def fgan_kl_update(model, batch, opt_g, opt_e, apply: bool = True):
    """G descends ``-E_pg[exp(D-1)]``, E descends ``E_pe[D]``."""

    def w_t(D):
        guarded = np.minimum(D, dv.LOGIT_CLAMP)
        return -np.exp(guarded - 1.0), int(np.count_nonzero(guarded != D))

    def w_p(D):
        return np.ones_like(D), None

    return scaled_update(model, batch, w_t, w_p, opt_g, opt_e, apply)


def bigan_weights(variant: str):
    if variant == "logd":
        # G: mean softplus(-D(G,z));  E: mean softplus(D(x,E))
        return (lambda D: (-_sigmoid(-D), None)), (lambda D: (_sigmoid(D), None))
    if variant == "saturating":
        # G: -mean softplus(D(G,z));  E: -mean softplus(-D(x,E))
        return (lambda D: (-_sigmoid(D), None)), (lambda D: (_sigmoid(-D), None))
    if variant == "hinge":
        # G: -mean D(G,z);  E: mean D(x,E)
        return (lambda D: (-np.ones_like(D), None)), (lambda D: (np.ones_like(D), None))
    raise ValueError(f"unknown BiGAN variant {variant!r}")


def bigan_update(model, variant, batch, opt_g, opt_e, apply: bool = True):
    w_t, w_p = bigan_weights(variant)
    return scaled_update(model, batch, w_t, w_p, opt_g, opt_e, apply)


def ages_uni_update(model, divergence, batch, opt_g, clip=None, apply: bool = True):
    """Generator-only step against a data-only discriminator ``D(x)``."""
    if model.encoder is not None:
        raise ValueError("ages_uni_update expects a generator-only model")
    w_t, _ = ages_weights(divergence, clip)
    return scaled_update(model, batch, w_t, None, opt_g, None, apply)


def vae_step(model: BigenModel, x: np.ndarray, rng, opt_g, opt_e, n_samples: int = 1, noise=None) -> float:
    """One joint descent step on the analytic negative ELBO."""
    res = elbo_terms(model.encoder, model.generator, x, rng, n_samples, noise, train=True, grads=True)
    if not math.isfinite(res.loss):
        raise NonFiniteError("non-finite ELBO; step refused")
    for g in (res.grad_generator, res.grad_encoder):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite ELBO gradient; step refused")
    opt_g.step(model.generator.params, res.grad_generator)
    opt_e.step(model.encoder.params, res.grad_encoder)
    return res.loss


# -- outer loop ------------------------------------------------------------


@dataclass
class TrainEvent:
    """One evaluation point emitted by :func:`run_training`."""

    step: int
    metrics: dict
    refused: int
    report: GradientReport | None = None


@dataclass
class Trainer:
    model: BigenModel
    config: TrainConfig
    data: np.ndarray
    rng: np.random.Generator
    opt_d: object = None
    opt_g: object = None
    opt_e: object = None
    refused_total: int = 0
    refusal_log: list = field(default_factory=list)

    def __post_init__(self):
        c = self.config
        if c.method == "vae" and (
            self.model.encoder is None or self.model.encoder.kind != "gaussian" or self.model.generator.kind != "gaussian"
        ):
            raise ValueError("method 'vae' needs gaussian encoder and generator")
        if c.method == "ages_uni" and self.model.encoder is not None:
            raise ValueError("method 'ages_uni' needs a generator-only model")
        if c.method != "ages_uni" and self.model.encoder is None:
            raise ValueError(f"method {c.method!r} needs an encoder")
        self.sampler = BatchSampler(self.data, self.rng)
        opt = lambda lr: make_optimizer(c.optimizer, lr, c.beta1, c.beta2)  # noqa: E731
        self.opt_d = opt(c.lr_d)
        self.opt_g = opt(c.lr_g)
        self.opt_e = opt(c.lr_e) if self.model.encoder is not None else None
        self.clip = dv.ClipPolicy(c.r0) if c.method in ("ages_sc",) or c.r0 > 0 else None

    def batch(self) -> Batch:
        return draw_batch(self.model, self.sampler, self.rng, self.config.batch_size)

    def d_phase(self) -> float:
        c = self.config
        last = math.nan
        best, since = math.inf, 0
        for _ in range(c.d_steps):
            last = discriminator_step(self.model, self.batch(), self.opt_d, c.d_loss)
            if c.d_patience > 0:
                val = discriminator_eval_loss(self.model, self.batch(), c.d_loss)
                if val < best - 1e-6:
                    best, since = val, 0
                else:
                    since += 1
                    if since >= c.d_patience:
                        break
        return last

    def ge_step(self) -> GradientReport:
        c, m = self.config, self.model
        if c.method == "vae":
            loss = vae_step(m, self.sampler.next(c.batch_size), self.rng, self.opt_g, self.opt_e, c.elbo_samples)
            return GradientReport(d_loss=math.nan, s_theta=(loss, loss, loss))
        b = self.batch()
        if c.method == "ages":
            rep = ages_update(m, c.divergence, self.clip, b, self.opt_g, self.opt_e)[0]
        elif c.method == "ages_sc":
            rep = ages_update(m, c.divergence, self.clip, b, self.opt_g, self.opt_e, normalize=True)[0]
        elif c.method == "heuristic":
            rep = heuristic_update(m, c.divergence, b, self.opt_g, self.opt_e)[0]
        elif c.method == "fgan_kl":
            rep = fgan_kl_update(m, b, self.opt_g, self.opt_e)[0]
        elif c.method.startswith("bigan_"):
            rep = bigan_update(m, c.method.split("_", 1)[1], b, self.opt_g, self.opt_e)[0]
        elif c.method == "ages_uni":
            rep = ages_uni_update(m, c.divergence, b, self.opt_g, self.clip)[0]
        else:  # pragma: no cover - guarded by TrainConfig
            raise ValueError(c.method)
        return rep

    def round(self) -> tuple[bool, GradientReport | None]:
        """One D phase (if any) followed by one G/E step.  Returns (ok, report)."""
        try:
            d_loss = self.d_phase() if self.config.uses_discriminator else math.nan
            rep = self.ge_step()
            rep.d_loss = d_loss
        except NonFiniteError as exc:
            return False, GradientReport(skipped=True, reason=str(exc))
        if rep.skipped:
            return False, rep
        return True, rep


def run_training(
    config: TrainConfig,
    model: BigenModel,
    data: np.ndarray,
    rng: np.random.Generator,
    evaluate: Callable[[BigenModel, int], dict] | None = None,
) -> Iterator[TrainEvent]:
    """Alternate discriminator phases and generator/encoder steps.

    Yields a :class:`TrainEvent` at step 0, every ``eval_every`` rounds and at
    the end.  Aborts with :class:`TrainingAborted` after 100 consecutive
    refused steps.  With ``stop_rel_change > 0`` training also stops once the
    evaluated ``objective_lvae`` changes by less than that fraction between
    evaluations.
    """
    trainer = Trainer(model, config, data, rng)
    total = config.total_rounds(len(data))
    evaluate = evaluate or (lambda m, s: {})
    prev_obj = None
    t0 = time.perf_counter()

    def event(step, rep):
        metrics = dict(evaluate(model, step))
        metrics.setdefault("wall_time", time.perf_counter() - t0)
        return TrainEvent(step, metrics, trainer.refused_total, rep)

    yield event(0, None)
    consecutive = 0
    for step in range(1, total + 1):
        ok, rep = trainer.round()
        if ok:
            consecutive = 0
        else:
            consecutive += 1
            trainer.refused_total += 1
            trainer.refusal_log.append((step, rep.reason))
            log.warning("step %d refused: %s", step, rep.reason)
            if consecutive >= MAX_CONSECUTIVE_REFUSALS:
                raise TrainingAborted(f"{consecutive} consecutive refused steps (last: {rep.reason})")
        if step == total or (config.eval_every and step % config.eval_every == 0):
            ev = event(step, rep)
            yield ev
            obj = ev.metrics.get("objective_lvae")
            if config.stop_rel_change > 0 and obj is not None and prev_obj is not None:
                if abs(obj - prev_obj) <= config.stop_rel_change * abs(prev_obj):
                    return
            prev_obj = obj
