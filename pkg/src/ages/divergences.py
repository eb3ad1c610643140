"""f-divergences, their gradient scaling factors, and ratio clipping.

For a divergence ``D_f(p_e, p_g) = E_{p_g}[f(r)]`` with ``r = p_e / p_g`` the
generator and encoder gradients differ across divergences only through two
scalar weights evaluated at the (estimated) ratio::

    s_theta(r) = f_tilde''(1/r) / r        s_phi(r) = f''(r) * r

where ``f_tilde(r) = r f(1/r)``.  The estimated ratio is ``exp(D)`` for a
discriminator logit ``D``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0

Fn = Callable[[np.ndarray], np.ndarray]


class DomainError(ValueError):
    """Ratio argument outside (0, inf)."""


class ConfigError(ValueError):
    """Invalid divergence name or clipping policy."""


def _xlogx(r):
    r = np.asarray(r, dtype=float)
    return np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)


@dataclass(frozen=True)
class Divergence:
    name: str
    f: Fn | None
    f_tilde: Fn | None
    f_second: Fn | None
    f_tilde_second: Fn | None

    @property
    def is_all(self) -> bool:
        return self.name == "all"

    def f_second_at_one(self) -> float:
        if self.is_all:
            return 1.0
        return float(self.f_second(np.float64(1.0)))


def _kl() -> Divergence:
    return Divergence(
        name="kl",
        f=lambda r: _xlogx(r),
        f_tilde=lambda r: -np.log(r),
        f_second=lambda r: 1.0 / np.asarray(r, dtype=float),
        f_tilde_second=lambda r: 1.0 / np.asarray(r, dtype=float) ** 2,
    )


def _revkl() -> Divergence:
    return Divergence(
        name="revkl",
        f=lambda r: -np.log(r),
        f_tilde=lambda r: _xlogx(r),
        f_second=lambda r: 1.0 / np.asarray(r, dtype=float) ** 2,
        f_tilde_second=lambda r: 1.0 / np.asarray(r, dtype=float),
    )


def _js_f(r):
    r = np.asarray(r, dtype=float)
    return -(r + 1.0) * np.log((1.0 + r) / 2.0) + _xlogx(r)


def _js_f2(r):
    r = np.asarray(r, dtype=float)
    return 1.0 / (r * (1.0 + r))


def _js() -> Divergence:
    # symmetric: f_tilde == f
    return Divergence(name="js", f=_js_f, f_tilde=_js_f, f_second=_js_f2, f_tilde_second=_js_f2)


def _h2_f(r):
    return (np.sqrt(r) - 1.0) ** 2


def _h2_f2(r):
    return 0.5 * np.asarray(r, dtype=float) ** -1.5


def _hellinger() -> Divergence:
    return Divergence(name="hellinger", f=_h2_f, f_tilde=_h2_f, f_second=_h2_f2, f_tilde_second=_h2_f2)


def _all() -> Divergence:
    return Divergence(name="all", f=None, f_tilde=None, f_second=None, f_tilde_second=None)


DIVERGENCES: dict[str, Divergence] = {d.name: d for d in (_kl(), _revkl(), _js(), _hellinger(), _all())}
NAMED = ("kl", "revkl", "js", "hellinger")


def get_divergence(name: str | Divergence) -> Divergence:
    if isinstance(name, Divergence):
        return name
    try:
        return DIVERGENCES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown divergence {name!r}; expected one of {sorted(DIVERGENCES)}") from None


def _check_ratio(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise DomainError("ratio must be strictly positive")
    return r


def scaling_theta(div: Divergence | str, r):
    """Generator-side weight ``f_tilde''(1/r) / r`` (1 for ``all``)."""
    div = get_divergence(div)
    r = _check_ratio(r)
    if div.is_all:
        return np.ones_like(r)[()]
    return (div.f_tilde_second(1.0 / r) / r)[()]


def scaling_phi(div: Divergence | str, r):
    """Encoder-side weight ``f''(r) * r`` (1 for ``all``)."""
    div = get_divergence(div)
    r = _check_ratio(r)
    if div.is_all:
        return np.ones_like(r)[()]
    return (div.f_second(r) * r)[()]


@dataclass(frozen=True)
class ClipPolicy:
    """Clamp estimated ratios into ``[r0, 1/r0]``; ``r0 = 0`` disables clipping."""

    r0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ConfigError(f"clip r0 must lie in [0, 1], got {self.r0}")


def clip_ratio(policy: ClipPolicy | float, r_hat):
    if not isinstance(policy, ClipPolicy):
        policy = ClipPolicy(float(policy))
    r_hat = _check_ratio(r_hat)
    if policy.r0 == 0.0:
        return r_hat[()]
    return np.clip(r_hat, policy.r0, 1.0 / policy.r0)[()]


@dataclass
class ScalingStats:
    clamped: int = 0
    clipped: int = 0
    excluded: int = 0


def scalings_from_logits(
    div: Divergence | str,
    logits: np.ndarray,
    clip: ClipPolicy | None = None,
    normalize: bool = False,
) -> tuple[np.ndarray, np.ndarray, ScalingStats]:
    """Per-sample ``(s_theta, s_phi)`` at ``r_hat = exp(D)``.

    ``D`` is clamped to ``[-30, 30]`` before exponentiation.  With a clip
    policy the ratio is then clamped into ``[r0, 1/r0]``.  ``normalize``
    divides by the value at ``r = 1`` (i.e. ``f''(1)``) so that the ``r0 = 1``
    limit yields unit weights for every divergence.  Non-finite weights are
    replaced by NaN and counted in ``stats.excluded``.
    """
    div = get_divergence(div)
    logits = np.asarray(logits, dtype=float)
    stats = ScalingStats()
    safe = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    stats.clamped = int(np.count_nonzero(safe != logits))
    if stats.clamped:
        log.debug("logit clamp active on %d samples", stats.clamped)
    r_hat = np.exp(safe)
    if clip is not None and clip.r0 > 0:
        clipped = np.clip(r_hat, clip.r0, 1.0 / clip.r0)
        stats.clipped = int(np.count_nonzero(clipped != r_hat))
        r_hat = clipped
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        s_t = np.asarray(scaling_theta(div, r_hat), dtype=float)
        s_p = np.asarray(scaling_phi(div, r_hat), dtype=float)
        if normalize and not div.is_all:
            s_t = s_t / scaling_theta(div, 1.0)
            s_p = s_p / scaling_phi(div, 1.0)
    bad = ~(np.isfinite(s_t) & np.isfinite(s_p))
    stats.excluded = int(np.count_nonzero(bad))
    s_t = np.where(bad, np.nan, s_t)
    s_p = np.where(bad, np.nan, s_p)
    return s_t, s_p, stats


# Scalings used by plug-in objective estimators that differentiate only
# through the samples.  Convention: the descended gradients are
# mean(s~_theta * dD/dx * dG/dtheta) and mean(s~_phi * dD/dz * dE/dphi).
HEURISTIC_SCALINGS: dict[str, tuple[Fn, Fn]] = {
    "kl": (
        lambda D: np.ones_like(D),
        lambda D: (D + 1.0) * np.exp(D),
    ),
    "revkl": (
        lambda D: (D - 1.0) * np.exp(-D),
        lambda D: -np.ones_like(D),
    ),
    "js": (
        lambda D: -np.exp(D) * np.log(2.0 / (1.0 + np.exp(-D))),
        lambda D: np.exp(-D) * np.log(2.0 / (1.0 + np.exp(D))),
    ),
}


def heuristic_scalings(div: Divergence | str, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    div = get_divergence(div)
    if div.name not in HEURISTIC_SCALINGS:
        raise ConfigError(f"no heuristic scalings for divergence {div.name!r}")
    D = np.clip(np.asarray(logits, dtype=float), -LOGIT_CLAMP, LOGIT_CLAMP)
    s_t, s_p = HEURISTIC_SCALINGS[div.name]
    return s_t(D), s_p(D)


@dataclass
class MCEstimate:
    value: float
    stderr: float
    n_used: int
    n_excluded: int

    @property
    def reliable(self) -> bool:
        total = self.n_used + self.n_excluded
        return total > 0 and self.n_excluded <= 0.01 * total


def divergence_value_mc(div: Divergence | str, log_ratio_fn: Callable[[np.ndarray], np.ndarray], samples_from_pg) -> MCEstimate:
    """Monte-Carlo ``E_{p_g}[f(exp(D))]`` over samples drawn from ``p_g``.

    ``log_ratio_fn`` maps the samples to log-ratio values.  Samples whose
    ``f`` value is not finite are dropped; more than 1% dropped marks the
    estimate unreliable.
    """
    div = get_divergence(div)
    if div.is_all:
        raise ConfigError("'all' has no generator function f")
    D = np.asarray(log_ratio_fn(samples_from_pg), dtype=float).ravel()
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(div.f(np.exp(D)), dtype=float)
    ok = np.isfinite(vals)
    n_ok = int(ok.sum())
    n_bad = int(vals.size - n_ok)
    if n_bad:
        log.warning("divergence_value_mc: excluded %d non-finite samples", n_bad)
    if n_ok == 0:
        return MCEstimate(math.nan, math.nan, 0, n_bad)
    v = vals[ok]
    se = float(v.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else math.nan
    return MCEstimate(float(v.mean()), se, n_ok, n_bad)
