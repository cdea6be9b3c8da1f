"""Observer-only models: the inspector records the queue but never changes speed.

``S`` is the queue length seen at the last inspection, so ``(Q, S)`` is the
queue length at two instants separated by an Exp(``nu``) lag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import integrate, special

from .core import (
    DomainError,
    JointDist,
    ModelParams,
    NoConvergence,
    NumericalError,
    Variant,
    validate_params,
)

SERIES_TERM_TOL = 1e-14


class QuadratureFailure(NumericalError):
    pass


# --- M/M/1 observer --------------------------------------------------------

@dataclass(frozen=True)
class Mm1ObserverForm:
    params: ModelParams
    x1: float

    @property
    def x2(self) -> float:
        p = self.params
        return p.mu / (p.lam * self.x1)


def mm1_form(p: ModelParams) -> Mm1ObserverForm:
    """Root ``x1`` in (0, 1) of ``lam*x**2 - (lam + mu + nu)*x + mu``."""
    p = p.replace(variant=Variant.OBSERVER_MM1, smax=math.inf)
    validate_params(p)
    b = p.lam + p.mu + p.nu
    disc = (p.lam - p.mu) ** 2 + p.nu * (p.nu + 2 * p.lam + 2 * p.mu)
    return Mm1ObserverForm(p, 2.0 * p.mu / (b + math.sqrt(disc)))


def mm1_obs_pgf(f: Mm1ObserverForm, x: float, y: float) -> float:
    """Joint pgf of (current, last observed) queue length.

    Evaluated in the factorised form in which the common zero at ``x1`` of
    numerator and denominator has been divided out, so no point of
    ``[0, 1]^2`` needs special handling.
    """
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError("pgf arguments must lie in [0, 1]")
    p = f.params
    lam, mu, nu = p.lam, p.mu, p.nu
    x1 = f.x1
    pre = nu * (mu - lam) / (lam * (f.x2 - x) * (mu - lam * x1 * y))
    return pre * (mu / (mu - lam * x * y) + x1 / (1.0 - x1))


def mm1_obs_joint(p: ModelParams, qmax: int | None = None, jmax: int | None = None,
                  tail_tol: float = 1e-14) -> JointDist:
    """Coefficients of the M/M/1 observer pgf by expanding its geometric factors."""
    f = mm1_form(p)
    lam, mu, nu = p.lam, p.mu, p.nu
    rho = lam / mu
    default = int(math.ceil(math.log(tail_tol) / math.log(rho))) + 1
    qmax = default if qmax is None else qmax
    jmax = default if jmax is None else jmax
    x1, x2 = f.x1, f.x2
    # P = K/(x2 - x) * 1/(mu - lam x1 y) * [mu/(mu - lam x y) + x1/(1 - x1)]
    K = nu * (mu - lam) / lam
    a = x2 ** -(np.arange(qmax + 1) + 1.0)
    b = (lam * x1 / mu) ** np.arange(jmax + 1.0) / mu
    d = rho ** np.arange(min(qmax, jmax) + 1.0) / mu
    base = np.outer(a, b)
    out = (x1 / (1.0 - x1)) * base
    conv = np.zeros_like(base)
    for k in range(len(d)):
        conv[k:, k:] += d[k] * base[: qmax + 1 - k, : jmax + 1 - k]
    out += mu * conv
    out *= K
    if out.sum() < 1.0 - 1e-9 and qmax == default and jmax == default:
        raise NoConvergence("series expansion lost more mass than expected")
    return JointDist(out, source="mm1-observer")


def mm1_obs_functional_residual(f: Mm1ObserverForm, grid) -> float:
    p = f.params
    lam, mu, nu = p.lam, p.mu, p.nu
    worst = 0.0
    for x, y in grid:
        P = mm1_obs_pgf(f, x, y)
        P0 = mm1_obs_pgf(f, 0.0, y)
        Pd = mm1_obs_pgf(f, x * y, 1.0)
        res = (nu + lam * (1 - x) + mu * (1 - 1 / x)) * P - mu * (1 - 1 / x) * P0 - nu * Pd
        worst = max(worst, abs(res))
    return worst


# --- M/M/inf observer ------------------------------------------------------

@dataclass(frozen=True)
class MmInfObserverForm:
    params: ModelParams
    h: np.ndarray  # diagonal coefficients h_{k,k}

    def series(self, w: float) -> float:
        return float(np.polynomial.polynomial.polyval(w, self.h))

    def series_derivative(self, w: float) -> float:
        k = np.arange(1, len(self.h))
        return float(np.polynomial.polynomial.polyval(w, k * self.h[1:]))


def mminf_form(p: ModelParams, term_tol: float = SERIES_TERM_TOL) -> MmInfObserverForm:
    """Diagonal coefficients ``nu/(nu + k*mu) * rho**k / k!`` up to negligible size."""
    validate_params(p.replace(variant=Variant.OBSERVER_MMINF, smax=math.inf))
    rho = p.rho
    h = [1.0]
    k = 0
    term = 1.0
    while True:
        k += 1
        term *= rho / k
        hk = p.nu / (p.nu + k * p.mu) * term
        h.append(hk)
        if k > rho and term < term_tol:
            break
    return MmInfObserverForm(p.replace(variant=Variant.OBSERVER_MMINF, smax=math.inf), np.array(h))


def mminf_obs_pgf(f: MmInfObserverForm, x: float, y: float) -> float:
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError("pgf arguments must lie in [0, 1]")
    rho = f.params.rho
    return math.exp(rho * (x - 1) + rho * (y - 1)) * f.series((x - 1) * (y - 1))


def mminf_obs_dx(f: MmInfObserverForm, x: float, y: float) -> float:
    """Partial derivative of the series form with respect to ``x``."""
    rho = f.params.rho
    e = math.exp(rho * (x - 1) + rho * (y - 1))
    w = (x - 1) * (y - 1)
    return e * (rho * f.series(w) + (y - 1) * f.series_derivative(w))


def mminf_obs_functional_residual(f: MmInfObserverForm, grid) -> float:
    p = f.params
    worst = 0.0
    for x, y in grid:
        P = mminf_obs_pgf(f, x, y)
        res = ((p.nu + p.lam * (1 - x)) * P + p.mu * (x - 1) * mminf_obs_dx(f, x, y)
               - p.nu * mminf_obs_pgf(f, x * y, 1.0))
        worst = max(worst, abs(res))
    return worst


def _lag_integral(func, p: ModelParams, integrator, **kw):
    """Integrate ``func(u)`` against the density ``a*u**(a - 1)`` on [0, 1], ``a = nu/mu``.

    For ``a < 1`` the substitution ``t = u**a`` removes the endpoint
    singularity; otherwise the density is bounded and used directly.
    """
    a = p.nu / p.mu
    if a < 1.0:
        return integrator(lambda t: func(t ** (1.0 / a)), 0.0, 1.0, **kw)
    return integrator(lambda u: a * u ** (a - 1.0) * func(u), 0.0, 1.0, **kw)


def mminf_obs_pgf_integral(p: ModelParams, x: float, y: float, tol: float = 1e-13) -> float:
    """Integral representation over the lag ``u = exp(-mu * Exp(nu))``."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError("pgf arguments must lie in [0, 1]")
    rho = p.rho
    w = (x - 1) * (y - 1)
    val, err = _lag_integral(lambda u: math.exp(rho * u * w), p, integrate.quad,
                             epsabs=tol, epsrel=tol, limit=200)
    if err > 1e3 * tol * max(1.0, abs(val)):
        raise QuadratureFailure(f"quadrature error estimate {err:.2e}")
    return math.exp(rho * (x - 1) + rho * (y - 1)) * val


def _poisson_table(mean, n):
    k = np.arange(n + 1)
    with np.errstate(divide="ignore"):
        return np.exp(k * np.log(mean) - special.gammaln(k + 1) - mean) if mean > 0 else (k == 0).astype(float)


def _bivariate_poisson(u: float, rho: float, qmax: int, jmax: int) -> np.ndarray:
    """P(A + C = i, B + C = j) with A, B ~ Poi(rho(1-u)), C ~ Poi(rho u)."""
    a = _poisson_table(rho * (1 - u), max(qmax, jmax))
    c = _poisson_table(rho * u, min(qmax, jmax))
    out = np.zeros((qmax + 1, jmax + 1))
    for k, ck in enumerate(c):
        out[k:, k:] += ck * np.outer(a[: qmax + 1 - k], a[: jmax + 1 - k])
    return out


def mminf_obs_joint(p: ModelParams, qmax: int | None = None, jmax: int | None = None,
                    method: str = "series", tail_tol: float = 1e-15) -> JointDist:
    """Joint law of the M/M/inf observer model.

    ``method="series"`` expands the diagonal series term by term;
    ``method="integral"`` integrates a bivariate Poisson law against the
    lag distribution.
    """
    rho = p.rho
    from scipy import stats
    default = int(stats.poisson.isf(tail_tol, rho)) + 2
    qmax = default if qmax is None else qmax
    jmax = default if jmax is None else jmax
    if method == "series":
        n = max(qmax, jmax)
        # each coefficient of e^{rho(x-1)}(x-1)^k is bounded by 2^k, so the
        # diagonal series must run until rho^k 4^k / k! is negligible
        nterms, t = 0, 1.0
        while nterms <= 4 * p.rho or t > 1e-20:
            nterms += 1
            t *= 4 * p.rho / nterms
        # the alternating binomial sums cancel badly in double precision
        with mpmath.workdps(60):
            r = mpmath.mpf(p.lam) / mpmath.mpf(p.mu)
            pois = [mpmath.exp(-r) * r ** i / mpmath.factorial(i) for i in range(n + 1)]
            g = []
            for k in range(nterms + 1):
                row = []
                for i in range(n + 1):
                    row.append(mpmath.fsum((-1) ** (k - m) * mpmath.binomial(k, m) * pois[i - m]
                                           for m in range(min(k, i) + 1)))
                g.append(row)
            h = [mpmath.mpf(p.nu) / (p.nu + k * mpmath.mpf(p.mu)) * r ** k / mpmath.factorial(k)
                 for k in range(nterms + 1)]
            probs = np.array([[float(mpmath.fsum(h[k] * g[k][i] * g[k][j] for k in range(len(h))))
                               for j in range(jmax + 1)] for i in range(qmax + 1)])
    elif method == "integral":
        val, err = _lag_integral(lambda u: _bivariate_poisson(u, rho, qmax, jmax), p,
                                 integrate.quad_vec, epsabs=1e-14, epsrel=1e-12)
        if err > 1e-10:
            raise QuadratureFailure(f"quadrature error estimate {err:.2e}")
        probs = val
    else:
        raise ValueError(f"unknown method {method!r}")
    probs = np.where(np.abs(probs) < 1e-15, 0.0, probs)
    return JointDist(probs, source=f"mminf-observer-{method}")
