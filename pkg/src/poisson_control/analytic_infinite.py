"""Controller with unbounded speed: conditional laws, speed marginal, joint law.

Given the speed ``j`` the queue length evolves as an M/M/1 queue with
service rate ``j*mu`` that is restarted in state ``j`` at rate ``nu``. Its
stationary law has a closed form in terms of the smaller root ``beta_j``
of ``lam*z**2 - (lam + nu + j*mu)*z + j*mu``. The speed marginal then
solves a stochastic-kernel balance (the speed at the next inspection is
drawn from the conditional queue law), which is solved on a truncated
support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .core import (
    DomainError,
    JointDist,
    ModelError,
    ModelParams,
    NoConvergence,
    Variant,
)

DIRECT_SOLVE_MAX = 2000


class LengthTooShort(ModelError):
    pass


@dataclass(frozen=True)
class BetaPair:
    j: int
    beta: float
    beta_tilde: float

    @property
    def z1(self) -> float:
        return self.beta

    @property
    def z2(self) -> float:
        return 1.0 / self.beta_tilde


@dataclass(frozen=True)
class CondDist:
    j: int
    c: np.ndarray
    pmf: np.ndarray

    @property
    def deficit(self) -> float:
        return max(0.0, 1.0 - float(self.pmf.sum()))

    def mean(self) -> float:
        return float(np.arange(len(self.pmf)) @ self.pmf)


@dataclass(frozen=True)
class SigmaVector:
    sigma: np.ndarray
    N: int
    residual: float
    tail_mass: float

    @property
    def deficit(self) -> float:
        return max(0.0, 1.0 - float(self.sigma.sum()))


def _betas(lam, mu, nu, j):
    """Vectorised smaller root; conjugate form avoids cancellation for large nu."""
    j = np.asarray(j, dtype=float)
    jm = j * mu
    b = lam + jm + nu
    disc = (lam - jm) ** 2 + nu * (nu + 2.0 * lam + 2.0 * jm)
    assert np.all(disc >= 0.0)
    beta = 2.0 * jm / (b + np.sqrt(disc))
    with np.errstate(divide="ignore", invalid="ignore"):
        bt = np.where(j > 0, lam * beta / np.where(j > 0, jm, 1.0), lam / (lam + nu))
    return beta, bt


def beta_j(p: ModelParams, j: int) -> BetaPair:
    """Root in [0, 1) of ``lam*z**2 - (lam + nu + j*mu)*z + j*mu``.

    For ``j = 0`` the root is 0 and ``beta_tilde`` is set to its limit
    ``lam / (lam + nu)``, the ratio of the geometric law of speed 0.
    """
    if j < 0:
        raise ValueError("speed must be non-negative")
    beta, bt = _betas(p.lam, p.mu, p.nu, j)
    return BetaPair(int(j), float(beta), float(bt))


def cond_coeffs(beta: float, j: int) -> np.ndarray:
    """Coefficients ``c_{0..j}`` of the numerator polynomial of the conditional pgf."""
    c = np.empty(j + 1)
    c[0] = beta ** j / (1.0 - beta)
    if j:
        c[1:] = beta ** (j - np.arange(1, j + 1))
    return c


def conditional_kernel(p: ModelParams, jmax: int, L: int) -> np.ndarray:
    """Table ``K[j, l] = p_j(l)`` for speeds ``0..jmax`` and lengths ``0..L``."""
    js = np.arange(jmax + 1)
    beta, bt = _betas(p.lam, p.mu, p.nu, js)
    # C[j, k] = c_{k,j}; zero for k > j
    k = np.arange(L + 1)
    with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
        C = np.where(k[None, :] <= js[:, None],
                     beta[:, None] ** np.maximum(js[:, None] - k[None, :], 0), 0.0)
        C[:, 0] = np.where(js > 0, beta ** js / (1.0 - beta), 1.0)
    K = np.empty((jmax + 1, L + 1))
    s = C[:, 0].copy()
    K[:, 0] = s
    for l in range(1, L + 1):
        s = bt * s + C[:, l]
        K[:, l] = s
    K *= (p.nu / p.lam) * bt[:, None]
    return K


def cond_dist(p: ModelParams, j: int, L: int) -> CondDist:
    """Stationary queue-length law given speed ``j``, on ``0..L``."""
    if L < j:
        raise LengthTooShort(f"length {L} shorter than speed {j}")
    b = beta_j(p, j)
    c = cond_coeffs(b.beta, j) if j else np.array([1.0])
    pmf = conditional_kernel(p, j, L)[j]
    return CondDist(j, c, pmf)


def cond_mean(p: ModelParams, j: int) -> float:
    """Mean queue length given speed ``j``."""
    if j == 0:
        return p.lam / p.nu
    b = beta_j(p, j)
    beta, bt = b.beta, b.beta_tilde
    sum_c = 1.0 / (1.0 - beta)
    sum_kc = (j - (j + 1) * beta + beta ** (j + 1)) / (1.0 - beta) ** 2
    return (p.nu * bt / p.lam) * (bt * sum_c / (1.0 - bt) ** 2 + sum_kc / (1.0 - bt))


def default_truncation(p: ModelParams, tol: float = 1e-9) -> int:
    """Starting speed truncation.

    The Poisson-like bulk needs about ``5*rho + 10*sqrt(rho)`` states; at
    slow control the speed-0 conditional law is geometric with ratio
    ``lam/(lam + nu)`` and its tail sets the size instead.
    """
    rho = p.rho
    bulk = math.ceil(5 * rho + 10 * math.sqrt(rho))
    geo = math.ceil(math.log(tol) / math.log(p.lam / (p.lam + p.nu)))
    return max(20, bulk, geo)


def _stationary_of_kernel(T: np.ndarray) -> np.ndarray:
    n = T.shape[0]
    if n <= DIRECT_SOLVE_MAX:
        A = (T - np.eye(n)).T
        A[0, :] = 1.0
        rhs = np.zeros(n)
        rhs[0] = 1.0
        x = linalg.solve(A, rhs)
    else:
        x = np.full(n, 1.0 / n)
        for _ in range(100000):
            nxt = x @ T
            if np.abs(nxt - x).max() < 1e-15:
                x = nxt
                break
            x = nxt
        else:
            raise NoConvergence("power iteration on the speed kernel did not settle")
    x = np.clip(x, 0.0, None)
    return x / x.sum()


def _sigma_at(p: ModelParams, N: int) -> SigmaVector:
    K = conditional_kernel(p, N, N)
    lost = 1.0 - K.sum(axis=1)
    T = K.copy()
    T[:, N] += lost  # mass beyond N folded into the last state
    sigma = _stationary_of_kernel(T)
    residual = float(np.abs(sigma - sigma @ K).max())
    tail = float(sigma @ np.clip(lost, 0.0, None))
    return SigmaVector(sigma, N, residual, tail)


def sigma_solve(p: ModelParams, N: int | None = None, tol: float = 1e-9,
                max_doublings: int = 2) -> SigmaVector:
    """Speed marginal on ``0..N``, doubling ``N`` until the tail mass is below ``tol``."""
    if N is None:
        N = default_truncation(p, tol)
    for _ in range(max_doublings + 1):
        sv = _sigma_at(p, N)
        if sv.tail_mass < tol:
            return sv
        N *= 2
    raise NoConvergence(
        f"tail mass {sv.tail_mass:.3e} still above {tol:.1e} at N={sv.N}; pass a larger N")


def assemble_joint(p: ModelParams, sigma: SigmaVector, L: int | None = None) -> JointDist:
    """Joint table ``pi[i, j] = sigma_j * p_j(i)`` for ``i <= L``, ``j <= N``."""
    if L is None:
        L = sigma.N
    K = conditional_kernel(p, sigma.N, L)
    probs = (sigma.sigma[:, None] * K).T
    return JointDist(probs, source="analytic-infinite",
                     meta={"N": sigma.N, "L": L, "sigma_residual": sigma.residual})


def solve(p: ModelParams, N: int | None = None, tol: float = 1e-9,
          max_doublings: int = 2) -> JointDist:
    sv = sigma_solve(p, N, tol=tol, max_doublings=max_doublings)
    return assemble_joint(p, sv)


def balance_residuals(d: JointDist, p: ModelParams) -> np.ndarray:
    """Violation ``r[i, j]`` of the global balance equation of every stored state."""
    pi = d.probs
    L, N = pi.shape[0] - 1, pi.shape[1] - 1
    i = np.arange(L + 1)[:, None]
    jmu = p.mu * np.arange(N + 1)[None, :]
    out_rate = p.lam + p.nu + np.where(i >= 1, jmu, 0.0)
    r = out_rate * pi
    r[1:] -= p.lam * pi[:-1]
    r[:-1] -= jmu * pi[1:]
    gamma = pi.sum(axis=1)
    m = min(L, N)
    r[np.arange(m + 1), np.arange(m + 1)] -= p.nu * gamma[: m + 1]
    return r


def functional_eq_residual(d: JointDist, p: ModelParams, grid, x_switch: float = 0.05) -> float:
    """Largest violation of the joint-pgf functional equation over ``grid``.

    For ``x < x_switch`` the residual is the generating function of the
    balance-equation violations, which avoids the ``1/x`` factor.
    """
    pi = d.probs
    L, N = pi.shape[0] - 1, pi.shape[1] - 1
    ii = np.arange(L + 1)
    jj = np.arange(N + 1)
    gamma = pi.sum(axis=1)
    jpi = pi * jj[None, :]
    r_table = None
    worst = 0.0
    for x, y in grid:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise DomainError(f"grid point ({x}, {y}) outside [0, 1]^2")
        xi = x ** ii
        yj = y ** jj
        if x < x_switch:
            if r_table is None:
                r_table = balance_residuals(d, p)
            res = xi @ r_table @ yj
        else:
            P = xi @ pi @ yj
            # y * d/dy [P(x,y) - P(0,y)] = sum_{i>=1} j pi_ij x^i y^j
            yD = xi[1:] @ jpi[1:] @ yj
            Pxy1 = gamma @ (x * y) ** ii
            res = (p.nu + p.lam * (1 - x)) * P + p.mu * (1 - 1 / x) * yD - p.nu * Pxy1
        worst = max(worst, abs(float(res)))
    return worst


def limit_nu_inf(p: ModelParams, tail_tol: float = 1e-15) -> JointDist:
    """Fast-control limit: Poisson(rho) on the diagonal, zero elsewhere."""
    L = int(stats.poisson.isf(tail_tol, p.rho)) + 1
    probs = np.zeros((L + 1, L + 1))
    k = np.arange(L + 1)
    probs[k, k] = stats.poisson.pmf(k, p.rho)
    return JointDist(probs, source="limit-nu-inf")


def conjecture_pgf(x: float, y: float, lam: float) -> float:
    """Conjectured slow-control limit of the pgf of ``(nu*Q, nu*S)``.

    Mixture with equal weights of an exponential with mean ``lam`` on
    each axis. Unproven; intended for comparison with simulation only.
    """
    if not (0.0 < x <= 1.0 and 0.0 < y <= 1.0):
        raise DomainError("conjecture_pgf needs x, y in (0, 1]")
    return 0.5 / (1.0 - lam * math.log(x)) + 0.5 / (1.0 - lam * math.log(y))


def params(lam: float, mu: float, nu: float) -> ModelParams:
    return ModelParams(lam, mu, nu, variant=Variant.CONTROLLER_INFINITE)
