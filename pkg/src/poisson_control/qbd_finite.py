"""Controller with finite maximum speed: matrix-geometric solution.

Levels are queue lengths, phases are speeds ``0..smax``. From level
``smax`` on the blocks are level independent and the rate matrix ``R`` is
diagonal plus a last column, known in closed form. The module also holds
the ``smax = 1`` closed forms and both time-scale limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .analytic_infinite import beta_j
from .core import (
    DomainError,
    JointDist,
    ModelError,
    ModelParams,
    NumericalError,
    SingularSystem,
    UnstableFinite,
    Variant,
    divided_power_difference,
    validate_params,
)


class NonIncreasingProfile(ModelError):
    pass


class BoundarySpeed(ModelError):
    """Some speed drains exactly at the arrival rate (``j*mu == lam``)."""


def params(lam: float, mu: float, nu: float, smax: int) -> ModelParams:
    return ModelParams(lam, mu, nu, smax, Variant.CONTROLLER_FINITE)


def _check(p: ModelParams) -> int:
    if p.variant is not Variant.CONTROLLER_FINITE:
        p = p.replace(variant=Variant.CONTROLLER_FINITE)
    validate_params(p)
    return int(p.smax)


@dataclass(frozen=True)
class QbdBlocks:
    """Generator blocks; ``a1(level)`` is the local block of a level.

    Level 0 has no down block, so its local block carries no service
    outflow and ``A0 + a1(0)`` has zero row sums. For ``level >= 1``,
    ``A0 + a1(level) + A2`` has zero row sums.
    """

    A0: np.ndarray
    A2: np.ndarray
    smax: int
    nu: float
    lam: float

    def a1(self, level: int) -> np.ndarray:
        m = min(level, self.smax)
        rates = np.diag(self.A2) if level >= 1 else np.zeros(self.smax + 1)
        A1 = np.zeros((self.smax + 1, self.smax + 1))
        A1[:, m] = self.nu
        np.fill_diagonal(A1, -(self.lam + rates + self.nu))
        A1[m, m] = -(self.lam + rates[m])
        return A1

    @property
    def A1(self) -> np.ndarray:
        return self.a1(self.smax)


def build_blocks(p: ModelParams, profile=None) -> QbdBlocks:
    """Blocks of the level-dependent QBD generator.

    ``profile[j]`` replaces the service rate ``j*mu`` at speed ``j``; it must
    be strictly increasing.
    """
    s = _check(p)
    if profile is None:
        rates = p.mu * np.arange(s + 1, dtype=float)
    else:
        rates = np.asarray(profile, dtype=float)
        if rates.shape != (s + 1,):
            raise ValueError(f"profile needs {s + 1} entries")
        if np.any(np.diff(rates) <= 0) or rates[0] < 0:
            raise NonIncreasingProfile("speed profile must be non-negative and strictly increasing")
    return QbdBlocks(p.lam * np.eye(s + 1), np.diag(rates), s, p.nu, p.lam)


@dataclass(frozen=True)
class RMatrix:
    diag: np.ndarray
    lastcol: np.ndarray
    smax: int

    def to_array(self) -> np.ndarray:
        R = np.diag(self.diag)
        R[:, -1] = self.lastcol
        return R

    @property
    def spectral_radius(self) -> float:
        return float(self.diag.max())


def r_matrix(p: ModelParams) -> RMatrix:
    """Closed-form minimal solution of ``A0 + R A1 + R^2 A2 = 0``."""
    s = _check(p)
    lam, mu, nu = p.lam, p.mu, p.nu
    diag = np.empty(s + 1)
    last = np.empty(s + 1)
    diag[0] = lam / (lam + nu)
    last[0] = lam / (s * mu)
    for i in range(1, s):
        b = beta_j(p, i)
        diag[i] = b.beta_tilde
        last[i] = lam * (1.0 - b.beta) / (s * mu)
    diag[s] = last[s] = lam / (s * mu)
    return RMatrix(diag, last, s)


def r_residual(p: ModelParams, R: RMatrix | np.ndarray | None = None) -> float:
    blocks = build_blocks(p)
    if R is None:
        R = r_matrix(p)
    Ra = R.to_array() if isinstance(R, RMatrix) else R
    return float(np.abs(blocks.A0 + Ra @ blocks.A1 + Ra @ Ra @ blocks.A2).max())


def r_power(R: RMatrix, n: int) -> np.ndarray:
    """``R**n`` from the diagonal-plus-last-column structure."""
    if n < 0:
        raise ValueError("n must be non-negative")
    s = R.smax
    out = np.diag(R.diag ** n)
    a = R.diag[s]
    for i in range(s):
        out[i, s] = R.lastcol[i] * divided_power_difference(a, R.diag[i], n)
    out[s, s] = a ** n
    return out


def inv_i_minus_rx(R: RMatrix, x: float) -> np.ndarray:
    """``(I - x R)^{-1}`` in closed form."""
    s = R.smax
    d = 1.0 / (1.0 - R.diag * x)
    out = np.diag(d)
    out[:s, s] = R.lastcol[:s] * x * d[:s] * d[s]
    return out


@dataclass(frozen=True)
class QbdSolution:
    params: ModelParams
    boundary: tuple
    R: RMatrix
    normalized: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def smax(self) -> int:
        return self.R.smax

    def level(self, n: int) -> np.ndarray:
        s = self.smax
        if n < s - 1:
            return self.boundary[n]
        return self.boundary[s - 1] @ r_power(self.R, n - s + 1)

    def _tail_inverse(self) -> np.ndarray:
        return inv_i_minus_rx(self.R, 1.0)

    def speed_marginal(self) -> np.ndarray:
        s = self.smax
        total = sum(self.boundary[: s - 1], np.zeros(s + 1))
        return total + self.boundary[s - 1] @ self._tail_inverse()

    def mean_q(self) -> float:
        s = self.smax
        head = sum(n * self.boundary[n].sum() for n in range(s - 1))
        Ni = self._tail_inverse()
        Ra = self.R.to_array()
        # sum_{m>=0} (s-1+m) R^m = (s-1)(I-R)^-1 + R (I-R)^-2
        tail = self.boundary[s - 1] @ ((s - 1) * Ni + Ra @ Ni @ Ni)
        return float(head + tail.sum())

    def mean_s(self) -> float:
        return float(np.arange(self.smax + 1) @ self.speed_marginal())

    def p_empty(self) -> float:
        return float(self.level(0).sum())

    def tail_mass_above(self, K: int) -> np.ndarray:
        """Per-speed mass on levels ``n > K`` (``K >= smax - 1``)."""
        s = self.smax
        if K < s - 1:
            raise ValueError("K must be at least smax - 1")
        return self.boundary[s - 1] @ r_power(self.R, K + 2 - s) @ self._tail_inverse()

    def qmax_for(self, tail_tol: float) -> int:
        n = self.smax
        while self.tail_mass_above(n).sum() >= tail_tol:
            n *= 2
        return n

    def to_joint(self, qmax: int | None = None, tail_tol: float = 1e-14) -> JointDist:
        if qmax is None:
            qmax = self.qmax_for(tail_tol)
        s = self.smax
        rows = [self.boundary[n] for n in range(min(s - 1, qmax + 1))]
        if qmax >= s - 1:
            Ra = self.R.to_array()
            v = self.boundary[s - 1]
            for _ in range(s - 1, qmax + 1):
                rows.append(v)
                v = v @ Ra
        return JointDist(np.array(rows), source="qbd-finite", meta={"qmax": qmax})

    def pgf(self, x: float, y: float) -> float:
        return qbd_to_pgf(self, x, y)


def solve_boundary(p: ModelParams, profile=None) -> QbdSolution:
    """Boundary levels ``0..smax-1`` from balance plus normalisation."""
    s = _check(p)
    if profile is not None:
        raise ModelError("the closed-form R path supports the identity speed profile only")
    blocks = build_blocks(p)
    R = r_matrix(p)
    Ra = R.to_array()
    m = s + 1
    nunk = s * m
    # x M = 0 with x = [pi_0, ..., pi_{s-1}]; column block n holds the level-n equation
    M = np.zeros((nunk, nunk))

    def put(row_level, col_level, block):
        M[row_level * m:(row_level + 1) * m, col_level * m:(col_level + 1) * m] += block

    for n in range(s):
        local = blocks.a1(n)
        if n == s - 1:
            local = local + Ra @ blocks.A2
        put(n, n, local)
        if n >= 1:
            put(n - 1, n, blocks.A0)
        if n + 1 <= s - 1:
            put(n + 1, n, blocks.A2)
    norm = np.zeros(nunk)
    norm[: (s - 1) * m] = 1.0
    norm[(s - 1) * m:] = inv_i_minus_rx(R, 1.0).sum(axis=1)
    A = M.T.copy()
    A[0, :] = norm
    rhs = np.zeros(nunk)
    rhs[0] = 1.0
    try:
        x = linalg.solve(A, rhs)
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)) or x.min() < -1e-12:
        raise SingularSystem("boundary solve produced invalid probabilities")
    x = np.clip(x, 0.0, None)
    boundary = tuple(x[n * m:(n + 1) * m] for n in range(s))
    return QbdSolution(p, boundary, R)


def global_balance_residual(sol: QbdSolution, levels: int | None = None) -> float:
    """Max violation of ``pi G = 0`` over levels ``0..levels``."""
    p = sol.params
    blocks = build_blocks(p)
    s = sol.smax
    if levels is None:
        levels = s + 10
    pis = [sol.level(n) for n in range(levels + 2)]
    worst = 0.0
    for n in range(levels + 1):
        r = pis[n] @ blocks.a1(n) + pis[n + 1] @ blocks.A2
        if n >= 1:
            r = r + pis[n - 1] @ blocks.A0
        worst = max(worst, float(np.abs(r).max()))
    return worst


def qbd_to_pgf(sol: QbdSolution, x: float, y: float) -> float:
    """Joint pgf: boundary terms plus the geometric tail via ``(I - xR)^{-1}``."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError("pgf arguments must lie in [0, 1]")
    s = sol.smax
    yv = y ** np.arange(s + 1)
    head = sum((x ** n) * (sol.boundary[n] @ yv) for n in range(s - 1))
    tail = (x ** (s - 1)) * (sol.boundary[s - 1] @ inv_i_minus_rx(sol.R, x) @ yv)
    return float(head + tail)


# --- smax = 1 closed forms -------------------------------------------------

@dataclass(frozen=True)
class ClosedFormS1:
    params: ModelParams
    pi00: float

    @property
    def a(self) -> float:
        return self.params.lam / self.params.mu

    @property
    def b(self) -> float:
        p = self.params
        return p.lam / (p.lam + p.nu)

    def pi(self, n: int) -> tuple[float, float]:
        p = self.params
        a, b = self.a, self.b
        pi_n0 = b ** n * self.pi00
        # (lam+nu)/(lam+nu-mu) * (a^n - b^n) == (lam/mu) * (a^n - b^n)/(a - b)
        pi_n1 = (p.lam / p.nu * a ** n + self.a * divided_power_difference(a, b, n)) * self.pi00
        return pi_n0, pi_n1

    def pgf(self, x: float, y: float) -> float:
        p = self.params
        a, b = self.a, self.b
        ga, gb = 1.0 / (1.0 - a * x), 1.0 / (1.0 - b * x)
        return self.pi00 * (gb + y * (p.lam / p.nu * ga + self.a * x * ga * gb))

    def speed_marginal(self) -> tuple[float, float]:
        p = self.params
        lam, mu, nu = p.lam, p.mu, p.nu
        d = mu * (2 * lam + nu)
        return (mu - lam) * (lam + nu) / d, lam * (lam + mu + nu) / d

    def to_joint(self, tail_tol: float = 1e-15) -> JointDist:
        rate = max(self.a, self.b)
        qmax = int(math.ceil(math.log(tail_tol * (1 - rate)) / math.log(rate))) + 5
        probs = np.array([self.pi(n) for n in range(qmax + 1)])
        return JointDist(probs, source="closed-form-s1")


def closed_form_s1(p: ModelParams) -> ClosedFormS1:
    """``smax = 1``: explicit joint law and pgf."""
    s = _check(p)
    if s != 1:
        raise ModelError("closed_form_s1 needs smax = 1")
    lam, mu, nu = p.lam, p.mu, p.nu
    return ClosedFormS1(p, nu * (mu - lam) / (mu * (2 * lam + nu)))


# --- time-scale limits -----------------------------------------------------

def limit_nu_inf_finite(p: ModelParams, tail_tol: float = 1e-15) -> JointDist:
    """Fast-control limit: M/M/smax queue length with speed ``min(q, smax)``."""
    s = _check(p)
    rho = p.rho
    r = rho / s
    qmax = s + int(math.ceil(math.log(tail_tol * (1 - r)) / math.log(r))) + 5
    w = np.empty(qmax + 1)
    for q in range(qmax + 1):
        j = min(q, s)
        w[q] = math.exp(q * math.log(rho) - math.lgamma(j + 1) - (q - j) * math.log(s))
    w /= w.sum()
    probs = np.zeros((qmax + 1, s + 1))
    probs[np.arange(qmax + 1), np.minimum(np.arange(qmax + 1), s)] = w
    return JointDist(probs, source="limit-nu-inf-finite")


@dataclass(frozen=True)
class FluidCycle:
    """Slow-control cycle structure.

    States are ordered ``S-`` (ascending), ``S+`` (ascending), then the
    fluid-scale copy ``smax_f`` of the top speed.
    """

    s_minus: tuple
    s_plus: tuple
    M: np.ndarray
    theta: np.ndarray
    kappa: float
    psi: np.ndarray
    tau: np.ndarray
    drain_times: dict
    sigma: np.ndarray

    @property
    def labels(self) -> list:
        return [str(j) for j in self.s_minus] + [str(j) for j in self.s_plus] + [f"{self.s_plus[-1]}f"]

    @property
    def smax(self) -> int:
        return self.s_plus[-1]

    def sigma_by_speed(self) -> dict:
        out = {j: v for j, v in zip(self.s_minus + self.s_plus, self.sigma[:-1])}
        out["f"] = float(self.sigma[-1])
        return out


def fluid_cycle(p: ModelParams) -> FluidCycle:
    """Embedded speed chain, its stationary law and the time-stationary speed law."""
    s = _check(p)
    lam, mu = p.lam, p.mu
    speeds = np.arange(s + 1)
    gap = speeds * mu - lam
    if np.any(np.abs(gap) <= 1e-12 * max(lam, 1.0)):
        raise BoundarySpeed("lam/mu is an integer speed; the null-recurrent boundary is excluded")
    s_minus = tuple(int(j) for j in speeds[gap < 0])
    s_plus = tuple(int(j) for j in speeds[gap > 0])
    nm, npl = len(s_minus), len(s_plus)
    n = nm + npl + 1
    M = np.zeros((n, n))
    M[:nm, -1] = 1.0
    for r, i in enumerate(s_plus):
        rho_i = lam / (i * mu)
        row = (1.0 - rho_i) * rho_i ** speeds.astype(float)
        row[s] = rho_i ** s
        M[nm + r, : nm + npl] = row
    M[-1, nm + npl - 1] = 1.0  # smax_f -> smax
    V0 = M[nm:nm + npl, :nm]
    V = M[nm:nm + npl, nm:nm + npl]
    b = np.zeros(npl)
    b[-1] = 1.0
    theta = linalg.solve((np.eye(npl) - V).T, b)
    kappa = float(theta.sum())
    psi = np.concatenate([theta @ V0, theta, [1.0]]) / (2.0 + kappa)
    if np.abs(psi @ M - psi).max() > 1e-12:
        raise NumericalError("embedded-chain stationarity check failed")
    J = np.array(s_minus, dtype=float)
    tau_f = (lam - mu * (theta @ V0) @ J) / (s * mu - lam)
    tau = np.ones(n)
    tau[-1] = tau_f
    drain = {j: (lam - j * mu) / (s * mu - lam) for j in s_minus}
    w = tau * psi
    return FluidCycle(s_minus, s_plus, M, theta, kappa, psi, tau, drain, w / w.sum())


def fluid_pgfs(fc: FluidCycle, p: ModelParams, x: float, y: float) -> tuple[float, float]:
    """Fluid-scale pgf (queue scaled by ``nu``) and normal-scale pgf."""
    if not (0.0 < x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError("fluid pgfs need x in (0, 1] and y in [0, 1]")
    lam, mu = p.lam, p.mu
    s = fc.smax
    nm = len(fc.s_minus)
    lx = math.log(x)
    hat = 0.0
    for k, j in enumerate(fc.s_minus):
        m = lam - j * mu
        hat += fc.sigma[k] / (1.0 - m * lx) * (y ** j + m / (s * mu - lam) * y ** s)
    tilde = 0.0
    for k, j in enumerate(fc.s_plus):
        sj = fc.sigma[nm + k]
        hat += y ** j * sj
        rj = lam / (j * mu)
        tilde += (1.0 - rj) / (1.0 - rj * x) * y ** j * sj
    return float(hat), float(tilde)


def fluid_throughput(fc: FluidCycle, p: ModelParams) -> float:
    """Long-run departure rate implied by the fluid picture (should equal ``lam``)."""
    nm = len(fc.s_minus)
    out = sum(fc.sigma[k] * j * p.mu for k, j in enumerate(fc.s_minus))
    out += fc.sigma[-1] * fc.smax * p.mu
    out += p.lam * fc.sigma[nm:-1].sum()
    return float(out)


def fluid_threshold(nu: float) -> int:
    """Queue lengths above this count as fluid scale at control rate ``nu``."""
    return math.ceil(nu ** -0.5)


def split_speed_marginal(sol: QbdSolution, K: int | None = None) -> np.ndarray:
    """Speed marginal in the fluid-cycle layout ``S-, S+, smax_f``.

    Mass at the top speed with queue above ``K`` is reported as ``smax_f``.
    """
    p = sol.params
    if K is None:
        K = fluid_threshold(p.nu)
    s = sol.smax
    sig = sol.speed_marginal()
    fluid = float(sol.tail_mass_above(K)[s])
    out = np.append(sig, fluid)
    out[s] -= fluid
    order = [j for j in range(s + 1) if j * p.mu < p.lam] + [j for j in range(s + 1) if j * p.mu > p.lam]
    return np.append(out[order], fluid)


def solve(p: ModelParams) -> QbdSolution:
    if p.variant is Variant.CONTROLLER_FINITE and p.lam >= p.smax * p.mu:
        raise UnstableFinite("lam >= smax*mu")
    return solve_boundary(p)
