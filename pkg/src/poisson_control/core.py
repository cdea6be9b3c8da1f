"""Shared model types, parameter validation and small helpers.

All rates are per unit time. A model is described by an arrival rate
``lam``, a per-server service rate ``mu``, a control (inspection) rate
``nu`` and a maximum speed ``smax`` (``math.inf`` for the unbounded
controller).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

INF = math.inf

CLOSED_FORM_TOL = 1e-10
TRUNCATION_TOL = 1e-8


class ModelError(ValueError):
    """Base class for invalid model input."""


class NonPositiveRate(ModelError):
    pass


class UnstableObserver(ModelError):
    pass


class UnstableFinite(ModelError):
    """Finite-speed controller with ``lam >= smax * mu`` (not ergodic)."""


class UnstableFiniteWarning(UserWarning):
    pass


class DomainError(ModelError):
    pass


class NumericalError(RuntimeError):
    """Base class for solver failures."""


class NoConvergence(NumericalError):
    pass


class TruncationTooSmall(NoConvergence):
    pass


class SingularSystem(NumericalError):
    pass


class Variant(str, enum.Enum):
    CONTROLLER_INFINITE = "infinite"
    CONTROLLER_FINITE = "finite"
    OBSERVER_MM1 = "observer-mm1"
    OBSERVER_MMINF = "observer-mminf"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


@dataclass(frozen=True)
class ModelParams:
    lam: float
    mu: float
    nu: float
    smax: float = INF
    variant: Variant = Variant.CONTROLLER_INFINITE

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        smax = self.smax
        if smax is None or (isinstance(smax, float) and math.isinf(smax)):
            smax = INF
        else:
            if int(smax) != smax:
                raise ModelError(f"smax must be a positive integer or inf, got {smax!r}")
            smax = int(smax)
        object.__setattr__(self, "smax", smax)

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    @property
    def finite(self) -> bool:
        return self.smax != INF

    def is_ergodic(self) -> bool:
        if self.variant is Variant.CONTROLLER_FINITE:
            return self.lam < self.smax * self.mu
        if self.variant is Variant.OBSERVER_MM1:
            return self.lam < self.mu
        return True

    def replace(self, **changes) -> "ModelParams":
        d = dict(lam=self.lam, mu=self.mu, nu=self.nu, smax=self.smax, variant=self.variant)
        d.update(changes)
        return ModelParams(**d)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "mu": self.mu,
            "nu": self.nu,
            "smax": None if self.smax == INF else self.smax,
            "variant": self.variant.value,
        }


def validate_params(p: ModelParams, allow_unstable: bool = False) -> ModelParams:
    """Check the model invariants and return ``p`` unchanged.

    A finite controller with ``lam >= smax * mu`` raises
    :class:`UnstableFinite` unless ``allow_unstable`` is set (transient
    simulation), in which case an :class:`UnstableFiniteWarning` is issued.
    """
    for name in ("lam", "mu", "nu"):
        v = getattr(p, name)
        if not (v > 0) or not math.isfinite(v):
            raise NonPositiveRate(f"{name} must be a positive finite rate, got {v!r}")
    if p.variant is Variant.CONTROLLER_FINITE:
        if p.smax == INF or p.smax < 1:
            raise ModelError("the finite controller needs an integer smax >= 1")
        if p.lam >= p.smax * p.mu:
            msg = f"lam={p.lam} >= smax*mu={p.smax * p.mu}: finite controller is not ergodic"
            if not allow_unstable:
                raise UnstableFinite(msg)
            warnings.warn(msg, UnstableFiniteWarning, stacklevel=2)
    elif p.variant is Variant.CONTROLLER_INFINITE:
        if p.smax != INF:
            raise ModelError("the infinite controller needs smax = inf")
    elif p.variant is Variant.OBSERVER_MM1:
        if p.lam >= p.mu:
            raise UnstableObserver(f"M/M/1 observer needs lam < mu, got lam={p.lam}, mu={p.mu}")
    return p


@dataclass(frozen=True)
class JointDist:
    """Truncated table ``probs[i, j]`` of P(Q = i, S = j)."""

    probs: np.ndarray
    source: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.asarray(self.probs, dtype=float)
        if a.ndim != 2:
            raise ValueError("probs must be a 2-D table")
        if np.any(a < -1e-12):
            raise ValueError(f"negative probability {a.min():.3e}")
        total = a.sum()
        if total > 1 + 1e-9:
            raise ValueError(f"table mass {total!r} exceeds 1")
        a = np.clip(a, 0.0, None)
        a.setflags(write=False)
        object.__setattr__(self, "probs", a)

    @property
    def qmax(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def jmax(self) -> int:
        return self.probs.shape[1] - 1

    @property
    def mass_deficit(self) -> float:
        return max(0.0, 1.0 - float(self.probs.sum()))

    def marginal_q(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def marginal_s(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def mean_q(self) -> float:
        return float(np.arange(self.qmax + 1) @ self.marginal_q())

    def mean_s(self) -> float:
        return float(np.arange(self.jmax + 1) @ self.marginal_s())

    def p_empty(self) -> float:
        return float(self.probs[0].sum())

    def pgf(self, x: float, y: float) -> float:
        xi = x ** np.arange(self.qmax + 1)
        yj = y ** np.arange(self.jmax + 1)
        return float(xi @ self.probs @ yj)

    def padded(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        out[: self.probs.shape[0], : self.probs.shape[1]] = self.probs
        return out

    def tv_distance(self, other: "JointDist") -> float:
        shape = (max(self.probs.shape[0], other.probs.shape[0]),
                 max(self.probs.shape[1], other.probs.shape[1]))
        diff = np.abs(self.padded(shape) - other.padded(shape)).sum()
        # unrepresented tail mass counts as disagreement
        diff += abs(self.mass_deficit - other.mass_deficit)
        return 0.5 * float(diff)

    def max_abs_diff(self, other: "JointDist") -> float:
        shape = (max(self.probs.shape[0], other.probs.shape[0]),
                 max(self.probs.shape[1], other.probs.shape[1]))
        return float(np.abs(self.padded(shape) - other.padded(shape)).max())


@dataclass(frozen=True)
class PgfPoint:
    x: float
    y: float
    value: float


def pgf_eval(d: JointDist, x: float, y: float) -> PgfPoint:
    """Evaluate the truncated joint generating function at ``(x, y)``."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DomainError(f"pgf arguments must lie in [0, 1], got ({x}, {y})")
    return PgfPoint(x, y, d.pgf(x, y))


def divided_power_difference(a: float, b: float, n: int, degenerate_tol: float = 1e-9) -> float:
    """Return ``(a**n - b**n) / (a - b)`` for ``a, b > 0`` without cancellation.

    Falls back to the limit ``n * a**(n-1)`` when ``|a - b| < degenerate_tol``.
    """
    if n == 0:
        return 0.0
    if abs(a - b) < degenerate_tol:
        m = 0.5 * (a + b)
        return n * m ** (n - 1)
    t = math.log1p((a - b) / b)
    if n * abs(t) > 30.0:
        # powers are well separated; the direct quotient has no cancellation
        return (a ** n - b ** n) / (a - b)
    return b ** (n - 1) * math.expm1(n * t) / math.expm1(t)
