"""Brute-force stationary distributions on truncated state spaces.

Every model variant is a continuous-time chain on pairs ``(i, j)`` of
queue length and speed (or last observed length). The chain is truncated
at ``i <= qmax``; arrivals out of ``qmax`` are dropped, which biases the
result by at most the mass found on the boundary level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .core import (
    JointDist,
    ModelParams,
    NoConvergence,
    SingularSystem,
    TruncationTooSmall,
    Variant,
    validate_params,
)

DIRECT_MAX_STATES = 2_000_000


@dataclass(frozen=True)
class TruncatedChain:
    qmax: int
    jmax: int
    generator: sparse.csr_matrix
    variant: Variant

    @property
    def n_states(self) -> int:
        return (self.qmax + 1) * (self.jmax + 1)

    def index(self, i, j):
        return i * (self.jmax + 1) + j


def _speed_rates(p: ModelParams, jmax: int, profile) -> np.ndarray:
    if profile is None:
        return p.mu * np.arange(jmax + 1, dtype=float)
    rates = np.asarray(profile, dtype=float)
    if len(rates) != jmax + 1:
        raise ValueError(f"speed profile needs {jmax + 1} entries, got {len(rates)}")
    return rates


def build_chain(p: ModelParams, qmax: int, jmax: int | None = None,
                profile=None) -> TruncatedChain:
    """Assemble the truncated generator for any model variant.

    ``profile`` optionally replaces the finite controller's service rate
    ``j*mu`` at speed ``j`` by ``profile[j]``.
    """
    validate_params(p)
    v = p.variant
    if v is Variant.CONTROLLER_FINITE:
        smax = int(p.smax)
        if jmax is None:
            jmax = smax
        if jmax != smax or qmax < smax:
            raise ValueError("finite controller needs jmax == smax <= qmax")
    else:
        if jmax is None:
            jmax = qmax
        if jmax != qmax:
            raise ValueError("diagonal-jump variants need jmax == qmax")
    if profile is not None and v is not Variant.CONTROLLER_FINITE:
        raise ValueError("speed profiles apply to the finite controller only")

    nj = jmax + 1
    I, J = np.meshgrid(np.arange(qmax + 1), np.arange(nj), indexing="ij")
    I = I.ravel()
    J = J.ravel()
    idx = I * nj + J
    rows, cols, vals = [], [], []

    up = I < qmax
    rows.append(idx[up]); cols.append(idx[up] + nj); vals.append(np.full(up.sum(), p.lam))

    if v is Variant.CONTROLLER_INFINITE:
        dep = p.mu * J
    elif v is Variant.CONTROLLER_FINITE:
        dep = _speed_rates(p, jmax, profile)[J]
    elif v is Variant.OBSERVER_MM1:
        dep = np.full(I.shape, p.mu)
    else:
        dep = p.mu * I
    down = (I >= 1) & (dep > 0)
    rows.append(idx[down]); cols.append(idx[down] - nj); vals.append(dep[down])

    if v is Variant.CONTROLLER_FINITE:
        target = np.minimum(I, jmax)
    else:
        target = I
    ctl = target != J
    rows.append(idx[ctl]); cols.append(I[ctl] * nj + target[ctl]); vals.append(np.full(ctl.sum(), p.nu))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = (qmax + 1) * nj
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = np.asarray(off.sum(axis=1)).ravel()
    G = (off - sparse.diags(diag)).tocsr()
    return TruncatedChain(qmax, jmax, G, v)


def _power_solve(G: sparse.csr_matrix, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Uniformised power iteration with periodic Aitken extrapolation."""
    n = G.shape[0]
    Lam = 1.0001 * float(np.abs(G.diagonal()).max())
    PT = (sparse.identity(n, format="csr") + G / Lam).T.tocsr()
    x = np.full(n, 1.0 / n)
    hist = []
    for it in range(max_iter):
        nxt = PT @ x
        nxt /= nxt.sum()
        if np.abs(nxt - x).max() < tol:
            return nxt
        x = nxt
        hist.append(x)
        if len(hist) == 3:
            x0, x1, x2 = hist
            d2 = x2 - 2 * x1 + x0
            with np.errstate(divide="ignore", invalid="ignore"):
                acc = np.where(np.abs(d2) > 1e-300, x2 - (x2 - x1) ** 2 / d2, x2)
            if np.all(acc >= 0) and np.all(np.isfinite(acc)):
                x = acc / acc.sum()
            hist = []
    raise NoConvergence("power iteration did not converge")


def stationary_vector(G: sparse.spmatrix, method: str = "auto") -> np.ndarray:
    n = G.shape[0]
    if method == "power" or (method == "auto" and n > DIRECT_MAX_STATES):
        return _power_solve(sparse.csr_matrix(G))
    A = sparse.csr_matrix(G.T).tolil()
    A[0, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[0] = 1.0
    with np.errstate(all="raise"):
        try:
            x = splinalg.spsolve(A.tocsc(), rhs)
        except (RuntimeError, FloatingPointError) as exc:
            raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("sparse solve returned non-finite values")
    x = np.where(x < 0, np.where(x > -1e-13, 0.0, x), x)
    if np.any(x < 0):
        raise SingularSystem("stationary vector has negative entries")
    return x / x.sum()


def stationary(chain: TruncatedChain, boundary_tol: float = 1e-10,
               residual_tol: float = 1e-11, method: str = "auto") -> JointDist:
    """Solve ``pi G = 0`` with ``sum(pi) = 1`` on the truncated chain."""
    x = stationary_vector(chain.generator, method=method)
    residual = float(np.abs(chain.generator.T @ x).max())
    if residual > residual_tol:
        raise SingularSystem(f"balance residual {residual:.3e} above {residual_tol:.0e}")
    probs = x.reshape(chain.qmax + 1, chain.jmax + 1)
    boundary = float(probs[-1].sum())
    if chain.variant is not Variant.CONTROLLER_FINITE:
        boundary += float(probs[:, -1].sum() - probs[-1, -1])
    if boundary > boundary_tol:
        raise TruncationTooSmall(
            f"mass {boundary:.3e} on the truncation boundary at qmax={chain.qmax}")
    return JointDist(probs, source=f"oracle-{chain.variant.value}",
                     meta={"qmax": chain.qmax, "residual": residual, "boundary_mass": boundary})


def solve(p: ModelParams, qmax: int, boundary_tol: float = 1e-10, **kw) -> JointDist:
    return stationary(build_chain(p, qmax, **kw), boundary_tol=boundary_tol)


def conditional_chain(p: ModelParams, j: int, qmax: int, boundary_tol: float = 1e-10) -> np.ndarray:
    """Stationary law of the M/M/1(lam, j*mu) queue restarted in ``j`` at rate ``nu``."""
    if j < 0 or qmax < j:
        raise ValueError("need 0 <= j <= qmax")
    n = qmax + 1
    i = np.arange(n)
    rows = [i[:-1], i[1:]]
    cols = [i[1:], i[:-1]]
    vals = [np.full(n - 1, p.lam), np.full(n - 1, j * p.mu)]
    restart = i != j
    rows.append(i[restart]); cols.append(np.full(restart.sum(), j)); vals.append(np.full(restart.sum(), p.nu))
    off = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n)).tocsr()
    off.eliminate_zeros()
    G = off - sparse.diags(np.asarray(off.sum(axis=1)).ravel())
    x = stationary_vector(G)
    if x[-1] > boundary_tol:
        raise TruncationTooSmall(f"mass {x[-1]:.3e} at qmax={qmax}")
    return x
