"""Event-driven simulation of the controller and observer models.

Between events the state ``(Q, S)`` is constant, so all estimators are
time integrals of functions of the state. Steady-state confidence
intervals come from batch means over the post-warmup horizon.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import JointDist, ModelParams, Variant, validate_params

try:
    from numba import njit
except ImportError:  # pragma: no cover - pure Python fallback, slow but correct
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

CHUNK = 1 << 16
_VARIANT_CODE = {
    Variant.CONTROLLER_INFINITE: 0,
    Variant.CONTROLLER_FINITE: 1,
    Variant.OBSERVER_MM1: 2,
    Variant.OBSERVER_MMINF: 3,
}

# fixed feature columns of the batch accumulator
F_Q, F_S, F_EMPTY, F_QAXIS, F_SAXIS, F_QAXIS_SCALED, F_SAXIS_SCALED = range(7)
N_FIXED = 7

# state vector slots
_Q, _S, _T, _POS, _DRAIN_ON, _DRAIN_START, _DRAIN_PRIOR, _EVENTS = range(8)


@njit(cache=True, nogil=True)
def _advance(st, variant, lam, mu, nu, smax, rates, horizon, warmup, batch_len, nb,
             K, log_gx, log_gy, nspeed, expo, unif,
             B, joint, up, down, ctl_hist, drain_sum, drain_sq, drain_cnt):
    qcap = joint.shape[0] - 1
    scap = joint.shape[1] - 1
    ng = log_gx.shape[0]
    nf = B.shape[1]
    feat = np.zeros(nf)
    q = int(st[_Q])
    s = int(st[_S])
    t = st[_T]
    pos = int(st[_POS])
    n = expo.shape[0]
    while pos < n:
        if q == 0:
            dep = 0.0
        elif variant == 0:
            dep = s * mu
        elif variant == 1:
            dep = rates[s]
        elif variant == 2:
            dep = mu
        else:
            dep = q * mu
        total = lam + dep + nu
        dt = expo[pos] / total
        u = unif[pos] * total
        pos += 1
        t_end = t + dt
        stop = t_end >= horizon
        if stop:
            t_end = horizon
        # accumulate the holding interval
        if t_end > warmup:
            a = t if t > warmup else warmup
            feat[F_Q] = q
            feat[F_S] = s
            feat[F_EMPTY] = 1.0 if q == 0 else 0.0
            qaxis = 1.0 if (s <= K and q > K) else 0.0
            saxis = 1.0 if (q <= K and s > K) else 0.0
            feat[F_QAXIS] = qaxis
            feat[F_SAXIS] = saxis
            feat[F_QAXIS_SCALED] = nu * q * qaxis
            feat[F_SAXIS_SCALED] = nu * s * saxis
            for g in range(ng):
                feat[N_FIXED + g] = math.exp(nu * (q * log_gx[g] + s * log_gy[g]))
            if nspeed > 0:
                for k in range(nspeed):
                    feat[N_FIXED + ng + k] = 0.0
                if s == smax and q > K:
                    feat[N_FIXED + ng + nspeed - 1] = 1.0
                else:
                    feat[N_FIXED + ng + s] = 1.0
            while a < t_end:
                b = int((a - warmup) / batch_len)
                if b >= nb:
                    b = nb - 1
                edge = warmup + (b + 1) * batch_len
                if b == nb - 1 or edge > t_end:
                    edge = t_end
                w = edge - a
                for f in range(nf):
                    B[b, f] += w * feat[f]
                a = edge
            if q <= qcap and s <= scap:
                joint[q, s] += t_end - (t if t > warmup else warmup)
        if stop:
            t = horizon
            break
        t = t_end
        counted = t >= warmup
        if u < lam:
            if counted and q <= qcap:
                up[q] += 1
            q += 1
        elif u < lam + dep:
            q -= 1
            if counted and q <= qcap:
                down[q] += 1
            if st[_DRAIN_ON] > 0 and q <= K:
                st[_DRAIN_ON] = 0.0
                if st[_DRAIN_START] >= warmup:
                    d = nu * (t - st[_DRAIN_START])
                    j = int(st[_DRAIN_PRIOR])
                    drain_sum[j] += d
                    drain_sq[j] += d * d
                    drain_cnt[j] += 1
        else:
            if counted:
                ctl_hist[q if q <= qcap else qcap + 1] += 1
            prior = s
            if variant == 1:
                s = q if q < smax else smax
                if prior != smax and rates[prior] < lam and s == smax and q > K:
                    st[_DRAIN_ON] = 1.0
                    st[_DRAIN_START] = t
                    st[_DRAIN_PRIOR] = prior
            else:
                s = q
        st[_EVENTS] += 1
    st[_Q] = q
    st[_S] = s
    st[_T] = t
    st[_POS] = pos
    return t >= horizon


@dataclass(frozen=True)
class SimConfig:
    params: ModelParams
    horizon: float
    warmup: float | None = None
    batches: int = 30
    seed: int = 0
    scaled: bool = False
    qcap: int = 200
    scap: int | None = None
    pgf_grid: tuple = ()
    threshold: int | None = None
    profile: tuple | None = None
    init: tuple = (0, 0)

    def __post_init__(self):
        if self.warmup is None:
            object.__setattr__(self, "warmup", 0.1 * self.horizon)
        if not self.horizon > self.warmup:
            raise ValueError("horizon must exceed warmup")
        if self.batches < 10:
            raise ValueError("at least 10 batches are required")
        for x, y in self.pgf_grid:
            if not (0.0 < x <= 1.0 and 0.0 < y <= 1.0):
                raise ValueError("pgf grid points must lie in (0, 1]^2")

    @property
    def fluid_threshold(self) -> int:
        if self.threshold is not None:
            return self.threshold
        return math.ceil(self.params.nu ** -0.5)


@dataclass(frozen=True)
class SimEstimate:
    name: str
    point: float
    half_width: float
    batches: int

    @property
    def interval(self) -> tuple[float, float]:
        return self.point - self.half_width, self.point + self.half_width

    def covers(self, value: float) -> bool:
        lo, hi = self.interval
        return lo <= value <= hi


def batch_estimate(name: str, values, level: float = 0.95) -> SimEstimate:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    nb = len(v)
    if nb < 2:
        return SimEstimate(name, float(v.mean()) if nb else math.nan, math.inf, nb)
    tq = stats.t.ppf(0.5 + level / 2, nb - 1)
    return SimEstimate(name, float(v.mean()), float(tq * v.std(ddof=1) / math.sqrt(nb)), nb)


def ratio_estimate(name: str, num, den, level: float = 0.95) -> SimEstimate:
    """Ratio of totals over batches with a delta-method half-width."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    nb = len(num)
    point = num.sum() / den.sum()
    z = num - point * den
    tq = stats.t.ppf(0.5 + level / 2, nb - 1)
    hw = tq * z.std(ddof=1) / math.sqrt(nb) / den.mean()
    return SimEstimate(name, float(point), float(hw), nb)


@dataclass
class SimResult:
    config: SimConfig
    estimates: dict
    batch_integrals: np.ndarray
    batch_length: float
    joint: JointDist
    up: np.ndarray
    down: np.ndarray
    control_hist: np.ndarray
    drain_sum: np.ndarray
    drain_sq: np.ndarray
    drain_cnt: np.ndarray
    events: int
    ergodic: bool
    extra: dict = field(default_factory=dict)

    def batch_means(self, column: int) -> np.ndarray:
        return self.batch_integrals[:, column] / self.batch_length

    def __getitem__(self, name: str) -> SimEstimate:
        return self.estimates[name]


def _service_rates(p: ModelParams, profile) -> np.ndarray:
    if p.variant is Variant.CONTROLLER_FINITE:
        if profile is not None:
            rates = np.asarray(profile, dtype=float)
            if rates.shape != (p.smax + 1,) or np.any(np.diff(rates) <= 0):
                raise ValueError("profile must be strictly increasing with smax + 1 entries")
            return rates
        return p.mu * np.arange(p.smax + 1, dtype=float)
    return np.zeros(1)


def simulate(cfg: SimConfig) -> SimResult:
    """Run one replication; reproducible from ``cfg.seed``."""
    p = cfg.params
    validate_params(p, allow_unstable=True)
    variant = _VARIANT_CODE[p.variant]
    finite = p.variant is Variant.CONTROLLER_FINITE
    smax = int(p.smax) if finite else -1
    rates = _service_rates(p, cfg.profile)
    nspeed = smax + 2 if finite else 0
    grid = np.asarray(cfg.pgf_grid, dtype=float).reshape(-1, 2)
    log_gx = np.log(grid[:, 0]) if len(grid) else np.zeros(0)
    log_gy = np.log(grid[:, 1]) if len(grid) else np.zeros(0)
    nf = N_FIXED + len(grid) + nspeed
    nb = cfg.batches
    batch_len = (cfg.horizon - cfg.warmup) / nb
    scap = cfg.scap if cfg.scap is not None else (smax if finite else cfg.qcap)
    B = np.zeros((nb, nf))
    joint = np.zeros((cfg.qcap + 1, scap + 1))
    up = np.zeros(cfg.qcap + 1, dtype=np.int64)
    down = np.zeros(cfg.qcap + 1, dtype=np.int64)
    ctl = np.zeros(cfg.qcap + 2, dtype=np.int64)
    dsum = np.zeros(max(smax, 0) + 1)
    dsq = np.zeros_like(dsum)
    dcnt = np.zeros(len(dsum), dtype=np.int64)
    st = np.zeros(8)
    st[_Q], st[_S] = cfg.init
    hold_ss, pick_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    hold_rng = np.random.Generator(np.random.PCG64(hold_ss))
    pick_rng = np.random.Generator(np.random.PCG64(pick_ss))
    K = cfg.fluid_threshold
    done = False
    while not done:
        expo = hold_rng.standard_exponential(CHUNK)
        unif = pick_rng.random(CHUNK)
        st[_POS] = 0
        done = _advance(st, variant, p.lam, p.mu, p.nu, smax, rates, cfg.horizon, cfg.warmup,
                        batch_len, nb, K, log_gx, log_gy, nspeed, expo, unif,
                        B, joint, up, down, ctl, dsum, dsq, dcnt)
    span = cfg.horizon - cfg.warmup
    scale = p.nu if cfg.scaled else 1.0
    means = B / batch_len
    est = {
        "EQ": batch_estimate("EQ", scale * means[:, F_Q]),
        "ES": batch_estimate("ES", scale * means[:, F_S]),
        "P(Q=0)": batch_estimate("P(Q=0)", means[:, F_EMPTY]),
    }
    jd = JointDist(joint / span, source="simulation", meta={"seed": cfg.seed})
    return SimResult(cfg, est, B, batch_len, jd, up, down, ctl, dsum, dsq, dcnt,
                     int(st[_EVENTS]), p.is_ergodic())


def replicate(cfg: SimConfig, n: int, workers: int = 1) -> list[SimResult]:
    """Independent replications with seeds derived from ``cfg.seed``."""
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0])
             for s in np.random.SeedSequence(cfg.seed).spawn(n)]
    cfgs = [SimConfig(**{**cfg.__dict__, "seed": sd}) for sd in seeds]
    if workers <= 1:
        return [simulate(c) for c in cfgs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(simulate, cfgs))


# --- probes ------------------------------------------------------------------

@dataclass(frozen=True)
class ConjectureProbe:
    q_axis_fraction: SimEstimate
    s_axis_fraction: SimEstimate
    q_axis_mean: SimEstimate
    s_axis_mean: SimEstimate
    pgf_samples: tuple  # (x, y, SimEstimate, conjectured value)
    threshold: int

    @property
    def fitted_rates(self) -> tuple[float, float]:
        """Exponential MLE rates (1 / mean) of the scaled mass on each axis."""
        return 1.0 / self.q_axis_mean.point, 1.0 / self.s_axis_mean.point


DEFAULT_PROBE_GRID = ((0.5, 1.0), (1.0, 0.5), (0.5, 0.5), (0.8, 0.3))


def conjecture_probe(cfg: SimConfig) -> ConjectureProbe:
    """Axis occupation and scaled-coordinate statistics at slow control."""
    from .analytic_infinite import conjecture_pgf

    p = cfg.params
    if not cfg.scaled:
        raise ValueError("the conjecture probe needs a scaled configuration")
    if p.nu > 1e-2:
        raise ValueError("the conjecture probe is meant for nu <= 1e-2")
    if not cfg.pgf_grid:
        cfg = SimConfig(**{**cfg.__dict__, "pgf_grid": DEFAULT_PROBE_GRID})
    res = simulate(cfg)
    m = res.batch_integrals
    L = res.batch_length
    samples = []
    for g, (x, y) in enumerate(cfg.pgf_grid):
        e = batch_estimate(f"P({x},{y})", m[:, N_FIXED + g] / L)
        samples.append((x, y, e, conjecture_pgf(x, y, p.lam)))
    return ConjectureProbe(
        batch_estimate("q_axis_fraction", m[:, F_QAXIS] / L),
        batch_estimate("s_axis_fraction", m[:, F_SAXIS] / L),
        ratio_estimate("q_axis_mean", m[:, F_QAXIS_SCALED], m[:, F_QAXIS]),
        ratio_estimate("s_axis_mean", m[:, F_SAXIS_SCALED], m[:, F_SAXIS]),
        tuple(samples),
        cfg.fluid_threshold,
    )


@dataclass(frozen=True)
class FluidProbe:
    labels: tuple
    occupancy: tuple  # SimEstimate per label, fluid-cycle order
    fluid_unstable: SimEstimate
    fluid_stable: SimEstimate
    normal: SimEstimate
    drain_means: dict  # prior speed -> (mean, half_width, count)
    threshold: int

    def occupancy_points(self) -> np.ndarray:
        return np.array([e.point for e in self.occupancy])


def fluid_probe(cfg: SimConfig) -> FluidProbe:
    """Phase fractions and speed occupancy of the finite controller at slow control."""
    p = cfg.params
    if p.variant is not Variant.CONTROLLER_FINITE:
        raise ValueError("the fluid probe applies to the finite controller")
    validate_params(p)
    if p.nu > 1e-2:
        raise ValueError("the fluid probe is meant for nu <= 1e-2")
    res = simulate(cfg)
    s = int(p.smax)
    ng = len(cfg.pgf_grid)
    occ = res.batch_integrals[:, N_FIXED + ng:N_FIXED + ng + s + 2] / res.batch_length
    minus = [j for j in range(s + 1) if j * p.mu < p.lam]
    plus = [j for j in range(s + 1) if j * p.mu > p.lam]
    order = minus + plus + [s + 1]
    labels = tuple([str(j) for j in minus + plus] + [f"{s}f"])
    occupancy = tuple(batch_estimate(lab, occ[:, k]) for lab, k in zip(labels, order))
    unstable = occ[:, minus].sum(axis=1) if minus else np.zeros(len(occ))
    stable = occ[:, s + 1]
    drains = {}
    for j in minus:
        c = int(res.drain_cnt[j])
        if c:
            mean = res.drain_sum[j] / c
            var = max(res.drain_sq[j] / c - mean ** 2, 0.0)
            hw = stats.t.ppf(0.975, max(c - 1, 1)) * math.sqrt(var / c)
            drains[j] = (float(mean), float(hw), c)
    return FluidProbe(
        labels, occupancy,
        batch_estimate("fluid_unstable", unstable),
        batch_estimate("fluid_stable", stable),
        batch_estimate("normal", 1.0 - unstable - stable),
        drains, cfg.fluid_threshold,
    )


def taboo_sojourn(p: ModelParams, reps: int = 2000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo expected sojourn times on a level before first passage one level down.

    Starts from ``(n, i)`` with ``n = smax`` for each speed ``i``; returns the
    estimated matrix and 95% half-widths. Multiplied by ``lam`` it
    estimates the rate matrix ``R``.
    """
    validate_params(p)
    s = int(p.smax)
    rng = np.random.Generator(np.random.PCG64(seed))
    est = np.zeros((s + 1, s + 1))
    hw = np.zeros_like(est)
    for i in range(s + 1):
        samples = np.zeros((reps, s + 1))
        for r in range(reps):
            lvl, spd = 0, i  # level relative to the start level
            while True:
                dep = spd * p.mu
                total = p.lam + dep + p.nu
                dt = rng.exponential(1.0 / total)
                if lvl == 0:
                    samples[r, spd] += dt
                u = rng.random() * total
                if u < p.lam:
                    lvl += 1
                elif u < p.lam + dep:
                    lvl -= 1
                    if lvl < 0:
                        break
                else:
                    spd = s  # queue is at least smax on these levels
        est[i] = samples.mean(axis=0)
        hw[i] = 1.96 * samples.std(axis=0, ddof=1) / math.sqrt(reps)
    return est, hw
