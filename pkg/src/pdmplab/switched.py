"""Switched flows in a random environment.

Malthus growth with a Markov environment (Feynman-Kac moments and the
almost-sure / moment dichotomy), planar linear switching with a critical
switching rate, one-sided contraction criteria, and the discrete product
chain.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import stats as st
from .core import (DEFAULT_STEP, Box, EnvPath, ModelError, RateMatrix, StepControl,
                   SwitchedSystem, VectorField, advance, integrate_flow, linear_field,
                   occupation_integrals, scalar_linear_field, simulate_ctmc,
                   stationary_distribution)
from .rng import as_generator, as_stream

PLANAR_M0 = np.array([[-1.0, 4.0], [-0.25, -1.0]])
PLANAR_M1 = np.array([[-1.0, -0.25], [4.0, -1.0]])


class PerronError(ModelError):
    pass


class PreconditionError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Malthus model


@dataclass
class MalthusModel:
    q: RateMatrix
    a: np.ndarray
    x0: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.shape != (len(self.q),):
            raise ModelError("growth rates must be indexed by the environment states")
        if not self.x0 > 0:
            raise ModelError("initial population must be positive")

    def system(self) -> SwitchedSystem:
        return SwitchedSystem([scalar_linear_field(ai) for ai in self.a], self.q)

    def exact(self, path: EnvPath, t: float | None = None) -> float:
        """``X_t = X_0 exp(int_0^t a(I_s) ds)`` along a given environment path."""
        if t is None or t == path.horizon:
            return self.x0 * math.exp(path.occupation(self.a))
        keep = path.times < t
        cut = EnvPath(path.times[keep], path.states[keep], t)
        return self.x0 * math.exp(cut.occupation(self.a))

    @property
    def mean_rate(self) -> float:
        return float(stationary_distribution(self.q) @ self.a)


@dataclass
class GrowthRate:
    value: float
    left_vector: np.ndarray


def moment_growth_rate(q: RateMatrix, a, p: float) -> GrowthRate:
    """Perron eigenvalue of ``q + p diag(a)`` with its left eigenvector (sum 1)."""
    if not q.irreducible:
        raise PerronError(f"rate matrix is reducible, components {q.components()}")
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eig((q.q + p * np.diag(a)).T)
    k = int(np.argmax(w.real))
    lam = w[k]
    others = np.delete(w.real, k)
    if abs(lam.imag) > 1e-9 * max(1.0, abs(lam.real)):
        raise PerronError(f"leading eigenvalue {lam} is not real")
    if others.size and np.any(np.abs(others - lam.real) < 1e-12):
        raise PerronError("leading eigenvalue is not simple")
    vec = v[:, k].real
    vec = vec / vec.sum()
    if np.any(vec <= 0):
        raise PerronError("leading left eigenvector is not positive")
    return GrowthRate(float(lam.real), vec)


@dataclass
class GrowthRateCurve:
    p: np.ndarray
    values: np.ndarray
    derivative_at_zero: float

    def rows(self):
        for p, v in zip(self.p, self.values):
            yield [repr(float(p)), repr(float(v))]


def growth_rate_curve(q: RateMatrix, a, ps, h: float = 1e-5) -> GrowthRateCurve:
    ps = np.asarray(ps, dtype=float)
    vals = np.array([moment_growth_rate(q, a, p).value for p in ps])
    d = (moment_growth_rate(q, a, h).value - moment_growth_rate(q, a, -h).value) / (2 * h)
    return GrowthRateCurve(ps, vals, d)


def moment_feynman_kac(q: RateMatrix, a, p: float, t: float, mu0) -> float:
    """``E[X_t^p] / E[X_0^p] = mu0 exp(t(q + p diag a)) 1``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if not q.irreducible:
        raise PerronError("rate matrix is reducible")
    mu0 = np.asarray(mu0, dtype=float)
    if mu0.shape != (len(q),) or np.any(mu0 < 0) or not math.isclose(mu0.sum(), 1.0):
        raise ModelError("mu0 must be a probability vector on the environment states")
    if t == 0:
        return 1.0
    a = np.asarray(a, dtype=float)
    return float(mu0 @ expm(t * (q.q + p * np.diag(a))) @ np.ones(len(q)))


def feynman_kac_monte_carlo(q: RateMatrix, a, p: float, t: float, mu0, n: int, rng) -> st.Estimate:
    """Monte-Carlo estimate of ``E[exp(p int_0^t a(I_s) ds)]``."""
    gen = as_generator(rng)
    y0 = gen.choice(len(q), size=n, p=np.asarray(mu0, dtype=float))
    integrals = occupation_integrals(q, y0, t, a, gen)
    return st.estimate(np.exp(p * integrals))


@dataclass
class DichotomyReport:
    mean_rate: float
    regime: str
    p_star: float | None = None
    window: tuple[float, float] | None = None
    growth_at_p_star: float | None = None


def moment_dichotomy(q: RateMatrix, a, p_max: float = 10.0, tol: float = 1e-12) -> DichotomyReport:
    """Sign of ``nu(a)`` and, for decay, a moment order with decaying moments.

    ``p -> lambda_p`` is convex with ``lambda_0 = 0``, so the set where it is
    negative is an interval ``(0, p0)``; ``p0`` is located by bisection and
    ``p* = p0 / 2`` is reported.
    """
    nu_a = float(stationary_distribution(q) @ np.asarray(a, dtype=float))
    if abs(nu_a) <= tol * max(1.0, float(np.abs(a).max())):
        return DichotomyReport(nu_a, "critical, undetermined")
    if nu_a > 0:
        return DichotomyReport(nu_a, "all moments diverge")

    def lam(p):
        return moment_growth_rate(q, a, p).value

    if lam(p_max) < 0:
        p0 = p_max
    else:
        lo, hi = 0.0, p_max
        # lambda_p < 0 just above zero since its slope there is nu(a) < 0
        while hi - lo > 1e-12 * p_max:
            mid = 0.5 * (lo + hi)
            if lam(mid) < 0:
                lo = mid
            else:
                hi = mid
        p0 = lo
    p_star = 0.5 * p0
    return DichotomyReport(nu_a, "moments of order p < p0 decay", p_star, (0.0, p0), lam(p_star))


def derivative_check(q: RateMatrix, a, h: float = 1e-5) -> float:
    """``|d lambda_p / dp at 0 (central difference) - nu(a)|``."""
    d = (moment_growth_rate(q, a, h).value - moment_growth_rate(q, a, -h).value) / (2 * h)
    return abs(d - float(stationary_distribution(q) @ np.asarray(a, dtype=float)))


# ---------------------------------------------------------------------------
# planar switching and Lyapunov exponents


@dataclass
class PlanarSwitched:
    rate: float
    m0: np.ndarray = field(default_factory=lambda: PLANAR_M0.copy())
    m1: np.ndarray = field(default_factory=lambda: PLANAR_M1.copy())

    def __post_init__(self):
        if not self.rate > 0:
            raise ModelError("switching rate must be positive")
        self.m0 = np.asarray(self.m0, dtype=float)
        self.m1 = np.asarray(self.m1, dtype=float)

    def system(self) -> SwitchedSystem:
        return switched_linear([self.m0, self.m1], RateMatrix.two_state(self.rate, self.rate))


def switched_linear(matrices, env: RateMatrix) -> SwitchedSystem:
    fields = [linear_field(m, name=f"F{i}") for i, m in enumerate(matrices)]
    return SwitchedSystem(fields, env)


def planar_closed_form(x0: float, y0: float, t):
    """Exact flow of the second canonical planar field."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-t)
    x = e * (np.cos(t) * x0 - np.sin(t) * y0 / 4.0)
    y = e * (4.0 * np.sin(t) * x0 + np.cos(t) * y0)
    return x, y


def planar_field_1() -> VectorField:
    f = linear_field(PLANAR_M1, name="F1")
    f.closed_form = lambda x0, t: np.array(planar_closed_form(x0[0], x0[1], t))
    return f


def _propagators(m: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """``exp(m dt)`` for every dt, shape ``(len(dts), d, d)``."""
    w, v = np.linalg.eig(m)
    if np.linalg.cond(v) < 1e8:
        vinv = np.linalg.inv(v)
        p = np.einsum("ij,kj,jl->kil", v, np.exp(np.outer(dts, w)), vinv)
        return p.real
    return np.stack([expm(m * dt) for dt in dts])


def _log_growth(mats: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """``log |P_{n-1} ... P_0 x|`` and the normalized image, by pairwise products."""
    logs = []
    mats = mats.copy()
    d = mats.shape[-1]
    while len(mats) > 1:
        if len(mats) % 2:
            mats = np.concatenate([mats, np.eye(d)[None]])
        mats = mats[1::2] @ mats[0::2]
        norms = np.linalg.norm(mats, axis=(1, 2))
        logs.extend(np.log(norms).tolist())
        mats /= norms[:, None, None]
    y = mats[0] @ x if len(mats) else x
    ny = float(np.linalg.norm(y))
    logs.append(math.log(ny))
    return math.fsum(logs), y / ny


def _linear_matrices(sys: SwitchedSystem) -> list[np.ndarray]:
    mats = [f.matrix for f in sys.fields]
    if any(m is None for m in mats):
        raise ModelError("Lyapunov estimation needs linear fields (matrix attribute)")
    return mats


@dataclass
class LyapunovEstimate:
    chi: float
    se: float
    ci: tuple[float, float]
    per_replica: np.ndarray
    horizon: float
    warning: str | None = None

    @property
    def sign(self) -> int:
        """+1 / -1 when the CI excludes 0, else 0."""
        if self.ci[0] > 0:
            return 1
        if self.ci[1] < 0:
            return -1
        return 0


def lyapunov_replica(sys: SwitchedSystem, horizon: float, rng, burn_in: float | None = None) -> float:
    """One replica of ``(1/t) log |X_t|`` using exact linear propagators.

    The log-norm is measured between ``burn_in`` and ``horizon`` so the
    dependence on the initial direction drops out.
    """
    gen = as_generator(rng)
    mats = _linear_matrices(sys)
    nu = stationary_distribution(sys.env) if len(sys.env) > 1 else np.ones(1)
    y0 = int(gen.choice(len(nu), p=nu))
    theta = gen.uniform(0, 2 * np.pi)
    d = sys.dimension
    x = gen.standard_normal(d) if d != 2 else np.array([np.cos(theta), np.sin(theta)])
    x /= np.linalg.norm(x)
    path = simulate_ctmc(sys.env, y0, horizon, gen)
    burn = 0.1 * horizon if burn_in is None else burn_in
    # split the segment containing the burn-in time
    starts, ends, states = path.times, path.ends, path.states
    k = int(np.searchsorted(starts, burn, side="right")) - 1
    pieces = [(np.asarray(s, float), np.asarray(e, float), np.asarray(y, int))
              for s, e, y in [(starts[:k], ends[:k], states[:k]),
                              ([starts[k]], [burn], [states[k]]),
                              ([burn], [ends[k]], [states[k]]),
                              (starts[k + 1:], ends[k + 1:], states[k + 1:])]]

    def product(s, e, y):
        # pieces of at most one time unit keep every factor well scaled
        n_pieces = np.maximum(1, np.ceil(e - s)).astype(int)
        dts = np.repeat((e - s) / n_pieces, n_pieces)
        y = np.repeat(y, n_pieces)
        out = np.empty((len(dts), d, d))
        for i, m in enumerate(mats):
            sel = y == i
            if sel.any():
                out[sel] = _propagators(m, dts[sel])
        return out

    before = np.concatenate([product(*pieces[0]), product(*pieces[1])])
    after = np.concatenate([product(*pieces[2]), product(*pieces[3])])
    _, xb = _log_growth(before, x) if len(before) else (0.0, x)
    growth, _ = _log_growth(after, xb)
    return growth / (horizon - burn)


def lyapunov_exponent(sys: SwitchedSystem, horizon: float, rng, n_rep: int = 16,
                      ci_width: float | None = None, burn_in: float | None = None,
                      level: float = 0.95) -> LyapunovEstimate:
    """Top Lyapunov exponent with a replica confidence interval."""
    stream = as_stream(rng)
    vals = np.array([lyapunov_replica(sys, horizon, s, burn_in) for s in stream.substreams(n_rep)])
    est = st.estimate(vals)
    ci = est.ci(level)
    warning = None
    rates = sys.env.exit_rates
    if rates.max() > 0 and horizon < 10.0 / rates.max():
        warning = "horizon shorter than ten mean holding times"
    if ci_width is not None and ci[1] - ci[0] > ci_width:
        warning = f"CI width {ci[1] - ci[0]:.3g} exceeds requested {ci_width:.3g}"
    return LyapunovEstimate(est.mean, est.se, ci, vals, horizon, warning)


@dataclass
class CriticalRate:
    lo: float
    hi: float
    resolved: bool
    evaluations: list = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.hi - self.lo


def _resolved_sign(build, rate, rng, horizon, cap, n_rep, log):
    h = horizon
    while True:
        est = lyapunov_exponent(build(rate), h, rng, n_rep)
        log.append((rate, h, est.chi, est.ci[0], est.ci[1]))
        if est.sign != 0 or h >= cap:
            return est.sign, est
        h = min(2 * h, cap)


def critical_rate(matrices, bracket=(0.01, 50.0), tol: float = 0.5, rng=0, n_rep: int = 16,
                  horizon: float = 200.0, horizon_cap: float = 1e4) -> CriticalRate:
    """Bracket the switching rate where the Lyapunov exponent changes sign.

    Symmetric two-state (or complete-graph) switching among ``matrices``.
    Signs are only trusted when the replica CI excludes zero; the horizon is
    doubled up to ``horizon_cap`` otherwise. An unresolved midpoint stops the
    search and the current bracket is returned with ``resolved=False``.
    """
    stream = as_stream(rng)
    lo, hi = map(float, bracket)
    if not 0 < lo < hi:
        raise ValueError("bracket must satisfy 0 < lo < hi")

    def build(rate):
        return switched_linear(matrices, RateMatrix.symmetric(len(matrices), rate))

    log: list = []
    counter = iter(range(10**6))

    def sign_at(rate):
        # slow switching needs several switches inside the horizon
        h = max(horizon, 20.0 / rate)
        return _resolved_sign(build, rate, stream.substream(next(counter)), h,
                              max(horizon_cap, h), n_rep, log)[0]

    s_lo = sign_at(lo)
    if s_lo != -1:
        raise PreconditionError(
            f"exponent at rate {lo} is not resolved negative ({log[-1][2]:.4g}); "
            "try a longer horizon or a smaller lower rate")
    s_hi = sign_at(hi)
    if s_hi != 1:
        raise PreconditionError(
            f"exponent at rate {hi} is not resolved positive ({log[-1][2]:.4g}); "
            "try a longer horizon or a larger upper rate")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        s = sign_at(mid)
        if s == 0:
            return CriticalRate(lo, hi, False, log)
        if s < 0:
            lo = mid
        else:
            hi = mid
    return CriticalRate(lo, hi, True, log)


def lyapunov_scan(matrices, rates, horizon: float, rng, n_rep: int = 16) -> list[tuple]:
    """Rows ``(rate, chi, ci_lo, ci_hi)`` for symmetric switching at each rate."""
    stream = as_stream(rng)
    rows = []
    for i, rate in enumerate(rates):
        sys = switched_linear(matrices, RateMatrix.symmetric(len(matrices), rate))
        est = lyapunov_exponent(sys, horizon, stream.substream(i), n_rep)
        rows.append((float(rate), est.chi, est.ci[0], est.ci[1]))
    return rows


# ---------------------------------------------------------------------------
# contraction


@dataclass
class ContractionCoefficient:
    rho: float
    mode: str
    label: str = "exact"


def _eval_many(f: VectorField, pts: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(f.eval(pts.T), dtype=float)
        if out.shape == pts.T.shape:
            return out.T
    except Exception:
        pass
    return np.array([f.eval(p) for p in pts])


def contraction_coefficient(f: VectorField, region: Box | None = None, mode: str = "analytic-linear",
                            n_samples: int = 10_000, rng=0) -> ContractionCoefficient:
    """One-sided Euclidean contraction rate of a field.

    ``analytic-linear`` needs ``f.matrix`` and returns minus the top
    eigenvalue of its symmetric part. ``sampled`` returns the smallest
    observed ``-<x-y, f(x)-f(y)> / |x-y|^2`` over random pairs in ``region``;
    this is an empirical estimate that can only overshoot the true value.
    """
    if mode == "analytic-linear":
        if f.matrix is None:
            raise ModelError("analytic-linear mode needs a linear field")
        sym = 0.5 * (f.matrix + f.matrix.T)
        return ContractionCoefficient(float(-np.linalg.eigvalsh(sym).max()), mode)
    if mode != "sampled":
        raise ValueError(f"unknown mode {mode!r}")
    if region is None or region.volume <= 0:
        raise ModelError("sampled mode needs a region with positive volume")
    if n_samples < 10_000:
        raise ValueError("sampled mode uses at least 10^4 pairs")
    gen = as_generator(rng)
    xs = region.sample(gen, n_samples)
    ys = region.sample(gen, n_samples)
    dx = xs - ys
    df = _eval_many(f, xs) - _eval_many(f, ys)
    r = -np.einsum("ij,ij->i", dx, df) / np.einsum("ij,ij->i", dx, dx)
    return ContractionCoefficient(float(r.min()), mode, "empirical")


@dataclass
class ContractionReport:
    rho: np.ndarray
    nu: np.ndarray
    criterion: float
    verdict: bool

    def recheck(self) -> bool:
        return math.isclose(self.criterion, float(self.rho @ self.nu), rel_tol=1e-12, abs_tol=1e-15)


def average_criterion(rho, nu) -> ContractionReport:
    rho = np.asarray(rho, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if rho.shape != nu.shape or np.any(nu < 0) or not math.isclose(nu.sum(), 1.0, rel_tol=1e-12):
        raise ModelError("nu must be a probability vector matching rho")
    crit = math.fsum((rho * nu).tolist())
    return ContractionReport(rho, nu, crit, crit > 0)


@dataclass
class CouplingPath:
    times: np.ndarray
    distance: np.ndarray
    bound: np.ndarray

    def holds(self, rtol: float = 1e-8) -> bool:
        return bool(np.all(self.distance <= self.bound * (1 + rtol) + 1e-300))

    def rows(self):
        for t, d, b in zip(self.times, self.distance, self.bound):
            yield [repr(float(t)), repr(float(d)), repr(float(b))]


def two_point_coupling(sys: SwitchedSystem, x0, x0b, horizon: float, rng, rho=None,
                       rate: float | None = None, grid_dt: float = 0.05,
                       step: StepControl = DEFAULT_STEP) -> CouplingPath:
    """Two solutions driven by one environment path, with the contraction bound.

    Integrating ``d|u1-u2|^2/dt <= -2 rho |u1-u2|^2`` gives
    ``|u1(t)-u2(t)| <= |u1(0)-u2(0)| exp(-int_0^t rho(I_s) ds)``, which is the
    bound reported. ``rate`` replaces the environment with complete-graph
    switching at that rate.
    """
    if rate is not None:
        sys = SwitchedSystem(sys.fields, RateMatrix.symmetric(len(sys.fields), rate), sys.state_space)
    if rho is None:
        rho = [contraction_coefficient(f).rho for f in sys.fields]
    rho = np.asarray(rho, dtype=float)
    stream = as_stream(rng)
    gen = stream.substream(0).generator()
    nu = stationary_distribution(sys.env) if len(sys.env) > 1 else np.ones(1)
    path = simulate_ctmc(sys.env, int(gen.choice(len(nu), p=nu)), horizon, gen)
    u = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    v = np.atleast_1d(np.asarray(x0b, dtype=float)).copy()
    d0 = float(np.linalg.norm(u - v))
    times, dist, bound = [0.0], [d0], [d0]
    log_factor = 0.0
    for a, b, y in path.segments():
        f = sys.fields[y]
        marks = np.arange(math.floor(a / grid_dt) + 1, math.ceil(b / grid_dt)) * grid_dt
        marks = marks[(marks > a) & (marks < b)]
        t = a
        for m in [*marks.tolist(), b]:
            u, _, _ = advance(f, u, m - t, step)
            v, _, _ = advance(f, v, m - t, step)
            log_factor -= rho[y] * (m - t)
            t = m
            times.append(t)
            dist.append(float(np.linalg.norm(u - v)))
            bound.append(d0 * math.exp(log_factor))
    return CouplingPath(np.array(times), np.array(dist), np.array(bound))


def averaged_field(sys: SwitchedSystem, nu) -> VectorField:
    nu = np.asarray(nu, dtype=float)
    fields = sys.fields
    mats = [f.matrix for f in fields]
    matrix = sum(w * m for w, m in zip(nu, mats)) if all(m is not None for m in mats) else None
    return VectorField(sys.dimension, lambda x: sum(w * f.eval(x) for w, f in zip(nu, fields)),
                       name="averaged", matrix=matrix)


def averaged_ode_limit(sys: SwitchedSystem, nu, x0, t: float,
                       step: StepControl = DEFAULT_STEP) -> np.ndarray:
    """Solution of ``x' = sum_i nu_i F_i(x)`` at time ``t``."""
    return integrate_flow(averaged_field(sys, nu), x0, t, step)


def lotka_volterra_field(alpha, beta, a, b, c, d) -> VectorField:
    """Competitive Lotka-Volterra field on the positive quadrant."""

    def ev(z):
        x, y = z[0], z[1]
        return np.array([alpha * x * (1 - a * x - b * y), beta * y * (1 - c * x - d * y)])

    return VectorField(2, ev, name="lotka-volterra")


# ---------------------------------------------------------------------------
# product chain


@dataclass
class ProductChain:
    log_y: np.ndarray
    criterion: float
    ci: tuple[float, float]
    verdict: str

    @property
    def y(self) -> np.ndarray:
        return np.exp(self.log_y)


def product_chain(sampler: Callable[[np.random.Generator, int], np.ndarray], n: int, rng,
                  y0: float = 1.0) -> ProductChain:
    """``Y_{k+1} = Theta_k Y_k`` in log space, with the sign of ``E[ln Theta]``."""
    gen = as_generator(rng)
    theta = np.asarray(sampler(gen, n), dtype=float)
    if np.any(theta <= 0):
        raise ModelError(f"sampled multiplier {theta[theta <= 0][0]!r} is not positive")
    logs = np.log(theta)
    log_y = math.log(y0) + np.concatenate([[0.0], np.cumsum(logs)])
    est = st.estimate(logs)
    ci = est.ci() if est.se > 0 else (est.mean, est.mean)
    if ci[0] > 0:
        verdict = "growth"
    elif ci[1] < 0:
        verdict = "extinction"
    elif est.se == 0:
        verdict = "critical"
    else:
        verdict = "undetermined"
    return ProductChain(log_y, est.mean, ci, verdict)
