"""Slow-fast integrate-and-fire process with boundary resets.

The potential obeys ``X' = alpha(Y_eps) F(X)`` on ``(m, c)``; on reaching
``c`` it is reset by a draw from ``mu_y`` where ``y`` is the environment at
the hit. Writing ``G(x) = int_m^x du / F(u)``, the potential between resets
satisfies ``G(X_t) - G(xi) = int alpha(Y_eps)``, so hits are located exactly
on the accumulated celerity clock (the ``clock`` method). The ``flow`` method
integrates the ODE segment by segment and serves as a cross-check.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy import stats as sps

from . import stats as st
from .core import (DEFAULT_STEP, EnvSampler, ModelError, RateMatrix, StepControl, Trajectory,
                   VectorField, advance, integrate_flow, stationary_distribution)
from .rng import as_stream

log = logging.getLogger(__name__)

CONVERGENCE_HEADER = ["epsilon", "n_hits", "tv_pi_star", "ks_mu_bar", "sup_dist_prehit"]


# ---------------------------------------------------------------------------
# reset laws


class PointMass:
    """Dirac law with the frozen-distribution sampling interface."""

    def __init__(self, value: float):
        self.value = float(value)

    def rvs(self, size=None, random_state=None):
        return np.full(() if size is None else size, self.value)

    def cdf(self, x):
        return (np.asarray(x, float) >= self.value).astype(float)

    def __repr__(self):
        return f"PointMass({self.value})"


class Mixture:
    """Finite mixture ``sum_y w_y mu_y`` of frozen laws."""

    def __init__(self, components, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(components) != w.size or np.any(w < 0):
            raise ModelError("mixture needs one non-negative weight per component")
        self.components = list(components)
        self.weights = w / w.sum()

    def rvs(self, size: int, random_state=None):
        gen = random_state if random_state is not None else np.random.default_rng()
        labels = gen.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for k, comp in enumerate(self.components):
            idx = np.flatnonzero(labels == k)
            if idx.size:
                out[idx] = comp.rvs(size=idx.size, random_state=gen)
        return out

    def cdf(self, x):
        x = np.asarray(x, float)
        return sum(w * np.asarray(c.cdf(x), float) for w, c in zip(self.weights, self.components))


def uniform_law(lo: float, hi: float):
    return sps.uniform(loc=lo, scale=hi - lo)


class _ResetBuffer:
    """Batched reset draws, one independent stream per environment state."""

    def __init__(self, laws, stream, m: float, c: float, batch: int = 1024):
        self.laws = laws
        self.gens = [stream.substream(y).generator() for y in range(len(laws))]
        self.m, self.c = m, c
        self.batch = batch
        self.buf = [np.empty(0) for _ in laws]
        self.pos = [0] * len(laws)

    def draw(self, y: int) -> float:
        if self.pos[y] >= self.buf[y].size:
            v = np.asarray(self.laws[y].rvs(size=self.batch, random_state=self.gens[y]), dtype=float)
            if np.any((v <= self.m) | (v >= self.c)):
                bad = v[(v <= self.m) | (v >= self.c)][0]
                raise ModelError(f"reset law for environment {y} produced {bad!r} outside "
                                 f"({self.m}, {self.c})")
            self.buf[y], self.pos[y] = v, 0
        v = self.buf[y][self.pos[y]]
        self.pos[y] += 1
        return float(v)


# ---------------------------------------------------------------------------
# model


@dataclass
class IFSpec:
    """Integrate-and-fire model.

    ``F`` must be positive on ``(m, c)`` and accept arrays. ``G`` (the
    antiderivative of ``1/F`` vanishing at ``m``) and its inverse ``G_inv``
    are computed by quadrature and root finding when not supplied.
    ``initial`` is a number or a frozen law on ``(m, c)``; ``y0=None`` draws
    the initial environment from its stationary law.
    """

    env: RateMatrix
    alpha: np.ndarray
    resets: list
    m: float = 0.0
    c: float = 1.0
    F: Callable = field(default=lambda x: np.ones_like(np.asarray(x, float)))
    G: Callable | None = None
    G_inv: Callable | None = None
    epsilon: float = 1.0
    initial: object = 0.0
    y0: int | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (len(self.env),):
            raise ModelError("one celerity per environment state is required")
        if np.any(~np.isfinite(self.alpha)) or np.any(self.alpha <= 0):
            raise ModelError("celerities must be positive and finite")
        if not self.m < self.c:
            raise ModelError("need m < c")
        if len(self.resets) != len(self.env):
            raise ModelError("one reset law per environment state is required")
        if not self.epsilon > 0:
            raise ModelError("epsilon must be positive")
        if self.G is None:
            self.G = self._numeric_G
        if self.G_inv is None:
            self.G_inv = self._numeric_G_inv
        self.pi = stationary_distribution(self.env)
        self._Gc = float(self.G(self.c))

    @classmethod
    def linear(cls, env: RateMatrix, alpha, resets, m: float = 0.0, c: float = 1.0, **kw) -> "IFSpec":
        """``F = 1``: piecewise linear potential with exact ``G``."""
        return cls(env, alpha, resets, m, c,
                   F=lambda x: np.ones_like(np.asarray(x, float)),
                   G=lambda x: np.asarray(x, float) - m,
                   G_inv=lambda g: np.asarray(g, float) + m, **kw)

    @classmethod
    def two_speed_example(cls, epsilon: float = 1.0, rate: float = 1.0) -> "IFSpec":
        """Celerities 1/2 and 1, symmetric switching, resets uniform on (0, 1/2)."""
        u = uniform_law(0.0, 0.5)
        return cls.linear(RateMatrix.symmetric(2, rate), [0.5, 1.0], [u, u], 0.0, 1.0,
                          epsilon=epsilon, initial=0.25)

    def with_epsilon(self, epsilon: float) -> "IFSpec":
        return IFSpec(self.env, self.alpha, self.resets, self.m, self.c, self.F, self.G,
                      self.G_inv, epsilon, self.initial, self.y0)

    def _numeric_G(self, x):
        def one(v):
            val, _ = integrate.quad(lambda u: 1.0 / float(self.F(u)), self.m, float(v), limit=200)
            return val
        x = np.asarray(x, float)
        return np.vectorize(one)(x) if x.ndim else one(float(x))

    def _numeric_G_inv(self, g):
        def one(v):
            if v <= 0:
                return self.m
            if v >= self._Gc:
                return self.c
            return optimize.brentq(lambda x: float(self.G(x)) - v, self.m, self.c, xtol=1e-13)
        g = np.asarray(g, float)
        return np.vectorize(one)(g) if g.ndim else one(float(g))

    @property
    def alpha_bar(self) -> float:
        return float(self.pi @ self.alpha)

    def flow_field(self, y: int) -> VectorField:
        a = float(self.alpha[y])
        return VectorField(1, lambda x: a * np.asarray(self.F(x), float), name=f"if-flow(y={y})")

    def check_integrability(self, deltas=(1e-2, 1e-3, 1e-4, 1e-5)) -> bool:
        """Advisory: quadrature of ``1/F`` on shrinking inner intervals must settle."""
        vals = []
        for d in deltas:
            w = d * (self.c - self.m)
            v, _ = integrate.quad(lambda u: 1.0 / float(self.F(u)), self.m + w, self.c - w, limit=200)
            vals.append(v)
        ok = all(np.isfinite(vals)) and abs(vals[-1] - vals[-2]) <= 1e-2 * max(1.0, abs(vals[-1]))
        if not ok:
            log.warning("1/F may not be integrable on (%g, %g): inner integrals %s", self.m, self.c, vals)
        return ok

    def draw_initial(self, gen) -> float:
        if isinstance(self.initial, (int, float, np.floating, np.integer)):
            xi = float(self.initial)
        else:
            xi = float(self.initial.rvs(random_state=gen))
        if not self.m < xi < self.c:
            raise ModelError(f"initial potential {xi} outside ({self.m}, {self.c})")
        return xi


@dataclass(frozen=True)
class IFEvent:
    time: float
    env: int
    reset: float


@dataclass
class IFRun:
    events: list
    horizon: float
    xi0: float
    y0: int
    trajectory: Trajectory | None = None

    @property
    def n_hits(self) -> int:
        return len(self.events)

    @property
    def hit_times(self) -> np.ndarray:
        return np.array([e.time for e in self.events])

    @property
    def hit_envs(self) -> np.ndarray:
        return np.array([e.env for e in self.events], dtype=int)

    @property
    def reset_values(self) -> np.ndarray:
        return np.array([e.reset for e in self.events])

    def check(self, spec: IFSpec):
        t = self.hit_times
        assert np.all(np.diff(t) > 0), "hit times not strictly increasing"
        r = self.reset_values
        assert np.all((r > spec.m) & (r < spec.c)), "reset outside (m, c)"


# ---------------------------------------------------------------------------
# simulation


def _setup(spec: IFSpec, rng):
    stream = as_stream(rng)
    init_gen = stream.substream(2).generator()
    xi0 = spec.draw_initial(init_gen)
    y0 = int(init_gen.choice(len(spec.env), p=spec.pi)) if spec.y0 is None else int(spec.y0)
    env = EnvSampler(spec.env, y0, stream.substream(0).generator(), chunk=1 << 14)
    resets = _ResetBuffer(spec.resets, stream.substream(1), spec.m, spec.c)
    return xi0, y0, env, resets


def _env_chunks(spec: IFSpec, sampler: EnvSampler, horizon: float):
    """Yield (real-time starts, real-time ends, states) until past the horizon."""
    eps = spec.epsilon
    while True:
        starts, states = sampler.next_chunk()
        if starts.size == 0:
            return
        ends = np.append(starts[1:], sampler.t)
        yield eps * starts, eps * ends, states
        if eps * starts[-1] > horizon:
            return


def simulate_if(spec: IFSpec, horizon: float, rng, method: str = "clock", record: bool = False,
                step: StepControl = DEFAULT_STEP, max_hits: int = 10**7) -> IFRun:
    """Simulate the process on ``[0, horizon]``.

    The environment runs on its own clock and is rescaled by ``epsilon``
    (substream 0); reset draws use substream 1 and the initial potential and
    environment substream 2, so both methods see the same randomness.
    ``record=True`` also returns the full trajectory (one row per
    environment switch and boundary event) and is meant for short runs.
    """
    if not horizon > 0:
        raise ModelError("horizon must be positive")
    if method == "clock":
        return _simulate_clock(spec, horizon, rng, record, max_hits)
    if method == "flow":
        return _simulate_flow(spec, horizon, rng, record, step, max_hits)
    raise ValueError(f"unknown method {method!r}")


def _simulate_clock(spec, horizon, rng, record, max_hits):
    xi0, y0, sampler, resets = _setup(spec, rng)
    alpha = spec.alpha
    events: list[IFEvent] = []
    need = spec._Gc - float(spec.G(xi0))
    kept = [] if record else None
    done = False
    for s0, s1, y in _env_chunks(spec, sampler, horizon):
        if kept is not None:
            kept.append((s0, s1, y))
        with np.errstate(invalid="ignore"):
            inc = alpha[y] * (s1 - s0)
        cum = np.cumsum(inc)
        # clock value at each segment start (finite even when a hold is infinite)
        prev = np.concatenate([[0.0], cum[:-1]])
        base = 0.0
        while True:
            target = base + need
            i = int(np.searchsorted(cum, target, side="left"))
            if i == cum.size:
                need = target - cum[-1]
                break
            t_hit = s0[i] + (target - prev[i]) / alpha[y[i]]
            if t_hit > horizon:
                done = True
                break
            yh = int(y[i])
            xi = resets.draw(yh)
            events.append(IFEvent(float(t_hit), yh, xi))
            if len(events) > max_hits:
                raise RuntimeError("hit budget exhausted; raise max_hits")
            need = spec._Gc - float(spec.G(xi))
            base = target
        if done:
            break
    run = IFRun(events, horizon, xi0, y0)
    if record:
        run.trajectory = _clock_trajectory(spec, run, kept)
    return run


def _clock_trajectory(spec, run, kept):
    s0 = np.concatenate([k[0] for k in kept])
    y = np.concatenate([k[2] for k in kept])
    keep = s0 <= run.horizon
    s0, y = s0[keep], y[keep]
    traj = Trajectory(1)
    hits = run.events
    xi, t_last, gam = run.xi0, 0.0, 0.0
    g_xi = float(spec.G(xi))
    traj.record(0.0, xi, int(y[0]))

    def x_at(t, y_cur):
        return float(spec.G_inv(g_xi + gam + spec.alpha[y_cur] * (t - t_last)))

    k = 0
    for j in range(1, s0.size + 1):
        seg_end = s0[j] if j < s0.size else run.horizon
        y_cur = int(y[j - 1])
        while k < len(hits) and hits[k].time <= seg_end:
            e = hits[k]
            traj.record(e.time, spec.c, y_cur, "boundary-hit")
            traj.record(e.time, e.reset, y_cur, "reset", pre=(spec.c,))
            xi, t_last, gam, g_xi = e.reset, e.time, 0.0, float(spec.G(e.reset))
            k += 1
        if j < s0.size:
            x = x_at(seg_end, y_cur)
            gam += spec.alpha[y_cur] * (seg_end - t_last)
            t_last = seg_end
            traj.record(seg_end, x, int(y[j]), "env-jump", pre=(x,))
    traj.record(run.horizon, x_at(run.horizon, int(y[-1])), int(y[-1]))
    return traj


def _simulate_flow(spec, horizon, rng, record, step, max_hits):
    xi0, y0, sampler, resets = _setup(spec, rng)
    fields = [spec.flow_field(y) for y in range(len(spec.env))]
    c = spec.c
    threshold = lambda x: float(x[0]) - c  # noqa: E731
    events: list[IFEvent] = []
    traj = Trajectory(1) if record else None
    x = np.array([xi0])
    if traj is not None:
        traj.record(0.0, x, y0)
    for s0, s1, ys in _env_chunks(spec, sampler, horizon):
        for a, b, y in zip(s0, s1, ys):
            if a >= horizon:
                break
            y = int(y)
            if traj is not None and a > 0:
                traj.record(float(a), x, y, "env-jump", pre=tuple(x))
            t, b = float(a), min(float(b), horizon)
            while t < b:
                x_new, dt, hit = advance(fields[y], x, b - t, step, threshold=threshold)
                if not hit:
                    x, t = x_new, b
                    break
                t += dt
                xi = resets.draw(y)
                events.append(IFEvent(t, y, xi))
                if traj is not None:
                    traj.record(t, [c], y, "boundary-hit")
                    traj.record(t, [xi], y, "reset", pre=(c,))
                if len(events) > max_hits:
                    raise RuntimeError("hit budget exhausted; raise max_hits")
                x = np.array([xi])
            if x[0] <= spec.m:
                raise ModelError(f"potential reached the lower bound m={spec.m} at t={t:.6g}")
        else:
            continue
        break
    run = IFRun(events, horizon, xi0, y0)
    if traj is not None:
        traj.record(horizon, x, traj.env[-1])
        run.trajectory = traj
    return run


# ---------------------------------------------------------------------------
# averaged objects


def pi_star(pi, alpha) -> np.ndarray:
    """Boundary law ``pi(y) alpha(y) / sum pi alpha``."""
    pi = np.asarray(pi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if pi.shape != alpha.shape:
        raise ModelError("pi and alpha must have the same length")
    if np.any(pi < 0) or not math.isclose(pi.sum(), 1.0, rel_tol=1e-9):
        raise ModelError("pi must be a probability vector")
    if np.any(alpha <= 0):
        raise ModelError("celerities must be positive")
    w = pi * alpha
    return w / w.sum()


def boundary_celerity_histogram(events, n_states: int) -> np.ndarray:
    """Empirical law of the environment at boundary hits."""
    if len(events) == 0:
        raise ValueError("no boundary hits to summarize")
    envs = np.array([e.env if isinstance(e, IFEvent) else int(e) for e in events], dtype=int)
    return np.bincount(envs, minlength=n_states).astype(float) / envs.size


def tv_standard_error(p, n: int) -> float:
    """Conservative binomial standard error of a TV distance to ``p`` from ``n`` draws."""
    p = np.asarray(p, dtype=float)
    return 0.5 * float(np.sum(np.sqrt(p * (1 - p) / max(n, 1))))


@dataclass
class AveragedSpec:
    alpha_bar: float
    pi_star: np.ndarray
    mu_bar: Mixture


def averaged_spec(spec: IFSpec) -> AveragedSpec:
    ps = pi_star(spec.pi, spec.alpha)
    return AveragedSpec(spec.alpha_bar, ps, Mixture(spec.resets, ps))


def averaged_hit_time(spec: IFSpec, x0: float) -> float:
    return (spec._Gc - float(spec.G(x0))) / spec.alpha_bar


def averaged_flow(spec: IFSpec, x0: float, t, method: str = "exact", step: StepControl = DEFAULT_STEP):
    """Limit potential ``X'(t) = alpha_bar F(X)`` from ``x0``, before its first hit.

    ``exact`` uses ``G``; ``ode`` integrates with RK4 (scalar ``t`` only).
    """
    t_hit = averaged_hit_time(spec, x0)
    if np.any(np.asarray(t) > t_hit * (1 + 1e-12)):
        raise ValueError(f"averaged flow hits the boundary at t={t_hit:.6g}")
    if method == "exact":
        return spec.G_inv(float(spec.G(x0)) + spec.alpha_bar * np.asarray(t, float))
    if method == "ode":
        a = spec.alpha_bar
        f = VectorField(1, lambda x: a * np.asarray(spec.F(x), float))
        return float(integrate_flow(f, [x0], float(t), step)[0])
    raise ValueError(f"unknown method {method!r}")


@dataclass
class JumpMeasureReport:
    ks_statistic: float
    p_value: float
    n: int


def averaged_jump_measure(spec: IFSpec, resets=None) -> tuple[Mixture, JumpMeasureReport | None]:
    """Mixture sampler for ``mu_bar`` and, given reset values, a KS comparison."""
    mix = averaged_spec(spec).mu_bar
    if resets is None:
        return mix, None
    r = np.asarray(resets, dtype=float)
    res = sps.kstest(r, mix.cdf)
    return mix, JumpMeasureReport(float(res.statistic), float(res.pvalue), int(r.size))


def prehit_sup_distance(spec: IFSpec, rng, fraction: float = 0.9, grid: int = 200) -> float:
    """``sup |X_eps - X_bar|`` over ``[0, fraction * t_hit]`` for deterministic ``xi0``.

    The path of ``X_eps`` ignores resets (it is capped at ``c``) so that the
    comparison is well defined on the whole window. The supremum is taken
    over the environment switch times plus a uniform grid.
    """
    if not isinstance(spec.initial, (int, float, np.floating, np.integer)):
        raise ModelError("pre-hit comparison needs a deterministic initial potential")
    xi0 = float(spec.initial)
    t_end = fraction * averaged_hit_time(spec, xi0)
    stream = as_stream(rng)
    init_gen = stream.substream(2).generator()
    y0 = int(init_gen.choice(len(spec.env), p=spec.pi)) if spec.y0 is None else int(spec.y0)
    sampler = EnvSampler(spec.env, y0, stream.substream(0).generator(), chunk=1 << 12)
    s0s, ys = [], []
    for s0, _, y in _env_chunks(spec, sampler, t_end):
        s0s.append(s0)
        ys.append(y)
    s0 = np.concatenate(s0s)
    y = np.concatenate(ys)
    keep = s0 < t_end
    s0, y = s0[keep], y[keep]
    t = np.union1d(np.append(s0, t_end), np.linspace(0.0, t_end, grid + 1))
    idx = np.searchsorted(s0, t, side="right") - 1
    clock_starts = np.concatenate([[0.0], np.cumsum(spec.alpha[y[:-1]] * np.diff(s0))])
    clock = clock_starts[idx] + spec.alpha[y[idx]] * (t - s0[idx])
    g0 = float(spec.G(xi0))
    x_eps = np.asarray(spec.G_inv(np.minimum(g0 + clock, spec._Gc)), float)
    x_bar = np.asarray(spec.G_inv(g0 + spec.alpha_bar * t), float)
    return float(np.max(np.abs(x_eps - x_bar)))


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class ConvergenceRow:
    epsilon: float
    n_hits: int
    tv_pi_star: float
    tv_se: float
    ks_mu_bar: float
    ks_p_value: float
    sup_dist_prehit: float
    sup_dist_se: float
    max_hits_per_run: int

    def csv_row(self) -> list:
        return [repr(self.epsilon), str(self.n_hits), repr(self.tv_pi_star),
                repr(self.ks_mu_bar), repr(self.sup_dist_prehit)]


@dataclass
class ConvergenceStudy:
    rows: list
    trends: dict

    header = CONVERGENCE_HEADER

    def csv_rows(self):
        return [r.csv_row() for r in self.rows]


def _median_se(values, gen, n_boot: int = 400) -> float:
    v = np.asarray(values, float)
    boots = np.median(gen.choice(v, size=(n_boot, v.size)), axis=1)
    return float(np.std(boots, ddof=1))


def convergence_study(spec: IFSpec, epsilons, horizon: float, n_rep: int, rng,
                      n_prehit: int = 100) -> ConvergenceStudy:
    """Boundary law, reset law and pre-hit distance along a decreasing epsilon schedule.

    Hits are pooled over ``n_rep`` replicas on ``[0, horizon]``; the pre-hit
    distance is the median over ``n_prehit`` replicas (deterministic start
    required). Trend verdicts use one-sided drop tests.
    """
    eps = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    stream = as_stream(rng)
    av = averaged_spec(spec)
    boot_gen = stream.substream(10**6).generator()
    rows = []
    for k, e in enumerate(eps):
        sp = spec.with_epsilon(e)
        es = stream.substream(k)
        runs = [simulate_if(sp, horizon, s) for s in es.substream(0).substreams(n_rep)]
        envs = np.concatenate([r.hit_envs for r in runs])
        vals = np.concatenate([r.reset_values for r in runs])
        n = envs.size
        if n == 0:
            raise RuntimeError(f"no boundary hits at epsilon={e}")
        hist = np.bincount(envs, minlength=len(spec.env)) / n
        tv = st.tv_distance(hist, av.pi_star)
        ks = sps.kstest(vals, av.mu_bar.cdf)
        if isinstance(spec.initial, (int, float, np.floating, np.integer)):
            d = [prehit_sup_distance(sp, s) for s in es.substream(1).substreams(n_prehit)]
            sd, sd_se = float(np.median(d)), _median_se(d, boot_gen)
        else:
            sd, sd_se = math.nan, math.nan
        rows.append(ConvergenceRow(e, int(n), float(tv), tv_standard_error(av.pi_star, n),
                                   float(ks.statistic), float(ks.pvalue), sd, sd_se,
                                   max(r.n_hits for r in runs)))
        log.info("epsilon=%g hits=%d tv=%.4g ks=%.4g sup=%.4g", e, n, tv, ks.statistic, sd)
    trends = {"tv_pi_star": st.decreasing_trend([r.tv_pi_star for r in rows], [r.tv_se for r in rows])}
    if not any(math.isnan(r.sup_dist_prehit) for r in rows):
        trends["sup_dist_prehit"] = st.decreasing_trend([r.sup_dist_prehit for r in rows],
                                                        [r.sup_dist_se for r in rows])
    return ConvergenceStudy(rows, trends)
