"""Generic PDMP engine.

Environment chains, flow integration with event location, spontaneous jumps
by thinning, and trajectory recording. The model modules all build on this.
"""
from __future__ import annotations

import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .rng import RngStream, as_generator, as_stream

EVENT_TAGS = ("env-jump", "boundary-hit", "reset", "jump", "division")


class ModelError(ValueError):
    """Invalid model specification or input outside the model's domain."""


class ReducibleChainError(ModelError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, message: str, exit_time: float | None = None):
        super().__init__(message)
        self.exit_time = exit_time


class MajorantViolation(RuntimeError):
    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# environment chain


class RateMatrix:
    """Generator of a finite continuous-time Markov chain."""

    def __init__(self, q, states: Sequence | None = None, atol: float = 1e-12):
        q = np.array(q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] == 0:
            raise ModelError("rate matrix must be square and non-empty")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise ModelError("off-diagonal rates must be non-negative")
        rows = q.sum(axis=1)
        if np.any(np.abs(rows) > atol * max(1.0, np.abs(q).max())):
            raise ModelError(f"rows must sum to zero, got row sums {rows.tolist()}")
        # store with the diagonal recomputed exactly
        self.q = off - np.diag(off.sum(axis=1))
        self.states = list(range(len(q))) if states is None else list(states)
        if len(self.states) != len(q):
            raise ModelError("states must index the rate matrix exactly")

    @classmethod
    def symmetric(cls, n: int, rate: float) -> "RateMatrix":
        """Complete graph on ``n`` states, every jump at ``rate``."""
        q = np.full((n, n), float(rate))
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        return cls(q)

    @classmethod
    def two_state(cls, rate01: float, rate10: float) -> "RateMatrix":
        return cls([[-rate01, rate01], [rate10, -rate10]])

    def __len__(self):
        return len(self.states)

    def __repr__(self):
        return f"RateMatrix({self.q.tolist()!r})"

    @property
    def exit_rates(self) -> np.ndarray:
        # maximum() also turns -0.0 into 0.0 so absorbing holds are +inf
        return np.maximum(-np.diag(self.q), 0.0)

    def jump_probabilities(self) -> np.ndarray:
        """Embedded jump chain; absorbing states map to themselves."""
        off = self.q - np.diag(np.diag(self.q))
        r = self.exit_rates
        p = np.zeros_like(off)
        live = r > 0
        p[live] = off[live] / r[live, None]
        p[~live, np.flatnonzero(~live)] = 1.0
        return p

    def components(self) -> list[list[int]]:
        graph = (self.q - np.diag(np.diag(self.q))) > 0
        n, labels = connected_components(graph.astype(int), directed=True, connection="strong")
        return [np.flatnonzero(labels == k).tolist() for k in range(n)]

    @property
    def irreducible(self) -> bool:
        return len(self.components()) == 1

    def index(self, y) -> int:
        try:
            return self.states.index(y)
        except ValueError:
            raise ModelError(f"state {y!r} is not one of {self.states}") from None


def stationary_distribution(q: RateMatrix) -> np.ndarray:
    """Invariant law ``nu`` with ``nu q = 0`` and ``sum(nu) = 1``."""
    comps = q.components()
    if len(comps) > 1:
        named = "; ".join("{" + ", ".join(str(q.states[i]) for i in c) + "}" for c in comps)
        raise ReducibleChainError(
            f"rate matrix is reducible; strongly connected components: {named}")
    n = len(q)
    a = np.vstack([q.q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    nu, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = np.abs(nu @ q.q).max()
    if residual > 1e-10 * max(1.0, np.abs(q.q).max()) or np.any(nu <= 0):
        raise ModelError(f"stationary solve failed (residual {residual:.3e})")
    return nu / nu.sum()


@dataclass
class EnvPath:
    """Piecewise-constant environment path on ``[0, horizon]``.

    Segment ``i`` is ``[times[i], times[i+1])`` in state ``states[i]``; the last
    segment ends at ``horizon``.
    """

    times: np.ndarray
    states: np.ndarray
    horizon: float

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.times[1:], self.horizon)

    def segments(self):
        for a, b, s in zip(self.times, self.ends, self.states):
            yield float(a), float(b), int(s)

    def state_at(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.states[max(i, 0)])

    def occupation(self, weights) -> float:
        """``int_0^horizon w(I_s) ds`` with compensated summation."""
        w = np.asarray(weights, dtype=float)
        return math.fsum((w[self.states] * (self.ends - self.times)).tolist())

    def cumulative(self, weights) -> np.ndarray:
        """``int_0^{times[i]} w(I_s) ds`` for every segment start."""
        w = np.asarray(weights, dtype=float)
        return np.concatenate([[0.0], np.cumsum(w[self.states] * (self.ends - self.times))[:-1]])


def _compose_scan(cand: np.ndarray) -> np.ndarray:
    """Prefix compositions of per-step state maps.

    ``cand[k, s]`` is the state after step ``k`` when the state before it is
    ``s``. Returns ``G`` with ``G[k, s]`` the state after step ``k`` started
    from ``s`` before step 0 (Hillis-Steele doubling scan).
    """
    g = cand.copy()
    d = 1
    n = len(g)
    while d < n:
        g[d:] = np.take_along_axis(g[d:], g[:-d], axis=1)
        d *= 2
    return g


def _jump_chain(p_cum: np.ndarray, s0: int, u: np.ndarray) -> np.ndarray:
    """States after each of ``len(u)`` embedded-chain steps from ``s0``."""
    n_states = p_cum.shape[0]
    cand = np.empty((len(u), n_states), dtype=np.int64)
    for s in range(n_states):
        cand[:, s] = np.minimum(np.searchsorted(p_cum[s], u, side="right"), n_states - 1)
    return _compose_scan(cand)[:, s0]


class EnvSampler:
    """Chunked exact simulation of one CTMC path, continued on demand."""

    def __init__(self, q: RateMatrix, y0: int, gen: np.random.Generator, chunk: int = 4096):
        self.q = q
        self.gen = gen
        self.state = int(y0)
        self.t = 0.0
        self.chunk = int(chunk)
        self._p_cum = np.cumsum(q.jump_probabilities(), axis=1)
        self._p_cum[:, -1] = 1.0
        self._rates = q.exit_rates

    def next_chunk(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (start times, states) of the next ``chunk`` segments.

        The first entry is the current segment. Absorbing states produce an
        infinite holding time, after which further chunks are empty.
        """
        if math.isinf(self.t):
            return np.empty(0), np.empty(0, dtype=np.int64)
        n = self.chunk
        u = self.gen.random(n)
        e = self.gen.standard_exponential(n)
        after = _jump_chain(self._p_cum, self.state, u)
        states = np.concatenate([[self.state], after[:-1]])
        with np.errstate(divide="ignore"):
            hold = e / self._rates[states]
        starts = self.t + np.concatenate([[0.0], np.cumsum(hold[:-1])])
        self.t = float(starts[-1] + hold[-1])
        self.state = int(after[-1])
        return starts, states


def simulate_ctmc(q: RateMatrix, y0, horizon: float, rng) -> EnvPath:
    """Exact jump-chain simulation of the environment on ``[0, horizon]``."""
    if not horizon > 0:
        raise ModelError("horizon must be positive")
    s0 = q.index(y0)
    gen = as_generator(rng)
    est = horizon * float(q.exit_rates.max()) * 1.2 + 16
    sampler = EnvSampler(q, s0, gen, chunk=int(min(max(est, 64), 1 << 16)))
    times, states = [], []
    while True:
        st, ss = sampler.next_chunk()
        if st.size == 0:
            break
        keep = st < horizon
        times.append(st[keep])
        states.append(ss[keep])
        if not keep.all() or sampler.t >= horizon:
            break
    return EnvPath(np.concatenate(times), np.concatenate(states).astype(np.int64), float(horizon))


def occupation_integrals(q: RateMatrix, y0, horizon: float, weights, rng) -> np.ndarray:
    """``int_0^horizon w(I_s) ds`` for a batch of independent environment paths.

    ``y0`` is an integer array of initial states (one path per entry).
    """
    gen = as_generator(rng)
    w = np.asarray(weights, dtype=float)
    s = np.asarray(y0, dtype=np.int64).copy()
    n = s.size
    t = np.zeros(n)
    acc = np.zeros(n)
    rates = q.exit_rates
    p_cum = np.cumsum(q.jump_probabilities(), axis=1)
    p_cum[:, -1] = 1.0
    active = np.arange(n)
    while active.size:
        sa = s[active]
        with np.errstate(divide="ignore"):
            hold = gen.standard_exponential(active.size) / rates[sa]
        end = np.minimum(t[active] + hold, horizon)
        acc[active] += w[sa] * (end - t[active])
        t[active] = end
        jumping = end < horizon
        active = active[jumping]
        u = gen.random(active.size)
        sa = s[active]
        new = np.empty_like(sa)
        for k in range(len(q)):
            m = sa == k
            new[m] = np.searchsorted(p_cum[k], u[m], side="right")
        s[active] = np.minimum(new, len(q) - 1)
    return acc


# ---------------------------------------------------------------------------
# flows


@dataclass
class VectorField:
    """Autonomous vector field ``x' = eval(x)`` on R^d.

    ``closed_form(x0, t)``, when given, is the exact flow and doubles as a
    test oracle for the integrator.
    """

    dimension: int
    eval: Callable[[np.ndarray], np.ndarray]
    closed_form: Callable[[np.ndarray, float], np.ndarray] | None = None
    name: str = ""
    matrix: np.ndarray | None = None

    def __call__(self, x):
        return self.eval(x)


def linear_field(m, name: str = "") -> VectorField:
    """``x' = M x`` with the matrix exponential registered as closed form."""
    from scipy.linalg import expm

    m = np.array(m, dtype=float)
    return VectorField(m.shape[0], lambda x: m @ x,
                       lambda x0, t: expm(m * t) @ np.asarray(x0, dtype=float),
                       name=name or "linear", matrix=m)


def scalar_linear_field(a: float) -> VectorField:
    a = float(a)
    return VectorField(1, lambda x: a * x, lambda x0, t: np.asarray(x0, float) * math.exp(a * t),
                       name=f"malthus({a})", matrix=np.array([[a]]))


def zero_field(d: int = 1) -> VectorField:
    return VectorField(d, lambda x: np.zeros_like(x), lambda x0, t: np.array(x0, float),
                       name="zero", matrix=np.zeros((d, d)))


def constant_field(v) -> VectorField:
    v = np.atleast_1d(np.array(v, dtype=float))
    return VectorField(v.size, lambda x: v.copy(), lambda x0, t: np.asarray(x0, float) + v * t,
                       name="constant")


class Region:
    """Admissible region; the default is all of R^d."""

    def contains(self, x) -> bool:
        return True


@dataclass
class Box(Region):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape:
            raise ModelError("box bounds must have the same shape")

    @property
    def volume(self) -> float:
        return float(np.prod(np.clip(self.hi - self.lo, 0.0, None)))

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        return gen.uniform(self.lo, self.hi, size=(n, self.lo.size))


@dataclass
class PositiveOrthant(Region):
    dimension: int

    def contains(self, x) -> bool:
        return bool(np.all(np.asarray(x) >= 0))


@dataclass
class StepControl:
    h: float = 1e-3
    adaptive: bool = False
    rtol: float = 1e-9
    atol: float = 1e-12
    h_min: float = 1e-10
    h_max: float = 0.1
    time_tol: float = 1e-10


DEFAULT_STEP = StepControl()


def rk4_step(f: Callable, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steps(f: Callable, x: np.ndarray, t: float, step: StepControl):
    """Yield ``(h, x_start, x_end)`` steps covering exactly ``[0, t]``."""
    if t <= 0:
        return
    if not step.adaptive:
        n = max(1, math.ceil(t / step.h - 1e-9))
        h = t / n
        for _ in range(n):
            x_new = rk4_step(f, x, h)
            yield h, x, x_new
            x = x_new
        return
    done, h = 0.0, min(step.h, t)
    while done < t:
        h = min(h, t - done)
        full = rk4_step(f, x, h)
        half = rk4_step(f, rk4_step(f, x, 0.5 * h), 0.5 * h)
        err = float(np.max(np.abs(half - full))) / 15.0
        scale = step.atol + step.rtol * float(np.max(np.abs(half)))
        if err <= scale or h <= step.h_min:
            # Richardson extrapolation of the two estimates
            x_new = half + (half - full) / 15.0
            yield h, x, x_new
            x, done = x_new, done + h
            grow = 2.0 if err < scale / 32 else 1.0
            h = min(step.h_max, h * grow)
        else:
            h = max(step.h_min, 0.5 * h)


def _bisect_step(f, x, h_max, pred, tol):
    """Smallest ``tau`` in ``(0, h_max]`` where ``pred`` turns true (bisection)."""
    lo, hi = 0.0, h_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(rk4_step(f, x, mid)):
            hi = mid
        else:
            lo = mid
    return hi


def _crossed(g0: float, g1: float) -> bool:
    return (g0 < 0 <= g1) or (g0 > 0 >= g1)


def advance(f: VectorField, x0, t: float, step: StepControl = DEFAULT_STEP,
            threshold: Callable | None = None, region: Region | None = None,
            use_closed_form: bool = False):
    """Flow ``x0`` forward for time ``t`` stopping at the first threshold crossing.

    Returns ``(x, elapsed, hit)``; ``hit`` is True when the run stopped at a
    zero of ``threshold``.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if t < 0:
        raise ValueError("duration must be non-negative")
    if use_closed_form and f.closed_form is not None:
        return _advance_closed(f, x, t, step, threshold, region)
    g_prev = threshold(x) if threshold is not None else None
    elapsed = 0.0
    for h, xs, xe in _steps(f.eval, x, t, step):
        if threshold is not None:
            g_new = threshold(xe)
            if _crossed(g_prev, g_new):
                sign0 = g_prev
                tau = _bisect_step(f.eval, xs, h,
                                   lambda y: _crossed(sign0, threshold(y)), step.time_tol)
                return rk4_step(f.eval, xs, tau), elapsed + tau, True
            g_prev = g_new
        if region is not None and not region.contains(xe):
            tau = _bisect_step(f.eval, xs, h, lambda y: not region.contains(y), step.time_tol)
            raise IntegrationError(
                f"flow left the admissible region near t={elapsed + tau:.10g}",
                exit_time=elapsed + tau)
        elapsed += h
        x = xe
    return x, t, False


def _advance_closed(f, x0, t, step, threshold, region):
    phi = f.closed_form
    if threshold is None and region is None:
        return np.atleast_1d(np.asarray(phi(x0, t), dtype=float)), t, False
    n = max(1, math.ceil(t / step.h - 1e-9))
    grid = np.linspace(0.0, t, n + 1)
    g_prev = threshold(x0) if threshold is not None else None
    for a, b in zip(grid[:-1], grid[1:]):
        xb = np.atleast_1d(phi(x0, b))
        if threshold is not None and _crossed(g_prev, threshold(xb)):
            sign0 = g_prev
            lo, hi = a, b
            while hi - lo > step.time_tol:
                mid = 0.5 * (lo + hi)
                if _crossed(sign0, threshold(np.atleast_1d(phi(x0, mid)))):
                    hi = mid
                else:
                    lo = mid
            return np.atleast_1d(np.asarray(phi(x0, hi), dtype=float)), hi, True
        if region is not None and not region.contains(xb):
            raise IntegrationError(f"flow left the admissible region before t={b:.10g}", exit_time=b)
        if threshold is not None:
            g_prev = threshold(xb)
    return np.atleast_1d(np.asarray(phi(x0, t), dtype=float)), t, False


def integrate_flow(f: VectorField, x0, t: float, step: StepControl = DEFAULT_STEP,
                   region: Region | None = None) -> np.ndarray:
    """Classical RK4 solution of ``x' = f(x)`` after time ``t``."""
    x, _, _ = advance(f, x0, t, step, region=region)
    return x


def hit_time(f: VectorField, x0, threshold: Callable, horizon: float,
             step: StepControl = DEFAULT_STEP, use_closed_form: bool = False) -> float | None:
    """First time in ``(0, horizon]`` the functional changes sign along the flow.

    Tangential contacts without a sign change are not detected.
    """
    _, t, hit = advance(f, x0, horizon, step, threshold=threshold, use_closed_form=use_closed_form)
    return t if hit else None


# ---------------------------------------------------------------------------
# switched systems and trajectories


@dataclass
class SwitchedSystem:
    fields: list[VectorField]
    env: RateMatrix
    state_space: Region = field(default_factory=Region)

    def __post_init__(self):
        dims = {f.dimension for f in self.fields}
        if len(dims) != 1:
            raise ModelError("all vector fields must share one dimension")
        if len(self.fields) != len(self.env):
            raise ModelError("environment states must index the fields exactly")

    @property
    def dimension(self) -> int:
        return self.fields[0].dimension


@dataclass(frozen=True)
class Event:
    time: float
    tag: str
    env: int
    pre: tuple | None = None
    post: tuple | None = None


@dataclass
class Trajectory:
    """Càdlàg record: one row per distinct time, events logged separately."""

    dimension: int
    times: list = field(default_factory=list)
    x: list = field(default_factory=list)
    env: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    events: list = field(default_factory=list)
    env_path: EnvPath | None = None

    def record(self, t: float, x, env: int, tag: str | None = None, pre=None):
        x = tuple(float(v) for v in np.atleast_1d(x))
        if self.times and t == self.times[-1]:
            self.x[-1] = x
            self.env[-1] = int(env)
            if tag:
                self.tags[-1] = f"{self.tags[-1]}|{tag}" if self.tags[-1] else tag
        else:
            if self.times and t < self.times[-1]:
                raise ValueError("trajectory times must increase")
            self.times.append(float(t))
            self.x.append(x)
            self.env.append(int(env))
            self.tags.append(tag or "")
        if tag:
            self.events.append(Event(float(t), tag, int(env), pre, x))

    def states(self) -> np.ndarray:
        return np.array(self.x)

    def event_times(self, tag: str) -> np.ndarray:
        return np.array([e.time for e in self.events if e.tag == tag])

    def header(self) -> list[str]:
        return ["t", *[f"x_{i + 1}" for i in range(self.dimension)], "env", "event_tag"]

    def rows(self):
        for t, x, y, tag in zip(self.times, self.x, self.env, self.tags):
            yield [repr(t), *[repr(v) for v in x], str(y), tag]

    def check(self):
        """Structural invariants; raises AssertionError on violation."""
        assert all(a < b for a, b in zip(self.times, self.times[1:])), "times not increasing"
        pending_hit = False
        for e in self.events:
            if e.tag == "boundary-hit":
                assert not pending_hit, "two boundary hits without a reset"
                pending_hit = True
            elif e.tag == "reset":
                pending_hit = False
        for e in self.events:
            if e.tag == "env-jump" and e.pre is not None:
                assert np.allclose(e.pre, e.post, rtol=0, atol=0), "state jumped at env switch"


def simulate_pdmp(sys: SwitchedSystem, x0, y0, horizon: float, rng, *,
                  jump_rate: Callable | None = None, majorant: float | None = None,
                  jump_kernel: Callable | None = None,
                  boundary: Callable | None = None, reset: Callable | None = None,
                  step: StepControl = DEFAULT_STEP, record_dt: float | None = None,
                  use_closed_form: bool = False, max_events: int = 10**7) -> Trajectory:
    """Simulate a switched PDMP on ``[0, horizon]``.

    The environment path is drawn first from substream 0 of ``rng``; thinning
    proposals, acceptance draws and post-jump states use substream 1.

    ``jump_rate(x, y)`` is a state-dependent spontaneous jump intensity that
    must stay below the constant ``majorant``; ``jump_kernel(x, y, gen)``
    returns the post-jump state. ``boundary(x)`` is a functional whose zero
    crossing triggers ``reset(x, y, gen)``.
    """
    if not horizon > 0:
        raise ModelError("horizon must be positive")
    if jump_rate is not None:
        if majorant is None or not math.isfinite(majorant) or majorant <= 0:
            raise ModelError("state-dependent jump rate needs a finite positive thinning majorant")
        if jump_kernel is None:
            raise ModelError("state-dependent jump rate needs a jump kernel")
    if boundary is not None and reset is None:
        raise ModelError("a boundary needs a reset kernel")
    stream = as_stream(rng)
    env = simulate_ctmc(sys.env, y0, horizon, stream.substream(0).generator())
    gen = stream.substream(1).generator()

    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.size != sys.dimension:
        raise ModelError("initial state has the wrong dimension")
    if not sys.state_space.contains(x):
        raise ModelError("initial state outside the admissible region")
    traj = Trajectory(sys.dimension, env_path=env)
    traj.record(0.0, x, int(env.states[0]))
    # the base Region admits everything, so skip the per-step check
    region = None if boundary is not None or type(sys.state_space) is Region else sys.state_space
    grid_next = record_dt if record_dt else math.inf
    n_events = 0

    for a, b, y in env.segments():
        if a > 0:
            traj.record(a, x, y, "env-jump", pre=tuple(x))
        f = sys.fields[y]
        t = a
        next_prop = t + gen.standard_exponential() / majorant if jump_rate else math.inf
        while t < b:
            t_stop = min(b, next_prop, grid_next)
            x_new, dt, hit = advance(f, x, t_stop - t, step, threshold=boundary,
                                     region=region, use_closed_form=use_closed_form)
            if hit:
                t += dt
                traj.record(t, x_new, y, "boundary-hit")
                x = np.atleast_1d(np.asarray(reset(x_new, y, gen), dtype=float))
                traj.record(t, x, y, "reset", pre=tuple(x_new))
                n_events += 1
            else:
                t, x = t_stop, x_new
                if t == next_prop:
                    lam = float(jump_rate(x, y))
                    if lam > majorant * (1 + 1e-12):
                        raise MajorantViolation(
                            f"jump rate {lam:.6g} exceeds majorant {majorant:.6g} at state "
                            f"{x.tolist()} (env {y}, t={t:.6g})", state=x.copy())
                    if gen.random() * majorant < lam:
                        pre = tuple(x)
                        x = np.atleast_1d(np.asarray(jump_kernel(x, y, gen), dtype=float))
                        traj.record(t, x, y, "jump", pre=pre)
                        n_events += 1
                    next_prop = t + gen.standard_exponential() / majorant
                if t == grid_next:
                    traj.record(t, x, y)
                    grid_next += record_dt
            if n_events > max_events:
                raise RuntimeError("event budget exhausted; raise max_events")
    traj.record(horizon, x, int(env.states[-1]))
    return traj


# ---------------------------------------------------------------------------
# replicas


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PDMPLAB_THREADS", "1")))
    except ValueError:
        return 1


def replica_map(fn: Callable[[RngStream], object], rng, n: int, workers: int | None = None) -> list:
    """Evaluate ``fn`` on ``n`` independent substreams, results in replica order."""
    streams = as_stream(rng).substreams(n)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or n < 2:
        return [fn(s) for s in streams]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, streams, chunksize=max(1, n // (4 * workers))))
