"""Two-stage protein production with gene replication and binomial division.

mRNAs are transcribed at rate ``lambda1`` (``2 lambda1`` after replication
at phase ``tauR``), degrade at rate ``sigma1`` each, and are translated at
rate ``lambda2`` each; proteins are stable. At phase ``tauD`` the followed
daughter keeps each molecule with probability 1/2. Volume grows as
``V0 2^{s/tauD}``.

The moment engine propagates ``(EM, EP, VarM, VarP, CovMP)`` through the
closed linear moment equations with matrix exponentials; division is a
linear map, so one cycle is an affine map whose fixed point is the
equilibrium.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import stats as sps
from scipy.linalg import expm

from . import stats as st
from .core import ModelError
from .rng import as_generator

CV_SCAN_HEADER = ["lambda1", "sigma1", "lambda2", "tauR", "tauD", "V0", "mu_p", "cv2"]
CONCENTRATION_HEADER = ["s", "mean_conc_M", "mean_conc_P", "cv_M", "cv_P"]


class CountOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneParams:
    lambda1: float
    sigma1: float
    lambda2: float
    tauR: float
    tauD: float
    V0: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "sigma1", "lambda2", "tauD", "V0"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ModelError(f"{name} must be positive, got {v!r}")
        if not 0 <= self.tauR < self.tauD:
            raise ModelError("need 0 <= tauR < tauD")

    def replace(self, **kw) -> "GeneParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return GeneParams(**d)

    def volume(self, s):
        return self.V0 * np.exp2(np.asarray(s, float) / self.tauD)

    def as_row(self) -> list:
        return [self.lambda1, self.sigma1, self.lambda2, self.tauR, self.tauD, self.V0]


@dataclass(frozen=True)
class MomentVector:
    EM: float
    EP: float
    VarM: float
    VarP: float
    CovMP: float

    @classmethod
    def from_array(cls, v) -> "MomentVector":
        return cls(*(float(x) for x in np.asarray(v, float)[:5]))

    @classmethod
    def zero(cls) -> "MomentVector":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def array(self) -> np.ndarray:
        return np.array([self.EM, self.EP, self.VarM, self.VarP, self.CovMP])

    def check(self, atol: float = 1e-9) -> bool:
        """Non-negative variances and the Cauchy-Schwarz bound."""
        scale = max(1.0, abs(self.VarM), abs(self.VarP))
        return (self.VarM >= -atol * scale and self.VarP >= -atol * scale
                and self.CovMP ** 2 <= max(self.VarM, 0) * max(self.VarP, 0) * (1 + 1e-9) + atol * scale)


# ---------------------------------------------------------------------------
# mRNA mean


def mrna_poisson_parameter(p: GeneParams, s):
    """Equilibrium Poisson parameter of the mRNA count at phase ``s``."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s >= p.tauD)):
        raise ValueError("phase must lie in [0, tauD)")
    l, g = p.lambda1, p.sigma1
    after = np.where(s >= p.tauR, -np.expm1(-(s - p.tauR) * g), 0.0)
    out = (l / g) * (1.0 - np.exp(-(s + p.tauD - p.tauR) * g) / (2.0 - math.exp(-p.tauD * g)) + after)
    return out if out.ndim else float(out)


@dataclass
class CycleMeanMap:
    """Mean mRNA along one cycle from the production ODE ``x' = k(s) - sigma1 x``."""

    p: GeneParams

    def profile(self, x0: float, s):
        p = self.p
        s = np.asarray(s, dtype=float)
        g, l = p.sigma1, p.lambda1
        before = l / g + (x0 - l / g) * np.exp(-g * np.minimum(s, p.tauR))
        x_r = l / g + (x0 - l / g) * math.exp(-g * p.tauR)
        after = 2 * l / g + (x_r - 2 * l / g) * np.exp(-g * np.maximum(s - p.tauR, 0.0))
        out = np.where(s < p.tauR, before, after)
        return out if out.ndim else float(out)

    def end_of_cycle(self, x0: float) -> float:
        """Mean just before division."""
        return float(self.profile(x0, self.p.tauD))

    def __call__(self, x0: float) -> float:
        return 0.5 * self.end_of_cycle(x0)

    @property
    def contraction(self) -> float:
        return 0.5 * math.exp(-self.p.sigma1 * self.p.tauD)

    def fixed_point(self) -> float:
        b = self(0.0)
        return b / (1.0 - self.contraction)

    def iterate(self, x0: float, n: int) -> np.ndarray:
        xs = [float(x0)]
        for _ in range(n):
            xs.append(self(xs[-1]))
        return np.array(xs)


def cycle_mean_map(p: GeneParams) -> CycleMeanMap:
    return CycleMeanMap(p)


# ---------------------------------------------------------------------------
# moment engine


def moment_generator(p: GeneParams, doubled: bool) -> np.ndarray:
    """6x6 generator of ``(EM, EP, VarM, VarP, CovMP, 1)``."""
    k = 2 * p.lambda1 if doubled else p.lambda1
    g, l2 = p.sigma1, p.lambda2
    a = np.zeros((6, 6))
    a[0, 0], a[0, 5] = -g, k
    a[1, 0] = l2
    a[2, 0], a[2, 2], a[2, 5] = g, -2 * g, k
    a[3, 0], a[3, 4] = l2, 2 * l2
    a[4, 2], a[4, 4] = l2, -g
    return a


def _augment(m: MomentVector) -> np.ndarray:
    return np.append(m.array(), 1.0)


def moment_ode_propagate(p: GeneParams, m0: MomentVector, duration: float, doubled: bool) -> MomentVector:
    """Moments after ``duration`` within one production regime."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    return MomentVector.from_array(expm(moment_generator(p, doubled) * duration) @ _augment(m0))


def moment_ode_rhs(p: GeneParams, doubled: bool):
    """Right-hand side for independent integration of the same system."""
    a = moment_generator(p, doubled)[:5]
    return lambda t, v: a[:, :5] @ v + a[:, 5]


DIVISION = np.diag([0.5, 0.5, 0.25, 0.25, 0.25, 1.0])
DIVISION[2, 0] = 0.25
DIVISION[3, 1] = 0.25


def division_map(m: MomentVector) -> MomentVector:
    """Independent binomial(1/2) thinning of both counts."""
    return MomentVector.from_array(DIVISION @ _augment(m))


def cycle_matrix(p: GeneParams) -> np.ndarray:
    """Augmented affine map from one cycle start to the next."""
    before = expm(moment_generator(p, False) * p.tauR)
    after = expm(moment_generator(p, True) * (p.tauD - p.tauR))
    return DIVISION @ after @ before


def equilibrium_moments(p: GeneParams) -> MomentVector:
    """Cycle-start moments invariant under one full cycle."""
    c = cycle_matrix(p)
    lin, off = c[:5, :5], c[:5, 5]
    v = np.linalg.solve(np.eye(5) - lin, off)
    if not np.all(np.isfinite(v)):
        raise ArithmeticError("singular cycle map")
    return MomentVector.from_array(v)


def iterate_cycles(p: GeneParams, m0: MomentVector, n: int) -> MomentVector:
    c = np.linalg.matrix_power(cycle_matrix(p), n)
    return MomentVector.from_array(c @ _augment(m0))


def moments_at(p: GeneParams, s, m0: MomentVector | None = None) -> np.ndarray:
    """Moment vectors at phases ``s`` (rows) from cycle-start moments ``m0``."""
    m0 = equilibrium_moments(p) if m0 is None else m0
    s = np.atleast_1d(np.asarray(s, float))
    if np.any((s < 0) | (s > p.tauD)):
        raise ValueError("phase must lie in [0, tauD]")
    a1, a2 = moment_generator(p, False), moment_generator(p, True)
    v0 = _augment(m0)
    vr = expm(a1 * p.tauR) @ v0
    out = np.empty((s.size, 5))
    for i, si in enumerate(s):
        v = expm(a1 * si) @ v0 if si < p.tauR else expm(a2 * (si - p.tauR)) @ vr
        out[i] = v[:5]
    return out


def protein_mean(p: GeneParams, m0: MomentVector, s):
    """Mean protein count before replication, given cycle-start moments."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s >= p.tauR)):
        raise ValueError("phase must lie in [0, tauR)")
    g, r = p.sigma1, p.lambda1 / p.sigma1
    out = m0.EP + p.lambda2 * r * s + p.lambda2 * (m0.EM - r) * (-np.expm1(-g * s)) / g
    return out if out.ndim else float(out)


def printed_protein_variance(p: GeneParams, m0: MomentVector, s, join: str = "+"):
    """Closed-form protein variance before replication, as displayed in print.

    ``m0`` must have a Poisson mRNA marginal (``VarM = EM = x0``). The
    display lacks an operator between the covariance term and the squared
    term that follows it; ``join='+'`` inserts a sum, ``join='*'`` reads the
    juxtaposition as a product.
    """
    s = np.asarray(s, dtype=float)
    g, l1, l2, x0 = p.sigma1, p.lambda1, p.lambda2, m0.EM
    e = np.exp(-g * s)
    w = l2 * (1 - e) / g
    line2 = x0 * (l2 / g) * (1 - e + (l2 / g) * (1 - e * (e + 2 * s * g)))
    line3 = (l1 * l2 / g ** 2) * (s * g - 1 + e + 2 * (l2 / g) * (g * s * (1 + e) - 2 * (1 - e)))
    if join == "+":
        head = m0.VarP + 2 * w * m0.CovMP + w ** 2 * x0
    elif join == "*":
        head = m0.VarP + 2 * w * m0.CovMP * w ** 2 * x0
    else:
        raise ValueError("join must be '+' or '*'")
    out = head + line2 + line3
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# exact simulation


@dataclass
class LineageSamples:
    """Counts at recorded phases: arrays of shape ``(cycles, phases, lineages)``."""

    params: GeneParams
    phases: np.ndarray
    M: np.ndarray
    P: np.ndarray

    def at(self, phase_index: int):
        return self.M[:, phase_index, :].ravel(), self.P[:, phase_index, :].ravel()


def _advance(M, P, t0, t1, k, g, l2, gen):
    """Exact evolution of every lineage from phase ``t0`` to ``t1``.

    Only transcription and degradation change the translation rate, so
    proteins made between two mRNA events are a Poisson draw with mean
    ``lambda2 M dt``.
    """
    active = np.arange(M.size)
    t = np.full(M.size, t0)
    while active.size:
        m = M[active]
        tot = k + g * m
        dt = gen.standard_exponential(active.size) / tot
        fire = t[active] + dt < t1
        dt_used = np.where(fire, dt, t1 - t[active])
        P[active] += gen.poisson(l2 * m * dt_used)
        idx = active[fire]
        up = gen.random(idx.size) * tot[fire] < k
        M[idx] += np.where(up, 1, -1)
        t[idx] += dt[fire]
        active = idx


def _binomial_half(x, gen):
    return gen.binomial(x, 0.5)


def simulate_cell_lineage(p: GeneParams, n_cycles: int, rng, phases=(0.0,), n_lineages: int = 1,
                          burn_in: int = 0, init=None, cap: int = 10**12) -> LineageSamples:
    """Follow ``n_lineages`` independent lineages for ``burn_in + n_cycles`` cycles.

    Counts are recorded at the given phases of each post-burn-in cycle; a
    phase of 0 is the state just after the previous division. ``init`` is
    ``(M0, P0)`` (scalars or arrays), defaulting to empty cells.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be at least 1")
    ph = np.asarray(phases, dtype=float)
    if ph.ndim != 1 or np.any((ph < 0) | (ph >= p.tauD)) or np.any(np.diff(ph) <= 0):
        raise ValueError("phases must be increasing and lie in [0, tauD)")
    gen = as_generator(rng)
    n = int(n_lineages)
    M = np.zeros(n, dtype=np.int64)
    P = np.zeros(n, dtype=np.int64)
    if init is not None:
        M[:] = init[0]
        P[:] = init[1]
    stops = sorted(set(ph.tolist()) | {p.tauR, p.tauD})
    rec_M = np.empty((n_cycles, ph.size, n), dtype=np.int64)
    rec_P = np.empty_like(rec_M)
    col = {float(s): i for i, s in enumerate(ph)}
    for cycle in range(burn_in + n_cycles):
        t = 0.0
        for stop in stops:
            if stop > t:
                k = p.lambda1 if t < p.tauR else 2 * p.lambda1
                _advance(M, P, t, stop, k, p.sigma1, p.lambda2, gen)
                t = stop
            if stop == p.tauD:
                M = _binomial_half(M, gen)
                P = _binomial_half(P, gen)
            elif cycle >= burn_in and stop in col:
                rec_M[cycle - burn_in, col[stop]] = M
                rec_P[cycle - burn_in, col[stop]] = P
        if M.max(initial=0) > cap or P.max(initial=0) > cap:
            raise CountOverflow(f"molecule count above the cap {cap}")
    return LineageSamples(p, ph, rec_M, rec_P)


def sample_moments(M, P) -> tuple[MomentVector, MomentVector]:
    """Empirical moment vector and its standard errors."""
    M = np.asarray(M, float).ravel()
    P = np.asarray(P, float).ravel()
    dm, dp = M - M.mean(), P - P.mean()
    parts = [st.estimate(M), st.estimate(P), st.estimate(dm * dm * M.size / (M.size - 1)),
             st.estimate(dp * dp * P.size / (P.size - 1)), st.estimate(dm * dp * M.size / (M.size - 1))]
    return (MomentVector(*(e.mean for e in parts)), MomentVector(*(e.se for e in parts)))


def poisson_gof(samples, mu: float, min_expected: float = 5.0) -> float:
    """Chi-square goodness-of-fit p-value against Poisson(``mu``).

    Cells with small expected counts are pooled into the two tails.
    """
    x = np.asarray(samples, dtype=np.int64).ravel()
    n = x.size
    lo = int(sps.poisson.ppf(1e-9, mu))
    hi = int(sps.poisson.isf(1e-9, mu)) + 1
    ks = np.arange(lo, hi + 1)
    probs = sps.poisson.pmf(ks, mu)
    probs[0] = sps.poisson.cdf(lo, mu)
    probs[-1] = sps.poisson.sf(hi - 1, mu)
    obs = np.bincount(np.clip(x, lo, hi) - lo, minlength=ks.size).astype(float)
    exp_ = probs * n
    # pool from both ends until every cell is large enough
    o, e = list(obs), list(exp_)
    while len(e) > 2 and e[0] < min_expected:
        e0, o0 = e.pop(0), o.pop(0)
        e[0] += e0
        o[0] += o0
    while len(e) > 2 and e[-1] < min_expected:
        e1, o1 = e.pop(), o.pop()
        e[-1] += e1
        o[-1] += o1
    e = np.array(e)
    o = np.array(o)
    e *= o.sum() / e.sum()
    return float(sps.chisquare(o, e).pvalue)


# ---------------------------------------------------------------------------
# concentrations


@dataclass
class ConcentrationRow:
    s: float
    mean_conc_M: float
    mean_conc_P: float
    cv_M: float
    cv_P: float

    def csv_row(self) -> list:
        return [repr(self.s), repr(self.mean_conc_M), repr(self.mean_conc_P), repr(self.cv_M), repr(self.cv_P)]


@dataclass
class ConcentrationTable:
    """Per-phase concentration statistics; CV is variance over squared mean."""

    rows: list
    mu_p: float
    fluctuation: float

    header = CONCENTRATION_HEADER

    def csv_rows(self):
        return [r.csv_row() for r in self.rows]


def _table(p, s, mm, mp, vm, vp):
    v = p.volume(s)
    cm, cp = mm / v, mp / v
    rows = [ConcentrationRow(float(a), float(b), float(c), float(d), float(e))
            for a, b, c, d, e in zip(s, cm, cp, (vm / v ** 2) / cm ** 2, (vp / v ** 2) / cp ** 2)]
    return rows, cp


def concentration_profile(p: GeneParams, s) -> ConcentrationTable:
    """Equilibrium concentration statistics from the moment engine.

    ``mu_p`` is the phase average of the mean protein concentration and
    ``fluctuation`` the largest relative deviation of the phase profile
    from it (both computed on the supplied grid, which should be uniform).
    """
    s = np.asarray(s, dtype=float)
    mom = moments_at(p, s)
    rows, cp = _table(p, s, mom[:, 0], mom[:, 1], mom[:, 2], mom[:, 3])
    mu = phase_average_concentration(p)[0]
    return ConcentrationTable(rows, mu, float(np.max(np.abs(cp - mu)) / mu))


def concentration_stats(p: GeneParams, s, n_cycles: int, rng, n_lineages: int = 1000,
                        burn_in: int = 30) -> ConcentrationTable:
    """Concentration statistics estimated by exact simulation."""
    s = np.asarray(s, dtype=float)
    sam = simulate_cell_lineage(p, n_cycles, rng, s, n_lineages, burn_in)
    M = sam.M.transpose(1, 0, 2).reshape(s.size, -1).astype(float)
    P = sam.P.transpose(1, 0, 2).reshape(s.size, -1).astype(float)
    rows, cp = _table(p, s, M.mean(1), P.mean(1), M.var(1, ddof=1), P.var(1, ddof=1))
    mu = float(np.mean(cp))
    return ConcentrationTable(rows, mu, float(np.max(np.abs(cp - mu)) / mu))


def _phase_nodes(p: GeneParams, n: int = 48):
    x, w = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    for a, b in ((0.0, p.tauR), (p.tauR, p.tauD)):
        if b > a:
            nodes.append(0.5 * (b - a) * (x + 1) + a)
            weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights) / p.tauD


def phase_average_concentration(p: GeneParams) -> tuple[float, float]:
    """Mean and variance of ``P/V`` at a uniformly random cell-cycle phase."""
    s, w = _phase_nodes(p)
    mom = moments_at(p, s)
    v = p.volume(s)
    mean = mom[:, 1] / v
    second = (mom[:, 3] + mom[:, 1] ** 2) / v ** 2
    mu = float(w @ mean)
    return mu, float(w @ second - mu ** 2)


def cv_point(p: GeneParams) -> tuple[float, float]:
    """``(mu_p, CV^2)`` of the protein concentration over a random phase."""
    mu, var = phase_average_concentration(p)
    return mu, var / mu ** 2


@dataclass
class CVScan:
    params: list
    mu_p: np.ndarray
    cv2: np.ndarray
    slope: float
    tail_slope: float
    monotone: bool

    header = CV_SCAN_HEADER

    def csv_rows(self):
        return [[*(repr(float(v)) for v in q.as_row()), repr(float(m)), repr(float(c))]
                for q, m, c in zip(self.params, self.mu_p, self.cv2)]

    @property
    def plateau(self) -> bool:
        """Flattening at high expression: the top-end slope is below half the global one."""
        return self.tail_slope > 0.5 * self.slope


def cv_scan(grid, tail: int = 5) -> CVScan:
    """Analytic ``(mu_p, CV^2)`` over a parameter grid, sorted by mean.

    The log-log slope is an ordinary least-squares fit; ``tail_slope`` uses
    only the ``tail`` highest-mean points.
    """
    grid = list(grid)
    if len(grid) < 2:
        raise ValueError("need at least two grid points")
    pts = np.array([cv_point(q) for q in grid])
    order = np.argsort(pts[:, 0], kind="stable")
    mu, cv2 = pts[order, 0], pts[order, 1]
    x, y = np.log(mu), np.log(cv2)
    slope = float(np.polyfit(x, y, 1)[0])
    t = min(max(tail, 2), len(grid))
    tail_slope = float(np.polyfit(x[-t:], y[-t:], 1)[0])
    return CVScan([grid[i] for i in order], mu, cv2, slope, tail_slope, bool(np.all(np.diff(cv2) < 0)))


def default_cv_grid(n: int = 20, lambda1=(0.5, 50.0), lambda2: float = 40.0, sigma1: float = 12.0,
                    tauR: float = 0.4, tauD: float = 1.0, V0: float = 1.0) -> list[GeneParams]:
    """Transcription-rate sweep (log-spaced) at fixed translation and degradation."""
    return [GeneParams(float(l1), sigma1, lambda2, tauR, tauD, V0)
            for l1 in np.geomspace(lambda1[0], lambda1[1], n)]
