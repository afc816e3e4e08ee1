"""Structured branching populations and their spine (auxiliary) process.

Traits are scalar and follow a deterministic flow with a vectorized closed
form. Trees are stored flat: one array per attribute, indexed by individual
id, simulated generation by generation.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import stats as st
from .core import MajorantViolation, ModelError, VectorField
from .rng import as_generator, as_stream


class PopulationOverflow(RuntimeError):
    pass


class ExtinctionError(RuntimeError):
    pass


def exponential_growth(r: float) -> VectorField:
    """Trait flow ``x' = r x``; the closed form accepts arrays."""
    r = float(r)
    return VectorField(1, lambda x: r * x, lambda x0, t: np.asarray(x0, float) * np.exp(r * np.asarray(t, float)),
                       name=f"exp-growth({r})", matrix=np.array([[r]]))


@dataclass
class DivisionRate:
    """Division rate ``B(x)`` with the bound ``B(x) <= b1 |x|^gamma + b2``.

    ``hazard_inverse(x0, e)`` maps a birth trait and a standard exponential
    draw to the division age (``inf`` when the cumulative hazard stays below
    ``e``). Without it, division ages come from thinning with
    ``majorant(x_start, window)``, an upper bound on ``B`` along the flow over
    the next ``window`` time units.
    """

    rate: Callable[[np.ndarray], np.ndarray]
    gamma: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    hazard_inverse: Callable | None = None
    majorant: Callable | None = None
    constant: float | None = None

    @classmethod
    def constant_rate(cls, b: float) -> "DivisionRate":
        b = float(b)
        if b < 0:
            raise ModelError("division rate must be non-negative")
        inv = (lambda x0, e: np.full(np.shape(e), np.inf)) if b == 0 else (lambda x0, e: e / b)
        return cls(lambda x: np.full(np.shape(x), b), 0.0, 0.0, b, hazard_inverse=inv, constant=b)

    @classmethod
    def proportional(cls, growth_rate: float, scale: float = 1.0, analytic: bool = True) -> "DivisionRate":
        """``B(x) = scale * x`` along exponential trait growth at ``growth_rate``.

        The cumulative hazard from birth trait ``x0`` is
        ``scale x0 (e^{r t} - 1) / r``; it is inverted in closed form.
        """
        r, k = float(growth_rate), float(scale)

        def inverse(x0, e):
            x0 = np.asarray(x0, float)
            if r == 0:
                return e / (k * x0)
            with np.errstate(invalid="ignore", divide="ignore"):
                arg = 1.0 + r * e / (k * x0)
                t = np.log(arg) / r
            return np.where(arg > 0, t, np.inf)

        return cls(lambda x: k * np.asarray(x, float), 1.0, k, 0.0,
                   hazard_inverse=inverse if analytic else None,
                   majorant=lambda x, w: k * np.asarray(x, float) * math.exp(max(r, 0.0) * w))


@dataclass
class BranchingSpec:
    """Branching process with deterministic trait flow.

    ``offspring`` maps a child count ``k`` to its probability (trait
    independent). ``kernel(x, k, gen)`` returns the children's traits as an
    array of shape ``(len(x), k)``; the default splits the trait equally.
    """

    flow: VectorField
    division: DivisionRate
    offspring: dict = field(default_factory=lambda: {2: 1.0})
    kernel: Callable | None = None
    mass_floor: float = 0.0

    def __post_init__(self):
        probs = np.array(list(self.offspring.values()), dtype=float)
        if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, rel_tol=1e-12):
            raise ModelError("offspring law must be a probability distribution")
        if self.offspring.get(1, 0.0) > 0:
            raise ModelError("one-child events are excluded (p_1 must be 0)")
        if self.flow.closed_form is None:
            raise ModelError("trait flow needs a vectorized closed form")
        self._ks = np.array(sorted(self.offspring), dtype=int)
        self._cum = np.cumsum([self.offspring[k] for k in self._ks])
        self._cum[-1] = 1.0

    @property
    def mean_offspring(self) -> float:
        return float(sum(k * p for k, p in self.offspring.items()))

    def children_traits(self, x: np.ndarray, k: int, gen) -> np.ndarray:
        if self.kernel is not None:
            return np.asarray(self.kernel(x, k, gen), dtype=float).reshape(len(x), k)
        return np.repeat((x / k)[:, None], k, axis=1)

    def draw_offspring(self, n: int, gen) -> np.ndarray:
        return self._ks[np.searchsorted(self._cum, gen.random(n), side="right")]

    def trait_at(self, x0, age):
        return self.flow.closed_form(x0, age)

    # assumption checkers on a trait grid --------------------------------

    def check_rate_bound(self, grid) -> bool:
        x = np.asarray(grid, float)
        d = self.division
        return bool(np.all(d.rate(x) <= d.b1 * np.abs(x) ** d.gamma + d.b2 + 1e-12))

    def check_mean_offspring(self, bound: float) -> bool:
        return self.mean_offspring <= bound + 1e-12

    def check_mass(self, grid, gen=None, n_draws: int = 64) -> bool:
        """Mean total child trait never exceeds ``max(x, mass_floor)``."""
        gen = as_generator(gen if gen is not None else 0)
        x = np.asarray(grid, float)
        for k in self._ks:
            if k == 0:
                continue
            tot = np.mean([self.children_traits(x, int(k), gen).sum(axis=1) for _ in range(n_draws)], axis=0)
            if np.any(tot > np.maximum(x, self.mass_floor) * (1 + 1e-9)):
                return False
        return True


def division_time_sample(x0, flow: VectorField, rate: DivisionRate, rng, n: int | None = None,
                         window: float = 1.0, use_analytic: bool = True) -> np.ndarray:
    """Division ages for individuals born with traits ``x0``.

    Inverse transform when the hazard inverse is registered, otherwise
    thinning against the caller's majorant over successive windows.
    """
    gen = as_generator(rng)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if n is not None:
        x0 = np.broadcast_to(x0, (n,)).copy()
    if use_analytic and rate.hazard_inverse is not None:
        return np.asarray(rate.hazard_inverse(x0, gen.standard_exponential(x0.size)), dtype=float)
    if rate.majorant is None:
        raise ModelError("thinning needs a majorant for the division rate")
    return _thinning_ages(x0, flow, rate, gen, window)


def _thinning_ages(x0, flow, rate, gen, window, max_windows: int = 100_000):
    out = np.full(x0.size, np.inf)
    todo = np.arange(x0.size)
    start = np.zeros(x0.size)
    age = np.zeros(x0.size)
    for _ in range(max_windows):
        if todo.size == 0:
            break
        xs = flow.closed_form(x0[todo], start[todo])
        lam = np.asarray(rate.majorant(xs, window), dtype=float)
        if np.any(lam < 0):
            raise ModelError("majorant must be non-negative")
        with np.errstate(divide="ignore"):
            prop = age[todo] + gen.standard_exponential(todo.size) / lam
        inside = prop < start[todo] + window
        u = gen.random(todo.size)
        # proposals past the window end restart from the next window
        age[todo] = np.where(inside, prop, start[todo] + window)
        b = np.asarray(rate.rate(flow.closed_form(x0[todo], age[todo])), dtype=float)
        if np.any(inside & (b > lam * (1 + 1e-12))):
            bad = np.flatnonzero(inside & (b > lam))[0]
            raise MajorantViolation(f"division rate {b[bad]:.6g} exceeds majorant {lam[bad]:.6g}",
                                    state=float(x0[todo][bad]))
        accept = inside & (u * lam < b)
        out[todo[accept]] = age[todo[accept]]
        start[todo[~inside]] += window
        keep = ~accept
        todo = todo[keep]
    return out


@dataclass(frozen=True)
class Individual:
    id: int
    parent: int | None
    birth: float
    death: float
    trait_at_birth: float
    root: int

    @property
    def alive_at_horizon(self) -> bool:
        return math.isinf(self.death)


@dataclass
class BranchingTree:
    """Flat genealogy; ``death`` is ``inf`` for individuals alive at the horizon."""

    spec: BranchingSpec
    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    trait_at_birth: np.ndarray
    root: np.ndarray
    horizon: float

    def __len__(self):
        return len(self.parent)

    def individual(self, i: int) -> Individual:
        p = int(self.parent[i])
        return Individual(i, None if p < 0 else p, float(self.birth[i]), float(self.death[i]),
                          float(self.trait_at_birth[i]), int(self.root[i]))

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parent < 0)

    def alive(self, t: float) -> np.ndarray:
        if t > self.horizon:
            raise ValueError("t beyond the tree horizon")
        return np.flatnonzero((self.birth <= t) & (self.death > t))

    def traits(self, ids, t: float) -> np.ndarray:
        ids = np.asarray(ids, dtype=int)
        return np.asarray(self.spec.trait_at(self.trait_at_birth[ids], t - self.birth[ids]), float)

    def count(self, t: float) -> int:
        return int(self.alive(t).size)

    def ancestor_at(self, i: int, s: float) -> int:
        """Ancestor of ``i`` (possibly ``i``) alive at time ``s``."""
        while self.birth[i] > s:
            i = int(self.parent[i])
            if i < 0:
                raise ValueError("no ancestor alive at that time")
        return i

    def check(self):
        """Structural invariants; raises AssertionError on violation."""
        kids = self.parent >= 0
        par = self.parent[kids]
        assert np.all(par < np.flatnonzero(kids)), "parents must precede children"
        assert np.all(self.birth < self.death), "birth must precede death"
        assert np.all(self.birth[kids] == self.death[par]), "children born at parent's division"
        assert np.all(self.root[kids] == self.root[par]), "root labels inconsistent"

    def rows(self):
        for i in range(len(self)):
            d = self.death[i]
            yield [str(i), str(int(self.parent[i])) if self.parent[i] >= 0 else "",
                   repr(float(self.birth[i])), "" if math.isinf(d) else repr(float(d)),
                   repr(float(self.trait_at_birth[i]))]


TREE_HEADER = ["id", "parent", "birth", "death", "trait_at_birth"]


def simulate_tree(spec: BranchingSpec, x0, T: float, rng, cap: int = 10**6) -> BranchingTree:
    """Simulate the population from one root per entry of ``x0`` up to ``T``."""
    if not T > 0:
        raise ModelError("horizon must be positive")
    gen = as_generator(rng)
    roots = np.atleast_1d(np.asarray(x0, dtype=float))
    parents, births, deaths, traits, rootids = [], [], [], [], []
    gen_parent = np.full(roots.size, -1)
    gen_birth = np.zeros(roots.size)
    gen_trait = roots
    gen_root = np.arange(roots.size)
    offset = 0
    while gen_trait.size:
        n = gen_trait.size
        if offset + n > cap:
            raise PopulationOverflow(f"population exceeded the cap of {cap} individuals")
        ages = division_time_sample(gen_trait, spec.flow, spec.division, gen)
        death = gen_birth + ages
        ids = offset + np.arange(n)
        divides = death <= T
        death = np.where(divides, death, np.inf)
        parents.append(gen_parent)
        births.append(gen_birth)
        deaths.append(death)
        traits.append(gen_trait)
        rootids.append(gen_root)
        offset += n
        d_idx = np.flatnonzero(divides)
        if d_idx.size == 0:
            break
        x_div = spec.trait_at(gen_trait[d_idx], ages[d_idx])
        k = spec.draw_offspring(d_idx.size, gen)
        nxt_parent, nxt_birth, nxt_trait, nxt_root = [], [], [], []
        for kk in np.unique(k):
            if kk == 0:
                continue
            sel = k == kk
            child = spec.children_traits(x_div[sel], int(kk), gen)
            nxt_parent.append(np.repeat(ids[d_idx[sel]], kk))
            nxt_birth.append(np.repeat(death[d_idx[sel]], kk))
            nxt_trait.append(child.ravel())
            nxt_root.append(np.repeat(gen_root[d_idx[sel]], kk))
        if not nxt_parent:
            break
        order = np.argsort(np.concatenate(nxt_parent), kind="stable")
        gen_parent = np.concatenate(nxt_parent)[order]
        gen_birth = np.concatenate(nxt_birth)[order]
        gen_trait = np.concatenate(nxt_trait)[order]
        gen_root = np.concatenate(nxt_root)[order]
    return BranchingTree(spec, np.concatenate(parents), np.concatenate(births), np.concatenate(deaths),
                         np.concatenate(traits), np.concatenate(rootids), float(T))


def population_functional(tree: BranchingTree, f: Callable, t: float, s: float | None = None) -> float:
    """``sum over u alive at t of f(X_s^u)`` (ancestor trait at ``s``, default ``s = t``)."""
    ids = tree.alive(t)
    if ids.size == 0:
        return 0.0
    if s is None or s == t:
        return math.fsum(np.asarray(f(tree.traits(ids, t)), float).tolist())
    anc = np.array([tree.ancestor_at(int(i), s) for i in ids])
    return math.fsum(np.asarray(f(tree.traits(anc, s)), float).tolist())


@dataclass
class LineagePath:
    """Trait path along an ancestral lineage: segments from root to tip."""

    spec: BranchingSpec
    ids: list
    births: np.ndarray
    ends: np.ndarray
    traits_at_birth: np.ndarray

    def trait_at(self, s: float) -> float:
        k = int(np.searchsorted(self.births, s, side="right")) - 1
        if k < 0:
            raise ValueError("time before the lineage starts")
        return float(self.spec.trait_at(self.traits_at_birth[k], s - self.births[k]))


def lineage(tree: BranchingTree, i: int, t: float) -> LineagePath:
    ids = []
    j = int(i)
    while j >= 0:
        ids.append(j)
        j = int(tree.parent[j])
    ids.reverse()
    idx = np.array(ids)
    ends = np.minimum(tree.death[idx], t)
    return LineagePath(tree.spec, ids, tree.birth[idx], ends, tree.trait_at_birth[idx])


def uniform_sample_lineage(tree: BranchingTree, t: float, rng) -> LineagePath:
    """Lineage of an individual chosen uniformly among those alive at ``t``."""
    alive = tree.alive(t)
    if alive.size == 0:
        raise ExtinctionError(f"population extinct at t={t}")
    gen = as_generator(rng)
    return lineage(tree, int(alive[gen.integers(alive.size)]), t)


# ---------------------------------------------------------------------------
# spine


class MeanPopulation:
    """``m(x, s, t)``: expected population at ``t`` from one individual with trait ``x`` at ``s``."""

    def __call__(self, x, s: float, t: float):
        raise NotImplementedError


@dataclass
class ConstantMeanPopulation(MeanPopulation):
    rate: float
    mean_offspring: float

    def __call__(self, x, s, t):
        return np.exp(self.rate * (self.mean_offspring - 1.0) * (t - s)) * np.ones(np.shape(x))


@dataclass
class SpineSpec:
    """Auxiliary process for a constant division rate.

    With constant ``B`` the mean population ``m(x, s, t) = exp(B (m - 1)(t - s))``
    does not depend on the trait, so the spine follows the trait flow, jumps
    at rate ``m B`` and draws the post-jump trait from the offspring-weighted
    marginal (child count size-biased, then one child uniformly).
    """

    branching: BranchingSpec

    def __post_init__(self):
        if self.branching.division.constant is None:
            raise ModelError("the spine is only available for a constant division rate")
        if math.isclose(self.branching.mean_offspring, 1.0):
            raise ModelError("mean offspring 1 is excluded")

    @property
    def rate(self) -> float:
        return float(self.branching.division.constant)

    @property
    def jump_rate(self) -> float:
        return self.branching.mean_offspring * self.rate

    @property
    def mean_population(self) -> ConstantMeanPopulation:
        return ConstantMeanPopulation(self.rate, self.branching.mean_offspring)

    def m(self, t: float) -> float:
        return float(self.mean_population(0.0, 0.0, t))

    def _jump(self, x: np.ndarray, gen) -> np.ndarray:
        spec = self.branching
        ks = np.array([k for k in spec._ks if k > 0])
        w = np.array([k * spec.offspring[k] for k in ks], float)
        k = ks[np.searchsorted(np.cumsum(w / w.sum()), gen.random(x.size), side="right").clip(max=len(ks) - 1)]
        out = np.empty_like(x)
        for kk in np.unique(k):
            sel = k == kk
            child = spec.children_traits(x[sel], int(kk), gen)
            pick = gen.integers(kk, size=sel.sum())
            out[sel] = child[np.arange(sel.sum()), pick]
        return out


@dataclass
class SpinePath:
    jump_times: np.ndarray
    traits_after: np.ndarray
    x0: float
    branching: BranchingSpec

    def trait_at(self, s: float) -> float:
        k = int(np.searchsorted(self.jump_times, s, side="right"))
        if k == 0:
            return float(self.branching.trait_at(self.x0, s))
        return float(self.branching.trait_at(self.traits_after[k - 1], s - self.jump_times[k - 1]))


def simulate_spine(spec: SpineSpec, x0: float, t: float, rng) -> SpinePath:
    gen = as_generator(rng)
    times, traits = [], []
    s, x = 0.0, float(x0)
    lam = spec.jump_rate
    while lam > 0:
        s += gen.standard_exponential() / lam
        if s > t:
            break
        x = float(spec._jump(np.array([spec.branching.trait_at(x, s - (times[-1] if times else 0.0))]), gen)[0])
        times.append(s)
        traits.append(x)
    return SpinePath(np.array(times), np.array(traits), float(x0), spec.branching)


def spine_traits(spec: SpineSpec, x0: float, s: float, n: int, rng) -> np.ndarray:
    """Spine trait at time ``s`` for ``n`` independent copies (vectorized)."""
    gen = as_generator(rng)
    x = np.full(n, float(x0))
    clock = np.zeros(n)
    active = np.arange(n)
    lam = spec.jump_rate
    while active.size and lam > 0:
        nxt = clock[active] + gen.standard_exponential(active.size) / lam
        jumping = nxt <= s
        done = active[~jumping]
        x[done] = spec.branching.trait_at(x[done], s - clock[done])
        clock[done] = s
        active = active[jumping]
        nxt = nxt[jumping]
        pre = spec.branching.trait_at(x[active], nxt - clock[active])
        x[active] = spec._jump(np.asarray(pre, float), gen)
        clock[active] = nxt
    if lam == 0:
        x = spec.branching.trait_at(x, s)
    return np.asarray(x, float)


def simulate_spine_general(branching: BranchingSpec, m: MeanPopulation, x0: float, t: float, rng,
                           majorant: float) -> SpinePath:
    """Time-inhomogeneous spine for a user-supplied ``m(x, s, t)``.

    Deterministic trait flow and deterministic offspring kernel assumed, so
    the biased rate is ``B(x) sum_k p_k sum_j m(y_j, s, t) / m(x, s, t)``
    and the jump picks child ``j`` of a ``k``-split with weight
    ``p_k m(y_j, s, t)``. Jump times come from thinning against ``majorant``.
    """
    gen = as_generator(rng)
    times, traits = [], []
    s, x, last = 0.0, float(x0), 0.0
    while True:
        s += gen.standard_exponential() / majorant
        if s > t:
            break
        xs = float(branching.trait_at(x, s - last))
        cands, weights = [], []
        mx = float(m(xs, s, t))
        for k, pk in branching.offspring.items():
            if k == 0 or pk == 0:
                continue
            ys = branching.children_traits(np.array([xs]), int(k), gen)[0]
            for y in ys:
                cands.append(float(y))
                weights.append(pk * float(m(y, s, t)) / mx)
        rate = float(branching.division.rate(np.array([xs]))[0]) * sum(weights)
        if rate > majorant * (1 + 1e-12):
            raise MajorantViolation(f"biased jump rate {rate:.6g} exceeds majorant {majorant:.6g}", state=xs)
        if gen.random() * majorant < rate:
            w = np.array(weights) / sum(weights)
            x = cands[int(np.searchsorted(np.cumsum(w), gen.random(), side="right").clip(max=len(w) - 1))]
            times.append(s)
            traits.append(x)
        else:
            x = xs
        last = s
    return SpinePath(np.array(times), np.array(traits), float(x0), branching)


# ---------------------------------------------------------------------------
# verification


@dataclass
class ManyToOne:
    lhs: st.Estimate
    rhs: st.Estimate
    z: float


def many_to_one_check(spine: SpineSpec, f: Callable, x0: float, t: float, n_rep: int, rng,
                      s: float | None = None, trees: list | None = None) -> ManyToOne:
    """Both sides of the many-to-one identity by independent Monte Carlo."""
    stream = as_stream(rng)
    s = t if s is None else s
    if trees is None:
        tree_stream = stream.substream(0)
        trees = [simulate_tree(spine.branching, x0, t, tree_stream.substream(i)) for i in range(n_rep)]
    lhs = st.estimate([population_functional(tr, f, t, s) for tr in trees])
    ys = spine_traits(spine, x0, s, n_rep, stream.substream(1))
    rhs = st.estimate(spine.m(t) * np.asarray(f(ys), float))
    return ManyToOne(lhs, rhs, st.z_score(lhs, rhs))


@dataclass
class SamplingLimitRow:
    n_initial: int
    sampled: st.Estimate
    spine: st.Estimate
    z: float

    @property
    def discrepancy(self) -> float:
        return abs(self.sampled.mean - self.spine.mean)

    @property
    def discrepancy_se(self) -> float:
        return math.hypot(self.sampled.se, self.spine.se)


def sampling_limit_check(spine: SpineSpec, f: Callable, x0: float, t: float, n_initial=(1, 4, 16, 64),
                         n_rep: int = 10_000, rng=0, s: float | None = None, max_resample: int = 1000):
    """Trait of a uniformly sampled individual vs the spine, along a schedule of founder counts."""
    stream = as_stream(rng)
    s = t if s is None else s
    ys = spine_traits(spine, x0, s, n_rep, stream.substream(0))
    spine_est = st.estimate(np.asarray(f(ys), float))
    rows = []
    for j, n in enumerate(n_initial):
        gen = stream.substream(1 + j).generator()
        vals = np.empty(n_rep)
        for r in range(n_rep):
            for _ in range(max_resample):
                tree = simulate_tree(spine.branching, np.full(int(n), float(x0)), t, gen)
                alive = tree.alive(t)
                if alive.size:
                    break
            else:
                raise ExtinctionError("every resampled forest went extinct")
            i = int(alive[gen.integers(alive.size)])
            a = tree.ancestor_at(i, s)
            vals[r] = float(np.asarray(f(tree.traits([a], s)), float)[0])
        est = st.estimate(vals)
        rows.append(SamplingLimitRow(int(n), est, spine_est, st.z_score(est, spine_est)))
    return rows
