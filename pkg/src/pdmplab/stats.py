"""Monte-Carlo summaries: compensated means, standard errors, z-scores."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        if self.n < 2:
            return (self.mean, self.mean)
        q = stats.t.ppf(0.5 + level / 2, self.n - 1)
        return (self.mean - q * self.se, self.mean + q * self.se)


def fsum_mean(values) -> float:
    """Order-insensitive mean (compensated summation)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("mean of an empty sample")
    return math.fsum(v.tolist()) / v.size


def estimate(values) -> Estimate:
    v = np.asarray(values, dtype=float).ravel()
    m = fsum_mean(v)
    if v.size < 2:
        return Estimate(m, 0.0, int(v.size))
    var = math.fsum(((v - m) ** 2).tolist()) / (v.size - 1)
    return Estimate(m, math.sqrt(var / v.size), int(v.size))


def z_score(a: Estimate, b: Estimate | float) -> float:
    """Two-sample z (or one-sample if ``b`` is a number)."""
    if isinstance(b, Estimate):
        diff, se = a.mean - b.mean, math.hypot(a.se, b.se)
    else:
        diff, se = a.mean - float(b), a.se
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p - q).sum())


def non_increasing(values, ses, k: float = 2.0) -> bool:
    """Consecutive values never rise by more than ``k`` combined standard errors."""
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    rises = v[1:] - v[:-1]
    allowed = k * np.hypot(s[1:], s[:-1])
    return bool(np.all(rises <= allowed))


def decreasing_trend(values, ses, level: float = 0.05) -> dict:
    """Trend verdict along a schedule.

    The overall drop (first minus last) is tested one-sided against its
    combined standard error; the verdict also requires no consecutive rise
    beyond 2 combined SE.
    """
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    drop = v[0] - v[-1]
    drop_se = math.hypot(s[0], s[-1])
    z = drop / drop_se if drop_se > 0 else (math.inf if drop > 0 else 0.0)
    p = float(stats.norm.sf(z))
    mono = non_increasing(v, s)
    return {"drop": float(drop), "drop_z": float(z), "p_value": p, "monotone": mono,
            "decreasing": bool(mono and p < level)}
