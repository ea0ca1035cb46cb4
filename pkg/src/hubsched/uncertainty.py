"""Moment-based ambiguity sets, data-driven sizing, and scenario sampling.

An ambiguity set collects every probability distribution whose mean stays
inside an ellipsoid around the estimated mean (radius gamma1 in the metric
of the estimated covariance) and whose centered second moment is dominated
by gamma2 times the estimated covariance.  Scalar and 2-vector quantities
are both supported; the scalar case is what the robust scheduling stages
consume per slot.

The module also carries the sampling side: reproducible renewable, load and
real-time-price traces at 15-minute resolution whose hourly aggregates match
the hourly draws, so the three scheduling timescales see one consistent
world.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

_REL_TOL = 1e-9


@dataclass(frozen=True)
class MomentInfo:
    """Estimated mean and centered second moment of a random quantity."""

    mean: np.ndarray
    second: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, float)))
        object.__setattr__(self, "second",
                           np.atleast_2d(np.asarray(self.second, float)))
        d = self.mean.shape[0]
        if self.second.shape != (d, d):
            raise ValueError("second moment shape does not match the mean")
        if not np.allclose(self.second, self.second.T):
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.second)) < -1e-10:
            raise ValueError("covariance must be positive semidefinite")

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def scalar_mean(self):
        return float(self.mean[0])

    @property
    def scalar_var(self):
        return float(self.second[0, 0])


@dataclass(frozen=True)
class AmbiguitySet:
    """Moment ambiguity set with radii (gamma1, gamma2) and optional support box."""

    moments: MomentInfo
    gamma1: float
    gamma2: float
    support: Optional[tuple] = None  # (lo, hi) arrays or scalars

    def __post_init__(self):
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be nonnegative")
        if self.gamma2 < max(self.gamma1, 1.0):
            raise ValueError("gamma2 must be at least max(gamma1, 1)")
        if self.support is not None:
            lo = np.atleast_1d(np.asarray(self.support[0], float))
            hi = np.atleast_1d(np.asarray(self.support[1], float))
            object.__setattr__(self, "support", (lo, hi))
            if np.any(self.moments.mean < lo) or np.any(self.moments.mean > hi):
                raise ValueError("support box must contain the mean")

    @property
    def dim(self):
        return self.moments.dim


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support distribution used as a test oracle and witness."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        object.__setattr__(self, "atoms", atoms)
        w = np.asarray(self.weights, float)
        object.__setattr__(self, "weights", w)
        if w.shape[0] != atoms.shape[0]:
            raise ValueError("weights and atoms disagree in length")
        if np.any(w < -1e-15) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")

    @staticmethod
    def point(atom):
        return DiscreteDistribution(np.atleast_1d(np.asarray(atom, float))[None, :],
                                    np.array([1.0]))

    def mean(self):
        return self.weights @ self.atoms

    def centered_second(self, center):
        dev = self.atoms - np.atleast_1d(np.asarray(center, float))[None, :]
        return (dev * self.weights[:, None]).T @ dev

    def expect_linear(self, slope, intercept=0.0):
        vals = intercept + self.atoms @ np.atleast_1d(np.asarray(slope, float))
        return float(self.weights @ vals)


def estimate_moments(samples) -> MomentInfo:
    """Arithmetic mean and unbiased sample (co)variance of the samples."""
    arr = np.asarray(samples, float)
    if arr.ndim == 1:
        arr = arr[:, None]
    n = arr.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to estimate moments")
    mean = arr.mean(axis=0)
    dev = arr - mean
    second = dev.T @ dev / (n - 1)
    return MomentInfo(mean=mean, second=second, sample_count=n)


def contains(aset: AmbiguitySet, dist: DiscreteDistribution,
             rel_tol=_REL_TOL) -> bool:
    """Membership of a discrete distribution in the ambiguity set."""
    u = aset.moments.mean
    sigma = aset.moments.second
    if dist.atoms.shape[1] != u.shape[0]:
        raise ValueError("distribution dimension does not match the set")
    if aset.support is not None:
        lo, hi = aset.support
        span = 1.0 + np.abs(lo[None, :]) + np.abs(hi[None, :])
        if np.any(dist.atoms < lo[None, :] - rel_tol * span) \
                or np.any(dist.atoms > hi[None, :] + rel_tol * span):
            return False
    dev = dist.mean() - u
    pinv = np.linalg.pinv(sigma)
    scale = 1.0 + float(np.max(np.abs(sigma)))
    # the deviation must lie in the range of sigma (pseudo-inverse semantics)
    resid = sigma @ (pinv @ dev) - dev
    if float(np.linalg.norm(resid)) > rel_tol * (1.0 + float(np.linalg.norm(dev))):
        return False
    if float(dev @ pinv @ dev) > aset.gamma1 * (1.0 + rel_tol) + rel_tol:
        return False
    gap = aset.gamma2 * sigma - dist.centered_second(u)
    return float(np.min(np.linalg.eigvalsh(gap))) >= -rel_tol * scale


def select_gamma(samples, grid, split_ratio=0.5):
    """Pick the smallest (gamma1, gamma2) whose set built on one half of the
    samples accepts the other half's empirical distribution.

    The grid is swept in lexicographic order (gamma1 first), skipping pairs
    that violate gamma2 >= max(gamma1, 1).
    """
    arr = np.asarray(samples, float)
    n = arr.shape[0]
    n_a = int(np.ceil(n * split_ratio))
    if n_a < 2 or n - n_a < 1:
        raise ValueError("split leaves too few samples in a subset")
    part_a, part_b = arr[:n_a], arr[n_a:]
    moments = estimate_moments(part_a)
    emp = DiscreteDistribution(part_b, np.full(part_b.shape[0],
                                               1.0 / part_b.shape[0]))
    candidates = sorted((float(g1), float(g2)) for g1, g2 in grid)
    for g1, g2 in candidates:
        if g2 < max(g1, 1.0):
            continue
        if contains(AmbiguitySet(moments, g1, g2), emp):
            return g1, g2
    raise ValueError("no grid candidate accepted; enlarge the grid")


def worst_case_linear(aset: AmbiguitySet, slope, intercept=0.0):
    """Maximum of E[intercept + slope * xi] over a scalar ambiguity set.

    The objective is linear in xi, so only the mean matters and the optimum
    sits on the mean ellipsoid: intercept + slope*u + |slope|*sqrt(gamma1*var),
    attained by a point mass.  With a support box the witness atom is clipped
    into the box and the value is evaluated at the clipped witness.
    """
    if aset.dim != 1:
        raise ValueError("worst_case_linear handles scalar sets only")
    u = aset.moments.scalar_mean
    var = aset.moments.scalar_var
    slope = float(slope)
    shift = float(np.sqrt(aset.gamma1 * var))
    atom = u + (shift if slope >= 0 else -shift)
    if aset.support is not None:
        lo, hi = float(aset.support[0][0]), float(aset.support[1][0])
        atom = min(max(atom, lo), hi)
    witness = DiscreteDistribution.point(atom)
    value = float(intercept) + slope * atom
    return value, witness


# ---------------------------------------------------------------------------
# scenario sampling


@dataclass
class ScenarioConfig:
    """Per-hour mean/sigma curves for the three uncertain quantities."""

    u_f_mean: np.ndarray
    u_f_sigma: np.ndarray
    d_e_u_mean: np.ndarray
    d_e_u_sigma: np.ndarray
    p_c_mean: np.ndarray
    p_c_sigma: np.ndarray

    def __post_init__(self):
        for name in ("u_f_mean", "u_f_sigma", "d_e_u_mean", "d_e_u_sigma",
                     "p_c_mean", "p_c_sigma"):
            setattr(self, name, np.asarray(getattr(self, name), float))
        self.horizon = self.u_f_mean.shape[0]
        for name in ("u_f_sigma", "d_e_u_mean", "d_e_u_sigma", "p_c_mean",
                     "p_c_sigma"):
            if getattr(self, name).shape[0] != self.horizon:
                raise ValueError("scenario curves must share one horizon")
        if np.any(self.u_f_sigma < 0) or np.any(self.d_e_u_sigma < 0) \
                or np.any(self.p_c_sigma < 0):
            raise ValueError("sigmas must be nonnegative")

    @staticmethod
    def from_json(path):
        with open(path) as fh:
            raw = json.load(fh)
        return ScenarioConfig(
            u_f_mean=raw["u_f_mean"], u_f_sigma=raw["u_f_sigma"],
            d_e_u_mean=raw["d_e_u_mean"], d_e_u_sigma=raw["d_e_u_sigma"],
            p_c_mean=raw["p_c_mean"], p_c_sigma=raw["p_c_sigma"])


@dataclass
class ScenarioTrace:
    """One sampled world at 15-minute resolution.

    Arrays have shape (T, 4): slot-major, quarter-minor.  Energy quantities
    are kWh per quarter and sum across a row to the hourly draw; the
    real-time price is constant within each hour.
    """

    u_f: np.ndarray
    d_e_u: np.ndarray
    p_c: np.ndarray
    seed: Optional[int] = None

    @property
    def horizon(self):
        return self.u_f.shape[0]

    def hourly_u_f(self):
        return self.u_f.sum(axis=1)

    def hourly_d_e_u(self):
        return self.d_e_u.sum(axis=1)

    def hourly_p_c(self):
        return self.p_c[:, 0].copy()


def _truncated_normal(rng, mean, sigma, lo=0.0):
    if sigma <= 0.0:
        return max(float(mean), lo)
    a = (lo - mean) / sigma
    return float(stats.truncnorm.rvs(a, np.inf, loc=mean, scale=sigma,
                                     random_state=rng))


def _quarter_shares(rng):
    raw = np.clip(rng.normal(1.0, 0.1, size=4), 0.2, 1.8)
    return raw / raw.sum()


def sample_profiles(config: ScenarioConfig, seed) -> ScenarioTrace:
    """Draw one reproducible trace; hourly totals match the hourly draws."""
    rng = np.random.default_rng(seed)
    T = config.horizon
    u_f = np.zeros((T, 4))
    d_e_u = np.zeros((T, 4))
    p_c = np.zeros((T, 4))
    for k in range(T):
        uf_h = _truncated_normal(rng, config.u_f_mean[k], config.u_f_sigma[k])
        de_h = _truncated_normal(rng, config.d_e_u_mean[k], config.d_e_u_sigma[k])
        pc_h = _truncated_normal(rng, config.p_c_mean[k], config.p_c_sigma[k],
                                 lo=0.01)
        u_f[k] = uf_h * _quarter_shares(rng)
        d_e_u[k] = de_h * _quarter_shares(rng)
        p_c[k] = pc_h
    return ScenarioTrace(u_f=u_f, d_e_u=d_e_u, p_c=p_c, seed=seed)


SCENARIO_CSV_HEADER = ["slot", "quarter", "u_f", "D_e_u", "p_c"]


def write_scenario_csv(path, trace: ScenarioTrace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCENARIO_CSV_HEADER)
        for k in range(trace.horizon):
            for q in range(4):
                w.writerow([k, q, repr(float(trace.u_f[k, q])),
                            repr(float(trace.d_e_u[k, q])),
                            repr(float(trace.p_c[k, q]))])


def read_scenario_csv(path) -> ScenarioTrace:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCENARIO_CSV_HEADER:
            raise ValueError(f"unexpected scenario header: {reader.fieldnames}")
        for row in reader:
            rows[(int(row["slot"]), int(row["quarter"]))] = (
                float(row["u_f"]), float(row["D_e_u"]), float(row["p_c"]))
    T = 1 + max(k for k, _ in rows)
    u_f = np.zeros((T, 4))
    d_e_u = np.zeros((T, 4))
    p_c = np.zeros((T, 4))
    for (k, q), (a, b, c) in rows.items():
        u_f[k, q], d_e_u[k, q], p_c[k, q] = a, b, c
    return ScenarioTrace(u_f=u_f, d_e_u=d_e_u, p_c=p_c)
