"""Monte Carlo harness for the detectors.

Every simulation is a pure function of its inputs and ``seed``. Work is cut
into a fixed layout of units (chunks of test trials, or calibration draws),
and unit ``i`` always draws from the ``i``-th child of
``numpy.random.SeedSequence(seed)``. Workers only decide who runs a unit, so
the merged counts are bit-identical for every worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

from .conformal import CalibrationSet
from .errors import ConfigurationError
from .multiple_testing import (
    DetectorConfig,
    Method,
    calibrate_naive_thresholds,
    naive_average_batch,
    reject_counts,
    step_up_count,
)
from .numerics import normal_sf, normal_sf_inv

CHUNK_TRIALS = 10_000

T = TypeVar("T")

_normal_sf_vec = np.vectorize(normal_sf, otypes=[float])


def stream_seeds(seed: int, n_streams: int) -> list[np.random.SeedSequence]:
    """Child seed sequences for ``n_streams`` independent work units."""
    return np.random.SeedSequence(int(seed)).spawn(n_streams)


def run_units(
    fn: Callable[[int, np.random.Generator], T],
    seeds: Sequence[np.random.SeedSequence],
    workers: int = 1,
) -> list[T]:
    """Run ``fn(i, rng_i)`` for every unit (one per seed) and return results in unit order."""
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    n_units = len(seeds)

    def task(i: int) -> T:
        return fn(i, np.random.default_rng(seeds[i]))

    if workers == 1 or n_units <= 1:
        return [task(i) for i in range(n_units)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, range(n_units)))


def _chunk_sizes(n_trials: int) -> list[int]:
    full, rest = divmod(n_trials, CHUNK_TRIALS)
    return [CHUNK_TRIALS] * full + ([rest] if rest else [])


@dataclass
class MonteCarloReport:
    estimate: float
    stderr: float
    n_trials: int
    per_calibration_estimates: list[float] | None = None

    @classmethod
    def from_count(cls, hits: int, n_trials: int, per_calibration_estimates=None) -> MonteCarloReport:
        est = hits / n_trials
        return cls(
            estimate=est,
            stderr=math.sqrt(est * (1.0 - est) / n_trials),
            n_trials=n_trials,
            per_calibration_estimates=None if per_calibration_estimates is None else [float(v) for v in per_calibration_estimates],
        )

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_trials": self.n_trials,
            "per_calibration_estimates": self.per_calibration_estimates,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MonteCarloReport:
        return cls(
            estimate=float(data["estimate"]),
            stderr=float(data["stderr"]),
            n_trials=int(data["n_trials"]),
            per_calibration_estimates=data.get("per_calibration_estimates"),
        )


@dataclass(frozen=True)
class SyntheticModel:
    """Gaussian (or Gaussian-mixture) generator of K-dimensional score vectors.

    Use the ``iid_normal``, ``correlated_normal`` and ``mixture`` constructors.
    """

    kind: str
    K: int
    means: tuple[np.ndarray, ...] = field(default=())
    covs: tuple[np.ndarray, ...] = field(default=())
    weights: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in ("iid_normal", "correlated_normal", "mixture"):
            raise ConfigurationError(f"unknown synthetic model kind {self.kind!r}")
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        for cov in self.covs:
            if cov.shape != (self.K, self.K) or not np.allclose(cov, cov.T):
                raise ConfigurationError("covariance must be a symmetric K x K matrix")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise ConfigurationError("covariance must be positive semidefinite")

    @classmethod
    def iid_normal(cls, K: int, shift: float | Sequence[float] = 0.0) -> SyntheticModel:
        mean = np.broadcast_to(np.asarray(shift, dtype=float), (K,)).copy()
        return cls("iid_normal", K, means=(mean,))

    @classmethod
    def correlated_normal(cls, mean: Sequence[float], cov) -> SyntheticModel:
        mean = np.asarray(mean, dtype=float)
        return cls("correlated_normal", mean.size, means=(mean,), covs=(np.asarray(cov, dtype=float),))

    @classmethod
    def mixture(cls, weights: Sequence[float], means: Sequence[Sequence[float]], covs) -> SyntheticModel:
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(means) != w.size or len(covs) != w.size or np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError("mixture needs matching non-negative weights, means and covariances")
        ms = tuple(np.asarray(m, dtype=float) for m in means)
        return cls("mixture", ms[0].size, means=ms, covs=tuple(np.asarray(c, dtype=float) for c in covs),
                   weights=tuple(w / w.sum()))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "iid_normal":
            return rng.standard_normal((n, self.K)) + self.means[0]
        if self.kind == "correlated_normal":
            return rng.multivariate_normal(self.means[0], self.covs[0], size=n, method="eigh")
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.K))
        for k in range(len(self.weights)):
            idx = np.flatnonzero(comp == k)
            out[idx] = rng.multivariate_normal(self.means[k], self.covs[k], size=idx.size, method="eigh")
        return out


# --- the bivariate motivating example -------------------------------------------


def _check_two(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (2,):
        raise ConfigurationError(f"mu must be a 2-vector, got shape {mu.shape}")
    return mu


def _check_trials(n_trials: int, minimum: int = 1000) -> None:
    if n_trials < minimum:
        raise ConfigurationError(f"n_trials must be >= {minimum}, got {n_trials}")


def simulate_test_t1(mu, alpha: float, n_trials: int, seed: int, workers: int = 1) -> MonteCarloReport:
    """Rejection rate of the sum test under ``N(mu, I_2)``.

    The test rejects when the exact p-value ``Psi((T1 + T2) / sqrt(2))`` of the
    sum statistic is below ``alpha``.
    """
    mu = _check_two(mu)
    _check_trials(n_trials)
    sizes = _chunk_sizes(n_trials)

    def unit(i: int, rng: np.random.Generator) -> int:
        t = rng.standard_normal((sizes[i], 2)) + mu
        q = _normal_sf_vec(t.sum(axis=1) / math.sqrt(2.0))
        return int(np.count_nonzero(q < alpha))

    return MonteCarloReport.from_count(sum(run_units(unit, stream_seeds(seed, len(sizes)), workers)), n_trials)


def simulate_test_t2(mu, alpha: float, n_trials: int, seed: int, workers: int = 1) -> MonteCarloReport:
    """Rejection rate of the two-score step-up test (levels ``i * alpha / 2``) under ``N(mu, I_2)``.

    This is plain BH without the dependence correction; per-score p-values
    are exact.
    """
    mu = _check_two(mu)
    _check_trials(n_trials)
    sizes = _chunk_sizes(n_trials)
    thresholds = np.array([alpha / 2.0, alpha])

    def unit(i: int, rng: np.random.Generator) -> int:
        t = rng.standard_normal((sizes[i], 2)) + mu
        q = _normal_sf_vec(t)
        return int(np.count_nonzero(step_up_count(q, thresholds) >= 1))

    return MonteCarloReport.from_count(sum(run_units(unit, stream_seeds(seed, len(sizes)), workers)), n_trials)


def power_bound(mu, alpha: float) -> float:
    """Lower bound on the power of the two-score step-up test under ``N(mu, I_2)``."""
    mu = _check_two(mu)
    z = normal_sf_inv(alpha / 2.0)
    return 1.0 - min(1.0 - normal_sf(z - mu[0]), 1.0 - normal_sf(z - mu[1]))


# --- conformal detectors on synthetic scores ---------------------------------------


def _decisions(cal: CalibrationSet, test: np.ndarray, cfg: DetectorConfig, taus: np.ndarray | None) -> np.ndarray:
    if cfg.method is Method.NAIVE:
        return naive_average_batch(test, taus)
    return reject_counts(cal.p_values(test), cfg) >= 1


def _naive_taus(cal: CalibrationSet, cfg: DetectorConfig) -> np.ndarray | None:
    if cfg.method is not Method.NAIVE:
        return None
    return calibrate_naive_thresholds(cal.scores, cfg.alpha)


def verify_conditional_false_alarm(
    model: SyntheticModel,
    cfg: DetectorConfig,
    n_cal: int,
    n_cal_draws: int,
    n_test_draws: int,
    seed: int,
    workers: int = 1,
) -> MonteCarloReport:
    """Check the conditional false-alarm guarantee empirically.

    For each of ``n_cal_draws`` calibration sets drawn from ``model``, the
    false-alarm probability given that set is estimated with
    ``n_test_draws`` fresh null samples. The report's estimate is the
    fraction of calibration sets whose conditional rate is ``<= alpha``;
    the individual rates are in ``per_calibration_estimates``.
    """
    if model.K != cfg.K:
        raise ConfigurationError(f"model has K={model.K}, detector expects K={cfg.K}")
    if n_cal < 1 or n_cal_draws < 1 or n_test_draws < 1:
        raise ConfigurationError("n_cal, n_cal_draws and n_test_draws must be positive")

    def unit(i: int, rng: np.random.Generator) -> float:
        cal = CalibrationSet(model.sample(rng, n_cal))
        taus = _naive_taus(cal, cfg)
        hits = 0
        for size in _chunk_sizes(n_test_draws):
            hits += int(np.count_nonzero(_decisions(cal, model.sample(rng, size), cfg, taus)))
        return hits / n_test_draws

    rates = run_units(unit, stream_seeds(seed, n_cal_draws), workers)
    ok = sum(1 for r in rates if r <= cfg.alpha)
    return MonteCarloReport.from_count(ok, n_cal_draws, per_calibration_estimates=rates)


def estimate_power(
    model_null: SyntheticModel,
    model_alt: SyntheticModel,
    cfg: DetectorConfig,
    n_cal: int,
    n_trials: int,
    seed: int,
    workers: int = 1,
) -> MonteCarloReport:
    """Probability of declaring OOD for samples from ``model_alt``.

    One calibration set of size ``n_cal`` is drawn from ``model_null`` (unit
    0); test samples come from the following units. The naive rule
    calibrates its thresholds on that same set at ``cfg.alpha``.
    """
    if model_null.K != cfg.K or model_alt.K != cfg.K:
        raise ConfigurationError("model dimensions must match cfg.K")
    if n_trials < 1:
        raise ConfigurationError("n_trials must be positive")
    sizes = _chunk_sizes(n_trials)
    seeds = stream_seeds(seed, len(sizes) + 1)
    cal = CalibrationSet(model_null.sample(np.random.default_rng(seeds[0]), n_cal))
    taus = _naive_taus(cal, cfg)

    def unit(i: int, rng: np.random.Generator) -> int:
        return int(np.count_nonzero(_decisions(cal, model_alt.sample(rng, sizes[i]), cfg, taus)))

    hits = run_units(unit, seeds[1:], workers)
    return MonteCarloReport.from_count(sum(hits), n_trials)


def conditional_rejection_probability(cal_column, level: float, null_sf: Callable[[float], float] = normal_sf) -> float:
    """Exact ``P(conformal p-value <= level | calibration column)``.

    With ``a = floor((n_cal + 1) * level)`` the event is "test score exceeds
    the ``a``-th largest calibration score", so the probability is the null
    survival function at that order statistic (0 when ``a < 1``).
    """
    col = np.asarray(cal_column, dtype=float)
    n = col.size
    a = math.floor((n + 1) * level)
    if a < 1:
        return 0.0
    if a > n:
        return 1.0
    kth_largest = np.partition(col, n - a)[n - a]
    return float(null_sf(kth_largest))
