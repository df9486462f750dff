"""OOD detectors built on multiple testing, and calibration-size solvers.

Three decision rules are provided:

* :func:`bh_detect` -- step-up Benjamini-Hochberg style test whose threshold
  ladder ``alpha * i / (C(K) * K)`` carries the dependence correction
  ``C(K) = (1 + epsilon) * H_K``.
* :func:`bonferroni_detect` -- a single threshold ``alpha / ((1 + epsilon) K)``.
* :func:`naive_average_detect` -- majority vote over per-score thresholds,
  kept as a baseline.

:func:`required_cal_size` returns the smallest calibration-set size for which
the conditional false-alarm guarantee of the BH detector holds with
probability ``1 - delta``; :func:`required_cal_size_bonferroni` does the same
for the Bonferroni detector.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, CapacityError, ConfigurationError
from .numerics import reg_inc_beta


class Method(str, enum.Enum):
    BH = "bh"
    BONFERRONI = "bonferroni"
    NAIVE = "naive"


@dataclass(frozen=True)
class DetectorConfig:
    """Parameters shared by the detectors and the calibration-size solvers.

    Attributes:
        alpha: target conditional false-alarm probability, in (0, 1).
        epsilon: slack factor in the threshold correction, >= 0.
        delta: probability that the guarantee is allowed to fail, in (0, 1).
        K: number of scores combined.
        method: which decision rule to use.
    """

    alpha: float
    K: int
    epsilon: float = 1.0
    delta: float = 0.1
    method: Method = Method.BH

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise ConfigurationError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if isinstance(self.K, bool) or int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"K must be a positive integer, got {self.K}")

    def thresholds(self) -> np.ndarray:
        """Per-rank p-value thresholds of the configured rule (length K)."""
        if self.method is Method.BH:
            return bh_thresholds(self.alpha, self.epsilon, self.K)
        if self.method is Method.BONFERRONI:
            return np.full(self.K, bonferroni_threshold(self.alpha, self.epsilon, self.K))
        raise ConfigurationError("the naive rule has no p-value thresholds")


@dataclass
class DetectionResult:
    """Outcome of one detector on one test sample.

    ``m`` is the number of rejected per-score hypotheses; the sample is
    declared OOD iff ``m >= 1`` (for the naive rule ``m`` counts exceedances
    and ``is_ood`` follows the majority vote instead).
    """

    is_ood: bool
    m: int
    p_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    sorted_p_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    rejected_indices: tuple[int, ...] = ()
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> dict:
        return {
            "is_ood": bool(self.is_ood),
            "m": int(self.m),
            "p_values": [float(v) for v in self.p_values],
            "sorted_p_values": [float(v) for v in self.sorted_p_values],
            "rejected_indices": [int(i) for i in self.rejected_indices],
            "thresholds": [float(v) for v in self.thresholds],
        }

    @classmethod
    def from_dict(cls, data: dict) -> DetectionResult:
        return cls(
            is_ood=bool(data["is_ood"]),
            m=int(data["m"]),
            p_values=np.asarray(data.get("p_values", []), dtype=float),
            sorted_p_values=np.asarray(data.get("sorted_p_values", []), dtype=float),
            rejected_indices=tuple(int(i) for i in data.get("rejected_indices", [])),
            thresholds=np.asarray(data.get("thresholds", []), dtype=float),
        )


def harmonic_number(K: int) -> float:
    return math.fsum(1.0 / j for j in range(1, K + 1))


def correction_constant(K: int, epsilon: float) -> float:
    """``C(K) = (1 + epsilon) * sum_{j=1..K} 1/j``."""
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    return (1.0 + epsilon) * harmonic_number(K)


def bh_thresholds(alpha: float, epsilon: float, K: int) -> np.ndarray:
    c = correction_constant(K, epsilon)
    return alpha * np.arange(1, K + 1) / (c * K)


def bonferroni_threshold(alpha: float, epsilon: float, K: int) -> float:
    return alpha / ((1.0 + epsilon) * K)


def step_up_count(p_values, thresholds) -> np.ndarray | int:
    """Largest ``i`` with ``p_(i) <= thresholds[i-1]`` (0 if none).

    Works on a single vector or row-wise on a 2-D array.
    """
    p = np.asarray(p_values, dtype=float)
    thr = np.asarray(thresholds, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != thr.size:
        raise ConfigurationError(f"got {p.shape[1]} p-values for {thr.size} thresholds")
    passing = np.sort(p, axis=1) <= thr
    last = thr.size - np.argmax(passing[:, ::-1], axis=1)
    m = np.where(passing.any(axis=1), last, 0)
    return int(m[0]) if single else m


def _check_p_values(p_values, cfg: DetectorConfig, expected: Method) -> np.ndarray:
    if cfg.method is not expected:
        raise ConfigurationError(f"detector expects method {expected.value!r}, config has {cfg.method.value!r}")
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1 or p.size != cfg.K:
        raise ConfigurationError(f"expected {cfg.K} p-values, got shape {p.shape}")
    if np.any(np.isnan(p)):
        raise ConfigurationError("p-values contain NaN")
    return p


def bh_detect(p_values, cfg: DetectorConfig) -> DetectionResult:
    """BH-style OOD test on the K conformal p-values of one sample."""
    p = _check_p_values(p_values, cfg, Method.BH)
    thr = bh_thresholds(cfg.alpha, cfg.epsilon, cfg.K)
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    passing = np.flatnonzero(sorted_p <= thr)
    m = int(passing[-1]) + 1 if passing.size else 0
    return DetectionResult(
        is_ood=m >= 1,
        m=m,
        p_values=p,
        sorted_p_values=sorted_p,
        rejected_indices=tuple(int(i) for i in order[:m]),
        thresholds=thr,
    )


def bonferroni_detect(p_values, cfg: DetectorConfig) -> DetectionResult:
    """Bonferroni-style OOD test: reject every score with ``p <= alpha / ((1+eps) K)``."""
    p = _check_p_values(p_values, cfg, Method.BONFERRONI)
    thr = bonferroni_threshold(cfg.alpha, cfg.epsilon, cfg.K)
    rejected = np.flatnonzero(p <= thr)
    return DetectionResult(
        is_ood=rejected.size >= 1,
        m=int(rejected.size),
        p_values=p,
        sorted_p_values=np.sort(p, kind="stable"),
        rejected_indices=tuple(int(i) for i in rejected),
        thresholds=np.full(cfg.K, thr),
    )


def detect(p_values, cfg: DetectorConfig) -> DetectionResult:
    if cfg.method is Method.BH:
        return bh_detect(p_values, cfg)
    if cfg.method is Method.BONFERRONI:
        return bonferroni_detect(p_values, cfg)
    raise ConfigurationError("the naive rule works on raw scores; use naive_average_detect")


def reject_counts(p_matrix, cfg: DetectorConfig) -> np.ndarray:
    """Row-wise ``m`` for a batch of p-value vectors (shape ``(n, K)``)."""
    p = np.asarray(p_matrix, dtype=float)
    if p.ndim != 2 or p.shape[1] != cfg.K:
        raise ConfigurationError(f"expected an (n, {cfg.K}) p-value matrix, got shape {p.shape}")
    if cfg.method is Method.BH:
        return step_up_count(p, bh_thresholds(cfg.alpha, cfg.epsilon, cfg.K))
    if cfg.method is Method.BONFERRONI:
        return np.count_nonzero(p <= bonferroni_threshold(cfg.alpha, cfg.epsilon, cfg.K), axis=1)
    raise ConfigurationError("the naive rule works on raw scores")


# --- naive averaging baseline -------------------------------------------------


def _naive_votes(scores: np.ndarray, taus: np.ndarray) -> np.ndarray:
    return np.count_nonzero(scores >= taus, axis=-1)


def naive_average_detect(scores, taus) -> DetectionResult:
    """Declare OOD when at least half of the scores reach their thresholds."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(taus, dtype=float)
    if s.ndim != 1 or s.shape != t.shape or s.size == 0:
        raise ConfigurationError(f"scores and thresholds must be equal-length vectors, got {s.shape} and {t.shape}")
    hits = s >= t
    m = int(np.count_nonzero(hits))
    return DetectionResult(
        is_ood=2 * m >= s.size,
        m=m,
        rejected_indices=tuple(int(i) for i in np.flatnonzero(hits)),
        thresholds=t,
    )


def naive_average_batch(scores, taus) -> np.ndarray:
    """Boolean OOD decisions of the naive rule for each row of ``scores``."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    t = np.asarray(taus, dtype=float)
    if s.shape[1] != t.size:
        raise ConfigurationError(f"expected {t.size} scores per row, got {s.shape[1]}")
    return 2 * _naive_votes(s, t) >= t.size


def calibrate_naive_thresholds(holdout, target_pf: float) -> np.ndarray:
    """Thresholds for the naive rule with false-alarm rate at most ``target_pf``.

    All K thresholds sit at a shared order-statistic level: threshold ``i`` is
    the ``k``-th largest holdout value of score ``i``. ``k`` is chosen by
    bisection as the largest level whose false-alarm rate on the holdout
    rows does not exceed the target.

    Raises:
        ConfigurationError: fewer than 100 holdout rows or ``target_pf >= 1``.
        CalibrationError: no level achieves a rate <= ``target_pf``.
    """
    x = np.asarray(holdout, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 100:
        raise ConfigurationError(f"need a holdout matrix with at least 100 rows, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("holdout scores must be finite")
    if target_pf >= 1.0:
        raise ConfigurationError(f"target_pf must be < 1, got {target_pf}")
    if target_pf <= 0.0:
        raise CalibrationError(f"false-alarm target {target_pf} is unreachable with finite data")
    n = x.shape[0]
    desc = -np.sort(-x, axis=0)

    def rate(k: int) -> float:
        return float(np.mean(naive_average_batch(x, desc[k - 1])))

    if rate(1) > target_pf:
        raise CalibrationError(
            f"smallest achievable false-alarm rate {rate(1):.4g} exceeds target {target_pf} with {n} rows"
        )
    lo, hi = 1, n
    if rate(hi) <= target_pf:
        return desc[hi - 1].copy()
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rate(mid) <= target_pf:
            lo = mid
        else:
            hi = mid
    return desc[lo - 1].copy()


# --- calibration-set size -----------------------------------------------------


@dataclass(frozen=True)
class CalSizeRequest:
    alpha: float
    epsilon: float
    delta: float
    K: int
    scan_limit: int = 1_000_000

    def __post_init__(self) -> None:
        DetectorConfig(alpha=self.alpha, epsilon=self.epsilon, delta=self.delta, K=self.K)
        if int(self.scan_limit) != self.scan_limit or self.scan_limit < 1:
            raise ConfigurationError(f"scan_limit must be a positive integer, got {self.scan_limit}")


@dataclass(frozen=True)
class MarginRow:
    """One term of the calibration-size condition."""

    j: int
    a: int
    b: int
    x: float
    cdf: float
    required: float

    @property
    def margin(self) -> float:
        return self.cdf - self.required


def _beta_terms(n_cal: int, level: float, epsilon: float) -> tuple[int, int, float]:
    a = math.floor((n_cal + 1) * level)
    b = (n_cal + 1) - a
    x = min(1.0, (1.0 + epsilon) * a / (a + b))
    return a, b, x


def _row(j: int, n_cal: int, level: float, epsilon: float, required: float) -> MarginRow:
    a, b, x = _beta_terms(n_cal, level, epsilon)
    if a < 1 or b < 1:
        return MarginRow(j, a, b, x, 0.0, required)
    return MarginRow(j, a, b, x, reg_inc_beta(x, a, b), required)


def _levels(req: CalSizeRequest, bonferroni: bool) -> tuple[list[float], float]:
    if bonferroni:
        return [bonferroni_threshold(req.alpha, req.epsilon, req.K)], 1.0 - req.delta / req.K
    c = correction_constant(req.K, req.epsilon)
    return [req.alpha * j / (c * req.K) for j in range(1, req.K + 1)], 1.0 - req.delta / req.K**2


def cal_size_margins(n_cal: int, req: CalSizeRequest, bonferroni: bool = False) -> list[MarginRow]:
    """Every term of the calibration-size condition at ``n_cal``.

    The condition holds iff all rows have ``a >= 1`` and ``margin >= 0``.
    Rows with ``a = 0`` report ``cdf = 0``.
    """
    levels, required = _levels(req, bonferroni)
    return [_row(j, n_cal, level, req.epsilon, required) for j, level in enumerate(levels, start=1)]


def cal_size_condition_holds(n_cal: int, req: CalSizeRequest, bonferroni: bool = False) -> bool:
    return all(r.a >= 1 and r.margin >= 0 for r in cal_size_margins(n_cal, req, bonferroni))


def _scan(req: CalSizeRequest, bonferroni: bool) -> int:
    levels, required = _levels(req, bonferroni)
    best_margin, best_n = -math.inf, None
    for n in range(1, req.scan_limit + 1):
        # a_1 is the smallest shape; skip while it is degenerate.
        if math.floor((n + 1) * levels[0]) < 1:
            continue
        worst = math.inf
        for j, level in enumerate(levels, start=1):
            row = _row(j, n, level, req.epsilon, required)
            worst = min(worst, row.margin if row.a >= 1 else -math.inf)
            if worst < 0:
                break
        if worst >= 0:
            return n
        if worst > best_margin:
            best_margin, best_n = worst, n
    raise CapacityError(
        f"no calibration size up to {req.scan_limit} satisfies the condition "
        f"(best margin {best_margin:.3g} at n_cal={best_n})",
        best_margin=best_margin,
        best_n=best_n,
    )


def required_cal_size(req: CalSizeRequest) -> int:
    """Smallest ``n_cal`` in ``[1, scan_limit]`` meeting the BH guarantee condition.

    With ``a_j = floor((n_cal + 1) alpha j / (C(K) K))``, ``b_j = n_cal + 1 - a_j``
    and ``mu_j = a_j / (n_cal + 1)``, the condition is
    ``min_j I_{(1+eps) mu_j}(a_j, b_j) >= 1 - delta / K**2`` with every ``a_j >= 1``.
    The scan runs upward and makes no monotonicity assumption.

    Raises:
        CapacityError: nothing feasible up to ``scan_limit``; carries the best margin.
    """
    return _scan(req, bonferroni=False)


def required_cal_size_bonferroni(req: CalSizeRequest) -> int:
    """Bonferroni analogue of :func:`required_cal_size`.

    Uses ``a = floor((n_cal + 1) alpha / ((1 + eps) K))`` and requires
    ``I_{(1+eps) mu}(a, b) >= 1 - delta / K``.
    """
    return _scan(req, bonferroni=True)
