"""Conformal p-values from a held-out calibration set, plus exact (oracle) p-values.

Scores are assumed oriented so that large values are evidence of OOD; the
p-value of a test score is the (smoothed) fraction of calibration scores that
are at least as large.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .numerics import normal_sf


def _as_finite_vector(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ConfigurationError(f"{what} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ConfigurationError(f"{what} is empty")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise ConfigurationError(f"{what} contains non-finite value at index {int(bad[0])}")
    return arr


def conformal_p_value(cal_scores, t_test: float) -> float:
    """Classical conformal p-value ``(1 + #{cal >= t}) / (1 + n_cal)``.

    Ties with calibration scores count as exceedances.
    """
    cal = _as_finite_vector(cal_scores, "calibration scores")
    if not np.isfinite(t_test):
        raise ConfigurationError(f"test score must be finite, got {t_test}")
    exceed = int(np.count_nonzero(cal >= t_test))
    return (1 + exceed) / (1 + cal.size)


@dataclass(frozen=True)
class CalibrationSet:
    """K calibration score columns of common length ``n_cal``.

    Immutable after construction. Each column is stored sorted ascending so
    that batch queries cost ``O(log n_cal)`` per score.

    Args:
        scores: array of shape ``(n_cal, K)``; column ``i`` holds score ``i``.
        score_names: optional column labels (defaults to ``s0, s1, ...``).
    """

    scores: np.ndarray
    score_names: tuple[str, ...] = ()
    _sorted: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        arr = np.array(self.scores, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ConfigurationError(f"calibration scores must be a non-empty (n_cal, K) array, got shape {arr.shape}")
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            row, col = bad[0]
            raise ConfigurationError(f"calibration score at row {row}, column {col} is not finite")
        names = tuple(self.score_names) or tuple(f"s{i}" for i in range(arr.shape[1]))
        if len(names) != arr.shape[1]:
            raise ConfigurationError(f"{len(names)} score names given for {arr.shape[1]} columns")
        arr.setflags(write=False)
        srt = np.sort(arr, axis=0)
        srt.setflags(write=False)
        object.__setattr__(self, "scores", arr)
        object.__setattr__(self, "score_names", names)
        object.__setattr__(self, "_sorted", srt)

    @classmethod
    def from_columns(cls, columns: Sequence[Sequence[float]], score_names: Sequence[str] = ()) -> CalibrationSet:
        lengths = {len(c) for c in columns}
        if len(lengths) != 1:
            raise ConfigurationError(f"calibration columns have unequal lengths {sorted(lengths)}")
        return cls(np.column_stack([np.asarray(c, dtype=float) for c in columns]), tuple(score_names))

    @property
    def n_cal(self) -> int:
        return self.scores.shape[0]

    @property
    def K(self) -> int:
        return self.scores.shape[1]

    def exceedance_counts(self, test_scores) -> np.ndarray:
        """``#{cal_i >= t_i}`` for every row of ``test_scores`` (shape ``(n, K)``)."""
        t = np.asarray(test_scores, dtype=float)
        squeeze = t.ndim == 1
        t = np.atleast_2d(t)
        if t.shape[1] != self.K:
            raise ConfigurationError(f"expected {self.K} scores per test sample, got {t.shape[1]}")
        if not np.all(np.isfinite(t)):
            raise ConfigurationError("test scores must be finite")
        counts = np.empty(t.shape, dtype=np.int64)
        for i in range(self.K):
            counts[:, i] = self.n_cal - np.searchsorted(self._sorted[:, i], t[:, i], side="left")
        return counts[0] if squeeze else counts

    def p_values(self, test_scores) -> np.ndarray:
        """Vectorised conformal p-values for one test vector or a batch of rows."""
        return (1.0 + self.exceedance_counts(test_scores)) / (1.0 + self.n_cal)


def conformal_p_values(cal: CalibrationSet, test_scores) -> np.ndarray:
    """Per-score conformal p-values of a single test vector of length K.

    Column ``i`` of the calibration set is used for ``test_scores[i]``.
    """
    t = np.asarray(test_scores, dtype=float)
    if t.ndim != 1 or t.size != cal.K:
        raise ConfigurationError(f"expected a vector of {cal.K} test scores, got shape {t.shape}")
    return cal.p_values(t)


@dataclass(frozen=True)
class NormalCDF:
    """Analytic null distribution ``N(mean, std**2)``."""

    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise ConfigurationError(f"std must be positive, got {self.std}")

    def sf(self, t: float) -> float:
        return normal_sf((t - self.mean) / self.std)


def oracle_p_value(null_cdf, t_test: float) -> float:
    """Exact p-value ``1 - F(t)`` under a known null distribution.

    Args:
        null_cdf: a :class:`NormalCDF`, or the strings ``"standard_normal"``
            / ``"normal"`` (the latter meaning standard normal as well).
    """
    if isinstance(null_cdf, str):
        if null_cdf not in ("standard_normal", "normal"):
            raise ConfigurationError(f"unsupported null family {null_cdf!r}")
        null_cdf = NormalCDF()
    if not isinstance(null_cdf, NormalCDF):
        raise ConfigurationError(f"unsupported null family {type(null_cdf).__name__}")
    return null_cdf.sf(float(t_test))
