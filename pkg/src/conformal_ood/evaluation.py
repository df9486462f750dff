"""Detection metrics: power at a fixed false alarm, AUROC, empirical FWER."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError


def _nonempty(values, what: str, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.size == 0:
        raise ConfigurationError(f"{what} is empty")
    return arr


def power_at_false_alarm(in_decisions, ood_decisions, target_pf: float | None = None) -> tuple[float, float]:
    """Detection power and achieved false-alarm rate of already-made decisions.

    Thresholds are never adjusted here; ``target_pf`` is accepted for the
    record only (the detector is expected to have been configured with it).

    Returns:
        ``(pd, achieved_pf)``.
    """
    ind = _nonempty(in_decisions, "in-distribution decisions", bool)
    ood = _nonempty(ood_decisions, "OOD decisions", bool)
    return float(ood.mean()), float(ind.mean())


def auroc(in_scores, ood_scores) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Scores must be oriented so that larger means more OOD. Ties count 1/2.
    """
    a = _nonempty(in_scores, "in-distribution scores")
    b = _nonempty(ood_scores, "OOD scores")
    ranks = rankdata(np.concatenate([a, b]))
    # U for the OOD side; midranks give the 1/2 tie credit. Doubling keeps
    # the arithmetic in exact half-integers.
    twice_u = 2.0 * ranks[a.size:].sum() - b.size * (b.size + 1)
    return float(twice_u / (2.0 * a.size * b.size))


def empirical_fwer(decision_matrix) -> float:
    """Fraction of trials (rows) with at least one rejection, all nulls true."""
    d = np.asarray(decision_matrix)
    if d.ndim == 1:
        d = d[:, None]
    if d.shape[0] == 0:
        return 0.0
    return float(np.mean(np.any(d.astype(bool), axis=1)))
