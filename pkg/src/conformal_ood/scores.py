"""Score functions over network features: Mahalanobis, Gram deviations, energy.

Each score is a pure function of fitted statistics and one sample's
features. Before conformal calibration, every score is oriented so that
larger values mean "more OOD" (see :data:`SCORE_REGISTRY`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, FittingError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_POWERS: tuple[int, ...] = tuple(range(1, 11))
DEFAULT_RIDGE_SCALE = 1e-6


@dataclass
class FeatureBundle:
    """Features of one sample.

    Attributes:
        layers: per-layer outputs; vectors, or ``(channels, ...)`` arrays.
        label: true class, required for fitting.
        predicted_class: model prediction, required by the Gram score.
        softmax: class probabilities, required by the energy score.
    """

    layers: list[np.ndarray]
    label: int | None = None
    predicted_class: int | None = None
    softmax: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.layers = [np.asarray(layer, dtype=float) for layer in self.layers]
        if self.softmax is not None:
            self.softmax = np.asarray(self.softmax, dtype=float)
            total = float(self.softmax.sum())
            if abs(total - 1.0) > 1e-6:
                raise ValidationError(f"softmax entries sum to {total}, expected 1")


@dataclass
class GaussianLayerStats:
    """Class means and tied covariance of one layer."""

    means: np.ndarray  # (n_classes, d)
    covariance: np.ndarray  # (d, d), ridge already added
    ridge: float
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        try:
            self._chol = linalg.cho_factor(self.covariance, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError) as exc:
            raise FittingError(f"covariance is not positive definite after ridge {self.ridge:g}: {exc}") from exc

    def squared_distances(self, x: np.ndarray) -> np.ndarray:
        diff = (x[None, :] - self.means).T  # (d, n_classes)
        solved = linalg.cho_solve(self._chol, diff)
        return np.einsum("ij,ij->j", diff, solved)


@dataclass
class GramLayerStats:
    """Per-class min/max of the Gram-matrix entries of one layer.

    ``mins``/``maxs`` have shape ``(n_classes, n_powers, n_correlations)``.
    """

    powers: tuple[int, ...]
    mins: np.ndarray
    maxs: np.ndarray
    normalizer: float = 1.0


@dataclass
class ClassStats:
    """Fitted statistics consumed by the score functions.

    Layers are keyed by their index in :attr:`FeatureBundle.layers`.
    """

    classes: tuple[int, ...]
    layer_shapes: dict[int, tuple[int, ...]]
    gaussian: dict[int, GaussianLayerStats] = field(default_factory=dict)
    gram: dict[int, GramLayerStats] = field(default_factory=dict)

    def class_index(self, c: int) -> int:
        try:
            return self.classes.index(int(c))
        except ValueError:
            raise ConfigurationError(f"class {c} was not seen during fitting") from None

    def check_shape(self, features: FeatureBundle, layer: int) -> np.ndarray:
        if layer >= len(features.layers):
            raise ConfigurationError(f"sample has {len(features.layers)} layers, layer {layer} requested")
        arr = features.layers[layer]
        expected = self.layer_shapes.get(layer)
        if expected is not None and tuple(arr.shape) != tuple(expected):
            raise ConfigurationError(f"layer {layer} has shape {arr.shape}, stats were fitted on {expected}")
        return arr

    def merged(self, other: ClassStats) -> ClassStats:
        """Combine Gaussian statistics from one fit with Gram statistics from another."""
        if self.classes != other.classes:
            raise ConfigurationError(f"class sets differ: {self.classes} vs {other.classes}")
        for layer in set(self.layer_shapes) & set(other.layer_shapes):
            if self.layer_shapes[layer] != other.layer_shapes[layer]:
                raise ConfigurationError(f"layer {layer} shapes differ between fits")
        return ClassStats(
            classes=self.classes,
            layer_shapes={**self.layer_shapes, **other.layer_shapes},
            gaussian={**self.gaussian, **other.gaussian},
            gram={**self.gram, **other.gram},
        )


def _labelled(train: Sequence[FeatureBundle], classes: Sequence[int] | None) -> tuple[np.ndarray, tuple[int, ...]]:
    if not train:
        raise FittingError("no training samples")
    labels = []
    for idx, b in enumerate(train):
        if b.label is None:
            raise FittingError(f"training sample {idx} has no label")
        labels.append(int(b.label))
    y = np.asarray(labels)
    seen = tuple(sorted(set(labels)))
    if classes is None:
        return y, seen
    wanted = tuple(sorted(int(c) for c in classes))
    missing = sorted(set(wanted) - set(seen))
    if missing:
        raise FittingError(f"classes {missing} have no training samples")
    extra = sorted(set(seen) - set(wanted))
    if extra:
        raise FittingError(f"training labels {extra} are not among the declared classes")
    return y, wanted


def _layer_indices(train: Sequence[FeatureBundle], layers: Sequence[int] | None) -> list[int]:
    n_layers = len(train[0].layers)
    idx = list(range(n_layers)) if layers is None else [int(i) for i in layers]
    for i in idx:
        if not 0 <= i < n_layers:
            raise ConfigurationError(f"layer {i} out of range for {n_layers} layers")
    return idx


def _stack_layer(train: Sequence[FeatureBundle], layer: int) -> np.ndarray:
    shape = train[0].layers[layer].shape
    for idx, b in enumerate(train):
        if b.layers[layer].shape != shape:
            raise ValidationError(f"sample {idx} layer {layer} has shape {b.layers[layer].shape}, expected {shape}")
    return np.stack([b.layers[layer] for b in train])


# --- Mahalanobis -------------------------------------------------------------


def fit_gaussian_layer(x: np.ndarray, y: np.ndarray, classes: Sequence[int], ridge: float | None = None) -> GaussianLayerStats:
    """Class means and pooled within-class covariance (divided by the total count).

    ``ridge=None`` uses ``1e-6 * trace(S) / d``.
    """
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    n, d = x.shape
    means = np.empty((len(classes), d))
    centered = np.empty_like(x)
    for k, c in enumerate(classes):
        mask = y == c
        if np.count_nonzero(mask) < 2:
            raise FittingError(f"class {c} needs at least 2 training samples, has {np.count_nonzero(mask)}")
        means[k] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[k]
    scatter = centered.T @ centered / n
    scatter = 0.5 * (scatter + scatter.T)
    lam = DEFAULT_RIDGE_SCALE * float(np.trace(scatter)) / d if ridge is None else float(ridge)
    if lam < 0:
        raise ConfigurationError(f"ridge must be >= 0, got {lam}")
    return GaussianLayerStats(means=means, covariance=scatter + lam * np.eye(d), ridge=lam)


def fit_mahalanobis(
    train: Sequence[FeatureBundle],
    layers: Sequence[int] | None = None,
    ridge: float | None = None,
    classes: Sequence[int] | None = None,
) -> ClassStats:
    """Fit class-conditional Gaussians with a tied covariance, one per layer."""
    y, cls = _labelled(train, classes)
    stats = ClassStats(classes=cls, layer_shapes={})
    for layer in _layer_indices(train, layers):
        x = _stack_layer(train, layer)
        stats.layer_shapes[layer] = tuple(x.shape[1:])
        stats.gaussian[layer] = fit_gaussian_layer(x, y, cls, ridge)
    return stats


def mahalanobis_score(stats: ClassStats, features: FeatureBundle, layer: int) -> float:
    """``max_c -(g - mu_c)^T Sigma^{-1} (g - mu_c)``; always <= 0, larger means in-distribution."""
    if layer not in stats.gaussian:
        raise ConfigurationError(f"no Gaussian statistics fitted for layer {layer}")
    x = stats.check_shape(features, layer).reshape(-1)
    return float(-np.min(stats.gaussian[layer].squared_distances(x)))


# --- Gram deviations ---------------------------------------------------------


def _as_channels(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    return arr.reshape(arr.shape[0], -1)


def gram_features(layer_output: np.ndarray, powers: Sequence[int] = DEFAULT_POWERS) -> np.ndarray:
    """Flattened upper triangles (with diagonal, row-major) of ``(G^p G^pT)^(1/p)``.

    Powers are element-wise. Returns an array of shape ``(len(powers), C*(C+1)/2)``.
    """
    g = _as_channels(np.asarray(layer_output, dtype=float))
    if np.any(g < 0):
        raise ValidationError("Gram features must be non-negative")
    rows, cols = np.triu_indices(g.shape[0])
    scale = float(g.max())
    out = np.zeros((len(powers), rows.size))
    if scale == 0.0:
        return out
    # Factor out the largest entry so g**p cannot overflow for large p.
    u = g / scale
    for k, p in enumerate(powers):
        up = u**p
        out[k] = scale**2 * np.power((up @ up.T)[rows, cols], 1.0 / p)
    return out


class GramDeviation(NamedTuple):
    score: float
    deltas: np.ndarray
    guarded: bool


def gram_deviation(values, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Relative out-of-range deviation of ``values`` from ``[lo, hi]``.

    Below the range: ``(lo - v) / |lo|``; above: ``(v - hi) / |hi|``; inside: 0.
    If the relevant bound is zero the raw difference is used instead; the
    second return value marks those entries.
    """
    v = np.asarray(values, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    below = v < lo
    above = v > hi
    lo_den = np.abs(lo)
    hi_den = np.abs(hi)
    guard = (below & (lo_den == 0)) | (above & (hi_den == 0))
    delta = np.zeros(np.broadcast(v, lo, hi).shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_lo = np.where(lo_den > 0, (lo - v) / np.where(lo_den > 0, lo_den, 1.0), lo - v)
        d_hi = np.where(hi_den > 0, (v - hi) / np.where(hi_den > 0, hi_den, 1.0), v - hi)
    delta = np.where(below, d_lo, delta)
    delta = np.where(above, d_hi, delta)
    return delta, guard


def _gram_minmax(feats: np.ndarray, y: np.ndarray, classes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    shape = (len(classes),) + feats.shape[1:]
    mins = np.empty(shape)
    maxs = np.empty(shape)
    for k, c in enumerate(classes):
        mask = y == c
        if not np.any(mask):
            raise FittingError(f"class {c} has no samples for the Gram fit")
        mins[k] = feats[mask].min(axis=0)
        maxs[k] = feats[mask].max(axis=0)
    return mins, maxs


def _holdout_split(y: np.ndarray, classes: Sequence[int], fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of held-out rows; at least one row per class stays in the fit."""
    rng = np.random.default_rng(seed)
    held = np.zeros(y.size, dtype=bool)
    for c in classes:
        idx = np.flatnonzero(y == c)
        n_hold = min(int(np.floor(fraction * idx.size)), idx.size - 1)
        if n_hold > 0:
            held[rng.permutation(idx)[:n_hold]] = True
    return held


def fit_gram(
    train: Sequence[FeatureBundle],
    powers: Sequence[int] = DEFAULT_POWERS,
    layers: Sequence[int] | None = None,
    holdout_fraction: float = 0.1,
    seed: int = 0,
    classes: Sequence[int] | None = None,
) -> ClassStats:
    """Fit per-class Gram min/max tables and per-layer normalizers.

    A seeded, class-stratified ``holdout_fraction`` of the samples is kept
    out of the min/max fit; the normalizer of a layer is the mean summed
    deviation over that held-out part (1.0 when nothing is held out or the
    mean is zero).
    """
    powers = tuple(int(p) for p in powers)
    if not powers or min(powers) < 1:
        raise ConfigurationError(f"powers must be positive integers, got {powers}")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigurationError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    y, cls = _labelled(train, classes)
    held = _holdout_split(y, cls, holdout_fraction, seed)
    stats = ClassStats(classes=cls, layer_shapes={})
    for layer in _layer_indices(train, layers):
        x = _stack_layer(train, layer)
        if np.any(x < 0):
            raise ValidationError(f"layer {layer} has negative feature entries; Gram scores need non-negative features")
        stats.layer_shapes[layer] = tuple(x.shape[1:])
        feats = np.stack([gram_features(row, powers) for row in x])
        mins, maxs = _gram_minmax(feats[~held], y[~held], cls)
        layer_stats = GramLayerStats(powers=powers, mins=mins, maxs=maxs)
        stats.gram[layer] = layer_stats
        normalizer = 1.0
        if held.any():
            totals = []
            for i in np.flatnonzero(held):
                b = train[i]
                c = b.predicted_class if b.predicted_class is not None else b.label
                k = stats.class_index(c)
                d, _ = gram_deviation(feats[i], mins[k], maxs[k])
                totals.append(d.sum())
            mean_total = float(np.mean(totals))
            if mean_total > 0:
                normalizer = mean_total
        layer_stats.normalizer = normalizer
    return stats


def gram_deviation_details(stats: ClassStats, features: FeatureBundle, layer: int) -> GramDeviation:
    if layer not in stats.gram:
        raise ConfigurationError(f"no Gram statistics fitted for layer {layer}")
    if features.predicted_class is None:
        raise ConfigurationError("Gram score needs the predicted class of the sample")
    gs = stats.gram[layer]
    k = stats.class_index(features.predicted_class)
    arr = stats.check_shape(features, layer)
    deltas, guard = gram_deviation(gram_features(arr, gs.powers), gs.mins[k], gs.maxs[k])
    guarded = bool(guard.any())
    if guarded:
        logger.warning("Gram deviation for layer %d hit a zero bound; used unnormalized difference", layer)
    return GramDeviation(float(deltas.sum() / gs.normalizer), deltas, guarded)


def gram_deviation_score(stats: ClassStats, features: FeatureBundle, layer: int) -> float:
    """Summed Gram deviations over powers and correlations, divided by the layer normalizer."""
    return gram_deviation_details(stats, features, layer).score


# --- energy ------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyConfig:
    temperature: float = 100.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


def energy_score(softmax_inputs, cfg: EnergyConfig = EnergyConfig()) -> float:
    """``-T * log(sum_i exp(s_i / T))`` evaluated with max subtraction."""
    s = np.asarray(softmax_inputs, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ConfigurationError("energy score needs a non-empty vector")
    z = s / cfg.temperature
    top = float(z.max())
    return float(-cfg.temperature * (top + np.log(np.sum(np.exp(z - top)))))


# --- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class ScoreKind:
    """How a raw score maps onto the "larger = more OOD" convention."""

    prefix: str
    larger_is_ood: bool

    def orient(self, raw: float) -> float:
        return raw if self.larger_is_ood else -raw


SCORE_REGISTRY: dict[str, ScoreKind] = {
    "mahala": ScoreKind("mahala", larger_is_ood=False),
    "gram": ScoreKind("gram", larger_is_ood=True),
    "energy": ScoreKind("energy", larger_is_ood=True),
}


def score_names(stats: ClassStats, include_energy: bool = True) -> list[str]:
    names = [f"mahala_L{i}" for i in sorted(stats.gaussian)]
    names += [f"gram_L{i}" for i in sorted(stats.gram)]
    if include_energy:
        names.append("energy")
    return names


def score_bundles(
    stats: ClassStats,
    bundles: Sequence[FeatureBundle],
    energy: EnergyConfig | None = EnergyConfig(),
) -> tuple[list[str], np.ndarray]:
    """Oriented score matrix (rows = samples) with columns named as in :func:`score_names`.

    Pass ``energy=None`` to skip the energy column.
    """
    names = score_names(stats, include_energy=energy is not None)
    out = np.empty((len(bundles), len(names)))
    mahala, gram = SCORE_REGISTRY["mahala"], SCORE_REGISTRY["gram"]
    for r, b in enumerate(bundles):
        row = [mahala.orient(mahalanobis_score(stats, b, i)) for i in sorted(stats.gaussian)]
        row += [gram.orient(gram_deviation_score(stats, b, i)) for i in sorted(stats.gram)]
        if energy is not None:
            if b.softmax is None:
                raise ConfigurationError(f"sample {r} has no softmax vector for the energy score")
            row.append(SCORE_REGISTRY["energy"].orient(energy_score(b.softmax, energy)))
        out[r] = row
    return names, out
