"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are collected by the ``acceptance`` fixture in ``conftest.py`` and
shown in the terminal summary of every pytest run.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from conformal_ood.evaluation import auroc, empirical_fwer
from conformal_ood.multiple_testing import (
    CalSizeRequest,
    DetectorConfig,
    bh_thresholds,
    correction_constant,
    required_cal_size,
    step_up_count,
)
from conformal_ood.numerics import normal_sf, normal_sf_inv, reg_inc_beta
from conformal_ood.conformal import CalibrationSet
from conformal_ood.scores import (
    ClassStats,
    EnergyConfig,
    FeatureBundle,
    GaussianLayerStats,
    energy_score,
    fit_gram,
    gram_deviation,
    gram_deviation_details,
    mahalanobis_score,
)
from conformal_ood.simulation import (
    SyntheticModel,
    conditional_rejection_probability,
    estimate_power,
    power_bound,
    simulate_test_t1,
    simulate_test_t2,
    verify_conditional_false_alarm,
)
from oracles import auroc_pairs, beta_cdf_quad, cal_size_condition_quad, normal_sf_inv_bisect

pytestmark = pytest.mark.acceptance


def binom_se(p, n):
    return math.sqrt(p * (1 - p) / n)


def test_criterion_1_conditional_false_alarm(acceptance):
    alpha, delta, eps, K = 0.1, 0.1, 1.0, 5
    n_cal = required_cal_size(CalSizeRequest(alpha, eps, delta, K))
    cfg = DetectorConfig(alpha=alpha, K=K, epsilon=eps, delta=delta)
    start = time.perf_counter()
    report = verify_conditional_false_alarm(SyntheticModel.iid_normal(K), cfg, n_cal, 50, 20_000, seed=2024, workers=4)
    elapsed = time.perf_counter() - start
    bound = 1 - delta - 3 * binom_se(1 - delta, 50)
    worst = max(report.per_calibration_estimates)
    acceptance(
        1, "conditional false alarm",
        report.estimate >= bound and elapsed < 60,
        f"n_cal={n_cal}, fraction with P_F<=alpha {report.estimate:.3f} (need >= {bound:.3f}), "
        f"worst P_F {worst:.4f}, {elapsed:.1f}s",
    )


def test_criterion_2_bivariate_tests(acceptance):
    mu, alpha, n = (1.0, -1.0), 0.1, 100_000
    t1 = simulate_test_t1(mu, alpha, n, seed=11)
    t2 = simulate_test_t2(mu, alpha, n, seed=12)
    bound = power_bound(mu, alpha)
    ok1 = t1.estimate <= alpha + 3 * t1.stderr
    ok2 = t2.estimate >= bound - 3 * t2.stderr
    acceptance(
        2, "sum test vs step-up test",
        ok1 and ok2,
        f"T1 power {t1.estimate:.4f} (<= {alpha + 3 * t1.stderr:.4f}), "
        f"T2 power {t2.estimate:.4f} (>= {bound - 3 * t2.stderr:.4f}, bound {bound:.4f})",
    )


def test_criterion_3_calibration_size_solver(acceptance):
    problems = []
    cells = []
    slowest = 0.0
    for alpha, delta in itertools.product((0.05, 0.1), (0.05, 0.1, 0.2)):
        start = time.perf_counter()
        n = required_cal_size(CalSizeRequest(alpha, 1.0, delta, 5))
        slowest = max(slowest, time.perf_counter() - start)
        cells.append(f"{alpha:g}/{delta:g}->{n}")
        if not cal_size_condition_quad(n, alpha, 1.0, delta, 5)[0]:
            problems.append(f"n={n} fails oracle at alpha={alpha}, delta={delta}")
        smaller = [m for m in range(1, n) if cal_size_condition_quad(m, alpha, 1.0, delta, 5)[0]]
        if smaller:
            problems.append(f"smaller feasible n {smaller[:3]} at alpha={alpha}, delta={delta}")
    ok = not problems and slowest < 5.0
    acceptance(
        3, "calibration-size solver",
        ok,
        f"{', '.join(cells)}; slowest cell {slowest:.2f}s" + (f"; {problems}" if problems else ""),
    )


def test_criterion_4_beta_law(acceptance):
    alpha, eps, K, n_cal, draws = 0.1, 1.0, 5, 500, 2000
    c = correction_constant(K, eps)
    rng = np.random.default_rng(44)
    cols = rng.standard_normal((draws, n_cal))
    parts, ok = [], True
    for j in (1, K):
        level = alpha * j / (c * K)
        a = math.floor((n_cal + 1) * level)
        b = n_cal + 1 - a
        r = np.array([conditional_rejection_probability(col, level) for col in cols])
        res = stats.kstest(r, stats.beta(a, b).cdf)
        ok &= res.pvalue >= 0.01
        parts.append(f"j={j}: Beta({a},{b}) KS p={res.pvalue:.3f}")
    acceptance(4, "Beta law of conditional rejection probability", bool(ok), "; ".join(parts))


def test_criterion_5_numerics(acceptance):
    rng = np.random.default_rng(55)
    worst_beta = 0.0
    for _ in range(10_000):
        a, b = (int(v) for v in rng.integers(1, 51, 2))
        x = float(rng.random())
        worst_beta = max(worst_beta, abs(reg_inc_beta(x, a, b) - beta_cdf_quad(x, a, b)))
    qs = np.concatenate([np.geomspace(1e-6, 0.5, 500), 1 - np.geomspace(1e-6, 0.5, 500)])
    worst_q = max(abs(normal_sf(normal_sf_inv(q)) - q) for q in qs)
    worst_z = max(abs(normal_sf_inv(normal_sf(z)) - z) for z in np.linspace(-4.5, 4.5, 901))
    worst_ref = max(abs(normal_sf_inv(q) - normal_sf_inv_bisect(q)) for q in (1e-6, 0.01, 0.05, 0.3, 0.7, 0.99))
    ok = worst_beta <= 1e-8 and worst_q <= 1e-8 and worst_z <= 1e-8 and worst_ref <= 1e-8
    acceptance(
        5, "special functions",
        ok,
        f"max |I - quad| {worst_beta:.2e}, round-trip q {worst_q:.2e}, z {worst_z:.2e}, vs bisection {worst_ref:.2e}",
    )


def test_criterion_6_scores(acceptance):
    errors = []
    stats_ = ClassStats(
        classes=(0, 1), layer_shapes={0: (2,)},
        gaussian={0: GaussianLayerStats(np.array([[0.0, 0.0], [2.0, 2.0]]), np.eye(2), 0.0)},
    )
    errors.append(abs(mahalanobis_score(stats_, FeatureBundle([np.array([1.0, 1.0])]), 0) + 2.0))
    errors.append(abs(gram_deviation(0.5, 1.0, 2.0)[0] - 0.5))
    errors.append(abs(gram_deviation(3.0, 1.0, 2.0)[0] - 0.5))
    errors.append(abs(energy_score([0.0, 0.0], EnergyConfig(1.0)) + math.log(2.0)))
    rng = np.random.default_rng(66)
    train = [FeatureBundle([rng.random((4, 5))], label=i % 3, predicted_class=i % 3) for i in range(90)]
    fitted = fit_gram(train, holdout_fraction=0.0)
    max_fit_delta = max(float(gram_deviation_details(fitted, b, 0).deltas.max()) for b in train)
    worst = max(errors)
    acceptance(
        6, "score hand examples",
        worst <= 1e-12 and max_fit_delta == 0.0,
        f"max hand-example error {worst:.1e}, max Gram delta on fitting points {max_fit_delta}",
    )


def test_criterion_7_metrics(acceptance):
    values = (0.0, 1.0, 2.0)
    sides = [c for n in range(1, 7) for c in itertools.combinations_with_replacement(values, n)]
    mismatches = sum(auroc(a, b) != auroc_pairs(a, b) for a, b in itertools.product(sides, sides))
    rng = np.random.default_rng(77)
    for n, m in itertools.product(range(1, 7), repeat=2):
        for _ in range(20):
            a, b = rng.normal(size=n), rng.normal(size=m)
            mismatches += abs(auroc(a, b) - auroc_pairs(a, b)) > 1e-15
    K, alpha, n = 5, 0.1, 100_000
    p = rng.random((n, K))
    # Plain BH, whose level is exactly alpha under independence, then the detector's corrected ladder.
    fwer_plain = empirical_fwer(step_up_count(p, alpha * np.arange(1, K + 1) / K)[:, None] >= 1)
    fwer_detector = empirical_fwer(step_up_count(p, bh_thresholds(alpha, 1.0, K))[:, None] >= 1)
    limit = alpha + 3 * binom_se(alpha, n)
    ok = mismatches == 0 and fwer_plain <= limit and fwer_detector <= limit
    acceptance(
        7, "AUROC and FWER",
        ok,
        f"{len(sides) ** 2} exhaustive + 720 random AUROC set pairs, {mismatches} mismatches; "
        f"FWER plain BH {fwer_plain:.4f}, corrected {fwer_detector:.4f} (<= {limit:.4f})",
    )


SUITE_K = 6
SUITE_SHIFT = 3.0
SUITE_SUBSETS = ((0, 1), (2, 3), (4, 5))
SUITE_TRIALS = 10_000


@pytest.fixture(scope="module")
def suite():
    """Shared setup of criteria 8 and 9: null, three disjoint-shift alternatives, powers."""
    K, alpha = SUITE_K, 0.1
    n_cal = required_cal_size(CalSizeRequest(alpha, 1.0, 0.1, K))
    null = SyntheticModel.iid_normal(K)
    alts = []
    for subset in SUITE_SUBSETS:
        shift = np.zeros(K)
        shift[list(subset)] = SUITE_SHIFT
        alts.append(SyntheticModel.iid_normal(K, shift))
    out = {"n_cal": n_cal, "null": null, "alts": alts}
    for method in ("bh", "bonferroni"):
        cfg = DetectorConfig(alpha=alpha, K=K, method=method)
        out[method] = [estimate_power(null, alt, cfg, n_cal, SUITE_TRIALS, seed=800 + i) for i, alt in enumerate(alts)]
        out[f"{method}_pf"] = estimate_power(null, null, cfg, n_cal, SUITE_TRIALS, seed=899)
    return out


def test_criterion_8_combined_beats_single_scores(acceptance, suite):
    K = SUITE_K
    pf = suite["bh_pf"].estimate
    rng = np.random.default_rng(88)
    cal = CalibrationSet(suite["null"].sample(rng, suite["n_cal"]))
    # Each single-score test thresholds one column at the (1 - pf) empirical quantile
    # of the same calibration data, i.e. the same false-alarm level as the combined detector.
    level = max(pf, 1.0 / (cal.n_cal + 1))
    alt_samples = [alt.sample(rng, SUITE_TRIALS) for alt in suite["alts"]]
    single_min = []
    for i in range(K):
        tau = np.quantile(cal.scores[:, i], 1 - level, method="higher")
        single_min.append(min(float(np.mean(x[:, i] > tau)) for x in alt_samples))
    bh_min = min(r.estimate for r in suite["bh"])
    best_single = max(single_min)
    acceptance(
        8, "combined detector vs single scores",
        bh_min - best_single >= 0.05,
        f"BH min power {bh_min:.4f} vs best single-score min power {best_single:.4f} "
        f"at P_F {pf:.4f} (n_cal={suite['n_cal']})",
    )


def test_criterion_9_bh_vs_bonferroni(acceptance, suite):
    parts, ok = [], True
    for subset, bh, bonf in zip(SUITE_SUBSETS, suite["bh"], suite["bonferroni"]):
        passed = bh.estimate >= bonf.estimate - 2 * bh.stderr
        ok &= passed
        parts.append(f"shift {subset}: BH {bh.estimate:.4f} vs Bonferroni {bonf.estimate:.4f}")
    acceptance(9, "BH power not below Bonferroni", bool(ok), "; ".join(parts))
