"""Command-line interface.

\b
Subcommands:
- calibrate-size: smallest calibration set for the false-alarm guarantee
- fit-scores:     fit Mahalanobis / Gram statistics on labelled features
- score:          turn feature bundles into an oriented score matrix
- detect:         run a detector on test scores against calibration scores
- evaluate:       detection power, false alarm and AUROC
- simulate:       Monte Carlo experiments

Exit codes: 0 success, 1 usage or validation error, 2 capacity or
calibration failure, 3 I/O error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import io as cio
from .conformal import CalibrationSet
from .errors import (
    CalibrationError,
    CapacityError,
    ChecksumError,
    ConfigurationError,
    DomainError,
    FittingError,
    ParseError,
    SchemaVersionError,
    ValidationError,
)
from .evaluation import auroc, power_at_false_alarm
from .multiple_testing import (
    CalSizeRequest,
    DetectorConfig,
    Method,
    cal_size_margins,
    calibrate_naive_thresholds,
    detect,
    naive_average_detect,
    required_cal_size,
    required_cal_size_bonferroni,
)
from .scores import DEFAULT_POWERS, EnergyConfig, fit_gram, fit_mahalanobis, score_bundles
from .simulation import (
    SyntheticModel,
    estimate_power,
    power_bound,
    simulate_test_t1,
    simulate_test_t2,
    verify_conditional_false_alarm,
)

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "alpha": 0.1,
    "epsilon": 1.0,
    "delta": 0.1,
    "method": "bh",
    "K": 5,
    "scan_limit": 1_000_000,
    "seed": 0,
    "workers": 1,
    "temperature": 100.0,
    "powers": list(DEFAULT_POWERS),
    "ridge": None,
    "holdout_fraction": 0.1,
}


def _setting(ctx: click.Context, name: str, value):
    """Command-line value, else config-file value, else the documented default."""
    if value is not None:
        return value
    cfg: cio.RunConfig | None = ctx.obj.get("config") if ctx.obj else None
    if cfg is not None and getattr(cfg, name) is not None:
        return getattr(cfg, name)
    return DEFAULTS.get(name)


def _path(ctx: click.Context, name: str, value):
    if value is not None:
        return value
    cfg: cio.RunConfig | None = ctx.obj.get("config") if ctx.obj else None
    if cfg is not None and name in cfg.paths:
        return cfg.paths[name]
    raise click.UsageError(f"missing required path --{name.replace('_', '-')}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON run configuration; command-line flags override its values.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None) -> None:
    """Conformal multiple-testing OOD detection."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = cio.load_run_config(config_path) if config_path else None


@cli.command("calibrate-size")
@click.option("--alpha", type=float, default=None, help="Target conditional false alarm (default 0.1).")
@click.option("--epsilon", type=float, default=None, help="Threshold slack epsilon (default 1.0).")
@click.option("--delta", type=float, multiple=True,
              help="Failure probability (default 0.1). Repeat to tabulate n_cal against delta.")
@click.option("--k", "K", type=int, default=None, help="Number of scores (default 5).")
@click.option("--method", type=click.Choice(["bh", "bonferroni"]), default=None, help="Detector (default bh).")
@click.option("--scan-limit", type=int, default=None, help="Largest n_cal to try (default 1000000).")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the printed table as CSV.")
@click.pass_context
def calibrate_size(ctx, alpha, epsilon, delta, K, method, scan_limit, csv_path):
    """Smallest calibration-set size meeting the guarantee condition."""
    alpha = _setting(ctx, "alpha", alpha)
    epsilon = _setting(ctx, "epsilon", epsilon)
    K = _setting(ctx, "K", K)
    method = _setting(ctx, "method", method)
    if method == "naive":
        raise click.UsageError("calibrate-size supports --method bh or bonferroni")
    scan_limit = _setting(ctx, "scan_limit", scan_limit)
    deltas = list(delta) or [_setting(ctx, "delta", None)]
    bonferroni = method == "bonferroni"
    solver = required_cal_size_bonferroni if bonferroni else required_cal_size
    lines = []
    if len(deltas) == 1:
        req = CalSizeRequest(alpha=alpha, epsilon=epsilon, delta=deltas[0], K=K, scan_limit=scan_limit)
        n_cal = solver(req)
        click.echo(f"n_cal = {n_cal}")
        lines.append("j,a,b,x,cdf,required,margin")
        for r in cal_size_margins(n_cal, req, bonferroni):
            lines.append(f"{r.j},{r.a},{r.b},{r.x:.10g},{r.cdf:.10g},{r.required:.10g},{r.margin:.3e}")
    else:
        lines.append("delta,n_cal")
        for d in deltas:
            req = CalSizeRequest(alpha=alpha, epsilon=epsilon, delta=d, K=K, scan_limit=scan_limit)
            lines.append(f"{d:g},{solver(req)}")
    for line in lines:
        click.echo(line)
    if csv_path:
        cio.write_text_atomic(Path(csv_path), "\n".join(lines) + "\n")


@cli.command("fit-scores")
@click.option("--train", type=click.Path(dir_okay=False), default=None, help="Labelled feature bundles (JSON).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Where to write fitted statistics.")
@click.option("--kinds", default="mahalanobis,gram", show_default=True,
              help="Which statistics to fit: mahalanobis, gram, or both.")
@click.option("--ridge", type=float, default=None, help="Covariance ridge (default 1e-6 * trace / d).")
@click.option("--powers", default=None, help="Gram powers, comma-separated (default 1..10).")
@click.option("--holdout-fraction", type=float, default=None, help="Share held out for Gram normalizers (default 0.1).")
@click.option("--seed", type=int, default=None, help="Seed of the held-out split (default 0).")
@click.pass_context
def fit_scores(ctx, train, out, kinds, ridge, powers, holdout_fraction, seed):
    """Fit score statistics from labelled training features."""
    bundles = cio.read_feature_bundles(_path(ctx, "train", train))
    wanted = {k.strip() for k in kinds.split(",") if k.strip()}
    if not wanted or wanted - {"mahalanobis", "gram"}:
        raise click.BadParameter(f"unknown kinds {sorted(wanted)}", param_hint="--kinds")
    powers = [int(p) for p in _floats(powers)] if powers else _setting(ctx, "powers", None)
    stats = None
    if "mahalanobis" in wanted:
        stats = fit_mahalanobis(bundles, ridge=_setting(ctx, "ridge", ridge))
    if "gram" in wanted:
        g = fit_gram(bundles, powers=powers, holdout_fraction=_setting(ctx, "holdout_fraction", holdout_fraction),
                     seed=_setting(ctx, "seed", seed))
        stats = g if stats is None else stats.merged(g)
    out = _path(ctx, "out", out)
    cio.save_class_stats(stats, out)
    click.echo(f"fitted {len(stats.gaussian)} Mahalanobis and {len(stats.gram)} Gram layers "
               f"over {len(stats.classes)} classes -> {out}")


@cli.command("score")
@click.option("--stats", type=click.Path(dir_okay=False), default=None, help="Fitted statistics (JSON).")
@click.option("--features", type=click.Path(dir_okay=False), default=None, help="Feature bundles to score (JSON).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output score CSV.")
@click.option("--temperature", type=float, default=None, help="Energy temperature (default 100).")
@click.option("--no-energy", is_flag=True, help="Skip the energy column.")
@click.pass_context
def score(ctx, stats, features, out, temperature, no_energy):
    """Compute oriented scores (larger = more OOD) for feature bundles."""
    fitted = cio.load_class_stats(_path(ctx, "stats", stats))
    bundles = cio.read_feature_bundles(_path(ctx, "features", features))
    energy = None if no_energy else EnergyConfig(_setting(ctx, "temperature", temperature))
    names, values = score_bundles(fitted, bundles, energy)
    out = _path(ctx, "out", out)
    cio.write_score_matrix(cio.ScoreMatrix(names, values), out)
    click.echo(f"wrote {values.shape[0]} x {values.shape[1]} scores -> {out}")


@cli.command("detect")
@click.option("--cal", type=click.Path(dir_okay=False), default=None, help="Calibration score CSV.")
@click.option("--test", type=click.Path(dir_okay=False), default=None, help="Test score CSV.")
@click.option("--alpha", type=float, default=None, help="Target conditional false alarm (default 0.1).")
@click.option("--epsilon", type=float, default=None, help="Threshold slack epsilon (default 1.0).")
@click.option("--method", type=click.Choice(["bh", "bonferroni", "naive"]), default=None, help="Detector (default bh).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Results JSON (default: stdout only).")
@click.pass_context
def detect_cmd(ctx, cal, test, alpha, epsilon, method, out):
    """Declare each test row OOD or not."""
    cal_m = cio.read_score_matrix(_path(ctx, "cal", cal))
    test_m = cio.read_score_matrix(_path(ctx, "test", test))
    if cal_m.names != test_m.names:
        only_cal = [n for n in cal_m.names if n not in test_m.names]
        only_test = [n for n in test_m.names if n not in cal_m.names]
        raise ConfigurationError(
            f"score columns differ: calibration {cal_m.names} vs test {test_m.names}"
            f" (only in calibration: {only_cal}; only in test: {only_test})"
        )
    cfg = DetectorConfig(
        alpha=_setting(ctx, "alpha", alpha),
        epsilon=_setting(ctx, "epsilon", epsilon),
        K=cal_m.K,
        method=_setting(ctx, "method", method),
    )
    detections = []
    if cfg.method is Method.NAIVE:
        taus = calibrate_naive_thresholds(cal_m.values, cfg.alpha)
        results = [naive_average_detect(row, taus) for row in test_m.values]
    else:
        calset = CalibrationSet(cal_m.values, tuple(cal_m.names))
        results = [detect(p, cfg) for p in calset.p_values(test_m.values)] if len(test_m) else []
    for r, res in enumerate(results):
        d = res.to_dict()
        if test_m.sample_ids is not None:
            d["sample_id"] = test_m.sample_ids[r]
        detections.append(d)
    n_ood = sum(d["is_ood"] for d in detections)
    payload = {
        "config": {"alpha": cfg.alpha, "epsilon": cfg.epsilon, "method": cfg.method.value, "K": cfg.K,
                   "n_cal": len(cal_m)},
        "score_names": cal_m.names,
        "detections": detections,
        "summary": {"n": len(detections), "n_ood": n_ood},
    }
    if out:
        cio.write_results(payload, out)
    click.echo(f"{n_ood} of {len(detections)} samples declared OOD ({cfg.method.value}, alpha={cfg.alpha:g})")


@cli.command("evaluate")
@click.option("--in-results", type=click.Path(dir_okay=False), default=None, help="detect output on in-distribution data.")
@click.option("--ood-results", type=click.Path(dir_okay=False), default=None, help="detect output on OOD data.")
@click.option("--in-scores", type=click.Path(dir_okay=False), default=None, help="In-distribution score CSV (for AUROC).")
@click.option("--ood-scores", type=click.Path(dir_okay=False), default=None, help="OOD score CSV (for AUROC).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics JSON.")
def evaluate(in_results, ood_results, in_scores, ood_scores, out):
    """Detection power at the configured false alarm, and per-score AUROC."""
    if not ((in_results and ood_results) or (in_scores and ood_scores)):
        raise click.UsageError("give --in-results/--ood-results and/or --in-scores/--ood-scores")
    metrics: dict = {}
    if in_results and ood_results:
        ind = [d["is_ood"] for d in cio.read_results(in_results)["detections"]]
        ood = [d["is_ood"] for d in cio.read_results(ood_results)["detections"]]
        pd, pf = power_at_false_alarm(ind, ood)
        metrics.update(pd=pd, achieved_pf=pf)
        click.echo(f"P_D = {pd:.4f} at achieved P_F = {pf:.4f}")
    if in_scores and ood_scores:
        a, b = cio.read_score_matrix(in_scores), cio.read_score_matrix(ood_scores)
        if a.names != b.names:
            raise ConfigurationError(f"score columns differ: {a.names} vs {b.names}")
        metrics["auroc"] = {n: auroc(a.values[:, i], b.values[:, i]) for i, n in enumerate(a.names)}
        for n, v in metrics["auroc"].items():
            click.echo(f"AUROC[{n}] = {v:.4f}")
    if out:
        cio.write_results({"metrics": metrics}, out)


@cli.command("simulate")
@click.option("--scenario", type=click.Choice(["t1", "t2", "theorem1", "power"]), required=True,
              help="t1/t2: bivariate sum vs. step-up tests; theorem1: conditional false alarm; power: detection power.")
@click.option("--mu", default="0,0", show_default=True, help="Alternative mean for t1/t2 (two numbers).")
@click.option("--alpha", type=float, default=None, help="Level (default 0.1).")
@click.option("--epsilon", type=float, default=None, help="Threshold slack (default 1.0).")
@click.option("--delta", type=float, default=None, help="Failure probability used to size n_cal (default 0.1).")
@click.option("--k", "K", type=int, default=None, help="Number of scores for theorem1/power (default 5).")
@click.option("--method", type=click.Choice(["bh", "bonferroni", "naive"]), default=None, help="Detector (default bh).")
@click.option("--n-trials", type=int, default=100_000, show_default=True, help="Trials for t1/t2/power.")
@click.option("--n-cal", type=int, default=None, help="Calibration size (default: solver output).")
@click.option("--n-cal-draws", type=int, default=50, show_default=True, help="Calibration sets for theorem1.")
@click.option("--n-test-draws", type=int, default=20_000, show_default=True, help="Test draws per calibration set.")
@click.option("--shift", default="3", show_default=True,
              help="Mean shift of the alternative for power: one number or K numbers.")
@click.option("--seed", type=int, default=None, help="Master seed (default 0).")
@click.option("--workers", type=int, default=None, help="Worker threads (default 1); results do not depend on it.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="MonteCarloReport JSON.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="theorem1 only: per-calibration false-alarm rates as plot-ready CSV.")
@click.pass_context
def simulate(ctx, scenario, mu, alpha, epsilon, delta, K, method, n_trials, n_cal, n_cal_draws,
             n_test_draws, shift, seed, workers, out, csv_path):
    """Run a Monte Carlo experiment and print its report."""
    alpha = _setting(ctx, "alpha", alpha)
    seed = _setting(ctx, "seed", seed)
    workers = _setting(ctx, "workers", workers)
    extra = {}
    if scenario in ("t1", "t2"):
        mu_v = _floats(mu)
        if len(mu_v) != 2:
            raise click.BadParameter("need exactly two numbers", param_hint="--mu")
        sim = simulate_test_t1 if scenario == "t1" else simulate_test_t2
        report = sim(mu_v, alpha, n_trials, seed, workers)
        if scenario == "t2":
            extra["power_bound"] = power_bound(mu_v, alpha)
    else:
        cfg = DetectorConfig(
            alpha=alpha,
            epsilon=_setting(ctx, "epsilon", epsilon),
            delta=_setting(ctx, "delta", delta),
            K=_setting(ctx, "K", K),
            method=_setting(ctx, "method", method),
        )
        if n_cal is None:
            req = CalSizeRequest(alpha=cfg.alpha, epsilon=cfg.epsilon, delta=cfg.delta, K=cfg.K)
            n_cal = required_cal_size_bonferroni(req) if cfg.method is Method.BONFERRONI else required_cal_size(req)
        extra["n_cal"] = n_cal
        null = SyntheticModel.iid_normal(cfg.K)
        if scenario == "theorem1":
            report = verify_conditional_false_alarm(null, cfg, n_cal, n_cal_draws, n_test_draws, seed, workers)
            if csv_path:
                rows = ["draw,conditional_pf"] + [f"{i},{r:.17g}" for i, r in enumerate(report.per_calibration_estimates)]
                cio.write_text_atomic(Path(csv_path), "\n".join(rows) + "\n")
        else:
            shifts = _floats(shift)
            if len(shifts) not in (1, cfg.K):
                raise click.BadParameter(f"need 1 or {cfg.K} numbers", param_hint="--shift")
            alt = SyntheticModel.iid_normal(cfg.K, np.array(shifts if len(shifts) > 1 else shifts * cfg.K))
            report = estimate_power(null, alt, cfg, n_cal, n_trials, seed, workers)
    payload = report.to_dict()
    summary = {k: v for k, v in payload.items() if k != "per_calibration_estimates"}
    click.echo(json.dumps({**summary, **extra}, sort_keys=True))
    if out:
        cio.write_results({"report": payload, "scenario": scenario, **extra}, out)


def main(argv: list[str] | None = None) -> int:
    """Entry point that maps exceptions onto the documented exit codes."""
    try:
        rv = cli.main(args=argv, prog_name="conformal-ood", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (CapacityError, CalibrationError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CAPACITY
    except (OSError, ParseError, SchemaVersionError, ChecksumError) as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_IO
    except (ConfigurationError, ValidationError, DomainError, FittingError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
