"""Command-line interface: ground truth, single estimates, benchmark
presets and closed-form diagnostics.

Exit codes: 0 success, 2 configuration error, 3 estimator non-convergence,
4 model or subprocess failure.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import bench, estimators, importance, strata
from .bench import ConfigError, ExperimentConfig
from .model import ModelError, builtin_model
from .sampling import AllocationPlan, RngStream, SamplingError

EXIT_CONFIG = 2
EXIT_NON_CONVERGENCE = 3
EXIT_MODEL = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        _fail(EXIT_CONFIG, f"cannot read config {path}: {e}")
    try:
        return ExperimentConfig.from_dict(raw)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))


def _emit(payload: dict, out: str | None):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)


@click.group()
def main():
    """Metamodel-assisted variance reduction for quantile estimation."""


@main.command()
@click.option("--model", required=True, help="Builtin model name.")
@click.option("--alpha", type=float, required=True)
@click.option("--samples", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def truth(model, alpha, samples, seed):
    """Plain Monte Carlo reference quantile of the full model output."""
    if not 0 < alpha < 1:
        _fail(EXIT_CONFIG, "alpha must be in (0, 1)")
    try:
        pair = builtin_model(model)
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    try:
        value = bench.ground_truth_quantile(pair, alpha, samples,
                                            RngStream(seed))
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    except ModelError as e:
        _fail(EXIT_MODEL, str(e))
    _emit({"model": model, "alpha": alpha, "samples": samples,
           "quantile": value}, None)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=False))
@click.option("--bootstrap", "resamples", type=int, default=500,
              show_default=True)
def estimate(config_path, resamples):
    """One estimator run with a bootstrap standard error."""
    config = _load_config(config_path)
    try:
        payload = bench.estimate_with_bootstrap(config, B=resamples)
    except importance.CisNonConvergence as e:
        _fail(EXIT_NON_CONVERGENCE, str(e))
    except (SamplingError, estimators.EstimatorError, strata.StrataError,
            importance.ImportanceError) as e:
        _fail(EXIT_NON_CONVERGENCE, str(e))
    except ModelError as e:
        _fail(EXIT_MODEL, str(e))
    except (ConfigError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))
    _emit(payload, config.output)


@main.command(name="bench")
@click.option("--preset", required=True,
              type=click.Choice(["fig1", "fig2", "table1", "table2"]))
@click.option("--reps", type=int, default=None,
              help="Override the preset replication count.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="json", show_default=True)
def bench_cmd(preset, reps, seed, workers, out_path, fmt):
    """Run a benchmark preset and emit the replication report."""
    try:
        reports = bench.run_preset(preset, replications=reps, seed=seed,
                                   workers=workers)
    except importance.CisNonConvergence as e:
        _fail(EXIT_NON_CONVERGENCE, str(e))
    except ModelError as e:
        _fail(EXIT_MODEL, str(e))
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    text = bench.emit_report(reports, fmt, out_path)
    if not out_path:
        click.echo(text, nl=False)


@main.command()
@click.argument("topic", type=click.Choice(["variance", "allocation", "cost"]))
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--samples", type=int, default=10**5, show_default=True,
              help="Monte Carlo size for the conditional probabilities.")
def diag(topic, config_path, samples):
    """Closed-form variance, optimal-allocation and rejection-cost
    diagnostics for the configured strata."""
    config = _load_config(config_path)
    try:
        pair = config.build_pair()
        spec = bench._spec_for(pair, config)
        stream = RngStream(config.seed, (2**32, 9))
        s = estimators.draw_paired_sample(pair, stream, samples)
        y_alpha = estimators.empirical_quantile(s.y, config.alpha)
        strat = spec.stratum_of(s.z)
        p_hat, counts = [], []
        for j in range(spec.m):
            yj = s.y[strat == j]
            p_hat.append(float((yj <= y_alpha).mean()) if len(yj) else 0.0)
            counts.append(len(yj))
        p = strata.ConditionalProbs(p_hat=np.array(p_hat),
                                    counts=np.array(counts))
        alloc = config.params.get("allocation")
        plan = (AllocationPlan(tuple(alloc))
                if alloc is not None else
                AllocationPlan(tuple(int(c) for c in
                                     strata.largest_remainder(
                                         spec.widths * config.n))))
    except ModelError as e:
        _fail(EXIT_MODEL, str(e))
    except (ConfigError, ValueError, SamplingError) as e:
        _fail(EXIT_CONFIG, str(e))

    payload: dict = {
        "model": config.model, "alpha": config.alpha, "n": config.n,
        "cutpoints": [float(c) for c in spec.cutpoints],
        "p_hat": [float(v) for v in p.p_hat],
    }
    if topic == "variance":
        z_alpha = bench._z_alpha_for(pair, config)
        rho_i = estimators.indicator_correlation(s, y_alpha, z_alpha)
        F = float((s.y <= y_alpha).mean())
        payload.update({
            "sigma2_ps": strata.ps_form_variance(p, spec) / config.n,
            "sigma2_cs": strata.cs_variance(p, spec, plan),
            "sigma2_ocs": strata.ocs_variance(p, spec) / config.n,
            "rho_indicator": rho_i,
        })
        try:
            K, ratio = strata.two_strata_acs_factor(config.alpha, F, rho_i)
            payload.update({"two_strata_K": K, "two_strata_ratio": ratio})
        except strata.StrataError as e:
            payload["two_strata_K_error"] = str(e)
    elif topic == "allocation":
        try:
            beta = strata.optimal_allocation(p, spec)
        except strata.StrataError as e:
            _fail(EXIT_NON_CONVERGENCE, str(e))
        payload["beta_star"] = [float(b) for b in beta]
    else:
        from .sampling import expected_rejection_cost
        expected, bound = expected_rejection_cost(spec, plan)
        payload.update({"expected_draws_naive": expected,
                        "uniform_bound": bound,
                        "allocation": list(plan.counts)})
    _emit(payload, config.output)


if __name__ == "__main__":
    main()
