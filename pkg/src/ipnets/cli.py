"""Command-line entry point: ``ipnets synth-gen | train | eval | cv | ablate``.

Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import click

from .core_data import ValidationError
from .data_io import SynthConfig, generate_synthetic, missing_fractions, write_dataset
from .harness import (ExperimentConfig, ablation_table, run_ablation, run_cv, run_eval, run_train,
                      load_cases, write_manifest)

log = logging.getLogger("ipnets")

_CFG_FIELDS = {f.name for f in fields(ExperimentConfig)}


def _experiment_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="Flat key=value file; CLI flags override it."),
        click.option("--task", type=click.Choice(["classification", "regression"])),
        click.option("--model", type=str, help="proposed, gru-m, gru-f, gru-s, gru-d, mean-logreg, mean-linreg"),
        click.option("--channels", type=str, help="Channel subset for the proposed model, e.g. SI,T,I"),
        click.option("--obs", "obs_path", type=click.Path(exists=True, dir_okay=False)),
        click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False)),
        click.option("--names", "names_path", type=click.Path(exists=True, dir_okay=False)),
        click.option("--dims", "D", type=int, help="Number of dimensions when no names file is given"),
        click.option("--grid-points", "T", type=int),
        click.option("--window", "window_length", type=float),
        click.option("--kappa", type=float),
        click.option("--delta", type=float),
        click.option("--lambda-i", "lambda_I", type=float),
        click.option("--lambda-p", "lambda_P", type=float),
        click.option("--hidden-size", type=int),
        click.option("--lr", type=float),
        click.option("--batch-size", type=int),
        click.option("--max-epochs", type=int),
        click.option("--patience", type=int),
        click.option("--seed", type=int),
        click.option("--out", "out_dir", type=click.Path(file_okay=False)),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _resolve(config_file, **flags) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if config_file:
        cfg = ExperimentConfig.from_file(config_file, cfg)
    return ExperimentConfig.from_mapping({k: v for k, v in flags.items() if k in _CFG_FIELDS}, cfg)


def _guard(fn):
    """Map exceptions onto the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, click.BadParameter) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except Exception as e:  # noqa: BLE001 - divergence and other runtime failures
            click.echo(f"runtime error: {e}", err=True)
            sys.exit(2)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Interpolation-prediction networks for sparse, irregularly sampled time series."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("synth-gen")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n-cases", type=int, default=1000, show_default=True)
@click.option("--dims", "D", type=int, default=6, show_default=True)
@click.option("--task", type=click.Choice(["classification", "regression"]), default="classification")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prevalence", type=float, default=0.5, show_default=True)
@click.option("--noise-std", type=float, default=SynthConfig.noise_std, show_default=True)
@click.option("--trend-shift", type=float, default=SynthConfig.trend_shift, show_default=True)
@click.option("--trend-slope", type=float, default=SynthConfig.trend_slope, show_default=True)
@click.option("--bump-effect", type=float, default=SynthConfig.bump_effect, show_default=True)
@click.option("--intensity-effect", type=float, default=SynthConfig.intensity_effect, show_default=True)
@click.option("--no-signal", is_flag=True, help="Disable every class-dependent effect.")
@_guard
def synth_gen(out_dir, no_signal, **kw):
    """Write a synthetic dataset (observations, labels, names) in the long-CSV format."""
    cfg = SynthConfig(**kw)
    if no_signal:
        cfg = cfg.without_signal()
    cases = generate_synthetic(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(cases, out / "observations.csv", out / "labels.csv",
                  names_path=out / "names.txt")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    miss = ", ".join(f"{m:.2f}" for m in missing_fractions(cases))
    click.echo(f"wrote {len(cases)} cases to {out} (missing per dim: {miss})")


@main.command()
@_experiment_options
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False),
              help="Continue training from a checkpoint.")
@_guard
def train(config_file, resume_path, **flags):
    """Train one model; writes checkpoint.npz, train_log.csv and manifest.json."""
    cfg = _resolve(config_file, **flags)
    run_train(cfg, resume_path=resume_path)
    click.echo(f"checkpoint written to {Path(cfg.out_dir) / 'checkpoint.npz'}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@_experiment_options
@_guard
def eval_cmd(checkpoint, config_file, **flags):
    """Evaluate a checkpoint on a dataset."""
    cfg = _resolve(config_file, **flags)
    report = run_eval(checkpoint, load_cases(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, "eval", checkpoint=str(checkpoint))
    payload = json.dumps(asdict(report), indent=2, sort_keys=True)
    (out / "eval_report.json").write_text(payload)
    click.echo(payload)


@main.command()
@_experiment_options
@click.option("-k", "--folds", "k", type=int, help="Number of folds (default 5)")
@_guard
def cv(config_file, **flags):
    """k-fold cross-validation; prints a table and writes report.json."""
    cfg = _resolve(config_file, **flags)
    report = run_cv(cfg)
    click.echo(report.table())
    if cfg.task == "regression":
        click.echo("(EV in log-days, MedAE in days)")


@main.command()
@_experiment_options
@click.option("-k", "--folds", "k", type=int, help="Number of folds (default 5)")
@click.option("--subset", "subsets", multiple=True,
              help="Channel subset to compare, e.g. --subset SI --subset I --subset SI,T,I")
@_guard
def ablate(config_file, subsets, **flags):
    """Cross-validate the proposed model on several channel subsets."""
    cfg = _resolve(config_file, **flags)
    subsets = subsets or ("SI,T,I", "SI,I", "SI,T", "SI", "I", "I,T", "T")
    reports = run_ablation(cfg, subsets)
    click.echo(ablation_table(reports))


if __name__ == "__main__":
    main()
