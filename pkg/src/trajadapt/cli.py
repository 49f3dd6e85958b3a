"""Command-line harness: generate, train, run, ablate, report."""

from __future__ import annotations

import dataclasses
import logging
import sys

import click

from . import experiment as exp

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4


def _load(config_path) -> exp.ExperimentConfig:
    try:
        return exp.load_config(config_path)
    except (ValueError, TypeError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


def _apply_overrides(cfg, steps, lr, subset, granularity, seed):
    a = cfg.adapt
    if steps is not None:
        a = dataclasses.replace(a, steps=steps)
    if lr is not None:
        a = dataclasses.replace(a, lr=lr)
    if subset is not None:
        a = dataclasses.replace(a, subset=subset)
    if granularity is not None:
        a = dataclasses.replace(a, granularity=granularity)
    if seed is not None:
        a = dataclasses.replace(a, seed=seed)
    return cfg.replace(adapt=a)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--force", is_flag=True,
              help="Overwrite an existing non-empty dataset directory.")
def generate(config_path, force):
    """Write the synthetic train/test dataset to disk."""
    cfg = _load(config_path)
    try:
        root = exp.cmd_generate(cfg, force=force)
    except FileExistsError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_IO)
    click.echo(f"dataset written to {root}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def train(config_path):
    """Train and freeze the source-domain segmentation backbone."""
    cfg = _load(config_path)
    try:
        path, val_dice = exp.cmd_train(cfg)
    except FileNotFoundError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_IO)
    click.echo(f"checkpoint: {path} (held-out source dice {val_dice:.4f})")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(exp.MODES), default="irtta")
@click.option("--jobs", type=int, default=1)
@click.option("--save-trajectories", is_flag=True)
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--subset",
              type=click.Choice(["full", "only_last", "without_first"]),
              default=None)
@click.option("--granularity",
              type=click.Choice(["per_case", "per_dataset"]), default=None)
@click.option("--seed", type=int, default=None)
def run(config_path, mode, jobs, save_trajectories, steps, lr, subset,
        granularity, seed):
    """Evaluate one mode on the test split and write a run directory."""
    cfg = _apply_overrides(_load(config_path), steps, lr, subset,
                           granularity, seed)
    try:
        art = exp.cmd_run(cfg, mode, jobs=jobs,
                          save_trajectories=save_trajectories)
    except FileNotFoundError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_IO)
    except RuntimeError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_RUNTIME)
    s = art.summary
    click.echo(f"run dir: {art.run_dir}")
    click.echo(f"mean foreground dice: {s.mean_foreground_dice:.4f}  "
               f"ece: {s.mean_ece:.6f}  "
               f"prauc: {s.mean_prauc if s.mean_prauc is not None else 'absent'}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--axis", type=click.Choice(exp.ABLATION_AXES), required=True)
@click.option("--values", required=True,
              help="Comma-separated axis values, e.g. 5,10")
@click.option("--mode", type=click.Choice(exp.MODES), default="irtta")
@click.option("--jobs", type=int, default=1)
def ablate(config_path, axis, values, mode, jobs):
    """Sweep one hyperparameter axis, one full run per value."""
    cfg = _load(config_path)
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        click.echo("empty values list", err=True)
        sys.exit(EXIT_CONFIG)
    rows, _ = exp.cmd_ablate(cfg, axis, vals, mode=mode, jobs=jobs)
    for row in rows:
        click.echo(f"{axis}={row['value']}: dice={row['dice_mean']} "
                   f"ece={row['ece']} runtime={row['runtime_s']}s")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True))
def report(run_dir):
    """Re-aggregate the summary of an existing run from per-case outputs."""
    try:
        summary = exp.cmd_report(run_dir)
    except FileNotFoundError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_IO)
    click.echo(f"cases: {summary.n_cases}")
    for c, (m, s, n) in sorted(summary.per_class.items()):
        click.echo(f"class {c}: dice {m:.4f} +/- {s:.4f} (n={n})")
    click.echo(f"mean foreground dice: {summary.mean_foreground_dice:.4f}")
    click.echo(f"mean ece: {summary.mean_ece:.6f}")
    click.echo(f"mean prauc: {summary.mean_prauc}")


if __name__ == "__main__":
    main()
