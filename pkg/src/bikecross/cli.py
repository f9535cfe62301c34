"""Command line entry point.

Exit codes: 0 when a run ends Balanced, 2 when it ends BalanceLost, 1 for a
Failed run or any input/runtime error.
"""

from __future__ import annotations

import csv
import dataclasses
import sys
from pathlib import Path

import click
import tomli

from . import residual as res
from . import sim
from .errors import BikecrossError, ParseError, ValidationError
from .scenario import build_section, load_scenario, loads_scenario
from .sweep import parse_param, run_sweep, summary_header, summary_rows

EXIT_OK, EXIT_ERROR, EXIT_LOST = 0, 1, 2
VERDICT_EXIT = {"Balanced": EXIT_OK, "BalanceLost": EXIT_LOST, "Failed": EXIT_ERROR}


def _fail(err: Exception) -> None:
    click.echo(f"error: {err}", err=True)
    sys.exit(EXIT_ERROR)


@click.group()
def main():
    """Bikebot obstacle-crossing simulator with leg impulse balance control."""


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Directory for CSV/JSON exports.")
@click.option("--no-impulse", is_flag=True, help="Disable the leg impulse controller.")
@click.option("--no-residual", is_flag=True, help="Use the analytic impact estimate alone.")
@click.option("--seed", type=int, help="Override the scenario seed.")
@click.option("--roa/--no-roa", "with_roa", default=False, help="Also write roa.csv.")
def run(scenario, out_dir, no_impulse, no_residual, seed, with_roa):
    """Simulate one scenario and report the verdict."""
    try:
        if seed is not None and seed < 0:
            raise ValidationError("seed must be non-negative")
        sc = load_scenario(scenario)
        modes = dataclasses.replace(sc.modes, impulse=sc.modes.impulse and not no_impulse,
                                    residual=sc.modes.residual and not no_residual)
        sc = dataclasses.replace(sc, modes=modes, seed=sc.seed if seed is None else seed)
        roa = sim.roa_for(sc)
        log = sim.run(sc, roa)
        m = sim.metrics(log)
        if out_dir:
            for path in sim.export(log, out_dir, roa if with_roa else None):
                click.echo(f"wrote {path}")
    except (BikecrossError, OSError) as err:
        _fail(err)
    click.echo(f"{sc.name}: {m.verdict}  max|roll| {m.max_abs_varphi_b_deg:.2f} deg  "
               f"impulses {m.impulses}  tracking rmse {m.tracking_rmse:.4f} m")
    if log.diagnostic:
        click.echo(f"  {log.diagnostic}")
    sys.exit(VERDICT_EXIT[m.verdict])


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False))
def roa(scenario, out_file):
    """Estimate the region of attraction for the scenario's settings."""
    try:
        sc = load_scenario(scenario)
        grid = sim.roa_for(sc)
        grid.to_csv(out_file)
    except (BikecrossError, OSError) as err:
        _fail(err)
    click.echo(f"{int(grid.member.sum())} of {grid.member.size} cells recover; wrote {out_file}")


def _train_configs(path: str) -> tuple[res.DatasetConfig, res.TrainConfig]:
    text = Path(path).read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise ParseError(f"malformed config: {err}") from err
    for key in data:
        if key not in ("dataset", "train"):
            raise ParseError(f"unknown section '{key}'", key=key)
    ds = dict(data.get("dataset", {}))
    extra = {}
    if "noise" in ds:
        extra["noise"] = build_section(res.ImuNoise, ds.pop("noise"), "dataset.noise", text)
    return (build_section(res.DatasetConfig, ds, "dataset", text, extra),
            build_section(res.TrainConfig, data.get("train", {}), "train", text))


@main.command("train-residual")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_model", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_csv", type=click.Path(dir_okay=False),
              help="Also write the generated dataset as CSV.")
def train_residual(config, out_model, dataset_csv):
    """Generate the synthetic impact dataset and fit the residual model."""
    try:
        dcfg, tcfg = _train_configs(config)
        data = res.generate_dataset(dcfg)
        if dataset_csv:
            data.to_csv(dataset_csv)
        model, report = res.train(data, tcfg)
        res.save_model(model, out_model)
    except (BikecrossError, OSError) as err:
        _fail(err)
    click.echo(f"held-out rmse: nominal {report.rmse_nominal:.4f}  enhanced {report.rmse_enhanced:.4f}  "
               f"({report.seconds:.1f} s); wrote {out_model}")


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--param", "params", multiple=True, required=True,
              help="key=a:b:n or key=v1,v2,... (dotted keys, e.g. obstacles.0.h_o).")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), help="Summary CSV (default stdout).")
@click.option("--events", "events_file", type=click.Path(dir_okay=False),
              help="Collect every run's events into one CSV.")
def sweep(scenario, params, jobs, out_file, events_file):
    """Run a scenario over a grid of parameter values."""
    try:
        text = Path(scenario).read_text()
        loads_scenario(text, Path(scenario).stem)
        data = tomli.loads(text)
        parsed = [parse_param(p) for p in params]
        runs = run_sweep(data, parsed, Path(scenario).stem, jobs)
    except (BikecrossError, OSError) as err:
        _fail(err)
    header = summary_header([k for k, _ in parsed])
    fh = open(out_file, "w", newline="") if out_file else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in summary_rows(runs):
            w.writerow([sim.format_cell(x) for x in row])
    finally:
        if out_file:
            fh.close()
    if events_file:
        with open(events_file, "w", newline="") as ev:
            w = csv.writer(ev, lineterminator="\n")
            w.writerow(sim.EVENT_COLUMNS)
            for r in runs:
                for e in r.events:
                    w.writerow([sim.format_cell(e.get(c, "")) for c in sim.EVENT_COLUMNS])


if __name__ == "__main__":
    main()
