"""Parameter sweeps over raw scenario documents."""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import sim
from .errors import ValidationError
from .scenario import parse_scenario, with_value

RESULT_COLUMNS = ("verdict", "max_abs_varphi_b_deg", "impulses", "tracking_rmse",
                  "settle_time_after_impulse")


@dataclass(frozen=True)
class SweepRun:
    index: int
    values: tuple
    metrics: sim.RunMetrics
    events: tuple


def parse_param(spec: str) -> tuple[str, list]:
    """``key=a:b:n`` (n evenly spaced values) or ``key=v1,v2,...``."""
    if "=" not in spec:
        raise ValidationError(f"sweep parameter '{spec}' must look like key=a:b:n or key=v1,v2")
    key, rhs = spec.split("=", 1)
    key = key.strip()
    try:
        if ":" in rhs:
            parts = rhs.split(":")
            if len(parts) != 3:
                raise ValueError
            a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
            if n < 1:
                raise ValueError
            values = [float(x) for x in np.linspace(a, b, n)]
        else:
            values = [_scalar(x) for x in rhs.split(",") if x.strip()]
    except ValueError as err:
        raise ValidationError(f"cannot read sweep values in '{spec}'") from err
    if not key or not values:
        raise ValidationError(f"sweep parameter '{spec}' has no key or no values")
    return key, values


def _scalar(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        return float(text)


def expand(data: dict, params: list[tuple[str, list]]) -> list[tuple[tuple, dict]]:
    """Cartesian product of the swept values applied to a raw document."""
    keys = [k for k, _ in params]
    out = []
    for combo in itertools.product(*(v for _, v in params)):
        doc = data
        for k, v in zip(keys, combo):
            doc = with_value(doc, k, v)
        out.append((combo, doc))
    return out


def _one(job):
    index, values, doc, name = job
    sc = parse_scenario(doc, name=f"{name}[{index}]")
    log = sim.run(sc)
    return SweepRun(index, values, sim.metrics(log), tuple(log.events))


def run_sweep(data: dict, params: list[tuple[str, list]], name: str = "sweep",
              jobs: int = 1) -> list[SweepRun]:
    """Run every combination; results come back in grid order whatever ``jobs`` is."""
    grid = expand(data, params)
    # validate everything up front so a bad value fails before any simulation
    for _, doc in grid:
        parse_scenario(doc, name=name)
    work = [(i, values, doc, name) for i, (values, doc) in enumerate(grid)]
    if jobs <= 1:
        return [_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_one, work))


def summary_header(keys: list[str]) -> list[str]:
    """Column order of the sweep summary: index, one column per swept key, then results."""
    return ["index", *keys, *RESULT_COLUMNS]


def summary_rows(runs: list[SweepRun]) -> list[list]:
    rows = []
    for r in runs:
        m = r.metrics
        rows.append([r.index, *r.values, m.verdict, m.max_abs_varphi_b_deg, m.impulses,
                     m.tracking_rmse, "" if m.settle_time_after_impulse is None
                     else m.settle_time_after_impulse])
    return rows
