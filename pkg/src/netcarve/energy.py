"""Affine energy-vs-MAC-fraction model plus tegrastats power-log handling.

Parameter counts are a bad proxy for energy on multi-resolution networks, so
the estimator is keyed on the fraction of convolution MACs relative to a
named baseline. The shipped calibration series are published measurements of
pruned HRNet-48 on a Jetson AGX Xavier (tegrastats sampling at 1 s over 1000
inferences) at two input resolutions.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources

import numpy as np

from .cost import count_macs
from .graph import GraphModel

DEFAULT_RAIL = "VDD_GPU_SOC"
CALIBRATION_RESOURCE = "fig_energy.csv"
MIOU_RESOURCE = "fig_miou.csv"


class EnergyError(Exception):
    pass


@dataclass
class EnergyModel:
    slope: float       # joules per unit MAC fraction
    intercept: float   # joules
    r_squared: float
    residuals: tuple[float, ...]
    n_points: int
    series: str | None = None
    resolution: str | None = None

    def predict(self, mac_fraction: float) -> float:
        return self.slope * mac_fraction + self.intercept


@dataclass
class PowerTrace:
    times_s: np.ndarray
    power_mw: np.ndarray
    rail: str
    period_s: float
    skipped: int = 0


@dataclass
class EnergyReport:
    total_j: float
    per_inference_j: float | None
    samples: int
    rail: str


def fit_energy_model(points, series=None, resolution=None) -> EnergyModel:
    """Least-squares affine fit of (mac_fraction, energy_joules) points."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise EnergyError(f"need at least 2 calibration points, got {len(pts)}")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.ptp(x) == 0:
        raise EnergyError("degenerate calibration: all MAC fractions are equal")
    design = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = slope * x + intercept
    residuals = y - pred
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(residuals**2)) / ss_tot
    return EnergyModel(float(slope), float(intercept), r2, tuple(residuals.tolist()),
                       len(pts), series, resolution)


def estimate_energy(model: GraphModel, baseline_macs: int, energy_model: EnergyModel,
                    input_shape=None) -> float:
    """Predicted joules for the model's MAC fraction relative to the baseline."""
    if baseline_macs <= 0:
        raise EnergyError("baseline_macs must be > 0")
    if input_shape is None:
        spec = model.tensors.get(model.inputs[0])
        if spec is None or spec.shape is None:
            raise EnergyError("model has no inferred input shape; pass input_shape")
        input_shape = spec.shape
    macs = count_macs(model, input_shape).macs
    return energy_model.predict(macs / baseline_macs)


def load_calibration_points(series: str, resolution: str, path=None):
    """(mac_fraction, energy_joules) rows from a calibration CSV.

    Reads the packaged measurement series when no path is given.
    """
    if path is None:
        text = resources.files("netcarve").joinpath("data").joinpath(CALIBRATION_RESOURCE).read_text()
    else:
        with open(path) as f:
            text = f.read()
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    rows = list(csv.DictReader(io.StringIO(body)))
    points = [
        (float(r["mac_fraction"]), float(r["energy_joules"]))
        for r in rows
        if r["series"] == series and r["resolution"] == resolution
    ]
    if not points:
        raise EnergyError(f"no calibration rows for series={series!r} resolution={resolution!r}")
    return points


def load_miou_table(path=None) -> list[dict]:
    """Rows of the shipped accuracy/cost trade-off table.

    Columns: network, series, param_fraction, mac_fraction, energy_joules,
    miou (fractions relative to the non-pruned reference network).
    """
    if path is None:
        text = resources.files("netcarve").joinpath("data").joinpath(MIOU_RESOURCE).read_text()
    else:
        with open(path) as f:
            text = f.read()
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    rows = []
    for r in csv.DictReader(io.StringIO(body)):
        rows.append({
            "network": r["network"],
            "series": r["series"],
            "param_fraction": float(r["param_fraction"]),
            "mac_fraction": float(r["mac_fraction"]),
            "energy_joules": float(r["energy_joules"]),
            "miou": float(r["miou"]),
        })
    return rows


_TS_PATTERN = re.compile(r"^(\d{2}-\d{2}-\d{4} \d{2}:\d{2}:\d{2})\s")


def parse_tegrastats(text: str, rail: str = DEFAULT_RAIL, period_s: float = 1.0) -> PowerTrace:
    """Extract instantaneous power from tegrastats lines.

    Matches the "<RAIL> <inst>mW/<avg>mW" pattern; lines without the rail are
    counted as skipped. Timestamps come from an explicit leading date when the
    log carries one (tegrastats --log-time), otherwise from the sampling period.
    """
    rail_pattern = re.compile(re.escape(rail) + r"\s+(\d+(?:\.\d+)?)mW(?:/(\d+(?:\.\d+)?)mW)?")
    power = []
    stamps = []
    skipped = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        m = rail_pattern.search(line)
        if not m:
            skipped += 1
            continue
        power.append(float(m.group(1)))
        ts = _TS_PATTERN.match(line)
        stamps.append(datetime.strptime(ts.group(1), "%m-%d-%Y %H:%M:%S").timestamp()
                      if ts else None)
    if not power:
        raise EnergyError(f"no lines matched rail {rail!r} (skipped {skipped})")
    if all(s is not None for s in stamps):
        times = np.asarray(stamps, dtype=np.float64)
        times = times - times[0]
    else:
        times = np.arange(len(power), dtype=np.float64) * period_s
    if np.any(np.diff(times) <= 0):
        raise EnergyError("timestamps are not strictly increasing")
    return PowerTrace(times, np.asarray(power, dtype=np.float64), rail, period_s, skipped)


def integrate_energy(trace: PowerTrace, window=None, n_inferences=None,
                     idle_mw: float | None = None) -> EnergyReport:
    """Rectangle-rule integral of instantaneous power; optional [t0, t1] window.

    Each sample covers one sampling period (the gap to the next sample, or the
    configured period for the last one). idle_mw, when given, is subtracted
    from every sample before integration.
    """
    times, power = trace.times_s, trace.power_mw
    if window is not None:
        t0, t1 = window
        keep = (times >= t0) & (times <= t1)
        times, power = times[keep], power[keep]
        if times.size == 0:
            raise EnergyError(f"window [{t0}, {t1}] selects no samples")
    if idle_mw is not None:
        power = power - idle_mw
    dt = np.append(np.diff(times), trace.period_s)
    total_j = float(np.sum(power * dt) / 1000.0)
    per_inference = total_j / n_inferences if n_inferences else None
    return EnergyReport(total_j, per_inference, int(power.size), trace.rail)
