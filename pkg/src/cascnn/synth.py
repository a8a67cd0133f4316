"""Deterministic synthetic AFC data with metro-like structure.

Stations sit on one line; the outer ones are residential and the central ones
commercial. Mean OD demand is gravity-style (role affinity x distance decay)
times a time-of-day curve with a residential->commercial morning peak and the
reverse evening peak. Each day draws a persistent network-wide factor (AR(1)
in log space) and an independent per-origin factor, then Poisson counts.
Durations are hop count x per-hop time plus bounded noise, so trips often
finish in a later interval than they started.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .data import TimeGrid, weekdays
from .errors import ConfigError

RESIDENTIAL, COMMERCIAL = 0, 1


@dataclass
class NetworkSpec:
    n: int = 20
    residential_fraction: float = 0.5
    per_hop_minutes: float = 3.0
    duration_noise_minutes: float = 4.0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"network needs n >= 2 stations, got {self.n}")
        if self.per_hop_minutes <= 0:
            raise ConfigError("per_hop_minutes must be positive")
        if not 0.0 <= self.residential_fraction <= 1.0:
            raise ConfigError("residential_fraction must lie in [0, 1]")
        if self.duration_noise_minutes < 0:
            raise ConfigError("duration_noise_minutes must be non-negative")

    def roles(self):
        """Outermost stations (by distance from the line centre) are residential."""
        centre = (self.n - 1) / 2.0
        by_distance = sorted(range(self.n), key=lambda i: (-abs(i - centre), i))
        n_res = int(round(self.residential_fraction * self.n))
        roles = np.full(self.n, COMMERCIAL)
        roles[by_distance[:n_res]] = RESIDENTIAL
        return roles

    def hops(self):
        idx = np.arange(self.n)
        return np.abs(idx[:, None] - idx[None, :])


@dataclass
class DemandProfile:
    base_rate: float = 6.0
    decay_hops: float = 3.0
    affinity_res_com: float = 1.0
    affinity_com_res: float = 1.0
    affinity_res_res: float = 0.25
    affinity_com_com: float = 0.5
    am_peak: float = 4.0
    pm_peak: float = 4.0
    peak_other: float = 1.8
    day_sd: float = 0.25
    day_persistence: float = 0.7
    origin_sd: float = 0.2

    def __post_init__(self):
        values = asdict(self)
        bad = [k for k, v in values.items() if v < 0]
        if bad or self.decay_hops == 0 or self.day_persistence >= 1:
            raise ConfigError(f"invalid demand profile values: {bad or ['decay_hops/day_persistence']}")

    def affinity(self, roles):
        table = np.array([[self.affinity_res_res, self.affinity_res_com],
                          [self.affinity_com_res, self.affinity_com_com]])
        return table[roles[:, None], roles[None, :]]


# time-of-day base curve: (start hour, end hour, level)
BASE_CURVE = [(5.0, 6.5, 0.3), (6.5, 7.5, 0.8), (7.5, 9.5, 1.0), (9.5, 17.0, 0.6),
              (17.0, 19.0, 1.0), (19.0, 21.0, 0.6), (21.0, 23.0, 0.25)]
AM_PEAK = (7.5, 9.5)
PM_PEAK = (17.0, 19.0)


def time_multiplier(hour, profile, roles):
    """n x n multiplier at clock time ``hour`` (float hours)."""
    level = next((v for a, b, v in BASE_CURVE if a <= hour < b), 0.0)
    res_to_com = (roles[:, None] == RESIDENTIAL) & (roles[None, :] == COMMERCIAL)
    com_to_res = (roles[:, None] == COMMERCIAL) & (roles[None, :] == RESIDENTIAL)
    mult = np.full((len(roles), len(roles)), level)
    if AM_PEAK[0] <= hour < AM_PEAK[1]:
        mult *= np.where(res_to_com, profile.am_peak, np.where(com_to_res, 1.0, profile.peak_other))
    elif PM_PEAK[0] <= hour < PM_PEAK[1]:
        mult *= np.where(com_to_res, profile.pm_peak, np.where(res_to_com, 1.0, profile.peak_other))
    return mult


def expected_rates(spec, profile, grid):
    """Mean trips per (interval, origin, destination) before daily factors."""
    roles = spec.roles()
    gravity = profile.base_rate * profile.affinity(roles) * np.exp(-spec.hops() / profile.decay_hops)
    np.fill_diagonal(gravity, 0.0)
    start = grid.service_start.hour + grid.service_start.minute / 60.0
    width = grid.interval_minutes / 60.0
    return np.stack([
        gravity * time_multiplier(start + (t + 0.5) * width, profile, roles)
        for t in range(grid.intervals_per_day)
    ])


def day_factors(profile, n_days, n, rng):
    """Mean-one lognormal factors: network-wide AR(1) per day, iid per origin."""
    rho, sd = profile.day_persistence, profile.day_sd
    z = np.zeros(n_days)
    if n_days:
        z[0] = rng.normal(0.0, sd)
    for d in range(1, n_days):
        z[d] = rho * z[d - 1] + rng.normal(0.0, sd * np.sqrt(1 - rho * rho))
    network = np.exp(z - sd * sd / 2)
    origin = np.exp(rng.normal(0.0, profile.origin_sd, size=(n_days, n)) - profile.origin_sd ** 2 / 2)
    return network, origin


def generate_counts(spec, profile, grid, seed):
    """Day x interval x origin x destination Poisson trip counts."""
    rates = expected_rates(spec, profile, grid)
    master = np.random.default_rng(seed)
    network, origin = day_factors(profile, grid.n_days, spec.n, master)
    day_seeds = np.random.SeedSequence(seed).spawn(grid.n_days)
    counts = np.empty((grid.n_days, *rates.shape), dtype=np.int64)
    for d, ss in enumerate(day_seeds):
        rng = np.random.default_rng(ss)
        counts[d] = rng.poisson(rates * network[d] * origin[d][None, :, None])
    return counts, day_seeds


def _trips_for_day(counts_d, grid, d, spec, rng):
    t_idx, o_idx, x_idx = np.nonzero(counts_d)
    reps = counts_d[t_idx, o_idx, x_idx]
    t = np.repeat(t_idx, reps)
    o = np.repeat(o_idx, reps)
    x = np.repeat(x_idx, reps)
    width = grid.interval_minutes * 60
    day_start = np.datetime64(datetime.combine(grid.dates[d], grid.service_start), "s")
    day_end = np.datetime64(datetime.combine(grid.dates[d], grid.service_end), "s")
    # keep the last minute of each interval free so a closing-time exit stays after entry
    entry = day_start + (t * width + rng.integers(0, width - 60, size=t.size)).astype("timedelta64[s]")
    ride = np.abs(o - x) * spec.per_hop_minutes * 60 + 60 + rng.uniform(0, spec.duration_noise_minutes * 60, size=t.size)
    exit_ = entry + np.rint(ride).astype("timedelta64[s]")
    exit_ = np.minimum(exit_, day_end - np.timedelta64(1, "s"))
    return o, entry, x, exit_


def generate(spec, profile, n_days, seed, out_dir, start_date="2024-03-04",
             service_start="05:00", service_end="23:00", interval_minutes=30):
    """Write ``afc.csv`` and ``manifest.json`` into ``out_dir``; return the manifest."""
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    dates = weekdays(date.fromisoformat(start_date), n_days)
    grid = TimeGrid(tuple(dates), service_start, service_end, interval_minutes)
    counts, day_seeds = generate_counts(spec, profile, grid, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_records = 0
    with open(out_dir / "afc.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "entry_station", "entry_time", "exit_station", "exit_time"])
        for d, ss in enumerate(day_seeds):
            rng = np.random.default_rng(ss.spawn(1)[0])
            o, entry, x, exit_ = _trips_for_day(counts[d], grid, d, spec, rng)
            entry_s = np.datetime_as_string(entry, unit="s")
            exit_s = np.datetime_as_string(exit_, unit="s")
            stamp = dates[d].strftime("%Y%m%d")
            writer.writerows(
                (f"C{stamp}{k:07d}", int(a), b, int(c), e)
                for k, (a, b, c, e) in enumerate(zip(o, entry_s, x, exit_s))
            )
            n_records += len(o)
    manifest = {
        "n": spec.n,
        "dates": [d.isoformat() for d in dates],
        "records": n_records,
        "generator": {
            "seed": seed,
            "network": asdict(spec),
            "profile": asdict(profile),
            "service_start": service_start,
            "service_end": service_end,
            "interval_minutes": interval_minutes,
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
