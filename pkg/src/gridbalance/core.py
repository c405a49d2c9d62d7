"""Shared domain types: demand time series, imbalance tariff, battery data.

Everything in this module is immutable after construction and all
operations are pure functions, so they are safe to share across threads.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

MINUTES_PER_DAY = 1440


def _readonly(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DemandSeries:
    """Per-customer energy time series on a fixed half-hourly (or similar) grid.

    Parameters
    ----------
    customer_id : str
        Opaque identifier.
    start : datetime
        Timestamp of the first period (local time).
    values : array-like
        Energy per period in kWh, finite and non-negative.
    granularity_minutes : int
        Period length; must divide a day evenly.
    """

    customer_id: str
    start: dt.datetime
    values: np.ndarray
    granularity_minutes: int = 30

    def __post_init__(self):
        if MINUTES_PER_DAY % self.granularity_minutes != 0:
            raise ValueError(
                f"granularity {self.granularity_minutes} min does not divide a day")
        vals = _readonly(self.values)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("values must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(vals)):
            raise ValueError("demand values must be finite")
        if np.any(vals < 0):
            raise ValueError("demand values must be >= 0")
        object.__setattr__(self, "values", vals)

    @property
    def periods_per_day(self) -> int:
        return MINUTES_PER_DAY // self.granularity_minutes

    def __len__(self) -> int:
        return self.values.size

    @property
    def n_days(self) -> int:
        """Number of whole days covered; raises if the last day is partial."""
        n = self.periods_per_day
        if self.values.size % n != 0:
            raise ValueError(
                f"series length {self.values.size} is not a whole number of "
                f"days ({n} periods/day)")
        return self.values.size // n

    def timestamp_at(self, index: int) -> dt.datetime:
        return self.start + dt.timedelta(minutes=index * self.granularity_minutes)

    def period_of_day(self, index: int) -> int:
        ts = self.timestamp_at(index)
        return (ts.hour * 60 + ts.minute) // self.granularity_minutes

    def weekday(self, index: int) -> int:
        return self.timestamp_at(index).weekday()

    def replace_values(self, values) -> "DemandSeries":
        return DemandSeries(self.customer_id, self.start, values,
                            self.granularity_minutes)


def aggregate_series(series_list, customer_id: str = "aggregate") -> DemandSeries:
    """Sum several aligned series into one (same start, granularity, length)."""
    if not series_list:
        raise ValueError("nothing to aggregate")
    first = series_list[0]
    for s in series_list[1:]:
        if (s.start != first.start or s.granularity_minutes != first.granularity_minutes
                or len(s) != len(first)):
            raise ValueError("series are not aligned")
    total = np.sum([s.values for s in series_list], axis=0)
    return DemandSeries(customer_id, first.start, total, first.granularity_minutes)


@dataclass(frozen=True)
class ImbalanceTariff:
    """Piecewise-linear convex imbalance pricing.

    ``prices`` holds the per-segment unit prices ordered from the most
    negative imbalance outward to the most positive; they must be
    non-increasing so the induced cost curve is convex.  ``threshold_kwh``
    is the width of each inner segment on both sides of zero.
    """

    threshold_kwh: float
    prices: tuple = (45.7, 15.0, 10.48, 0.0)
    big_m: float = 1e7

    def __post_init__(self):
        object.__setattr__(self, "prices", tuple(float(p) for p in self.prices))
        nps = len(self.prices)
        if nps < 2 or nps % 2 != 0:
            raise ValueError("need an even number of price segments, at least 2")
        if any(b > a for a, b in zip(self.prices, self.prices[1:], strict=False)):
            raise ValueError("prices must be non-increasing (convex cost curve)")
        if any(p < 0 for p in self.prices):
            raise ValueError("negative segment prices are not supported")
        if not self.threshold_kwh > 0:
            raise ValueError("threshold must be positive")
        if not self.threshold_kwh < self.big_m:
            raise ValueError("threshold must be below big_m")

    @property
    def n_segments(self) -> int:
        return len(self.prices)

    def shortage_prices(self) -> tuple:
        """Prices on the buying half, ordered inner (cheap) to outer."""
        half = self.n_segments // 2
        return tuple(reversed(self.prices[:half]))

    def surplus_prices(self) -> tuple:
        """Prices on the selling half, ordered inner (best) to outer."""
        half = self.n_segments // 2
        return self.prices[half:]


def imbalance_cost(im_kwh: float, tariff: ImbalanceTariff) -> float:
    """Settlement cost of one period's imbalance ``im = supply - demand``.

    Positive for a shortage (energy bought back), negative for surplus
    revenue.  The curve walks the tariff segments outward from zero, each
    inner segment ``threshold_kwh`` wide, the outermost unbounded.
    """
    th = tariff.threshold_kwh
    if im_kwh == 0.0:
        return 0.0
    if im_kwh < 0:
        prices = tariff.shortage_prices()
        sign = 1.0
        remaining = -float(im_kwh)
    else:
        prices = tariff.surplus_prices()
        sign = -1.0
        remaining = float(im_kwh)
    cost = 0.0
    for k, price in enumerate(prices):
        width = th if k < len(prices) - 1 else np.inf
        step = min(remaining, width)
        cost += price * step
        remaining -= step
        if remaining <= 0:
            break
    return sign * cost


@dataclass(frozen=True)
class BatterySpec:
    """Battery rating; ``unit_count`` identical units operated synchronously.

    Powers are in kW; energy terms in kWh.  A fleet of units is folded
    into one equivalent battery via :meth:`aggregate`.
    """

    capacity_kwh: float
    power_charge_kw: float
    power_discharge_kw: float
    soc_min_frac: float = 0.01
    soc_max_frac: float = 0.96
    eta_charge: float = 0.9747
    eta_discharge: float = 0.9747
    unit_count: int = 1

    def __post_init__(self):
        if not (0 <= self.soc_min_frac < self.soc_max_frac <= 1):
            raise ValueError("need 0 <= soc_min_frac < soc_max_frac <= 1")
        for eta in (self.eta_charge, self.eta_discharge):
            if not (0 < eta <= 1):
                raise ValueError("efficiencies must be in (0, 1]")
        # zero power is allowed so a capacity sweep can include the
        # no-battery point; negative ratings are not.
        if self.capacity_kwh < 0 or self.power_charge_kw < 0 or self.power_discharge_kw < 0:
            raise ValueError("capacity and power ratings must be >= 0")
        if self.unit_count < 1:
            raise ValueError("unit_count must be >= 1")

    def aggregate(self) -> "BatterySpec":
        """Fold unit_count synchronous units into one equivalent battery."""
        if self.unit_count == 1:
            return self
        n = self.unit_count
        return BatterySpec(self.capacity_kwh * n, self.power_charge_kw * n,
                           self.power_discharge_kw * n, self.soc_min_frac,
                           self.soc_max_frac, self.eta_charge,
                           self.eta_discharge, 1)

    @property
    def soc_min_kwh(self) -> float:
        return self.soc_min_frac * self.capacity_kwh * self.unit_count

    @property
    def soc_max_kwh(self) -> float:
        return self.soc_max_frac * self.capacity_kwh * self.unit_count

    def energy_per_period(self, granularity_minutes: int) -> tuple:
        """(max charge, max discharge) energy in kWh over one period."""
        hours = granularity_minutes / 60.0
        n = self.unit_count
        return (self.power_charge_kw * n * hours,
                self.power_discharge_kw * n * hours)


@dataclass(frozen=True)
class DacVector:
    """Customers sorted ascending by their demand-aggregation criterion."""

    entries: tuple = field(default_factory=tuple)  # (customer_id, dac_kwh)

    def __post_init__(self):
        entries = tuple((str(cid), float(dac)) for cid, dac in self.entries)
        dacs = [d for _, d in entries]
        if any(d < 0 for d in dacs):
            raise ValueError("dac values must be >= 0")
        if any(b < a for a, b in zip(dacs, dacs[1:], strict=False)):
            raise ValueError("dac values must be sorted ascending")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dacs(self) -> np.ndarray:
        return np.array([d for _, d in self.entries])

    @property
    def customer_ids(self) -> list:
        return [cid for cid, _ in self.entries]

    @classmethod
    def from_series(cls, series_list) -> "DacVector":
        pairs = [(s.customer_id, compute_mdsd(s)) for s in series_list]
        pairs.sort(key=lambda p: (p[1], p[0]))
        return cls(tuple(pairs))


def _daily_matrix(series: DemandSeries) -> np.ndarray:
    n = series.periods_per_day
    nd = series.n_days  # raises on partial days
    if nd < 1:
        raise ValueError("series is empty")
    return series.values.reshape(nd, n)


def compute_dsd(series: DemandSeries, period: int) -> float:
    """Population std-dev of one period's demand across all sampled days."""
    mat = _daily_matrix(series)
    if not 0 <= period < series.periods_per_day:
        raise ValueError(f"period {period} out of range [0, {series.periods_per_day})")
    return float(np.std(mat[:, period]))


def compute_mdsd(series: DemandSeries) -> float:
    """Maximum over all day-periods of the demand standard deviation.

    This is the per-customer demand aggregation criterion: the worst
    in-period deviation from the period's average across sampled days.
    """
    mat = _daily_matrix(series)
    return float(np.max(np.std(mat, axis=0)))


def load_demand_csv(path) -> list:
    """Load ``timestamp,customer_id,kwh`` rows into one series per customer.

    Rows for each customer must have strictly increasing timestamps at a
    uniform granularity; a missing period is reported as a gap error
    naming the timestamp.  Returns the series sorted by customer id.
    """
    per_customer: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != [
                "timestamp", "customer_id", "kwh"]:
            raise ValueError(f"{path}: expected header 'timestamp,customer_id,kwh'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                ts = dt.datetime.fromisoformat(row[0].strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from exc
            cid = row[1].strip()
            if not cid:
                raise ValueError(f"{path}:{lineno}: empty customer_id")
            try:
                kwh = float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad kwh value {row[2]!r}") from exc
            if not np.isfinite(kwh) or kwh < 0:
                raise ValueError(f"{path}:{lineno}: kwh must be finite and >= 0")
            per_customer.setdefault(cid, []).append((ts, kwh, lineno))

    out = []
    for cid in sorted(per_customer):
        rows = per_customer[cid]
        times = [r[0] for r in rows]
        for (t0, _, ln0), (t1, _, ln1) in zip(rows, rows[1:]):
            if t1 <= t0:
                raise ValueError(
                    f"{path}:{ln1}: timestamps for {cid} not increasing at {t1}")
        if len(times) < 2:
            raise ValueError(f"{path}: customer {cid} has fewer than 2 rows")
        step = times[1] - times[0]
        minutes = step.total_seconds() / 60.0
        if minutes <= 0 or minutes != int(minutes) or MINUTES_PER_DAY % int(minutes) != 0:
            raise ValueError(f"{path}: customer {cid} has unusable granularity {step}")
        for t0, t1 in zip(times, times[1:]):
            if t1 - t0 != step:
                raise ValueError(
                    f"{path}: gap for customer {cid}: expected {t0 + step}, got {t1}")
        out.append(DemandSeries(cid, times[0], [r[1] for r in rows], int(minutes)))
    return out


def load_holidays(path) -> set:
    """Read one ISO date per line; blank lines and '#' comments allowed."""
    days = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                days.add(dt.date.fromisoformat(text))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad date {text!r}") from exc
    return days
