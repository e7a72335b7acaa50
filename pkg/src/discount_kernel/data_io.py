"""Bond quote ingestion, synthetic treasury-like data, and artifact persistence.

Conventions: ACT/365-fixed tenors, linear accrued interest between coupon
dates, dirty prices per 100 face.  Coupon schedules roll back from maturity
in steps of ``12 / frequency`` months.
"""
from __future__ import annotations

import calendar
import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .curve_fit import CashflowSystem, FittedCurve
from .dynamics import AffineModelSpec, DiffusionSpec, simulate
from .kernels import DUPLICATE_TENOR_TOL, KernelSpec, kernel_from_dict
from .reduce import ReducedModel

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADER = ("quote_date", "maturity_date", "coupon_rate", "frequency", "clean_price", "face")
MAX_MATURITY_YEARS = 40.0
DAYS_PER_YEAR = 365.0
MIN_DAYS_TO_MATURITY = 30  # generator drops bills this close to maturity


class SchemaVersionError(ValueError):
    pass


@dataclass(frozen=True)
class BondQuote:
    quote_date: dt.date
    maturity_date: dt.date
    coupon_rate: float
    frequency: int
    clean_price: float
    face: float = 100.0

    def __post_init__(self):
        if not self.maturity_date > self.quote_date:
            raise ValueError("maturity must be after the quote date")
        if self.frequency not in (1, 2):
            raise ValueError("frequency must be 1 or 2")
        if not self.clean_price > 0:
            raise ValueError("clean price must be positive")
        if not self.face > 0 or self.coupon_rate < 0:
            raise ValueError("face must be positive and coupon nonnegative")

    @property
    def sort_key(self):
        return (self.quote_date, self.maturity_date, self.coupon_rate, self.frequency, self.clean_price, self.face)


def add_months(d: dt.date, months: int) -> dt.date:
    m = d.month - 1 + months
    y = d.year + m // 12
    m = m % 12 + 1
    return dt.date(y, m, min(d.day, calendar.monthrange(y, m)[1]))


def coupon_schedule(quote: BondQuote):
    """Coupon dates strictly after the quote date and the previous coupon date."""
    step = 12 // quote.frequency
    dates = []
    k = 0
    d = quote.maturity_date
    while d > quote.quote_date:
        dates.append(d)
        k += 1
        d = add_months(quote.maturity_date, -step * k)
    return dates[::-1], d


def accrued_interest(quote: BondQuote) -> float:
    """Linear accrual of the current coupon period."""
    if quote.coupon_rate == 0:
        return 0.0
    dates, prev = coupon_schedule(quote)
    nxt = dates[0]
    coupon = quote.coupon_rate * quote.face / quote.frequency
    return coupon * (quote.quote_date - prev).days / (nxt - prev).days


def quote_cashflows(quote: BondQuote):
    """``(tenors, amounts)`` of one bond; coupon bonds pay face with the last coupon."""
    dates, _ = coupon_schedule(quote)
    if quote.coupon_rate == 0:
        dates = [quote.maturity_date]
    coupon = quote.coupon_rate * quote.face / quote.frequency
    amounts = [coupon] * len(dates)
    amounts[-1] += quote.face
    tenors = [(d - quote.quote_date).days / DAYS_PER_YEAR for d in dates]
    return np.asarray(tenors), np.asarray(amounts)


def dirty_price(quote: BondQuote) -> float:
    return quote.clean_price + accrued_interest(quote)


def build_system(quotes: Sequence[BondQuote], weights=None) -> CashflowSystem:
    """Assemble one day's quotes onto a shared, sorted, deduplicated tenor grid."""
    quotes = sorted(quotes, key=lambda q: q.sort_key)
    flows = [quote_cashflows(q) for q in quotes]
    all_t = np.sort(np.concatenate([f[0] for f in flows]))
    grid = [all_t[0]]
    for t in all_t[1:]:
        if t - grid[-1] >= DUPLICATE_TENOR_TOL:
            grid.append(t)
    grid = np.asarray(grid)
    C = np.zeros((len(quotes), grid.size))
    for i, (ts, am) in enumerate(flows):
        j = np.searchsorted(grid, ts - DUPLICATE_TENOR_TOL / 2)
        np.add.at(C[i], j, am)
    prices = np.array([dirty_price(q) for q in quotes])
    labels = tuple(f"{q.maturity_date.isoformat()}/{q.coupon_rate:g}" for q in quotes)
    return CashflowSystem(prices, C, grid, weights, quotes[0].quote_date.isoformat(), labels)


@dataclass
class Reject:
    line: int
    reason: str


def _parse_row(row: dict) -> BondQuote:
    q = dt.date.fromisoformat(row["quote_date"].strip())
    m = dt.date.fromisoformat(row["maturity_date"].strip())
    face = row.get("face")
    face = float(face) if face not in (None, "") else 100.0
    quote = BondQuote(q, m, float(row["coupon_rate"]), int(row["frequency"]), float(row["clean_price"]), face)
    if (m - q).days / DAYS_PER_YEAR > MAX_MATURITY_YEARS:
        raise ValueError(f"maturity beyond {MAX_MATURITY_YEARS:g} years")
    return quote


def ingest_csv(path) -> tuple:
    """Read a quote CSV into per-day :class:`CashflowSystem` objects.

    Returns ``(systems, rejects)``.  Malformed rows, nonpositive prices,
    maturities beyond 40 years and duplicate rows go to ``rejects``; an empty
    file raises ``ValueError``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        missing = [c for c in CSV_HEADER[:5] if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = list(enumerate(reader, start=2))
    parsed, rejects, seen, quotes = [], [], set(), {}
    for line, row in rows:
        try:
            parsed.append((_parse_row(row), line))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            rejects.append(Reject(line, str(exc) or type(exc).__name__))
    # canonical order first, so which duplicate survives does not depend on row order
    for q, line in sorted(parsed, key=lambda item: (item[0].sort_key, item[1])):
        key = (q.quote_date, q.maturity_date, q.coupon_rate, q.frequency)
        if key in seen:
            rejects.append(Reject(line, "duplicate contract on quote date"))
            continue
        seen.add(key)
        quotes.setdefault(q.quote_date, []).append(q)
    rejects.sort(key=lambda r: r.line)
    systems = []
    for day in sorted(quotes):
        if not quotes[day]:
            log.warning("no valid quotes on %s; skipped", day)
            continue
        systems.append(build_system(quotes[day]))
    return systems, rejects


def write_quotes_csv(path, quotes: Sequence[BondQuote]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for q in sorted(quotes, key=lambda q: q.sort_key):
            w.writerow([q.quote_date.isoformat(), q.maturity_date.isoformat(), repr(q.coupon_rate),
                        q.frequency, repr(q.clean_price), repr(q.face)])


def write_rejects_csv(path, rejects: Sequence[Reject]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("line", "reason"))
        for r in rejects:
            w.writerow((r.line, r.reason))


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings of the synthetic treasury-like generator.

    ``tenor_mix`` gives the expected share of contracts per day in the
    buckets: bills up to one year (zero coupon, weekly maturities, reissued
    as they roll off), then notes and bonds in ``(1, 5]``, ``(5, 20]`` and
    ``(20, 30]`` years (semiannual coupons, maturing on the 15th).

    ``sigma_true`` should satisfy ``ones @ sigma == 0`` so that ``h(0) = 1``
    persists along the simulated path.
    """

    n_days: int = 20
    contracts_per_day: int = 100
    true_rates: tuple = (-0.02, -0.05, -0.15)
    true_z0: tuple = (0.5, 0.3, 0.2)
    sigma_true: Optional[tuple] = None
    price_noise_sd: float = 0.0
    tenor_mix: tuple = (0.2, 0.4, 0.3, 0.1)
    coupon_ceiling: float = 0.06
    start_date: dt.date = dt.date(2021, 1, 4)
    seed: int = 0

    def sigma_matrix(self) -> np.ndarray:
        n = len(self.true_rates)
        if self.sigma_true is None:
            return np.zeros((n, n))
        return np.asarray(self.sigma_true, dtype=float).reshape(n, n)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    quotes: list
    systems: list
    model: AffineModelSpec
    factors: np.ndarray  # (n_days, d + 1) true Z path
    clean_prices_noiseless: dict = field(default_factory=dict)

    def true_curve(self, t: int):
        rates, z = self.model.rates, self.factors[t]
        return lambda x: np.exp(np.multiply.outer(np.asarray(x, dtype=float), rates)) @ z


def business_days(start: dt.date, n: int) -> list:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def _bond_universe(spec: SyntheticSpec, rng) -> list:
    """Maturity dates and coupons of every contract quoted at some point."""
    mix = np.asarray(spec.tenor_mix, dtype=float)
    counts = np.round(spec.contracts_per_day * mix / mix.sum()).astype(int)
    bonds = []
    # bills: weekly maturities spanning the quoting window plus one year
    horizon_weeks = int(np.ceil(spec.n_days * 7 / 5 / 7))
    weeks = np.arange(5, 53 + horizon_weeks)
    n_bills = min(weeks.size, int(round(counts[0] * weeks.size / 48)))
    first = spec.start_date + dt.timedelta(days=(3 - spec.start_date.weekday()) % 7)
    for w in np.sort(rng.choice(weeks, size=n_bills, replace=False)):
        bonds.append((first + dt.timedelta(weeks=int(w)), 0.0))
    anchor = dt.date(spec.start_date.year, spec.start_date.month, 15)
    for (lo, hi), n in zip([(13, 60), (61, 240), (241, 360)], counts[1:]):
        months = np.sort(rng.choice(np.arange(lo, hi + 1), size=min(n, hi - lo + 1), replace=False))
        for m in months:
            coupon = round(rng.uniform(0.0, spec.coupon_ceiling) * 800) / 800
            bonds.append((add_months(anchor, int(m)), coupon))
    return sorted(bonds)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Quotes priced off a simulated quasi-exponential curve, plus the ground truth.

    The factor path is one Euler path of the no-arbitrage dynamics on a daily
    grid.  Gaussian noise of standard deviation ``price_noise_sd`` (per 100
    face) is added to clean prices.
    """
    rng = np.random.default_rng(spec.seed)
    model = AffineModelSpec(spec.true_rates, spec.true_z0)
    sigma = spec.sigma_matrix()
    if spec.n_days > 1:
        diff = DiffusionSpec(sigma, dt=1.0 / 252, horizon=(spec.n_days - 1) / 252, n_paths=1, seed=spec.seed)
        factors = simulate(model, diff).paths[0]
    else:
        factors = model.z0[None, :]
    bonds = _bond_universe(spec, rng)
    days = business_days(spec.start_date, spec.n_days)
    quotes, systems, noiseless = [], [], {}
    for t, day in enumerate(days):
        curve = lambda x, t=t: np.exp(np.multiply.outer(np.asarray(x, dtype=float), model.rates)) @ factors[t]
        day_quotes = []
        for mat, cpn in bonds:
            left = (mat - day).days
            if left < MIN_DAYS_TO_MATURITY or (cpn == 0.0 and left > 366):
                continue
            proto = BondQuote(day, mat, cpn, 2, 1.0)
            tenors, amounts = quote_cashflows(proto)
            dirty = float(amounts @ curve(tenors))
            clean = dirty - accrued_interest(proto)
            noiseless[(day, mat)] = clean
            noisy = clean + (rng.normal(0.0, spec.price_noise_sd) if spec.price_noise_sd > 0 else 0.0)
            day_quotes.append(BondQuote(day, mat, cpn, 2, noisy))
        quotes.extend(day_quotes)
        systems.append(build_system(day_quotes))
    return SyntheticDataset(spec, quotes, systems, model, factors, noiseless)


# -- artifact bundles ----------------------------------------------------------

_TYPES = {
    "KernelSpec": (KernelSpec, lambda d: kernel_from_dict(d)),
    "FittedCurve": (FittedCurve, FittedCurve.from_dict),
    "ReducedModel": (ReducedModel, ReducedModel.from_dict),
    "AffineModelSpec": (AffineModelSpec, AffineModelSpec.from_dict),
    "DiffusionSpec": (DiffusionSpec, DiffusionSpec.from_dict),
    "CashflowSystem": (CashflowSystem, CashflowSystem.from_dict),
}


def _type_name(obj) -> str:
    for name, (cls, _) in _TYPES.items():
        if isinstance(obj, cls):
            return name
    if hasattr(obj, "parts"):
        return "KernelSpec"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(obj, path):
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=True))


def save_artifacts(directory, bundle: dict, extra: Optional[dict] = None) -> Path:
    """Write each object to ``<name>.json`` plus ``manifest.json`` with the schema version.

    Values may be single objects or lists of objects of one type.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "objects": {}}
    if extra:
        manifest.update(extra)
    for name, obj in bundle.items():
        is_list = isinstance(obj, (list, tuple))
        items = list(obj) if is_list else [obj]
        tname = _type_name(items[0]) if items else "CashflowSystem"
        payload = [o.to_dict() for o in items]
        dump_json(payload if is_list else payload[0], out / f"{name}.json")
        manifest["objects"][name] = {"type": tname, "file": f"{name}.json", "list": is_list}
    dump_json(manifest, out / "manifest.json")
    return out


def load_artifacts(directory) -> dict:
    """Inverse of :func:`save_artifacts`; rejects unknown schema versions."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    found = manifest.get("schema_version")
    if found != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema version mismatch: found {found!r}, expected {SCHEMA_VERSION}")
    out = {}
    for name, meta in manifest["objects"].items():
        _, loader = _TYPES[meta["type"]]
        payload = json.loads((d / meta["file"]).read_text())
        out[name] = [loader(p) for p in payload] if meta.get("list") else loader(payload)
    return out


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
