"""Check-in ingestion, POI registry, time discretisation, windowing and splits.

A :class:`CheckInLog` keeps one row per check-in, sorted by (user, time),
so a user's records are one contiguous block of rows.  Trajectory windows
are identified by the row index of their target check-in; the history is
the ``n`` rows immediately before it.
"""

from __future__ import annotations

import calendar
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FOURSQUARE_CATEGORIES = (
    "Arts & Entertainment",
    "College & University",
    "Food",
    "Professional & Other Places",
    "Nightlife Spot",
    "Outdoors & Recreation",
    "Shop & Service",
    "Travel & Transport",
    "Residence",
)
ARCGIS_CATEGORIES = (
    "Arts & Entertainment",
    "Education",
    "Water Features",
    "Travel & Transport",
    "Shops & Service",
    "Residence",
    "Professional & Other Places",
    "Parks & Outdoors",
    "Nightlife Spot",
    "Land Features",
    "Food",
)
OTHER = "Other"
N_SLOTS = 168
MAX_MALFORMED_FRACTION = 0.01

_MONTHS = {m: i for i, m in enumerate(calendar.month_abbr) if m}


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------- categories


@dataclass(frozen=True)
class CategoryScheme:
    """Raw category label -> high-level category.

    Ids follow the order of ``categories``; the reserved ``Other`` bucket
    always takes the last id.
    """

    name: str
    categories: tuple[str, ...]
    table: dict[str, str]

    @property
    def names(self) -> tuple[str, ...]:
        return self.categories + (OTHER,)

    @property
    def other_id(self) -> int:
        return len(self.categories)

    def __post_init__(self):
        object.__setattr__(self, "_folded", {k.lower(): v for k, v in self.table.items()})

    def category_id(self, raw: str) -> int | None:
        hi = self.table.get(raw)
        if hi is None:
            hi = self._folded.get(raw.strip().lower())
        return None if hi is None else self.categories.index(hi)

    @classmethod
    def from_file(cls, path, categories: Sequence[str] | None = None, name: str | None = None):
        text = Path(path).read_text(encoding="utf-8")
        return cls._parse(text, categories, name or Path(path).stem)

    @classmethod
    def builtin(cls, name: str) -> "CategoryScheme":
        cats = {"foursquare": FOURSQUARE_CATEGORIES, "arcgis": ARCGIS_CATEGORIES}
        if name not in cats:
            raise ValueError(f"unknown category scheme {name!r}")
        text = resources.files("nextpoi.schemes").joinpath(f"{name}.tsv").read_text(encoding="utf-8")
        return cls._parse(text, cats[name], name)

    @classmethod
    def _parse(cls, text: str, categories, name: str):
        table: dict[str, str] = {}
        order: list[str] = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            raw, hi = line.rstrip("\n").split("\t")[:2]
            table[raw] = hi
            if hi not in order:
                order.append(hi)
        cats = tuple(categories) if categories is not None else tuple(order)
        bad = sorted(set(table.values()) - set(cats))
        if bad:
            raise ValueError(f"scheme maps to undeclared categories: {bad}")
        return cls(name, cats, table)


# ---------------------------------------------------------------- raw records


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    poi_id: int
    timestamp_utc: int
    lat: float
    lon: float
    tz_offset_minutes: int = 0
    raw_category: str = ""


def _dense(raw: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    uniq = set(raw)
    if all(r.lstrip("-").isdigit() for r in uniq):
        keys = sorted(uniq, key=int)
    else:
        keys = sorted(uniq)
    lookup = {k: i for i, k in enumerate(keys)}
    return np.fromiter((lookup[r] for r in raw), dtype=np.int64, count=len(raw)), keys


@dataclass
class CheckInLog:
    """Column store of check-ins sorted by (user, timestamp)."""

    user: np.ndarray
    poi: np.ndarray
    ts: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    tz: np.ndarray
    raw_category: list[str]
    user_keys: list[str] = field(default_factory=list)
    poi_keys: list[str] = field(default_factory=list)
    malformed: int = 0
    user_start: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_users = len(self.user_keys) if self.user_keys else (int(self.user.max()) + 1 if len(self.user) else 0)
        counts = np.bincount(self.user, minlength=n_users) if len(self.user) else np.zeros(n_users, np.int64)
        self.user_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def __len__(self) -> int:
        return len(self.user)

    @property
    def n_users(self) -> int:
        return len(self.user_start) - 1

    @property
    def n_pois(self) -> int:
        return len(self.poi_keys) if self.poi_keys else (int(self.poi.max()) + 1 if len(self.poi) else 0)

    def user_rows(self, u: int) -> range:
        return range(int(self.user_start[u]), int(self.user_start[u + 1]))

    def user_count(self) -> np.ndarray:
        return np.diff(self.user_start)

    def record(self, row: int) -> CheckIn:
        return CheckIn(
            int(self.user[row]), int(self.poi[row]), int(self.ts[row]),
            float(self.lat[row]), float(self.lon[row]), int(self.tz[row]), self.raw_category[row],
        )

    @classmethod
    def from_raw(
        cls,
        users: Sequence[str],
        pois: Sequence[str],
        ts: Iterable[int],
        lat: Iterable[float],
        lon: Iterable[float],
        tz: Iterable[int],
        raw_category: Sequence[str],
        malformed: int = 0,
    ) -> "CheckInLog":
        """Densify raw ids (numeric order when all ids are integers) and sort."""
        u, user_keys = _dense(list(users))
        p, poi_keys = _dense(list(pois))
        ts = np.asarray(list(ts), dtype=np.int64)
        order = np.lexsort((ts, u)) if len(u) else np.zeros(0, np.int64)
        cats = list(raw_category)
        return cls(
            user=u[order], poi=p[order], ts=ts[order],
            lat=np.asarray(list(lat), dtype=np.float64)[order],
            lon=np.asarray(list(lon), dtype=np.float64)[order],
            tz=np.asarray(list(tz), dtype=np.int64)[order],
            raw_category=[cats[i] for i in order],
            user_keys=user_keys, poi_keys=poi_keys, malformed=malformed,
        )

    @classmethod
    def from_records(cls, records: Iterable[CheckIn]) -> "CheckInLog":
        recs = list(records)
        return cls.from_raw(
            [str(r.user_id) for r in recs], [str(r.poi_id) for r in recs],
            [r.timestamp_utc for r in recs], [r.lat for r in recs], [r.lon for r in recs],
            [r.tz_offset_minutes for r in recs], [r.raw_category for r in recs],
        )

    def summary(self) -> dict:
        return {"users": self.n_users, "pois": self.n_pois, "checkins": len(self)}


# ---------------------------------------------------------------- parsing


def parse_foursquare_time(text: str) -> int:
    """``"Tue Apr 03 18:00:09 +0000 2012"`` -> seconds since epoch (UTC)."""
    _, mon, day, hms, off, year = text.split()
    hh, mm, ss = hms.split(":")
    secs = calendar.timegm((int(year), _MONTHS[mon], int(day), int(hh), int(mm), int(ss)))
    sign = -1 if off[0] == "-" else 1
    return secs - sign * (int(off[1:3]) * 3600 + int(off[3:5]) * 60)


def parse_iso_time(text: str) -> int:
    date, _, clock = text.strip().rstrip("Z").partition("T")
    y, mo, d = (int(v) for v in date.split("-"))
    hh, mm, ss = (int(float(v)) for v in (clock or "0:0:0").split(":"))
    return calendar.timegm((y, mo, d, hh, mm, ss))


def _check_coord(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or math.isnan(lat + lon):
        raise ValueError("coordinate out of range")


def parse_checkins(path, format: str = "foursquare", poi_categories: dict[str, str] | None = None) -> CheckInLog:
    """Read a Foursquare or Gowalla check-in TSV.

    Malformed lines are skipped and counted in ``CheckInLog.malformed``;
    more than 1% malformed raises :class:`ParseError` quoting samples.
    Gowalla has no category column; ``poi_categories`` may supply raw labels
    by location id.
    """
    if format not in ("foursquare", "gowalla"):
        raise ValueError(f"unknown check-in format {format!r}")
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    users, pois, ts, lat, lon, tz, cats = [], [], [], [], [], [], []
    bad: list[tuple[int, str]] = []
    total = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        total += 1
        f = line.split("\t")
        try:
            if format == "foursquare":
                if len(f) != 8:
                    raise ValueError("expected 8 fields")
                la, lo = float(f[4]), float(f[5])
                _check_coord(la, lo)
                rec = (f[0], f[1], parse_foursquare_time(f[7]), la, lo, int(float(f[6])), f[3])
            else:
                if len(f) < 5:
                    raise ValueError("expected 5 fields")
                la, lo = float(f[2]), float(f[3])
                _check_coord(la, lo)
                loc = f[4].strip()
                rec = (f[0], loc, parse_iso_time(f[1]), la, lo, 0, (poi_categories or {}).get(loc, ""))
        except (ValueError, KeyError, IndexError):
            bad.append((lineno, line))
            continue
        for col, val in zip((users, pois, ts, lat, lon, tz, cats), rec):
            col.append(val)
    if total and len(bad) > MAX_MALFORMED_FRACTION * total:
        samples = "; ".join(f"line {n}: {l[:80]!r}" for n, l in bad[:3])
        raise ParseError(f"{len(bad)} of {total} lines malformed (>1%): {samples}")
    return CheckInLog.from_raw(users, pois, ts, lat, lon, tz, cats, malformed=len(bad))


def write_foursquare(log: CheckInLog, path, category_codes: dict[str, str] | None = None) -> None:
    """Write ``log`` in the Foursquare TSV layout (UTC time column)."""
    lines = []
    for r in range(len(log)):
        t = int(log.ts[r])
        tm = time.gmtime(t)
        stamp = f"{calendar.day_abbr[tm.tm_wday]} {calendar.month_abbr[tm.tm_mon]} {tm.tm_mday:02d} " \
                f"{tm.tm_hour:02d}:{tm.tm_min:02d}:{tm.tm_sec:02d} +0000 {tm.tm_year}"
        cat = log.raw_category[r]
        code = (category_codes or {}).get(cat, "0")
        lines.append(
            f"{log.user_keys[log.user[r]]}\t{log.poi_keys[log.poi[r]]}\t{code}\t{cat}\t"
            f"{float(log.lat[r])!r}\t{float(log.lon[r])!r}\t{int(log.tz[r])}\t{stamp}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------- time


def time_slot(timestamp_utc, tz_offset_minutes=0):
    """Hour-of-week slot in local time: ``weekday * 24 + hour``, Monday = 0.

    Works on scalars and arrays.
    """
    local = np.asarray(timestamp_utc, dtype=np.int64) + np.asarray(tz_offset_minutes, dtype=np.int64) * 60
    day = np.floor_divide(local, 86400)
    hour = np.floor_divide(np.mod(local, 86400), 3600)
    # 1970-01-01 was a Thursday (weekday 3)
    slot = np.mod(day + 3, 7) * 24 + hour
    return int(slot) if np.ndim(slot) == 0 else slot


def local_hour(timestamp_utc, tz_offset_minutes=0):
    local = np.asarray(timestamp_utc, dtype=np.int64) + np.asarray(tz_offset_minutes, dtype=np.int64) * 60
    return np.floor_divide(np.mod(local, 86400), 3600)


# ---------------------------------------------------------------- splits


def split_bounds(count: int, train_frac: float = 0.8, val_frac_of_train: float = 0.1) -> tuple[int, int]:
    """Per-user row offsets ``(val_start, test_start)`` of a chronological split.

    Rows ``[0, val_start)`` are train, ``[val_start, test_start)`` validation
    and ``[test_start, count)`` test.
    """
    if not (0 < train_frac < 1 or train_frac == 1.0) or not 0 <= val_frac_of_train < 1:
        raise ValueError("fractions must lie in (0, 1)")
    n_train = int(math.floor(count * train_frac + 1e-9))
    n_val = int(math.floor(n_train * val_frac_of_train + 1e-9))
    return n_train - n_val, n_train


def train_mask(log: CheckInLog, train_frac: float = 0.8) -> np.ndarray:
    """Rows belonging to each user's chronological training portion (validation included)."""
    mask = np.zeros(len(log), dtype=bool)
    for u in range(log.n_users):
        s, e = log.user_start[u], log.user_start[u + 1]
        mask[s : s + split_bounds(int(e - s), train_frac, 0.0)[1]] = True
    return mask


# ---------------------------------------------------------------- registry


@dataclass
class PoiRegistry:
    lat: np.ndarray
    lon: np.ndarray
    xy: np.ndarray
    category: np.ndarray
    category_names: tuple[str, ...]
    bounds: tuple[float, float, float, float]
    unknown_categories: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.lat)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    def normalize(self, lat, lon, clamp: bool = True) -> np.ndarray:
        lat_lo, lat_hi, lon_lo, lon_hi = self.bounds
        x = _scale(np.asarray(lat, dtype=np.float64), lat_lo, lat_hi)
        y = _scale(np.asarray(lon, dtype=np.float64), lon_lo, lon_hi)
        out = np.stack([x, y], axis=-1)
        return np.clip(out, -1.0, 1.0) if clamp else out

    def denormalize(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64)
        lat_lo, lat_hi, lon_lo, lon_hi = self.bounds
        return _unscale(xy[..., 0], lat_lo, lat_hi), _unscale(xy[..., 1], lon_lo, lon_hi)

    def fingerprint(self) -> dict:
        return {
            "n_pois": len(self),
            "n_categories": self.n_categories,
            "bounds": [float(b) for b in self.bounds],
        }


def _scale(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros_like(v)
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def _unscale(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.full_like(v, lo)
    return (v + 1.0) / 2.0 * (hi - lo) + lo


def build_poi_registry(
    log: CheckInLog,
    scheme: CategoryScheme,
    fit_rows: np.ndarray | None = None,
) -> PoiRegistry:
    """POI coordinates, [-1, 1] normalisation and high-level categories.

    Normalised ``x`` is latitude and ``y`` longitude.  Bounds are fitted on
    ``fit_rows`` (default: the 80% chronological training rows); POIs
    outside them are clamped.  A POI takes the coordinate and raw category
    of its first check-in.
    """
    if len(log) == 0:
        raise ValueError("cannot build a registry from an empty log")
    if fit_rows is None:
        fit_rows = train_mask(log)
    n = log.n_pois
    _, first = np.unique(log.poi, return_index=True)
    lat = np.zeros(n)
    lon = np.zeros(n)
    lat[log.poi[first]] = log.lat[first]
    lon[log.poi[first]] = log.lon[first]
    fit = log.poi[fit_rows] if np.any(fit_rows) else log.poi
    bounds = (float(lat[fit].min()), float(lat[fit].max()), float(lon[fit].min()), float(lon[fit].max()))
    category = np.full(n, scheme.other_id, dtype=np.int64)
    unknown: Counter = Counter()
    for row in first:
        raw = log.raw_category[row]
        cid = scheme.category_id(raw)
        if cid is None:
            unknown[raw] += 1
        else:
            category[log.poi[row]] = cid
    reg = PoiRegistry(lat, lon, np.zeros((n, 2)), category, scheme.names, bounds, unknown)
    reg.xy = reg.normalize(lat, lon)
    return reg


# ---------------------------------------------------------------- windows


@dataclass
class TrajectoryWindow:
    user_id: int
    poi_ids: np.ndarray
    category_ids: np.ndarray
    time_slots: np.ndarray
    coords: np.ndarray
    times: np.ndarray
    target_poi_id: int
    target_coord: np.ndarray
    target_time_slot: int
    target_time: int
    target_row: int


@dataclass
class Corpus:
    """A log with its registry and the per-row features the model consumes."""

    log: CheckInLog
    registry: PoiRegistry
    category: np.ndarray = field(init=False)
    slot: np.ndarray = field(init=False)
    xy: np.ndarray = field(init=False)

    def __post_init__(self):
        self.category = self.registry.category[self.log.poi]
        self.slot = np.asarray(time_slot(self.log.ts, self.log.tz), dtype=np.int64).reshape(-1)
        self.xy = self.registry.xy[self.log.poi]

    def window(self, target_row: int, n: int) -> TrajectoryWindow:
        hist = slice(target_row - n, target_row)
        log = self.log
        return TrajectoryWindow(
            user_id=int(log.user[target_row]),
            poi_ids=log.poi[hist].copy(),
            category_ids=self.category[hist].copy(),
            time_slots=self.slot[hist].copy(),
            coords=self.xy[hist].copy(),
            times=log.ts[hist].copy(),
            target_poi_id=int(log.poi[target_row]),
            target_coord=self.xy[target_row].copy(),
            target_time_slot=int(self.slot[target_row]),
            target_time=int(log.ts[target_row]),
            target_row=int(target_row),
        )


def window_targets(log: CheckInLog, n: int, users: Iterable[int] | None = None) -> np.ndarray:
    """Target rows of all stride-1 windows: every row at per-user index >= n."""
    if n < 1:
        raise ValueError("observation length must be >= 1")
    out = []
    for u in users if users is not None else range(log.n_users):
        s, e = int(log.user_start[u]), int(log.user_start[u + 1])
        out.append(np.arange(s + n, e, dtype=np.int64))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def window_sequences(corpus: Corpus, n: int, users: Iterable[int] | None = None) -> list[TrajectoryWindow]:
    return [corpus.window(int(r), n) for r in window_targets(corpus.log, n, users)]


@dataclass
class DatasetSplit:
    """Target rows of the train, validation and test windows."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    n: int

    def counts(self) -> dict:
        return {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}

    def windows(self, corpus: Corpus, part: str) -> list[TrajectoryWindow]:
        return [corpus.window(int(r), self.n) for r in getattr(self, part)]


def split(log: CheckInLog, train_frac: float = 0.8, val_frac_of_train: float = 0.1, n: int = 20) -> DatasetSplit:
    """Chronological per-user split, assigning each window by its target row.

    Histories may reach back across a boundary; only targets are labels.
    """
    parts: tuple[list, list, list] = ([], [], [])
    for u in range(log.n_users):
        s, e = int(log.user_start[u]), int(log.user_start[u + 1])
        val_start, test_start = split_bounds(e - s, train_frac, val_frac_of_train)
        bounds = (s, s + val_start, s + test_start, e)
        for k in range(3):
            lo = max(s + n, bounds[k])
            parts[k].append(np.arange(lo, max(lo, bounds[k + 1]), dtype=np.int64))
    cat = [np.concatenate(p) if p else np.zeros(0, np.int64) for p in parts]
    return DatasetSplit(cat[0], cat[1], cat[2], n)
