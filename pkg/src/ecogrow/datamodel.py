"""Multi-year city panel: ingestion from CSV, validation, imputation, growth labels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

CORE_FEATURES = ("gdp", "population", "employment", "new_companies")
TABLES = ("features", "registrations", "poi", "flows", "coords")
DEFAULT_FILES = {t: f"{t}.csv" for t in TABLES}

INDICATOR_COLUMNS = {"companies": "new_companies", "employment": "employment"}


class PanelError(ValueError):
    """Invalid input data; carries the file/line/column when known."""

    def __init__(self, message: str, path=None, line: int | None = None, column: str | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path, self.line, self.column = path, line, column


@dataclass(frozen=True)
class CityId:
    index: int
    name: str


@dataclass(frozen=True)
class YearWindow:
    t: int
    history_len: int = 15

    @property
    def years(self) -> list[int]:
        return list(range(self.t - self.history_len + 1, self.t + 1))


@dataclass(eq=False)
class CityPanel:
    """Dense arrays indexed by (city, ..., year position).

    ``features`` holds NaN for gaps. The relational tables are zero where no
    row was given; ``*_years`` list the years each table actually covers.
    """

    cities: list[str]
    years: list[int]
    feature_names: list[str]
    features: np.ndarray  # (n, n_years, n_features)
    industries: list[str]
    registrations: np.ndarray  # (n, n_industries, n_years)
    categories: list[str]
    poi: np.ndarray  # (n, n_categories, n_years)
    flows: np.ndarray  # (n, n, n_years) origin x destination
    coords: np.ndarray  # (n, 2) lat, lon; NaN when missing
    registration_years: list[int] = field(default_factory=list)
    poi_years: list[int] = field(default_factory=list)
    flow_years: list[int] = field(default_factory=list)

    def __post_init__(self):
        for arr in ("features", "registrations", "poi", "flows", "coords"):
            a = getattr(self, arr)
            a.setflags(write=False)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.cities)

    def city(self, ref: int | str) -> CityId:
        if isinstance(ref, str):
            return CityId(self.cities.index(ref), ref)
        return CityId(int(ref), self.cities[ref])

    def year_pos(self, year: int) -> int:
        try:
            return self.years.index(year)
        except ValueError:
            raise KeyError(f"year {year} not in panel") from None

    def validate(self):
        n, ny = self.n, len(self.years)
        if len(set(self.cities)) != n:
            raise PanelError("duplicate city names")
        if self.features.shape != (n, ny, len(self.feature_names)):
            raise PanelError("features array has the wrong shape")
        for name, arr in (("registrations", self.registrations), ("poi", self.poi), ("flows", self.flows)):
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise PanelError(f"{name} must be finite and nonnegative")
        lat, lon = self.coords[:, 0], self.coords[:, 1]
        ok = np.isnan(lat) | ((lat >= -90) & (lat <= 90))
        ok &= np.isnan(lon) | ((lon >= -180) & (lon <= 180))
        if not ok.all():
            raise PanelError("coordinates out of range")

    def feature(self, name: str, year: int) -> np.ndarray:
        return self.features[:, self.year_pos(year), self.feature_names.index(name)]

    def gaps(self) -> set[tuple[str, int, str]]:
        """(city, year, feature) triples with no observed value."""
        idx = np.argwhere(np.isnan(self.features))
        return {(self.cities[c], self.years[y], self.feature_names[f]) for c, y, f in idx}

    def imputed_features(self, year: int) -> tuple[np.ndarray, np.ndarray]:
        """Feature matrix for ``year`` with gaps filled by the within-year median.

        Returns (values, mask) where mask is True at imputed cells. A feature with
        no observation in that year is filled with 0.
        """
        x = self.features[:, self.year_pos(year), :].copy()
        mask = np.isnan(x)
        for j in range(x.shape[1]):
            col = x[:, j]
            if mask[:, j].any():
                observed = col[~mask[:, j]]
                col[mask[:, j]] = np.median(observed) if observed.size else 0.0
        return x, mask

    def nearest_year(self, table: str, year: int) -> int:
        covered = {"registrations": self.registration_years, "poi": self.poi_years, "flows": self.flow_years}[table]
        if not covered:
            raise PanelError(f"{table} table has no data")
        # ties go to the earlier year
        return min(covered, key=lambda y: (abs(y - year), y))

    def table_slice(self, table: str, year: int) -> np.ndarray:
        arr = {"registrations": self.registrations, "poi": self.poi, "flows": self.flows}[table]
        return arr[..., self.year_pos(year)]

    def __eq__(self, other):
        if not isinstance(other, CityPanel):
            return NotImplemented
        lists = ("cities", "years", "feature_names", "industries", "categories",
                 "registration_years", "poi_years", "flow_years")
        arrays = ("features", "registrations", "poi", "flows", "coords")
        return all(getattr(self, a) == getattr(other, a) for a in lists) and all(
            np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True) for a in arrays
        )


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path: Path, required: tuple[str, ...]):
    if not path.exists():
        raise PanelError("file not found", path=path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise PanelError(f"missing columns {missing}", path=path, line=1)
        for row in reader:
            yield reader.line_num, header, row


def _number(raw: str, path, line, col, allow_empty=False) -> float:
    raw = (raw or "").strip()
    if raw == "":
        if allow_empty:
            return math.nan
        raise PanelError("empty value", path, line, col)
    try:
        v = float(raw)
    except ValueError:
        raise PanelError(f"not a number: {raw!r}", path, line, col) from None
    if not math.isfinite(v):
        raise PanelError(f"non-finite value {raw!r}", path, line, col)
    return v


def _year(raw: str, path, line) -> int:
    try:
        return int(raw.strip())
    except (ValueError, AttributeError):
        raise PanelError(f"bad year {raw!r}", path, line, "year") from None


def _count(raw, path, line, col) -> float:
    v = _number(raw, path, line, col)
    if v < 0:
        raise PanelError(f"negative value {v}", path, line, col)
    return v


def load_panel(paths: Mapping[str, str | Path] | str | Path, schema: Mapping[str, str] | None = None) -> CityPanel:
    """Load the five CSV tables into a validated :class:`CityPanel`.

    ``paths`` is a directory holding all of ``features.csv``,
    ``registrations.csv``, ``poi.csv``, ``flows.csv`` and ``coords.csv``, or a
    mapping from table name to file in which only ``features`` is mandatory.
    ``schema`` renames canonical columns to the file's headers.

    Cities named in any table are unioned into one sorted index. A flow
    endpoint that appears in no other table is rejected as an unknown city.
    """
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        paths = {t: root / f for t, f in DEFAULT_FILES.items()}
    paths = {t: Path(p) for t, p in paths.items()}
    unknown = set(paths) - set(TABLES)
    if unknown:
        raise PanelError(f"unknown tables {sorted(unknown)}")
    if "features" not in paths:
        raise PanelError("a features table is required")
    col = dict(schema or {})

    def c(name):
        return col.get(name, name)

    # features
    feat_rows: dict[tuple[str, int], dict[str, float]] = {}
    extra: list[str] | None = None
    p = paths["features"]
    for line, header, row in _read_rows(p, (c("city"), c("year"))):
        if extra is None:
            canon = {c(k) for k in ("city", "year", *CORE_FEATURES)}
            extra = [h for h in header if h not in canon]
        key = (row[c("city")].strip(), _year(row[c("year")], p, line))
        if not key[0]:
            raise PanelError("empty city", p, line, c("city"))
        if key in feat_rows:
            raise PanelError(f"duplicate feature row for city {key[0]!r}, year {key[1]}", p, line)
        values = {}
        for name in CORE_FEATURES:
            values[name] = _number(row.get(c(name), ""), p, line, c(name), allow_empty=True)
        for h in extra:
            values[h] = _number(row.get(h, ""), p, line, h, allow_empty=True)
        feat_rows[key] = values
    feature_names = list(CORE_FEATURES) + (extra or [])

    def relational(table, keys, value_col):
        out = []
        if table not in paths:
            return out
        p = paths[table]
        for line, _, row in _read_rows(p, tuple(c(k) for k in keys) + (c(value_col),)):
            rec = [row[c(k)].strip() for k in keys]
            if "year" in keys:
                rec[keys.index("year")] = _year(row[c("year")], p, line)
            out.append((line, rec, _count(row[c(value_col)], p, line, c(value_col))))
        return out

    regs = relational("registrations", ("city", "industry", "year"), "count")
    pois = relational("poi", ("city", "category", "year"), "count")
    flows = relational("flows", ("origin", "destination", "year"), "flow")

    coords_rows = {}
    p = paths.get("coords")
    for line, _, row in _read_rows(p, (c("city"), c("lat"), c("lon"))) if p else ():
        name = row[c("city")].strip()
        if name in coords_rows:
            raise PanelError(f"duplicate coordinates for {name!r}", p, line)
        lat = _number(row[c("lat")], p, line, c("lat"))
        lon = _number(row[c("lon")], p, line, c("lon"))
        if not -90 <= lat <= 90:
            raise PanelError(f"latitude {lat} out of range", p, line, c("lat"))
        if not -180 <= lon <= 180:
            raise PanelError(f"longitude {lon} out of range", p, line, c("lon"))
        coords_rows[name] = (lat, lon)

    names = {k[0] for k in feat_rows}
    names |= {r[0] for _, r, _ in regs} | {r[0] for _, r, _ in pois}
    names |= set(coords_rows)
    for line, (o, d, _), _ in flows:
        for endpoint in (o, d):
            if endpoint not in names:
                raise PanelError(f"unknown city {endpoint!r}", paths["flows"], line)
    cities = sorted(names)
    years = sorted({k[1] for k in feat_rows} | {r[2] for _, r, _ in regs + pois + flows})
    ci = {name: i for i, name in enumerate(cities)}
    yi = {y: i for i, y in enumerate(years)}
    n, ny = len(cities), len(years)

    features = np.full((n, ny, len(feature_names)), np.nan)
    for (city, year), values in feat_rows.items():
        for j, name in enumerate(feature_names):
            features[ci[city], yi[year], j] = values[name]

    def fill(table, records, labels_pos):
        labels = sorted({r[labels_pos] for _, r, _ in records})
        li = {lab: i for i, lab in enumerate(labels)}
        arr = np.zeros((n, len(labels), ny))
        seen = set()
        for line, r, v in records:
            key = (r[0], r[1], r[2])
            if key in seen:
                raise PanelError(f"duplicate row {key}", paths[table], line)
            seen.add(key)
            arr[ci[r[0]], li[r[1]], yi[r[2]]] = v
        return labels, arr, sorted({r[2] for _, r, _ in records})

    industries, registrations, reg_years = fill("registrations", regs, 1)
    categories, poi, poi_years = fill("poi", pois, 1)

    flow_arr = np.zeros((n, n, ny))
    seen = set()
    for line, (o, d, y), v in flows:
        if (o, d, y) in seen:
            raise PanelError(f"duplicate flow row {(o, d, y)}", paths["flows"], line)
        seen.add((o, d, y))
        flow_arr[ci[o], ci[d], yi[y]] = v

    coords = np.full((n, 2), np.nan)
    for name, ll in coords_rows.items():
        coords[ci[name]] = ll

    return CityPanel(
        cities=cities, years=years, feature_names=feature_names, features=features,
        industries=industries, registrations=registrations, categories=categories, poi=poi,
        flows=flow_arr, coords=coords, registration_years=reg_years, poi_years=poi_years,
        flow_years=sorted({y for _, (_, _, y), _ in flows}),
    )


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    return repr(float(v))


def save_panel(panel: CityPanel, directory: str | Path) -> dict[str, Path]:
    """Write the panel as the five canonical CSV files; returns their paths.

    Relational tables are written densely for every covered year so that
    coverage survives a reload.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    out = {t: root / f for t, f in DEFAULT_FILES.items()}

    with open(out["features"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["city", "year", *panel.feature_names])
        for i, city in enumerate(panel.cities):
            for yp, year in enumerate(panel.years):
                row = panel.features[i, yp]
                w.writerow([city, year, *(_fmt(v) for v in row)])

    def write_table(path, head, labels, arr, covered):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for year in covered:
                yp = panel.year_pos(year)
                for i, city in enumerate(panel.cities):
                    for j, lab in enumerate(labels):
                        w.writerow([city, lab, year, _fmt(arr[i, j, yp])])

    write_table(out["registrations"], ["city", "industry", "year", "count"], panel.industries,
                panel.registrations, panel.registration_years)
    write_table(out["poi"], ["city", "category", "year", "count"], panel.categories, panel.poi, panel.poi_years)

    with open(out["flows"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "destination", "year", "flow"])
        for year in panel.flow_years:
            yp = panel.year_pos(year)
            for i, o in enumerate(panel.cities):
                for j, d in enumerate(panel.cities):
                    if i != j or panel.flows[i, j, yp] != 0:
                        w.writerow([o, d, year, _fmt(panel.flows[i, j, yp])])

    with open(out["coords"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["city", "lat", "lon"])
        for i, city in enumerate(panel.cities):
            if not np.isnan(panel.coords[i]).any():
                w.writerow([city, _fmt(panel.coords[i, 0]), _fmt(panel.coords[i, 1])])
    return out


# ---------------------------------------------------------------------------
# labels


def growth_rate(prev: float, cur: float) -> float:
    if math.isnan(prev) or math.isnan(cur):
        raise PanelError("indicator missing for one of the two years")
    if prev == 0:
        raise ZeroDivisionError("growth undefined: previous value is zero")
    return (cur - prev) / prev


def growth_label(panel: CityPanel, city: CityId | int | str, year: int, indicator: str = "companies") -> int:
    """1 if the indicator grew strictly from ``year - 1`` to ``year``, else 0."""
    if indicator not in INDICATOR_COLUMNS:
        raise ValueError(f"unknown indicator {indicator!r}")
    if not isinstance(city, CityId):
        city = panel.city(city)
    if year - 1 not in panel.years:
        raise PanelError(f"no data for prior year {year - 1}")
    name = INDICATOR_COLUMNS[indicator]
    prev = panel.feature(name, year - 1)[city.index]
    cur = panel.feature(name, year)[city.index]
    return int(growth_rate(prev, cur) > 0)


def growth_labels(panel: CityPanel, year: int, indicator: str) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`growth_label` over all cities: (labels, labelable mask)."""
    name = INDICATOR_COLUMNS[indicator]
    prev = panel.feature(name, year - 1)
    cur = panel.feature(name, year)
    ok = np.isfinite(prev) & np.isfinite(cur) & (prev != 0)
    labels = np.zeros(panel.n)
    labels[ok] = ((cur[ok] - prev[ok]) / prev[ok] > 0).astype(float)
    return labels, ok
