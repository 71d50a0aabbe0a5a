"""Seeded synthetic city panels with planted group structure.

Cities belong to latent groups. A group shares an industry mix, a POI mix,
a geographic centre and mutual migration affinity, and its cities' new-company
counts follow a common persistent random growth path. Leader cities move with
the path; follower cities trail it by one year, so a follower's next change
is already visible in its group's latest year but not in its own history.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import CORE_FEATURES, CityPanel, save_panel
from .graphs import haversine_km


@dataclass
class SyntheticSpec:
    n: int = 50
    start_year: int = 2005
    n_years: int = 16
    clusters: int = 6
    signal: float = 1.0
    seed: int = 0
    n_industries: int = 12
    n_categories: int = 10
    persistence: float = 0.6  # autocorrelation of a group's yearly growth
    follower_share: float = 0.7
    offset: float = 0.1  # spread of persistent city-level offsets
    recent_years: int = 3  # POI and migration tables only cover the last few years
    noise: float = 0.03  # idiosyncratic yearly noise on new companies, relative to city size

    @property
    def years(self) -> list[int]:
        return list(range(self.start_year, self.start_year + self.n_years))


def generate(spec: SyntheticSpec) -> CityPanel:
    rng = np.random.default_rng(spec.seed)
    n, ny, c = spec.n, spec.n_years, spec.clusters
    group = rng.permutation(np.arange(n) % c)
    t = np.arange(ny)

    size = np.exp(0.2 * rng.standard_normal(n))
    # each group follows a persistent random growth path; followers trail it by a year
    inc = np.zeros((c, ny + 1))
    shocks = spec.signal * 0.15 * rng.standard_normal((c, ny + 1))
    for k in range(1, ny + 1):
        inc[:, k] = spec.persistence * inc[:, k - 1] + shocks[:, k]
    path = np.cumsum(inc, axis=1)
    path -= path.mean(axis=1, keepdims=True)
    lag = (rng.random(n) < spec.follower_share).astype(int)
    level = path[group[:, None], 1 + t[None, :] - lag[:, None]]

    # persistent city-level offsets on top of the group path
    offset = spec.offset * rng.standard_normal(n)
    companies = 1000 * size[:, None] * np.maximum(1 + offset[:, None] + level, 0.2)
    companies = companies + 1000 * spec.noise * size[:, None] * rng.standard_normal((n, ny))
    companies = np.maximum(np.round(companies), 1.0)
    gdp = 5000 * size[:, None] * 1.05 ** t[None, :] * (1 + 0.03 * rng.standard_normal((n, ny)))
    population = 300 * size[:, None] ** 0.8 * (1 + 0.02 * rng.standard_normal((n, ny)))
    employment = 150 * size[:, None] * (1 + 0.02 * t[None, :]) + 0.1 * companies
    employment = employment * (1 + 0.02 * rng.standard_normal((n, ny)))
    # column order follows CORE_FEATURES
    features = np.stack([gdp, population, employment, companies], axis=2)

    ind_profile = rng.dirichlet(0.5 * np.ones(spec.n_industries), size=c)
    ind_mix = 0.7 * ind_profile[group] + 0.3 * rng.dirichlet(np.ones(spec.n_industries), size=n)
    registrations = rng.poisson(companies[:, None, :] * ind_mix[:, :, None]).astype(np.float64)

    recent = np.zeros(ny, dtype=bool)
    recent[-spec.recent_years:] = True

    poi_profile = rng.dirichlet(np.ones(spec.n_categories), size=c)
    poi_mix = 0.4 * poi_profile[group] + 0.6 * rng.dirichlet(np.ones(spec.n_categories), size=n)
    poi = rng.poisson(500 * size[:, None, None] * poi_mix[:, :, None] * np.ones(ny)).astype(np.float64)
    poi[:, :, ~recent] = 0.0

    centres = np.column_stack([rng.uniform(22, 42, c), rng.uniform(100, 122, c)])
    coords = centres[group] + 2.5 * rng.standard_normal((n, 2))
    coords[:, 0] = np.clip(coords[:, 0], -90, 90)
    dist = haversine_km(coords[:, None, 0], coords[:, None, 1], coords[None, :, 0], coords[None, :, 1])
    affinity = np.where(group[:, None] == group[None, :], 3.0, 1.0)
    rate = 40 * np.outer(size, size) * np.exp(-dist / 800) * affinity
    np.fill_diagonal(rate, 0.0)
    flows = rng.poisson(rate[:, :, None] * np.ones(ny)).astype(np.float64)
    flows[:, :, ~recent] = 0.0

    years = spec.years
    width = len(str(n - 1))
    return CityPanel(
        cities=[f"city_{i:0{width}d}" for i in range(n)],
        years=years,
        feature_names=list(CORE_FEATURES),
        features=features,
        industries=[f"ind_{k:02d}" for k in range(spec.n_industries)],
        registrations=registrations,
        categories=[f"poi_{k:02d}" for k in range(spec.n_categories)],
        poi=poi,
        flows=flows,
        coords=coords,
        registration_years=years,
        poi_years=[y for y, r in zip(years, recent) if r],
        flow_years=[y for y, r in zip(years, recent) if r],
    )


def write_synthetic(spec: SyntheticSpec, directory: str | Path) -> dict[str, Path]:
    return save_panel(generate(spec), directory)
