"""The six inter-city networks and the dynamic industry-graph sequence."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import CityPanel, PanelError, YearWindow

KINDS = ("dist", "poi", "s", "d", "ind", "emp")
SIMILARITY_KINDS = ("poi", "ind", "s", "d")
EARTH_RADIUS_KM = 6371.0088


@dataclass
class WeightedGraph:
    n: int
    weights: np.ndarray
    kind: str
    year: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        if self.weights.shape != (self.n, self.n):
            raise ValueError("weights must be n x n")

    def check(self):
        """Raise if the kind invariants do not hold."""
        w = self.weights
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError(f"{self.kind}: weights must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError(f"{self.kind}: diagonal must be zero")
        if self.kind in SIMILARITY_KINDS or self.kind == "emp":
            if not np.array_equal(w, w.T):
                raise ValueError(f"{self.kind}: must be symmetric")
            if (w > 1).any():
                raise ValueError(f"{self.kind}: entries must lie in [0, 1]")
        if self.kind == "emp" and not np.isin(w, (0.0, 1.0)).all():
            raise ValueError("emp: must be binary")
        if self.kind == "dist" and ((w > 1).any()):
            raise ValueError("dist: entries must lie in [0, 1]")


@dataclass
class GraphSet:
    static: dict[str, WeightedGraph]
    dynamic: list[WeightedGraph]
    substitutions: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return next(iter(self.static.values())).n


@dataclass
class GraphConfig:
    k_clusters: int = 8
    cluster_seed: int = 0
    distance_eps_km: float = 1.0


# ---------------------------------------------------------------------------
# helpers


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity clamped to [0, 1]; zero rows score 0 everywhere."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    unit = np.divide(v, norms[:, None], out=np.zeros_like(v), where=norms[:, None] > 0)
    sim = np.clip(unit @ unit.T, 0.0, 1.0)
    sim = np.maximum(sim, sim.T)  # exact symmetry under rounding
    np.fill_diagonal(sim, 0.0)
    return sim


def _resolve_year(panel: CityPanel, table: str, year: int, substitutions: dict | None) -> int:
    covered = {"registrations": panel.registration_years, "poi": panel.poi_years, "flows": panel.flow_years}[table]
    if year in covered:
        return year
    used = panel.nearest_year(table, year)
    if substitutions is not None:
        substitutions[f"{table}:{year}"] = used
    return used


# ---------------------------------------------------------------------------
# builders


def build_distance(panel: CityPanel, year: int, eps_km: float = 1.0) -> WeightedGraph:
    """Inverse great-circle distance, scaled so the largest off-diagonal entry is 1."""
    if np.isnan(panel.coords).any():
        missing = [panel.cities[i] for i in np.flatnonzero(np.isnan(panel.coords).any(axis=1))]
        raise PanelError(f"missing coordinates for {missing}")
    lat, lon = panel.coords[:, 0], panel.coords[:, 1]
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    dist = np.maximum(dist, dist.T)
    w = 1.0 / (dist + eps_km)
    np.fill_diagonal(w, 0.0)
    top = w.max() if panel.n > 1 else 0.0
    if top > 0:
        w = w / top
    return WeightedGraph(panel.n, w, "dist", year)


def build_flow_similarity(panel: CityPanel, year: int, direction: str = "source",
                          substitutions: dict | None = None) -> WeightedGraph:
    """Cosine similarity of outflow (``source``) or inflow (``destination``) vectors."""
    if direction not in ("source", "destination"):
        raise ValueError("direction must be 'source' or 'destination'")
    used = _resolve_year(panel, "flows", year, substitutions)
    f = np.array(panel.table_slice("flows", used))
    np.fill_diagonal(f, 0.0)  # intra-city movement is not an inter-city relation
    vectors = f if direction == "source" else f.T
    kind = "s" if direction == "source" else "d"
    return WeightedGraph(panel.n, cosine_matrix(vectors), kind, year)


def tfidf(counts: np.ndarray) -> np.ndarray:
    """Rows are documents, columns terms; smoothed idf ``ln((1+n)/(1+df)) + 1``."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.shape[0]
    totals = counts.sum(axis=1, keepdims=True)
    tf = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return tf * idf


def build_tfidf_similarity(panel: CityPanel, year: int, table: str = "poi",
                           substitutions: dict | None = None) -> WeightedGraph:
    if table == "poi":
        source, kind = "poi", "poi"
    elif table == "industry":
        source, kind = "registrations", "ind"
    else:
        raise ValueError("table must be 'poi' or 'industry'")
    used = _resolve_year(panel, source, year, substitutions)
    return WeightedGraph(panel.n, cosine_matrix(tfidf(panel.table_slice(source, used))), kind, year)


def standardize(x: np.ndarray) -> np.ndarray:
    """Column z-scores; constant columns become 0."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return np.divide(x - mu, sd, out=np.zeros_like(x), where=sd > 0)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 300):
    """Lloyd's algorithm from k-means++ seeds.

    Returns (labels, centers, inertia per iteration). Stops at the first
    iteration whose assignment equals the previous one.
    """
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        # duplicate points can exhaust the positive mass; fall back to an unused point
        idx = rng.choice(n, p=d2 / total) if total > 0 else int(np.flatnonzero(d2 == d2.max())[0])
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))

    labels = None
    history = []
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels, centers, history


def cluster_labels(panel: CityPanel, year: int, k_clusters: int, seed: int) -> np.ndarray:
    if not 2 <= k_clusters <= panel.n:
        raise ValueError(f"k_clusters must lie in [2, {panel.n}], got {k_clusters}")
    values, _ = panel.imputed_features(year)
    labels, _, _ = kmeans(standardize(values), k_clusters, seed)
    return labels


def build_cluster_graph(panel: CityPanel, year: int, k_clusters: int = 8, seed: int = 0) -> WeightedGraph:
    labels = cluster_labels(panel, year, k_clusters, seed)
    w = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(panel.n, w, "emp", year)


def build_graph_set(panel: CityPanel, window: YearWindow, config: GraphConfig | None = None) -> GraphSet:
    config = config or GraphConfig()
    t = window.t
    subs: dict[str, int] = {}
    static = {
        "dist": build_distance(panel, t, config.distance_eps_km),
        "poi": build_tfidf_similarity(panel, t, "poi", subs),
        "s": build_flow_similarity(panel, t, "source", subs),
        "d": build_flow_similarity(panel, t, "destination", subs),
        "ind": build_tfidf_similarity(panel, t, "industry", subs),
        "emp": build_cluster_graph(panel, t, config.k_clusters, config.cluster_seed),
    }
    dynamic = [build_tfidf_similarity(panel, y, "industry", subs) for y in window.years]
    return GraphSet(static, dynamic, subs)


# ---------------------------------------------------------------------------
# export


def write_edge_list(graph: WeightedGraph, path: Path) -> str:
    """Write nonzero off-diagonal entries as (src, dst, weight); returns sha256 of the file."""
    path = Path(path)
    src, dst = np.nonzero(graph.weights)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for i, j in zip(src, dst):
            w.writerow([int(i), int(j), repr(float(graph.weights[i, j]))])
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_edge_list(path: Path, n: int, kind: str, year: int) -> WeightedGraph:
    w = np.zeros((n, n))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            w[int(row["src"]), int(row["dst"])] = float(row["weight"])
    return WeightedGraph(n, w, kind, year)


def export_graph_set(gs: GraphSet, directory: Path, cities: list[str]) -> Path:
    """Edge lists for every graph plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for kind, g in gs.static.items():
        name = f"static_{kind}_{g.year}.csv"
        entries.append({"role": "static", "kind": kind, "year": g.year, "file": name,
                        "sha256": write_edge_list(g, directory / name)})
    for g in gs.dynamic:
        name = f"dynamic_{g.kind}_{g.year}.csv"
        entries.append({"role": "dynamic", "kind": g.kind, "year": g.year, "file": name,
                        "sha256": write_edge_list(g, directory / name)})
    manifest = {"n": gs.n, "cities": cities, "graphs": entries, "substitutions": gs.substitutions}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_graph_set(manifest_path: Path) -> tuple[GraphSet, list[str]]:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    static, dynamic = {}, []
    for e in m["graphs"]:
        g = read_edge_list(manifest_path.parent / e["file"], m["n"], e["kind"], e["year"])
        if e["role"] == "static":
            static[e["kind"]] = g
        else:
            dynamic.append(g)
    dynamic.sort(key=lambda g: g.year)
    return GraphSet({k: static[k] for k in KINDS}, dynamic, m.get("substitutions", {})), m["cities"]
