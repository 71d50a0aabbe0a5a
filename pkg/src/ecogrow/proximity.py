"""Inter-city industrial proximity: RCA, co-advantage proximity and the supervision graph."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import CityPanel, PanelError


@dataclass
class RcaMatrix:
    values: np.ndarray
    binary: np.ndarray


@dataclass(frozen=True)
class ThresholdRule:
    """``percentile`` of strictly positive off-diagonal proximities, or a ``fixed`` value."""

    kind: str = "percentile"
    value: float = 95.0

    def resolve(self, phi: np.ndarray) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind != "percentile":
            raise ValueError(f"unknown threshold rule {self.kind!r}")
        iu = np.triu_indices(phi.shape[0], k=1)
        positive = phi[iu][phi[iu] > 0]
        if positive.size == 0:
            return np.inf
        return float(np.percentile(positive, self.value))


@dataclass
class ProximityTarget:
    phi: np.ndarray
    edges: np.ndarray
    threshold: float
    mst: np.ndarray  # boolean n x n, symmetric

    def edge_pairs(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.edges, k=1))
        return list(zip(i.tolist(), j.tolist()))


def rca_from_counts(counts: np.ndarray) -> RcaMatrix:
    """RCA of a (city x industry) count matrix; undefined cells are 0.

    Computed as ``E * total / (city_total * industry_total)`` and binarised by
    the equivalent product comparison, so integral counts give exact results.
    """
    e = np.asarray(counts, dtype=np.float64)
    if (e < 0).any() or not np.isfinite(e).all():
        raise ValueError("counts must be finite and nonnegative")
    total = e.sum()
    row = e.sum(axis=1, keepdims=True)
    col = e.sum(axis=0, keepdims=True)
    num = e * total
    den = row * col
    values = np.divide(num, den, out=np.zeros_like(e), where=den > 0)
    binary = ((den > 0) & (num >= den)).astype(np.int8)
    return RcaMatrix(values, binary)


def compute_rca(panel: CityPanel, window: tuple[int, int]) -> RcaMatrix:
    """Registrations summed over ``[t_start, t_end]`` then converted to RCA."""
    t_start, t_end = window
    years = [y for y in panel.registration_years if t_start <= y <= t_end]
    if not years:
        raise PanelError(f"no registrations in window [{t_start}, {t_end}]")
    counts = sum(panel.table_slice("registrations", y) for y in years)
    return rca_from_counts(counts)


def compute_proximity(rca: RcaMatrix | np.ndarray) -> np.ndarray:
    """min(P(j|i), P(i|j)) from shared advantages; zero-advantage cities score 0."""
    b = np.asarray(rca.binary if isinstance(rca, RcaMatrix) else rca, dtype=np.float64)
    co = b @ b.T
    deg = b.sum(axis=1)
    p_j_given_i = np.divide(co, deg[:, None], out=np.zeros_like(co), where=deg[:, None] > 0)
    phi = np.minimum(p_j_given_i, p_j_given_i.T)
    np.fill_diagonal(phi, 0.0)
    return phi


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def maximum_spanning_forest(phi: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal on strictly positive weights, descending; ties by (i, j) with i < j."""
    n = phi.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    w = phi[iu, ju]
    keep = w > 0
    iu, ju, w = iu[keep], ju[keep], w[keep]
    order = np.lexsort((ju, iu, -w))
    uf = UnionFind(n)
    tree = []
    for k in order:
        i, j = int(iu[k]), int(ju[k])
        if uf.union(i, j):
            tree.append((i, j))
            if len(tree) == n - 1:
                break
    return tree


def build_target(phi: np.ndarray, threshold_rule: ThresholdRule | float | None = None) -> ProximityTarget:
    phi = np.asarray(phi, dtype=np.float64)
    if not np.array_equal(phi, phi.T):
        raise ValueError("phi must be symmetric")
    if threshold_rule is None:
        threshold_rule = ThresholdRule()
    elif not isinstance(threshold_rule, ThresholdRule):
        threshold_rule = ThresholdRule("fixed", float(threshold_rule))
    thr = threshold_rule.resolve(phi)
    n = phi.shape[0]
    mst = np.zeros((n, n), dtype=bool)
    for i, j in maximum_spanning_forest(phi):
        mst[i, j] = mst[j, i] = True
    edges = mst | ((phi >= thr) & (phi > 0))
    np.fill_diagonal(edges, False)
    return ProximityTarget(phi, edges.astype(np.int8), thr, mst)


def proximity_target(panel: CityPanel, window: tuple[int, int],
                     threshold_rule: ThresholdRule | None = None) -> ProximityTarget:
    return build_target(compute_proximity(compute_rca(panel, window)), threshold_rule)


def export_target(target: ProximityTarget, directory: Path, cities: list[str], window: tuple[int, int],
                  rule: ThresholdRule) -> tuple[Path, Path]:
    """Edge list CSV plus a JSON sidecar with the window, rule and resolved threshold."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edges_path = directory / "edges.csv"
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "phi", "mst"])
        for i, j in target.edge_pairs():
            w.writerow([i, j, repr(float(target.phi[i, j])), int(target.mst[i, j])])
    meta = {
        "window": list(window),
        "threshold_rule": asdict(rule),
        "threshold": target.threshold if np.isfinite(target.threshold) else None,
        "n": int(target.phi.shape[0]),
        "n_edges": len(target.edge_pairs()),
        "n_mst_edges": int(np.triu(target.mst, 1).sum()),
        "cities": cities,
    }
    meta_path = directory / "proximity.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return edges_path, meta_path


def load_target_edges(directory: Path) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "proximity.json").read_text(encoding="utf-8"))
    n = meta["n"]
    edges = np.zeros((n, n), dtype=np.int8)
    with open(directory / "edges.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i, j = int(row["src"]), int(row["dst"])
            edges[i, j] = edges[j, i] = 1
    return edges, meta
