import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecogrow.datamodel import YearWindow
from ecogrow.graphs import (
    GraphConfig,
    build_cluster_graph,
    build_distance,
    build_flow_similarity,
    build_graph_set,
    build_tfidf_similarity,
    cosine_matrix,
    export_graph_set,
    kmeans,
    load_graph_set,
    tfidf,
)


def haversine_oracle(a, b, r=6371.0088):
    (la1, lo1), (la2, lo2) = a, b
    p1, p2 = math.radians(la1), math.radians(la2)
    dphi = p2 - p1
    dlmb = math.radians(lo2 - lo1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * r * math.asin(math.sqrt(h))


def cosine_oracle(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu == 0 or nv == 0:
        return 0.0
    return max(0.0, min(1.0, sum(x * y for x, y in zip(u, v)) / (nu * nv)))


def test_distance_matches_haversine_oracle(make_panel):
    coords = [(39.9, 116.4), (31.2, 121.5), (23.1, 113.3), (30.6, 104.1)]
    g = build_distance(make_panel(4, coords=coords), 2020)
    raw = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            if i != j:
                raw[i, j] = 1 / (haversine_oracle(coords[i], coords[j]) + 1.0)
    np.testing.assert_allclose(g.weights, raw / raw.max(), rtol=1e-12)
    g.check()


def test_colocated_cities_get_the_maximum_weight(make_panel):
    g = build_distance(make_panel(3, coords=[(10, 10), (10, 10), (40, 40)]), 2020)
    assert g.weights[0, 1] == 1.0


def test_distance_weight_is_monotone(make_panel):
    g = build_distance(make_panel(3, coords=[(0, 0), (0, 1), (0, 5)]), 2020)
    assert g.weights[1, 0] > g.weights[1, 2]


def test_flow_similarity_scale_invariance_and_orthogonality(make_panel):
    flows = np.zeros((4, 4))
    flows[0] = [0, 1, 2, 0]
    flows[1] = [5, 0, 0, 3]
    flows[2] = [0, 3, 0, 0]  # orthogonal to row 1
    flows[3] = [0, 2, 4, 0]  # proportional to row 0
    g = build_flow_similarity(make_panel(4, flows=flows[:, :, None]), 2020, "source")
    assert g.weights[0, 3] == pytest.approx(1.0)
    assert g.weights[1, 2] == 0.0


def test_flow_similarity_drops_self_flows(make_panel):
    flows = np.array([[9.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    g = build_flow_similarity(make_panel(3, flows=flows[:, :, None]), 2020, "source")
    expected = cosine_oracle([0, 1, 0], [0, 1, 0])
    assert g.weights[0, 2] == pytest.approx(expected)


def test_flow_similarity_matches_cosine_oracle(make_panel, rng):
    flows = rng.poisson(3.0, size=(5, 5)).astype(float)
    panel = make_panel(5, flows=flows[:, :, None])
    f = flows.copy()
    np.fill_diagonal(f, 0)
    for direction, vecs in (("source", f), ("destination", f.T)):
        g = build_flow_similarity(panel, 2020, direction)
        for i in range(5):
            for j in range(5):
                want = 0.0 if i == j else cosine_oracle(vecs[i], vecs[j])
                assert g.weights[i, j] == pytest.approx(want, abs=1e-12)


def tfidf_cosine_oracle(counts):
    n, m = len(counts), len(counts[0])
    df = [sum(1 for r in counts if r[k] > 0) for k in range(m)]
    idf = [math.log((1 + n) / (1 + df[k])) + 1 for k in range(m)]
    vecs = []
    for r in counts:
        tot = sum(r)
        vecs.append([(r[k] / tot if tot else 0.0) * idf[k] for k in range(m)])
    return [[0.0 if i == j else cosine_oracle(vecs[i], vecs[j]) for j in range(n)] for i in range(n)]


def test_tfidf_similarity_matches_hand_oracle(make_panel):
    counts = [[3, 0, 1], [1, 1, 0], [0, 2, 2], [0, 0, 0]]
    poi = np.array(counts, float)[:, :, None]
    g = build_tfidf_similarity(make_panel(4, poi=poi), 2020, "poi")
    np.testing.assert_allclose(g.weights, tfidf_cosine_oracle(counts), atol=1e-12)
    assert not g.weights[3].any()  # empty city stays isolated


def test_tfidf_similarity_agrees_with_sklearn(rng):
    from sklearn.feature_extraction.text import TfidfTransformer
    from sklearn.metrics.pairwise import cosine_similarity

    counts = rng.poisson(2.0, size=(8, 6)).astype(float)
    counts[:, 5] = 0
    ref = cosine_similarity(TfidfTransformer(norm=None, smooth_idf=True).fit_transform(counts).toarray())
    np.fill_diagonal(ref, 0)
    np.testing.assert_allclose(cosine_matrix(tfidf(counts)), np.clip(ref, 0, 1), atol=1e-12)


def test_identical_category_mix_gives_similarity_one(make_panel):
    poi = np.array([[2, 4, 6], [1, 2, 3], [5, 0, 1]], float)[:, :, None]
    assert build_tfidf_similarity(make_panel(3, poi=poi), 2020).weights[0, 1] == pytest.approx(1.0)


@settings(max_examples=50)
@given(arrays(np.float64, (5, 4), elements=st.integers(0, 20).map(float)),
       arrays(np.float64, (5,), elements=st.floats(0.1, 100)))
def test_cosine_graphs_ignore_per_city_scaling(counts, scale):
    a = cosine_matrix(tfidf(counts))
    b = cosine_matrix(tfidf(counts * scale[:, None]))
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.array_equal(a, a.T) and (a >= 0).all() and (a <= 1).all()
    assert not np.diag(a).any()


def test_kmeans_recovers_two_planted_blobs(rng):
    x = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    labels, _, _ = kmeans(x, 2, seed=0)
    assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1
    assert labels[0] != labels[10]


def test_cluster_graph_planted_blobs_and_singletons(make_panel, rng):
    feats = np.vstack([rng.normal(0, 0.05, (4, 4)), rng.normal(3, 0.05, (4, 4))])[:, None, :]
    g = build_cluster_graph(make_panel(8, features=feats), 2020, k_clusters=2)
    block = np.zeros((8, 8))
    block[:4, :4] = block[4:, 4:] = 1
    np.fill_diagonal(block, 0)
    np.testing.assert_array_equal(g.weights, block)
    singles = build_cluster_graph(make_panel(8, features=feats), 2020, k_clusters=8)
    assert not singles.weights.any()


def test_kmeans_inertia_never_increases(rng):
    _, _, hist = kmeans(rng.normal(size=(40, 3)), 5, seed=3)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_is_seed_deterministic(rng):
    x = rng.normal(size=(30, 2))
    a, b = kmeans(x, 4, seed=9), kmeans(x, 4, seed=9)
    np.testing.assert_array_equal(a[0], b[0])


def test_cluster_count_is_validated(make_panel):
    with pytest.raises(ValueError):
        build_cluster_graph(make_panel(3), 2020, k_clusters=4)


def test_graph_set_shapes_and_invariants(six_city_panel):
    t = six_city_panel.years[-1]
    gs = build_graph_set(six_city_panel, YearWindow(t, 3), GraphConfig(k_clusters=2))
    assert list(gs.static) == ["dist", "poi", "s", "d", "ind", "emp"]
    assert [g.year for g in gs.dynamic] == [t - 2, t - 1, t]
    for g in list(gs.static.values()) + gs.dynamic:
        assert g.n == 6
        g.check()


def test_history_window_lengths(small_panel):
    t = small_panel.years[-1]
    one = build_graph_set(small_panel, YearWindow(t, 1), GraphConfig(k_clusters=3))
    assert len(one.dynamic) == 1
    np.testing.assert_array_equal(one.dynamic[0].weights, one.static["ind"].weights)


def test_default_window_is_fifteen_years():
    from ecogrow.synth import SyntheticSpec, generate

    panel = generate(SyntheticSpec(n=10, clusters=2, seed=1))
    gs = build_graph_set(panel, YearWindow(panel.years[-1]))
    assert len(gs.dynamic) == 15


def test_missing_table_years_fall_back_and_are_recorded(six_city_panel):
    early = six_city_panel.years[0]
    gs = build_graph_set(six_city_panel, YearWindow(early, 1), GraphConfig(k_clusters=2))
    assert gs.substitutions["poi:%d" % early] == six_city_panel.poi_years[0]
    assert gs.substitutions["flows:%d" % early] == six_city_panel.flow_years[0]


def test_relabelling_cities_permutes_graphs(make_panel, rng):
    n = 6
    coords = np.column_stack([rng.uniform(20, 40, n), rng.uniform(100, 120, n)])
    flows = rng.poisson(4.0, size=(n, n, 1)).astype(float)
    poi = rng.poisson(4.0, size=(n, 3, 1)).astype(float)
    regs = rng.poisson(4.0, size=(n, 4, 1)).astype(float)
    perm = rng.permutation(n)
    a = make_panel(n, coords=coords, flows=flows, poi=poi, regs=regs)
    b = make_panel(n, coords=coords[perm], flows=flows[perm][:, perm], poi=poi[perm], regs=regs[perm])
    for build in (lambda p: build_distance(p, 2020), lambda p: build_flow_similarity(p, 2020, "destination"),
                  lambda p: build_tfidf_similarity(p, 2020, "industry")):
        np.testing.assert_allclose(build(b).weights, build(a).weights[perm][:, perm], atol=1e-12)


def test_export_is_deterministic_and_reloads(tmp_path, six_city_panel):
    t = six_city_panel.years[-1]
    gs = build_graph_set(six_city_panel, YearWindow(t, 2), GraphConfig(k_clusters=2))
    m1 = export_graph_set(gs, tmp_path / "a", six_city_panel.cities)
    m2 = export_graph_set(build_graph_set(six_city_panel, YearWindow(t, 2), GraphConfig(k_clusters=2)),
                          tmp_path / "b", six_city_panel.cities)
    assert m1.read_bytes() == m2.read_bytes()
    back, cities = load_graph_set(m1)
    assert cities == six_city_panel.cities
    for kind, g in gs.static.items():
        np.testing.assert_array_equal(back.static[kind].weights, g.weights)
    assert len(json.loads(m1.read_text())["graphs"]) == 8
