import json
import math

import numpy as np
import pytest

from ecogrow import diffcore as dc
from ecogrow.graphs import GraphConfig
from ecogrow.model import Ablation, EcoGrowModel, ModelConfig
from ecogrow.pipeline import prepare, train_on
from ecogrow.synth import SyntheticSpec, generate
from ecogrow.training import (
    Adam,
    Supervision,
    TrainConfig,
    build_supervision,
    fit,
    joint_loss,
    training_step,
)


@pytest.fixture(scope="module")
def planted():
    panel = generate(SyntheticSpec(n=20, n_years=6, clusters=3, seed=4))
    return prepare(panel, panel.years[-1], 3, GraphConfig(k_clusters=3))


def small_model(prep, **kw):
    return EcoGrowModel(ModelConfig(n_features=prep.inputs.features.shape[1], d=kw.pop("d", 6), **kw))


def test_negative_count_and_disjointness(planted):
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges, seed=3)
    pos = {tuple(p) for p in sup.positives.tolist()}
    for epoch in range(5):
        neg = sup.negatives(epoch)
        assert len(neg) == len(sup.positives)
        assert all(i < j for i, j in neg.tolist())
        assert not pos & {tuple(p) for p in neg.tolist()}
    half = Supervision(sup.labels, sup.label_mask, sup.positives, 0.5, 3, sup.n)
    assert len(half.negatives(0)) == round(0.5 * len(sup.positives))


def test_negatives_are_seeded_per_epoch(planted):
    a = build_supervision(planted.panel, planted.window.t, planted.target.edges, seed=3)
    b = build_supervision(planted.panel, planted.window.t, planted.target.edges, seed=3)
    np.testing.assert_array_equal(a.negatives(7), b.negatives(7))
    assert not np.array_equal(a.negatives(0), a.negatives(1))


def test_labels_follow_growth_into_reference_year(planted):
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges)
    t = planted.window.t
    cur = planted.panel.feature("new_companies", t)
    prev = planted.panel.feature("new_companies", t - 1)
    np.testing.assert_array_equal(sup.labels[:, 0], (cur > prev).astype(float))


def toy_supervision():
    labels = np.array([[1, 0], [0, 1], [1, 1]], float)
    mask = np.ones((3, 2), bool)
    return Supervision(labels, mask, np.array([[0, 1]]), 1.0, 0, 3)


def test_joint_loss_arithmetic_at_alpha_06():
    sup = toy_supervision()
    cls = dc.constant(np.array([[0.9, 0.2], [0.3, 0.6], [0.7, 0.8]]))
    link = dc.constant(np.array([0.8, 0.1]))
    parts = joint_loss(cls, link, sup, np.array([1.0, 0.0]), alpha=0.6, lam=0.5)
    bce_c = -(math.log(0.9) + math.log(0.7) + math.log(0.7)) / 3
    bce_e = -(math.log(0.8) + math.log(0.6) + math.log(0.8)) / 3
    nc = 0.6 * bce_c + 0.4 * bce_e
    lp = -(math.log(0.8) + math.log(0.9)) / 2
    assert float(parts.nc.data) == pytest.approx(nc, abs=1e-14)
    assert float(parts.lp.data) == pytest.approx(lp, abs=1e-14)
    assert float(parts.total.data) == pytest.approx(0.5 * nc + 0.5 * lp, abs=1e-14)


@pytest.mark.parametrize("lam,which", [(1.0, "nc"), (0.0, "lp")])
def test_lambda_endpoints_select_one_task(lam, which):
    sup = toy_supervision()
    cls = dc.constant(np.array([[0.9, 0.2], [0.3, 0.6], [0.7, 0.8]]))
    link = dc.constant(np.array([0.8, 0.1]))
    parts = joint_loss(cls, link, sup, np.array([1.0, 0.0]), alpha=0.6, lam=lam)
    assert float(parts.total.data) == float(getattr(parts, which).data)


def test_labels_outside_binary_are_rejected():
    sup = toy_supervision()
    sup.labels[0, 0] = 0.5
    with pytest.raises(ValueError):
        joint_loss(dc.constant(np.full((3, 2), 0.5)), dc.constant(np.array([0.5, 0.5])), sup,
                   np.array([1.0, 0.0]), 0.6, 0.5)


@pytest.mark.parametrize("lam,silent", [(0.0, ("cls.W", "cls.b")), (1.0, ("link.b",))])
def test_gradient_isolation(planted, lam, silent):
    model = small_model(planted)
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges)
    training_step(model, planted.inputs, sup, TrainConfig(lam=lam, d=6), 0).total.backward()
    for name in silent:
        g = model.params[name].grad
        assert g is None or not g.any()
    live = "link.b" if lam == 0.0 else "cls.W"
    assert model.params[live].grad is not None and model.params[live].grad.any()


def test_loss_descends_and_trace_composes(planted):
    cfg = TrainConfig(epochs=40, d=6, seed=1)
    run = train_on(planted, cfg)
    rep = run.report
    assert rep.loss[-1] < rep.loss[0]
    for total, nc, lp in zip(rep.loss, rep.loss_nc, rep.loss_lp):
        assert abs(total - (cfg.lam * nc + (1 - cfg.lam) * lp)) <= 1e-12
    n = planted.inputs.n
    assert all(1 <= k <= n - 1 for rec in rep.k for k in rec.values())
    assert all(abs(sum(w) - 1) < 1e-12 for w in rep.scorer_weights)


def test_zero_epochs_keeps_initial_parameters(tmp_path, planted):
    model = small_model(planted, seed=5)
    init = model.state()
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges)
    rep = fit(model, planted.inputs, sup, TrainConfig(epochs=0, d=6), checkpoint=tmp_path / "m.json")
    assert rep.loss == [] and rep.records() == []
    back = EcoGrowModel.load(tmp_path / "m.json")
    for k, v in init.items():
        np.testing.assert_array_equal(back.params[k].data, v)
    meta = json.loads((tmp_path / "m.meta.json").read_text())
    assert meta["seed"] == 0 and set(meta["resolved_k"]) == {"dist", "poi", "s", "d", "ind", "dyn"}


def test_same_seed_same_trace(planted):
    cfg = TrainConfig(epochs=8, d=6, seed=2)
    a, b = train_on(planted, cfg), train_on(planted, cfg)
    assert a.report.loss == b.report.loss
    np.testing.assert_array_equal(a.embedding, b.embedding)


def test_k_scores_are_clipped_into_range(planted):
    model = small_model(planted)
    for t in model.k_scores().values():
        t.data[:] = 30.0
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges)
    fit(model, planted.inputs, sup, TrainConfig(epochs=2, d=6, lr=0.5))
    assert all(1.0 <= float(t.data[0]) <= 19.0 for t in model.k_scores().values())


def test_adam_first_step_moves_by_learning_rate():
    p = dc.parameter(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, -1.99], rtol=1e-9)


def test_non_finite_loss_aborts(planted):
    model = small_model(planted)
    model.params["cls.W"].data[:] = np.nan
    sup = build_supervision(planted.panel, planted.window.t, planted.target.edges)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        fit(model, planted.inputs, sup, TrainConfig(epochs=3, d=6))


def test_no_graph_scorer_ablation_leaves_scorer_untouched(planted):
    run = train_on(planted, TrainConfig(epochs=5, d=6, ablation=Ablation(no_graph_scorer=True)))
    assert all(w == [1 / 6] * 6 for w in run.report.scorer_weights)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert TrainConfig(ablation={"no_lstm": True}).ablation == Ablation(no_lstm=True)
