"""End-to-end glue: panel -> graphs -> proximity target -> trained embeddings -> evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datamodel import CityPanel, PanelError, YearWindow
from .downstream import EvalResult, evaluate
from .graphs import GraphConfig, GraphSet, build_graph_set
from .model import Ablation, EcoGrowModel, ModelConfig, ModelInputs, prepare_inputs
from .proximity import ProximityTarget, ThresholdRule, proximity_target
from .training import Supervision, TrainConfig, TrainReport, build_supervision, fit


def history_features(panel: CityPanel, window: YearWindow) -> list[np.ndarray]:
    missing = [y for y in window.years if y not in panel.years]
    if missing:
        raise PanelError(f"feature years {missing} needed by the history window are not in the panel")
    return [panel.imputed_features(y)[0] for y in window.years]


def model_inputs(panel: CityPanel, graphs: GraphSet, window: YearWindow) -> ModelInputs:
    return prepare_inputs(graphs, panel.imputed_features(window.t)[0], history_features(panel, window))


@dataclass
class Prepared:
    panel: CityPanel
    window: YearWindow
    graphs: GraphSet
    target: ProximityTarget
    inputs: ModelInputs


def prepare(panel: CityPanel, year: int, history_len: int = 15, graph_config: GraphConfig | None = None,
            threshold: ThresholdRule | None = None) -> Prepared:
    window = YearWindow(year, history_len)
    graphs = build_graph_set(panel, window, graph_config)
    target = proximity_target(panel, (window.years[0], window.t), threshold)
    return Prepared(panel, window, graphs, target, model_inputs(panel, graphs, window))


@dataclass
class TrainedRun:
    model: EcoGrowModel
    report: TrainReport
    supervision: Supervision
    embedding: np.ndarray


def train_on(prep: Prepared, config: TrainConfig, edges: np.ndarray | None = None, checkpoint=None,
             meta: dict | None = None) -> TrainedRun:
    edges = prep.target.edges if edges is None else edges
    sup = build_supervision(prep.panel, prep.window.t, edges, config.seed, config.negative_ratio)
    model = EcoGrowModel(ModelConfig(n_features=prep.inputs.features.shape[1], d=config.d, seed=config.seed,
                                     ablation=config.ablation))
    report = fit(model, prep.inputs, sup, config, checkpoint=checkpoint, meta=meta)
    emb = model.forward(prep.inputs).embedding.data.copy()
    return TrainedRun(model, report, sup, emb)


ABLATIONS = {
    "no_dtkgcn": Ablation(no_dtkgcn=True),
    "no_graph_scorer": Ablation(no_graph_scorer=True),
    "no_lstm": Ablation(no_lstm=True),
}


def run_variant(prep: Prepared, config: TrainConfig, task: str, eval_seed: int = 0,
                grid=None, k_folds: int = 5) -> tuple[EvalResult, TrainedRun]:
    run = train_on(prep, config)
    kwargs = {} if grid is None else {"grid": grid}
    res = evaluate(run.embedding, prep.panel, prep.window.t, task, k_folds=k_folds, seed=eval_seed, **kwargs)
    return res, run


def run_ablations(prep: Prepared, config: TrainConfig, task: str, eval_seed: int = 0) -> dict[str, EvalResult]:
    out = {"full": run_variant(prep, replace(config, ablation=Ablation()), task, eval_seed)[0]}
    for name, abl in ABLATIONS.items():
        out[name] = run_variant(prep, replace(config, ablation=abl), task, eval_seed)[0]
    return out
