"""Command-line front end.

Every command reads the same YAML run config, writes its artifacts under the
configured output directory and leaves a ``<command>.provenance.json`` next to
them. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .datamodel import CityPanel, PanelError, YearWindow, load_panel
from .downstream import evaluate
from .graphs import build_graph_set, export_graph_set, load_graph_set
from .model import Ablation, EcoGrowModel, EmbeddingTable, ModelConfig
from .pipeline import ABLATIONS, model_inputs, prepare, run_variant
from .proximity import export_target, load_target_edges, proximity_target
from .synth import SyntheticSpec, write_synthetic
from .training import build_supervision, fit

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class MissingArtifact(Exception):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"{path} is missing; run `ecogrow {producer}` first")


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(out: Path, command: str, cfg: RunConfig | None, seeds: list[int],
                     outputs: list[Path], extra: dict | None = None) -> Path:
    rec = {
        "command": command,
        "config_hash": cfg.hash() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": seeds,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": {str(Path(p).relative_to(out)): _sha(p) for p in outputs},
    }
    rec.update(extra or {})
    path = out / f"{command}.provenance.json"
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# artifact access


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _panel(cfg: RunConfig) -> CityPanel:
    return load_panel(cfg.data)


def _year(cfg: RunConfig, panel: CityPanel) -> int:
    if cfg.year is not None:
        return cfg.year
    if len(panel.years) < 2:
        raise PanelError("panel needs at least two years to pick a default reference year")
    return panel.years[-2]


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _graphs(out: Path):
    return load_graph_set(_require(out / "graphs" / "manifest.json", "build-graphs"))


def _edges(out: Path):
    _require(out / "proximity" / "proximity.json", "proximity")
    _require(out / "proximity" / "edges.csv", "proximity")
    return load_target_edges(out / "proximity")


def _check_cities(panel: CityPanel, cities: list[str], what: str):
    if list(cities) != list(panel.cities):
        raise PanelError(f"{what} was built for a different city list than the panel at hand")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n=args.n, n_years=args.years, start_year=args.start_year, clusters=args.clusters,
                         signal=args.signal, seed=args.seed)
    out = Path(args.out)
    paths = write_synthetic(spec, out)
    write_provenance(out, "synth", None, [spec.seed], list(paths.values()), {"spec": asdict(spec)})
    print(f"wrote synthetic panel ({spec.n} cities, {spec.n_years} years) to {out}")
    return EXIT_OK


def cmd_build_graphs(cfg: RunConfig) -> int:
    out = _out(cfg)
    panel = _panel(cfg)
    t = _year(cfg, panel)
    gs = build_graph_set(panel, YearWindow(t, cfg.train.history_len), cfg.graphs)
    manifest = export_graph_set(gs, out / "graphs", panel.cities)
    files = [manifest] + sorted((out / "graphs").glob("*.csv"))
    write_provenance(out, "build-graphs", cfg, [cfg.graphs.cluster_seed], files, {"year": t})
    print(f"{len(gs.static)} static and {len(gs.dynamic)} dynamic graphs -> {manifest}")
    return EXIT_OK


def cmd_proximity(cfg: RunConfig) -> int:
    out = _out(cfg)
    panel = _panel(cfg)
    window = YearWindow(_year(cfg, panel), cfg.train.history_len)
    span = (window.years[0], window.t)
    target = proximity_target(panel, span, cfg.threshold)
    paths = export_target(target, out / "proximity", panel.cities, span, cfg.threshold)
    write_provenance(out, "proximity", cfg, [], list(paths))
    print(f"{len(target.edge_pairs())} proximity edges, threshold {target.threshold:.6g}")
    return EXIT_OK


def _checkpoint(out: Path, seed: int) -> Path:
    return out / "train" / f"model_seed{seed}.json"


def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    panel = _panel(cfg)
    gs, cities = _graphs(out)
    _check_cities(panel, cities, "the graph set")
    edges, _ = _edges(out)
    window = YearWindow(_year(cfg, panel), cfg.train.history_len)
    inputs = model_inputs(panel, gs, window)
    written = []
    for seed in cfg.seeds:
        tc = replace(cfg.train, seed=seed)
        sup = build_supervision(panel, window.t, edges, seed, tc.negative_ratio)
        model = EcoGrowModel(ModelConfig(n_features=inputs.features.shape[1], d=tc.d, seed=seed,
                                         ablation=tc.ablation))
        ckpt = _checkpoint(out, seed)
        report = fit(model, inputs, sup, tc, checkpoint=ckpt, meta={"year": window.t, "config_hash": cfg.hash()})
        log = out / "train" / f"report_seed{seed}.jsonl"
        report.write_jsonl(log)
        written += [ckpt, ckpt.with_suffix(".meta.json"), log]
        print(f"seed {seed}: final loss {report.loss[-1]:.6f} -> {ckpt}" if report.loss else f"seed {seed}: 0 epochs")
    write_provenance(out, "train", cfg, list(cfg.seeds), written)
    return EXIT_OK


def cmd_embed(cfg: RunConfig) -> int:
    out = _out(cfg)
    panel = _panel(cfg)
    gs, cities = _graphs(out)
    _check_cities(panel, cities, "the graph set")
    window = YearWindow(_year(cfg, panel), cfg.train.history_len)
    inputs = model_inputs(panel, gs, window)
    written = []
    for seed in cfg.seeds:
        model = EcoGrowModel.load(_require(_checkpoint(out, seed), "train"))
        path = out / "embed" / f"embeddings_seed{seed}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        model.embed(inputs, window.t).write_csv(path, panel.cities)
        written.append(path)
        print(f"seed {seed}: embeddings -> {path}")
    write_provenance(out, "embed", cfg, list(cfg.seeds), written)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _out(cfg)
    panel = _panel(cfg)
    t = _year(cfg, panel)
    dest = out / "evaluate"
    dest.mkdir(parents=True, exist_ok=True)
    kw = dict(grid=tuple(cfg.l1_grid), k_folds=cfg.k_folds, seed=cfg.eval_seed)
    base = evaluate(None, panel, t, cfg.task, **kw)
    base_path = dest / f"{cfg.task}_explicit_features.json"
    base.write_json(base_path)
    written = [base_path]
    print(f"explicit features: rmse {base.mean_rmse:.4f} mae {base.mean_mae:.4f} r2 {base.mean_r2:.4f}")
    for seed in cfg.seeds:
        table, cities = EmbeddingTable.read_csv(_require(out / "embed" / f"embeddings_seed{seed}.csv", "embed"))
        _check_cities(panel, cities, "the embedding table")
        res = evaluate(table.values, panel, t, cfg.task, **kw)
        path = dest / f"{cfg.task}_seed{seed}.json"
        res.write_json(path)
        written.append(path)
        print(f"seed {seed}: rmse {res.mean_rmse:.4f} mae {res.mean_mae:.4f} r2 {res.mean_r2:.4f}")
    write_provenance(out, "evaluate", cfg, list(cfg.seeds), written)
    return EXIT_OK


def _prepared(cfg: RunConfig):
    panel = _panel(cfg)
    return prepare(panel, _year(cfg, panel), cfg.train.history_len, cfg.graphs, cfg.threshold)


def _mean_result(results) -> dict:
    return {
        "rmse": float(np.mean([r.mean_rmse for r in results])),
        "mae": float(np.mean([r.mean_mae for r in results])),
        "r2": float(np.mean([r.mean_r2 for r in results])),
        "per_seed": [r.to_dict() for r in results],
    }


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out(cfg)
    prep = _prepared(cfg)
    dest = out / "ablate"
    dest.mkdir(parents=True, exist_ok=True)
    kw = dict(grid=tuple(cfg.l1_grid), k_folds=cfg.k_folds, eval_seed=cfg.eval_seed)
    variants = {"full": Ablation(), **ABLATIONS}
    written = []
    for name, abl in variants.items():
        results = [run_variant(prep, replace(cfg.train, seed=s, ablation=abl), cfg.task, **kw)[0] for s in cfg.seeds]
        summary = _mean_result(results)
        summary["variant"] = name
        path = dest / f"{name}.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
        print(f"{name:16s} rmse {summary['rmse']:.4f} mae {summary['mae']:.4f} r2 {summary['r2']:.4f}")
    write_provenance(out, "ablate", cfg, list(cfg.seeds), written)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    out = _out(cfg)
    prep = _prepared(cfg)
    dest = out / "sweep"
    dest.mkdir(parents=True, exist_ok=True)
    kw = dict(grid=tuple(cfg.l1_grid), k_folds=cfg.k_folds, eval_seed=cfg.eval_seed)
    written = []
    grids = {"lambda": [("lam", v) for v in cfg.sweep.lambdas], "d": [("d", v) for v in cfg.sweep.dims]}
    for label, points in grids.items():
        path = dest / f"{label}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([label, "rmse", "mae", "r2"])
            for key, value in points:
                results = [run_variant(prep, replace(cfg.train, seed=s, **{key: value}), cfg.task, **kw)[0]
                           for s in cfg.seeds]
                row = [np.mean([getattr(r, m) for r in results]) for m in ("mean_rmse", "mean_mae", "mean_r2")]
                w.writerow([value, *(repr(float(x)) for x in row)])
                print(f"{label}={value}: rmse {row[0]:.4f} r2 {row[2]:.4f}")
        written.append(path)
    write_provenance(out, "sweep", cfg, list(cfg.seeds), written)
    return EXIT_OK


COMMANDS = {
    "build-graphs": cmd_build_graphs,
    "proximity": cmd_proximity,
    "train": cmd_train,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecogrow", description="multi-graph city embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    syn = sub.add_parser("synth", help="write a seeded synthetic panel")
    syn.add_argument("--out", required=True)
    syn.add_argument("--n", type=int, default=50)
    syn.add_argument("--years", type=int, default=16)
    syn.add_argument("--start-year", type=int, default=2005)
    syn.add_argument("--clusters", type=int, default=6)
    syn.add_argument("--signal", type=float, default=1.0)
    syn.add_argument("--seed", type=int, default=0)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--data", help="override the panel directory")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--year", type=int, help="override the reference year")
        p.add_argument("--seeds", type=int, nargs="+", help="override the training seeds")
        p.add_argument("--epochs", type=int, help="override the number of epochs")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {k: getattr(args, k) for k in ("data", "out", "year", "seeds") if getattr(args, k) is not None}
    cfg = replace(cfg, **changes)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, PanelError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
