"""Joint growth-classification and proximity link-prediction training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datamodel import CityPanel, growth_labels
from .model import Ablation, EcoGrowModel, ModelInputs


@dataclass
class TrainConfig:
    alpha: float = 0.6
    lam: float = 0.5
    lr: float = 0.01
    epochs: int = 250
    d: int = 16
    history_len: int = 15
    seed: int = 0
    negative_ratio: float = 1.0
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if not 0 <= self.alpha <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("alpha and lambda must lie in [0, 1]")
        if self.lr <= 0 or self.negative_ratio <= 0 or self.d <= 0 or self.history_len <= 0:
            raise ValueError("rates and sizes must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class Supervision:
    labels: np.ndarray  # (n, 2): companies, employment
    label_mask: np.ndarray  # (n, 2) bool
    positives: np.ndarray  # (m, 2) with i < j
    negative_ratio: float = 1.0
    seed: int = 0
    n: int = 0

    def negatives(self, epoch: int) -> np.ndarray:
        """Uniform non-edges (i < j), drawn fresh for every epoch from a seeded stream."""
        n = self.n
        pos = {tuple(p) for p in self.positives.tolist()}
        iu, ju = np.triu_indices(n, k=1)
        cand = np.array([(i, j) for i, j in zip(iu.tolist(), ju.tolist()) if (i, j) not in pos], dtype=np.intp)
        want = min(int(round(self.negative_ratio * len(self.positives))), len(cand))
        rng = np.random.default_rng([self.seed, epoch])
        pick = np.sort(rng.choice(len(cand), size=want, replace=False)) if want else np.array([], dtype=np.intp)
        return cand[pick].reshape(-1, 2)


def build_supervision(panel: CityPanel, year: int, edges: np.ndarray, seed: int = 0,
                      negative_ratio: float = 1.0) -> Supervision:
    """Growth-sign labels from ``year - 1`` to ``year`` plus proximity positives."""
    lc, mc = growth_labels(panel, year, "companies")
    le, me = growth_labels(panel, year, "employment")
    if not (mc.any() or me.any()):
        raise ValueError(f"no city has a computable growth label for {year}")
    i, j = np.nonzero(np.triu(np.asarray(edges), k=1))
    pos = np.stack([i, j], axis=1).astype(np.intp)
    return Supervision(np.stack([lc, le], axis=1), np.stack([mc, me], axis=1), pos,
                       negative_ratio, seed, panel.n)


@dataclass
class LossParts:
    total: dc.Tensor
    nc: dc.Tensor
    lp: dc.Tensor


def joint_loss(cls_prob: dc.Tensor, link_prob: dc.Tensor, sup: Supervision, link_labels: np.ndarray,
               alpha: float, lam: float) -> LossParts:
    """lam * (alpha * BCE_companies + (1 - alpha) * BCE_employment) + (1 - lam) * BCE_links."""
    terms = []
    for col, weight in ((0, alpha), (1, 1.0 - alpha)):
        rows = np.flatnonzero(sup.label_mask[:, col])
        if rows.size:
            p = dc.slice_cols(dc.gather_rows(cls_prob, rows), col, col + 1)
            terms.append(dc.scale(dc.bce(p, sup.labels[rows, col:col + 1]), weight))
    nc = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    lp = dc.bce(link_prob, link_labels)
    total = dc.scale(nc, lam) + dc.scale(lp, 1.0 - lam)
    return LossParts(total, nc, lp)


class Adam:
    def __init__(self, params: dict[str, dc.Tensor], lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    loss_nc: list[float] = field(default_factory=list)
    loss_lp: list[float] = field(default_factory=list)
    k: list[dict[str, int]] = field(default_factory=list)
    scorer_weights: list[list[float]] = field(default_factory=list)
    checkpoint: str | None = None

    def records(self) -> list[dict]:
        return [
            {"epoch": e, "loss": self.loss[e], "loss_nc": self.loss_nc[e], "loss_lp": self.loss_lp[e],
             "k": self.k[e], "scorer_weights": self.scorer_weights[e]}
            for e in range(len(self.loss))
        ]

    def write_jsonl(self, path: Path):
        lines = [json.dumps(r, sort_keys=True) for r in self.records()]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def training_step(model: EcoGrowModel, inputs: ModelInputs, sup: Supervision, config: TrainConfig,
                  epoch: int) -> LossParts:
    neg = sup.negatives(epoch)
    pairs = np.concatenate([sup.positives, neg]).reshape(-1, 2)
    link_labels = np.concatenate([np.ones(len(sup.positives)), np.zeros(len(neg))])
    out = model.forward(inputs)
    cls, link = model.predict_heads(out.embedding, pairs)
    return joint_loss(cls, link, sup, link_labels, config.alpha, config.lam)


def fit(model: EcoGrowModel, inputs: ModelInputs, sup: Supervision, config: TrainConfig,
        checkpoint: Path | None = None, meta: dict | None = None) -> TrainReport:
    """Full-batch Adam on the joint objective for ``config.epochs`` epochs.

    Each record holds the loss at the parameters used in that epoch's forward
    pass, before that epoch's update.
    """
    report = TrainReport()
    opt = Adam(model.params, lr=config.lr)
    n = inputs.n
    for epoch in range(config.epochs):
        opt.zero_grad()
        parts = training_step(model, inputs, sup, config, epoch)
        total = float(parts.total.data)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        report.loss.append(total)
        report.loss_nc.append(float(parts.nc.data))
        report.loss_lp.append(float(parts.lp.data))
        report.k.append(model.resolved_k(n))
        report.scorer_weights.append(model.scorer_weights().tolist())
        parts.total.backward()
        opt.step()
        for t in model.k_scores().values():
            t.data = np.clip(t.data, 1.0, max(n - 1, 1))
    if checkpoint is not None:
        info = dict(meta or {})
        info.update({"seed": config.seed, "resolved_k": model.resolved_k(n),
                     "scorer_weights": model.scorer_weights().tolist(), "train_config": train_config_dict(config)})
        model.save(checkpoint, info)
        report.checkpoint = str(checkpoint)
    return report


def train_config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["ablation"] = asdict(config.ablation)
    return out
