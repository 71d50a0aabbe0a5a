"""Multi-graph city encoder: top-k max-aggregating graph convolutions, a graph
attention layer, softmax graph fusion, a recurrent pass over the yearly
industry graphs, and the classification and link heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .graphs import KINDS, GraphSet, standardize

STATIC_DTK_KINDS = ("dist", "poi", "s", "d", "ind")


@dataclass(frozen=True)
class Ablation:
    no_dtkgcn: bool = False
    no_graph_scorer: bool = False
    no_lstm: bool = False

    @property
    def label(self) -> str:
        on = [k for k, v in asdict(self).items() if v]
        return "+".join(on) if on else "full"


@dataclass
class ModelConfig:
    n_features: int
    d: int = 16
    k_init: float = 5.0
    gate_temperature: float = 1.0
    leaky_slope: float = 0.2
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    @property
    def hidden(self) -> int:
        # per-graph output width and recurrent width share the embedding size
        return self.d


# ---------------------------------------------------------------------------
# neighbour ranking and the top-k layer


@dataclass
class RankedNeighbors:
    """Per node, positive-weight neighbours by weight descending, ties to lower index."""

    order: np.ndarray  # (n, n-1) padded with -1
    counts: np.ndarray  # (n,)

    @classmethod
    def from_adjacency(cls, a: np.ndarray) -> "RankedNeighbors":
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        order = np.full((n, max(n - 1, 0)), -1, dtype=np.intp)
        counts = np.zeros(n, dtype=np.intp)
        idx = np.arange(n)
        for i in range(n):
            cand = idx[(a[i] > 0) & (idx != i)]
            # stable sort on -weight keeps ascending index order within ties
            cand = cand[np.argsort(-a[i, cand], kind="stable")]
            order[i, : cand.size] = cand
            counts[i] = cand.size
        return cls(order, counts)

    @property
    def n(self) -> int:
        return self.order.shape[0]

    def top(self, k: int) -> np.ndarray:
        sets = self.order[:, :k].copy()
        return sets

    def mean_matrix(self) -> np.ndarray:
        """Row-stochastic average over all positive-weight neighbours (zero rows if none)."""
        m = np.zeros((self.n, self.n))
        for i in range(self.n):
            if self.counts[i]:
                m[i, self.order[i, : self.counts[i]]] = 1.0 / self.counts[i]
        return m


def effective_k(k_score: float, n: int) -> int:
    return int(min(max(np.floor(k_score + 0.5), 1), max(n - 1, 1)))


def rank_cummax(h: np.ndarray, ranked: RankedNeighbors) -> np.ndarray:
    """Running max over each node's ranked neighbours: (n, width, F); -inf past the end."""
    safe = np.where(ranked.order >= 0, ranked.order, 0)
    vals = np.where((ranked.order >= 0)[:, :, None], h[safe], -np.inf)
    return np.maximum.accumulate(vals, axis=1)


def _gates(k_score: float, width: int, temperature: float):
    r = np.arange(1, width + 1, dtype=np.float64)
    g = 0.5 * (1.0 + np.tanh((k_score - r + 0.5) / (2.0 * temperature)))  # overflow-free logistic
    return g, g * (1.0 - g) / temperature


def _increments(cm: np.ndarray) -> np.ndarray:
    """m_r - m_{r-1} for r >= 2, zero where either side is past the list end."""
    inc = np.zeros_like(cm)
    if cm.shape[1] > 1:
        prev, cur = cm[:, :-1], cm[:, 1:]
        ok = np.isfinite(prev) & np.isfinite(cur)
        np.subtract(cur, prev, out=inc[:, 1:], where=ok)
    return inc


def soft_topk_max(h: np.ndarray, ranked: RankedNeighbors, k_score: float, temperature: float = 1.0) -> np.ndarray:
    """Gated surrogate of the hard top-k max: m_1 + sum_r gate_r (m_r - m_{r-1}).

    With sharp gates and integral ``k_score`` it equals the hard aggregation.
    """
    cm = rank_cummax(h, ranked)
    if cm.shape[1] == 0:
        return np.zeros((ranked.n, h.shape[1]))
    g, _ = _gates(k_score, cm.shape[1], temperature)
    first = np.where(np.isfinite(cm[:, 0]), cm[:, 0], 0.0)
    return first + (g[None, 1:, None] * _increments(cm)[:, 1:]).sum(axis=1)


def ktop_gradient_surrogate(h: np.ndarray, ranked: RankedNeighbors, k_score: float, upstream: np.ndarray,
                            temperature: float = 1.0) -> float:
    """d(loss)/d(k_score) through :func:`soft_topk_max`, given d(loss)/d(output)."""
    cm = rank_cummax(h, ranked)
    if cm.shape[1] < 2:
        return 0.0
    _, dg = _gates(k_score, cm.shape[1], temperature)
    dout_dk = (dg[None, :, None] * _increments(cm)).sum(axis=1)
    return float((upstream * dout_dk).sum())


@dataclass
class DtkGcnLayer:
    W: Tensor
    k_score: Tensor
    kind: str
    temperature: float = 1.0

    def k(self, n: int) -> int:
        return effective_k(float(self.k_score.data.reshape(-1)[0]), n)


def dtkgcn_forward(layer: DtkGcnLayer, x: Tensor, ranked: RankedNeighbors) -> Tensor:
    """Linear map, then each node takes the elementwise max over its top-k neighbours."""
    h = x @ layer.W
    k = layer.k(ranked.n)
    out = dc.max_rows(h, ranked.top(k))
    k_val = float(layer.k_score.data.reshape(-1)[0])
    return dc.straight_through(
        out, layer.k_score,
        lambda g: ktop_gradient_surrogate(h.data, ranked, k_val, g, layer.temperature),
    )


def mean_aggregate(layer: DtkGcnLayer, x: Tensor, mean_matrix: np.ndarray) -> Tensor:
    return dc.matmul(dc.constant(mean_matrix), x @ layer.W)


@dataclass
class GatLayer:
    W: Tensor
    a_src: Tensor  # first half of the attention vector, applied to the centre node
    a_dst: Tensor  # second half, applied to the neighbour
    slope: float = 0.2


def gat_forward(layer: GatLayer, x: Tensor, a_emp: np.ndarray) -> Tensor:
    """Single-head attention over each node's neighbourhood plus itself."""
    n = x.shape[0]
    h = x @ layer.W
    s_self = h @ layer.a_src  # (n, 1)
    s_nbr = h @ layer.a_dst
    ones_row = dc.constant(np.ones((1, n)))
    ones_col = dc.constant(np.ones((n, 1)))
    e = dc.matmul(s_self, ones_row) + dc.matmul(ones_col, dc.transpose(s_nbr))
    mask = (np.asarray(a_emp) > 0) | np.eye(n, dtype=bool)
    alpha = dc.softmax(dc.leaky_relu(e, layer.slope), mask=mask)
    return alpha @ h


def fuse_static(scores: Tensor, z: list[Tensor]) -> Tensor:
    """Softmax-weighted sum of the per-graph embeddings."""
    if len(z) != scores.data.size:
        raise dc.ShapeError(f"{len(z)} embeddings for {scores.data.size} scores")
    shape = z[0].shape
    if any(t.shape != shape for t in z):
        raise dc.ShapeError("all graph embeddings must share a shape")
    w = dc.softmax(scores)
    out = None
    for g, zg in enumerate(z):
        term = dc.mul_scalar(zg, dc.slice_cols(w, g, g + 1))
        out = term if out is None else out + term
    return out


def concat_fixed_map(z: list[Tensor]) -> Tensor:
    """Ablation stand-in for the scorer: concatenate, then a fixed uniform averaging map."""
    width = z[0].shape[1]
    fixed = np.vstack([np.eye(width) / len(z)] * len(z))
    return dc.concat(z, axis=1) @ dc.constant(fixed)


@dataclass
class LstmCell:
    Wx: Tensor  # (in, 4h) columns ordered input, forget, output, candidate
    Wh: Tensor  # (h, 4h)
    b: Tensor  # (4h,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hs = self.hidden
        gates = dc.add(x @ self.Wx + h @ self.Wh, self.b)
        i = dc.sigmoid(dc.slice_cols(gates, 0, hs))
        f = dc.sigmoid(dc.slice_cols(gates, hs, 2 * hs))
        o = dc.sigmoid(dc.slice_cols(gates, 2 * hs, 3 * hs))
        g = dc.tanh(dc.slice_cols(gates, 3 * hs, 4 * hs))
        c_new = f * c + i * g
        return o * dc.tanh(c_new), c_new


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelInputs:
    """Everything the forward pass needs that does not change during training."""

    x_static: np.ndarray  # standardised features at the reference year
    x_dynamic: list[np.ndarray]  # standardised features per history year, oldest first
    features: np.ndarray  # the explicit features concatenated into the embedding
    ranked: dict[str, RankedNeighbors]
    ranked_dynamic: list[RankedNeighbors]
    emp: np.ndarray
    mean: dict[str, np.ndarray]
    mean_dynamic: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.x_static.shape[0]


def prepare_inputs(graphs: GraphSet, features_t: np.ndarray, features_history: list[np.ndarray]) -> ModelInputs:
    if len(features_history) != len(graphs.dynamic):
        raise dc.ShapeError("one feature matrix per dynamic graph is required")
    ranked = {k: RankedNeighbors.from_adjacency(graphs.static[k].weights) for k in STATIC_DTK_KINDS}
    ranked_dyn = [RankedNeighbors.from_adjacency(g.weights) for g in graphs.dynamic]
    x_t = standardize(features_t)
    return ModelInputs(
        x_static=x_t,
        x_dynamic=[standardize(f) for f in features_history],
        features=x_t,
        ranked=ranked,
        ranked_dynamic=ranked_dyn,
        emp=graphs.static["emp"].weights,
        mean={k: r.mean_matrix() for k, r in ranked.items()},
        mean_dynamic=[r.mean_matrix() for r in ranked_dyn],
    )


@dataclass
class ForwardResult:
    embedding: Tensor
    z_graphs: dict[str, Tensor]
    z_static: Tensor
    h_dyn: Tensor | None


class EcoGrowModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        f_in, h, d = config.n_features, config.hidden, config.d
        p: dict[str, Tensor] = {}

        def weight(name, fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            p[name] = dc.parameter(rng.uniform(-bound, bound, size=shape), name)

        def zeros(name, shape):
            p[name] = dc.parameter(np.zeros(shape), name)

        for kind in STATIC_DTK_KINDS:
            weight(f"dtk.{kind}.W", f_in, (f_in, h))
            p[f"dtk.{kind}.k"] = dc.parameter(np.array([config.k_init]), f"dtk.{kind}.k")
        weight("gat.W", f_in, (f_in, h))
        weight("gat.a_src", 2 * h, (h, 1))
        weight("gat.a_dst", 2 * h, (h, 1))
        zeros("scorer.s", (1, len(KINDS)))
        weight("dyn.W", f_in, (f_in, h))
        p["dyn.k"] = dc.parameter(np.array([config.k_init]), "dyn.k")
        weight("lstm.Wx", h, (h, 4 * h))
        weight("lstm.Wh", h, (h, 4 * h))
        zeros("lstm.b", (4 * h,))
        weight("proj.W", self.concat_width, (self.concat_width, d))
        zeros("proj.b", (d,))
        weight("cls.W", d, (d, 2))
        zeros("cls.b", (2,))
        zeros("link.b", (1,))
        self.params = p

    @property
    def concat_width(self) -> int:
        c = self.config
        return c.hidden + (0 if c.ablation.no_lstm else c.hidden) + c.n_features

    # layer views over the flat parameter dict
    def dtk(self, kind: str) -> DtkGcnLayer:
        pre = "dyn" if kind == "dyn" else f"dtk.{kind}"
        return DtkGcnLayer(self.params[f"{pre}.W"], self.params[f"{pre}.k"], kind, self.config.gate_temperature)

    @property
    def gat(self) -> GatLayer:
        p = self.params
        return GatLayer(p["gat.W"], p["gat.a_src"], p["gat.a_dst"], self.config.leaky_slope)

    @property
    def lstm(self) -> LstmCell:
        p = self.params
        return LstmCell(p["lstm.Wx"], p["lstm.Wh"], p["lstm.b"])

    def k_scores(self) -> dict[str, Tensor]:
        return {k: self.params[f"dtk.{k}.k"] for k in STATIC_DTK_KINDS} | {"dyn": self.params["dyn.k"]}

    def resolved_k(self, n: int) -> dict[str, int]:
        return {k: effective_k(float(t.data[0]), n) for k, t in self.k_scores().items()}

    def scorer_weights(self) -> np.ndarray:
        s = self.params["scorer.s"].data.reshape(-1)
        e = np.exp(s - s.max())
        return e / e.sum()

    def _aggregate(self, layer, x, ranked, mean_matrix):
        if self.config.ablation.no_dtkgcn:
            return mean_aggregate(layer, x, mean_matrix)
        return dtkgcn_forward(layer, x, ranked)

    def static_embeddings(self, inputs: ModelInputs) -> dict[str, Tensor]:
        x = dc.constant(inputs.x_static)
        z = {}
        for kind in KINDS:
            if kind == "emp":
                z[kind] = gat_forward(self.gat, x, inputs.emp)
            else:
                z[kind] = self._aggregate(self.dtk(kind), x, inputs.ranked[kind], inputs.mean[kind])
        return z

    def dynamic_forward(self, inputs: ModelInputs) -> Tensor:
        if not inputs.x_dynamic:
            raise ValueError("dynamic sequence is empty")
        layer, cell = self.dtk("dyn"), self.lstm
        n, hs = inputs.n, cell.hidden
        h = dc.constant(np.zeros((n, hs)))
        c = dc.constant(np.zeros((n, hs)))
        for x, ranked, mean_m in zip(inputs.x_dynamic, inputs.ranked_dynamic, inputs.mean_dynamic):
            z = self._aggregate(layer, dc.constant(x), ranked, mean_m)
            h, c = cell.step(z, h, c)
        return h

    def forward(self, inputs: ModelInputs) -> ForwardResult:
        z = self.static_embeddings(inputs)
        zs = [z[k] for k in KINDS]
        if self.config.ablation.no_graph_scorer:
            z_static = concat_fixed_map(zs)
        else:
            z_static = fuse_static(self.params["scorer.s"], zs)
        parts = [z_static]
        h_dyn = None
        if not self.config.ablation.no_lstm:
            h_dyn = self.dynamic_forward(inputs)
            parts.append(h_dyn)
        parts.append(dc.constant(inputs.features))
        joined = dc.concat(parts, axis=1)
        if joined.shape[1] != self.concat_width:
            raise dc.ShapeError(f"concatenation width {joined.shape[1]} != {self.concat_width}")
        e = dc.relu(dc.add(joined @ self.params["proj.W"], self.params["proj.b"]))
        return ForwardResult(e, z, z_static, h_dyn)

    def predict_heads(self, embedding: Tensor, pairs: np.ndarray) -> tuple[Tensor, Tensor]:
        """(n x 2 growth probabilities [companies, employment], per-pair link probabilities)."""
        cls = dc.sigmoid(dc.add(embedding @ self.params["cls.W"], self.params["cls.b"]))
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        ei = dc.gather_rows(embedding, pairs[:, 0])
        ej = dc.gather_rows(embedding, pairs[:, 1])
        logits = dc.sum_(ei * ej, axis=1)
        bias = dc.mul_scalar(dc.constant(np.ones(len(pairs))), self.params["link.b"])
        return cls, dc.sigmoid(logits + bias)

    def embed(self, inputs: ModelInputs, year: int) -> "EmbeddingTable":
        return EmbeddingTable(year, self.forward(inputs).embedding.data.copy())

    # ------------------------------------------------------------------
    # checkpoints

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise dc.ShapeError(f"{k}: checkpoint shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path: Path, meta: dict | None = None) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in self.params.items()}
        path.write_text(json.dumps({"config": _config_dict(self.config), "params": body}) + "\n", encoding="utf-8")
        sidecar = path.with_suffix(".meta.json")
        sidecar.write_text(json.dumps(meta or {}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, sidecar

    @classmethod
    def load(cls, path: Path) -> "EcoGrowModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = dict(raw["config"])
        cfg["ablation"] = Ablation(**cfg["ablation"])
        model = cls(ModelConfig(**cfg))
        model.load_state({k: np.array(v["data"]).reshape(v["shape"]) for k, v in raw["params"].items()})
        return model


def _config_dict(cfg: ModelConfig) -> dict:
    out = asdict(cfg)
    out["ablation"] = asdict(cfg.ablation)
    return out


@dataclass
class EmbeddingTable:
    year: int
    values: np.ndarray

    def write_csv(self, path: Path, cities: list[str]):
        d = self.values.shape[1]
        lines = ["city,year," + ",".join(f"e_{i}" for i in range(d))]
        for name, row in zip(cities, self.values):
            lines.append(",".join([_csv_field(name), str(self.year)] + [repr(float(v)) for v in row]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path: Path) -> tuple["EmbeddingTable", list[str]]:
        import csv

        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        values = np.array([[float(v) for v in r[2:]] for r in body])
        return cls(int(body[0][1]), values), [r[0] for r in body]


def _csv_field(s: str) -> str:
    if any(ch in s for ch in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s
