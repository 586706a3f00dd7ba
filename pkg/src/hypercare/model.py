"""Hypergraph transformer over visit hyperedges and code nodes.

Each layer runs two set-attention blocks: nodes -> hyperedges, then the
fresh hyperedge embeddings -> nodes.  A block pools a set with one learned
query per head, then applies ``LN(Y + FFNN(Y))``.  The classifier reads the
concatenation of a visit's edge embedding from every layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import EmptySet, InvalidConfig, ShapeMismatch, ShrinkNotAllowed
from .hypergraph import Hypergraph
from .numerics import Node, ParamStore, Tape

DIRECTIONS = ("v2e", "e2v")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    h: int = 4
    L: int = 3
    d_m: int = 64
    T: int = 1
    activation: str = "relu"
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d < 2 or self.h < 1 or self.d % self.h:
            raise InvalidConfig(f"d={self.d} must be >= 2 and divisible by h={self.h}")
        if self.L < 1 or self.d_m < 1 or self.T < 1:
            raise InvalidConfig("L, d_m and T must be >= 1")
        if self.activation not in ("relu", "sigmoid"):
            raise InvalidConfig(f"activation must be relu or sigmoid, got {self.activation!r}")
        if not self.ln_eps > 0:
            raise InvalidConfig("ln_eps must be positive")

    @property
    def d_h(self) -> int:
        return self.d // self.h

    def to_dict(self) -> dict:
        return asdict(self)


def block_keys(cfg: ModelConfig, layer: int, direction: str) -> dict[str, tuple[int, ...]]:
    p = f"layer{layer}.{direction}."
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.h):
        shapes[f"{p}W_q{i}"] = (1, cfg.d_h)
        shapes[f"{p}W_k{i}"] = (cfg.d, cfg.d_h)
        shapes[f"{p}W_v{i}"] = (cfg.d, cfg.d_h)
    shapes[f"{p}W_o"] = (cfg.d, cfg.d)
    shapes[f"{p}W_f1"] = (cfg.d, cfg.d_m)
    shapes[f"{p}b_1"] = (cfg.d_m,)
    shapes[f"{p}W_f2"] = (cfg.d_m, cfg.d)
    shapes[f"{p}b_2"] = (cfg.d,)
    shapes[f"{p}ln_gain"] = (cfg.d,)
    shapes[f"{p}ln_bias"] = (cfg.d,)
    return shapes


def param_shapes(cfg: ModelConfig, num_nodes: int) -> dict[str, tuple[int, ...]]:
    shapes = {"embedding": (num_nodes, cfg.d)}
    for layer in range(1, cfg.L + 1):
        for direction in DIRECTIONS:
            shapes.update(block_keys(cfg, layer, direction))
    shapes["cls.W"] = (cfg.L * cfg.d, cfg.T)
    shapes["cls.b"] = (cfg.T,)
    return shapes


def init_params(cfg: ModelConfig, num_nodes: int, seed: int) -> ParamStore:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights; zero biases; unit LN gains."""
    cfg.validate()
    if num_nodes < 1:
        raise InvalidConfig("num_nodes must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.d)
    store = ParamStore()
    for key, shape in param_shapes(cfg, num_nodes).items():
        leaf = key.rsplit(".", 1)[-1]
        if leaf == "ln_gain":
            store.add(key, np.ones(shape))
        elif leaf.startswith("b_") or leaf in ("ln_bias", "b"):
            store.add(key, np.zeros(shape))
        else:
            store.add(key, rng.uniform(-bound, bound, size=shape))
    return store


def extend_embedding(params: ParamStore, new_num_nodes: int, seed: int) -> ParamStore:
    """Append freshly initialised embedding rows; every other tensor is copied."""
    emb = params["embedding"]
    n, d = emb.shape
    if new_num_nodes < n:
        raise ShrinkNotAllowed(f"cannot shrink embedding from {n} to {new_num_nodes} rows")
    out = params.copy()
    if new_num_nodes > n:
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        fresh = rng.uniform(-bound, bound, size=(new_num_nodes - n, d))
        out.values["embedding"] = np.concatenate([emb, fresh], axis=0)
        out.grads["embedding"] = np.zeros_like(out.values["embedding"])
    return out


class Bound:
    """Reads parameters either as tape leaves (differentiable) or constants."""

    def __init__(self, store: ParamStore, tape: Tape | None = None):
        self.store = store
        self.tape = tape

    def __call__(self, key: str) -> Node:
        if self.tape is None:
            return nx.constant(self.store[key])
        return self.tape.param(self.store, key)


def _pool_segments(x: Node, index: np.ndarray, ptr: np.ndarray, w: Bound, prefix: str, cfg: ModelConfig) -> Node:
    """Multi-head set-attention pooling of ``x[index]`` segments defined by ``ptr``."""
    heads = range(cfg.h)
    w_k = nx.concat_cols([w(f"{prefix}W_k{i}") for i in heads])
    w_v = nx.concat_cols([w(f"{prefix}W_v{i}") for i in heads])
    w_q = nx.block_diag_columns([w(f"{prefix}W_q{i}") for i in heads])
    # project once per row of x, then gather per incidence
    scores = nx.affine(nx.matmul(nx.matmul(x, w_k), w_q), 1.0 / math.sqrt(cfg.d_h))
    values = nx.matmul(x, w_v)
    attn = nx.segment_softmax(nx.gather_rows(scores, index), ptr)
    pooled = nx.segment_weighted_sum(attn, nx.gather_rows(values, index), ptr)
    return nx.matmul(pooled, w(f"{prefix}W_o"))


def _block_segments(x: Node, index, ptr, w: Bound, prefix: str, cfg: ModelConfig) -> Node:
    y = _pool_segments(x, index, ptr, w, prefix, cfg)
    hidden = nx.add_bias(nx.matmul(y, w(f"{prefix}W_f1")), w(f"{prefix}b_1"))
    hidden = nx.relu(hidden) if cfg.activation == "relu" else nx.sigmoid(hidden)
    ffnn = nx.add_bias(nx.matmul(hidden, w(f"{prefix}W_f2")), w(f"{prefix}b_2"))
    return nx.layer_norm_rows(nx.add(y, ffnn), w(f"{prefix}ln_gain"), w(f"{prefix}ln_bias"), cfg.ln_eps)


def _single_set(x_set) -> tuple[Node, np.ndarray, np.ndarray]:
    x = x_set if isinstance(x_set, Node) else nx.constant(x_set)
    m = x.shape[0]
    if m == 0:
        raise EmptySet("cannot pool an empty set")
    return x, np.arange(m, dtype=np.int64), np.array([0, m], dtype=np.int64)


def attention_pool(x_set, store: ParamStore, cfg: ModelConfig, layer: int = 1, direction: str = "v2e",
                   tape: Tape | None = None) -> Node:
    """Pool one (m, d) set to a single d-vector with the given block's MHA weights."""
    x, index, ptr = _single_set(x_set)
    out = _pool_segments(x, index, ptr, Bound(store, tape), f"layer{layer}.{direction}.", cfg)
    return nx.reshape(out, (cfg.d,))


def block_forward(x_set, store: ParamStore, cfg: ModelConfig, layer: int = 1, direction: str = "v2e",
                  tape: Tape | None = None) -> Node:
    x, index, ptr = _single_set(x_set)
    out = _block_segments(x, index, ptr, Bound(store, tape), f"layer{layer}.{direction}.", cfg)
    return nx.reshape(out, (cfg.d,))


def layer_forward(graph: Hypergraph, x_prev: Node, w: Bound, layer: int, cfg: ModelConfig,
                  need_nodes: bool = True) -> tuple[Node, Node | None]:
    """One round: node sets -> edge embeddings, then edge sets -> node embeddings."""
    if x_prev.shape != (graph.num_nodes, cfg.d):
        raise ShapeMismatch(f"node embeddings {x_prev.shape} vs graph with {graph.num_nodes} nodes, d={cfg.d}")
    edges = _block_segments(x_prev, graph.edge_idx, graph.edge_ptr, w, f"layer{layer}.v2e.", cfg)
    if not need_nodes:
        return edges, None
    active = _block_segments(edges, graph.node_idx, graph.node_ptr, w, f"layer{layer}.e2v.", cfg)
    n_active = len(graph.active_nodes)
    if n_active == graph.num_nodes:
        return edges, active
    # isolated nodes carry their previous row forward
    rows = n_active + np.arange(graph.num_nodes, dtype=np.int64)
    rows[graph.active_nodes] = np.arange(n_active, dtype=np.int64)
    return edges, nx.gather_rows(nx.concat_rows([active, x_prev]), rows)


def model_logits(graph: Hypergraph, store: ParamStore, cfg: ModelConfig, edge_ids: Sequence[int],
                 tape: Tape | None = None) -> Node:
    w = Bound(store, tape)
    x = w("embedding")
    if x.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"embedding has {x.shape[0]} rows, graph has {graph.num_nodes} nodes")
    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    per_layer = []
    for layer in range(1, cfg.L + 1):
        edges, x = layer_forward(graph, x, w, layer, cfg, need_nodes=layer < cfg.L)
        per_layer.append(nx.gather_rows(edges, edge_ids))
    features = nx.concat_cols(per_layer) if len(per_layer) > 1 else per_layer[0]
    return nx.add_bias(nx.matmul(features, w("cls.W")), w("cls.b"))


def model_forward(graph: Hypergraph, store: ParamStore, cfg: ModelConfig, edge_ids: Sequence[int],
                  tape: Tape | None = None) -> Node:
    """Per-label probabilities, shape (len(edge_ids), T)."""
    return nx.sigmoid(model_logits(graph, store, cfg, edge_ids, tape))


def predict(graph: Hypergraph, store: ParamStore, cfg: ModelConfig, edge_ids: Sequence[int]) -> np.ndarray:
    return model_forward(graph, store, cfg, edge_ids).value


def bce_loss(pred: Node, labels) -> Node:
    """Mean binary cross-entropy over samples and labels, logs clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"bce_loss: predictions {pred.shape} vs labels {labels.shape}")
    log_p = nx.log_clamped(pred)
    log_not_p = nx.log_clamped(nx.affine(pred, -1.0, 1.0))
    ll = nx.add(nx.mul(labels, log_p), nx.mul(1.0 - labels, log_not_p))
    return nx.affine(nx.mean(ll), -1.0)


def _clamped_log(a: np.ndarray) -> np.ndarray:
    return np.log(np.where(a > nx.LOG_CLAMP, a, nx.LOG_CLAMP))


def bernoulli_kl(p: Node, q) -> Node:
    """Mean KL(Bernoulli(p) || Bernoulli(q)); ``q`` is a constant (no gradient)."""
    q = np.asarray(q.value if isinstance(q, Node) else q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"bernoulli_kl: {p.shape} vs {q.shape}")
    not_p = nx.affine(p, -1.0, 1.0)
    log_q = _clamped_log(q)
    log_not_q = _clamped_log(-1.0 * q + 1.0)
    kl = nx.add(nx.mul(p, nx.sub(nx.log_clamped(p), log_q)),
                nx.mul(not_p, nx.sub(nx.log_clamped(not_p), log_not_q)))
    return nx.mean(kl)
