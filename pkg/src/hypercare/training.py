"""Pretraining on basic features and group-reweighted, EMA-regularised finetuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cohort import Cohort
from .errors import EmptyGroup, InvalidConfig, ShapeMismatch, UninitializedState
from .hypergraph import Hypergraph, build_basic_graph, build_finetune_graph, build_inference_graph
from .metrics import safe_auroc
from .model import ModelConfig, bce_loss, bernoulli_kl, extend_embedding, init_params, model_forward, predict
from .numerics import ParamStore, Tape

log = logging.getLogger(__name__)

SEED_INIT, SEED_EXTEND, SEED_SUBSET = 1, 2, 3


def child_seed(seed: int, tag: int) -> int:
    """Independent 64-bit stream seed derived from the run seed."""
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), tag]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    iter_pretrain: int = 300
    iter_finetune: int = 200
    lr_pretrain: float = 1e-3
    lr_finetune: float = 2e-4
    weight_decay: float = 1e-3
    mu: float = 0.5
    beta: float = 0.5
    tau: float = 1.0
    finetune_basic_fraction: float = 0.2
    seed: int = 0
    enable_sr: bool = True
    enable_gr: bool = True

    def validate(self) -> None:
        if self.iter_pretrain < 0 or self.iter_finetune < 0:
            raise InvalidConfig("iteration counts must be >= 0")
        if self.lr_pretrain < 0 or self.lr_finetune < 0 or self.weight_decay < 0:
            raise InvalidConfig("learning rates and weight decay must be >= 0")
        if self.mu < 0:
            raise InvalidConfig("mu must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidConfig("beta must lie in [0, 1]")
        if not self.tau > 0:
            raise InvalidConfig("tau must be > 0")
        if not 0.0 < self.finetune_basic_fraction <= 1.0:
            raise InvalidConfig("finetune_basic_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser & smoothing


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState | None,
              lr: float, weight_decay: float) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place on ``params``.

    Parameter arrays are replaced, never mutated, so tapes built earlier stay valid.
    """
    if state is None or state.m.keys() != params.keys():
        raise UninitializedState("Adam state missing or does not match the parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, theta in params.items():
        g = grads[key]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{key}: gradient {g.shape} vs parameter {theta.shape}")
        theta = theta - lr * weight_decay * theta
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        state.m[key], state.v[key] = m, v
        params.values[key] = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    params: ParamStore
    beta: float

    @classmethod
    def from_params(cls, params: ParamStore, beta: float) -> "EmaState":
        return cls(params.copy(), beta)


def ema_update(ema: EmaState, params: ParamStore) -> EmaState:
    """theta_smooth <- (1 - beta) * theta + beta * theta_smooth."""
    if not ema.params.same_shapes(params):
        raise ShapeMismatch("EMA copy and parameters differ in keys or shapes")
    beta = ema.beta
    if beta == 0.0:
        return EmaState(params.copy(), beta)
    if beta == 1.0:
        return EmaState(ema.params.copy(), beta)
    smoothed = ParamStore({k: (1.0 - beta) * params[k] + beta * ema.params[k] for k in params.keys()})
    return EmaState(smoothed, beta)


# ---------------------------------------------------------------------------
# group losses, gradients and weights


@dataclass(frozen=True)
class GroupWeights:
    omega_b: float = 0.5
    omega_e: float = 0.5

    def as_array(self) -> np.ndarray:
        return np.array([self.omega_b, self.omega_e])


def finetune_group_loss(store: ParamStore, ema: EmaState | None, graph: Hypergraph, cfg: ModelConfig,
                        edges: Sequence[int], labels, mu: float, tape: Tape | None = None,
                        teacher: np.ndarray | None = None) -> nx.Node:
    """BCE on one group's edges plus ``mu`` times KL to the smoothed model's predictions."""
    if len(edges) == 0:
        raise EmptyGroup("group has no edges")
    pred = model_forward(graph, store, cfg, edges, tape)
    loss = bce_loss(pred, labels)
    if mu == 0.0 or ema is None:
        return loss
    if teacher is None:
        teacher = predict(graph, ema.params, cfg, edges)
    return nx.add(loss, nx.affine(bernoulli_kl(pred, teacher), mu))


def _group_losses(store, ema, graph, cfg, edges_b, labels_b, edges_e, labels_e, mu, tape):
    """Both group losses from a single shared forward pass."""
    if len(edges_b) == 0 or len(edges_e) == 0:
        raise EmptyGroup("both finetuning groups need at least one edge")
    edges = np.concatenate([np.asarray(edges_b, dtype=np.int64), np.asarray(edges_e, dtype=np.int64)])
    pred = model_forward(graph, store, cfg, edges, tape)
    use_kl = mu != 0.0 and ema is not None
    teacher = predict(graph, ema.params, cfg, edges) if use_kl else None
    n_b = len(edges_b)
    losses = []
    for sel, labels in ((np.arange(n_b), labels_b), (np.arange(n_b, len(edges)), labels_e)):
        p = nx.gather_rows(pred, sel)
        loss = bce_loss(p, labels)
        if use_kl:
            loss = nx.add(loss, nx.affine(bernoulli_kl(p, teacher[sel]), mu))
        losses.append(loss)
    return losses[0], losses[1]


def compute_group_gradients(store: ParamStore, ema: EmaState | None, graph: Hypergraph, cfg: ModelConfig,
                            edges_b, labels_b, edges_e, labels_e, mu: float):
    """Return ``(s_b, s_e, loss_b, loss_e)``; gradients flattened in store key order."""
    tape = Tape()
    loss_b, loss_e = _group_losses(store, ema, graph, cfg, edges_b, labels_b, edges_e, labels_e, mu, tape)
    keys = list(store.keys())
    s_b = nx.flatten(nx.backward(tape, loss_b, store), keys)
    s_e = nx.flatten(nx.backward(tape, loss_e, store), keys)
    return s_b, s_e, float(loss_b.value), float(loss_e.value)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.zeros_like(v)


def reweight_from_similarities(prev: GroupWeights, sims: Sequence[float], tau: float = 1.0) -> GroupWeights:
    """Multiplicative update ``omega_i ∝ prev_i * exp(sim_i / tau)`` in log space."""
    p = prev.as_array()
    a = np.asarray(sims, dtype=np.float64) / tau
    live = p > 0
    logits = np.full(2, -np.inf)
    logits[live] = np.log(p[live]) + a[live]
    w = np.exp(logits - logits[live].max())
    w = w / w.sum()
    return GroupWeights(float(w[0]), float(w[1]))


def reweight(prev: GroupWeights, s_b: np.ndarray, s_e: np.ndarray, tau: float = 1.0) -> GroupWeights:
    """Closed-form group weights from the KL-regularised loss-reduction objective.

    Each group gradient is scaled to unit length first, so the similarity of
    group ``i`` is ``<ŝ_i, ŝ_b + ŝ_e>`` and lies in [0, 2].
    """
    u_b, u_e = _unit(np.asarray(s_b, float)), _unit(np.asarray(s_e, float))
    if not u_b.any() and not u_e.any():
        return prev
    both = u_b + u_e
    return reweight_from_similarities(prev, (float(u_b @ both), float(u_e @ both)), tau)


def predicted_reduction(omega: GroupWeights, s_b: np.ndarray, s_e: np.ndarray, alpha: float) -> float:
    """First-order estimate of the summed group-loss change after one gradient step."""
    step_dir = omega.omega_b * np.asarray(s_b) + omega.omega_e * np.asarray(s_e)
    return float(-alpha * step_dir @ (np.asarray(s_b) + np.asarray(s_e)))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class PretrainResult:
    params: ParamStore
    losses: list[float]
    graph: Hypergraph


def pretrain(cohort: Cohort, cfg: ModelConfig, tcfg: TrainConfig) -> PretrainResult:
    """Full-batch BCE training on the basic-feature graph of all training visits."""
    cfg.validate()
    tcfg.validate()
    graph = build_basic_graph(cohort)
    by_id = cohort.by_id()
    labels = cohort.label_matrix([by_id[v] for v in graph.edge_visit_ids])
    edges = np.arange(graph.num_edges)
    params = init_params(cfg, graph.num_nodes, child_seed(tcfg.seed, SEED_INIT))
    state = AdamState.zeros_like(params)
    losses = []
    for it in range(tcfg.iter_pretrain):
        tape = Tape()
        loss = bce_loss(model_forward(graph, params, cfg, edges, tape), labels)
        grads = nx.backward(tape, loss, params)
        adam_step(params, grads, state, tcfg.lr_pretrain, tcfg.weight_decay)
        losses.append(float(loss.value))
        if it % 50 == 0:
            log.debug("pretrain iter %d loss %.5f", it, losses[-1])
    return PretrainResult(params, losses, graph)


def finetune_subset(cohort: Cohort, tcfg: TrainConfig) -> list[int]:
    """Seeded sample of the basic-only finetune visits available locally."""
    pool = sorted(v.visit_id for v in cohort.select(splits=("finetune_train",), groups=("basic_only",)))
    if not pool:
        raise EmptyGroup("no basic_only finetune_train visits")
    k = max(1, int(math.floor(tcfg.finetune_basic_fraction * len(pool) + 0.5)))
    rng = np.random.default_rng(child_seed(tcfg.seed, SEED_SUBSET))
    return sorted(int(v) for v in rng.choice(pool, size=k, replace=False))


def scenario_edges(graph: Hypergraph, cohort: Cohort, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Appended edges of ``split`` visits that carry extra features, with their labels.

    Both scenarios score this same set of visits: masked in ``basic``,
    complete in ``full``.
    """
    by_id = cohort.by_id()
    chosen = [e for e, vid in enumerate(graph.edge_visit_ids)
              if graph.predict_only[e] and by_id[vid].split == split and by_id[vid].group == "extra"]
    labels = cohort.label_matrix([by_id[graph.edge_visit_ids[e]] for e in chosen])
    return np.asarray(chosen, dtype=np.int64), labels


LEARNING_CURVE_COLUMNS = ("iter", "loss_b", "loss_e", "omega_b", "omega_e", "val_auroc_basic", "val_auroc_full")


@dataclass
class FinetuneResult:
    params: ParamStore
    final_params: ParamStore
    best_iter: int
    curve: list[dict]
    basic_subset: list[int]
    graph: Hypergraph
    weights: list[GroupWeights] = field(default_factory=list)


def prepare_finetune(pretrained: ParamStore, cohort: Cohort, tcfg: TrainConfig):
    """Finetuning start point: extended parameters, graph and the basic subset."""
    subset = finetune_subset(cohort, tcfg)
    graph = build_finetune_graph(cohort, subset)
    params = extend_embedding(pretrained, graph.num_nodes, child_seed(tcfg.seed, SEED_EXTEND))
    return params, graph, subset


def finetune(pretrained: ParamStore, cohort: Cohort, cfg: ModelConfig, tcfg: TrainConfig) -> FinetuneResult:
    cfg.validate()
    tcfg.validate()
    params, graph, subset = prepare_finetune(pretrained, cohort, tcfg)
    by_id = cohort.by_id()
    subset_ids = set(subset)
    edges_b = np.array([e for e, v in enumerate(graph.edge_visit_ids) if v in subset_ids], dtype=np.int64)
    edges_e = np.array([e for e, v in enumerate(graph.edge_visit_ids) if v not in subset_ids], dtype=np.int64)
    labels_b = cohort.label_matrix([by_id[graph.edge_visit_ids[e]] for e in edges_b])
    labels_e = cohort.label_matrix([by_id[graph.edge_visit_ids[e]] for e in edges_e])

    val = {}
    for scenario in ("basic", "full"):
        g = build_inference_graph(graph, cohort, "validation", scenario)
        val[scenario] = (g, *scenario_edges(g, cohort, "validation"))

    mu = tcfg.mu if tcfg.enable_sr else 0.0
    ema = EmaState.from_params(params, tcfg.beta) if tcfg.enable_sr else None
    omega = GroupWeights(0.5, 0.5)
    state = AdamState.zeros_like(params)
    keys = list(params.keys())
    curve, weights = [], []
    best, best_iter, best_params = -math.inf, -1, params.copy()

    for it in range(1, tcfg.iter_finetune + 1):
        s_b, s_e, loss_b, loss_e = compute_group_gradients(
            params, ema, graph, cfg, edges_b, labels_b, edges_e, labels_e, mu)
        if tcfg.enable_gr:
            omega = reweight(omega, s_b, s_e, tcfg.tau)
        flat = omega.omega_b * s_b + omega.omega_e * s_e
        grads, offset = {}, 0
        for key in keys:
            size = params[key].size
            grads[key] = flat[offset:offset + size].reshape(params[key].shape)
            offset += size
        adam_step(params, grads, state, tcfg.lr_finetune, tcfg.weight_decay)
        if ema is not None:
            ema = ema_update(ema, params)

        scores = {}
        for scenario, (g, e_ids, y) in val.items():
            scores[scenario] = safe_auroc(predict(g, params, cfg, e_ids), y)
        curve.append({"iter": it, "loss_b": loss_b, "loss_e": loss_e, "omega_b": omega.omega_b,
                      "omega_e": omega.omega_e, "val_auroc_basic": scores["basic"], "val_auroc_full": scores["full"]})
        weights.append(omega)
        sel = 0.5 * (scores["basic"] + scores["full"])
        if sel > best:
            best, best_iter, best_params = sel, it, params.copy()

    if best_iter < 0:
        best_params = params.copy()
    return FinetuneResult(best_params, params, best_iter, curve, subset, graph, weights)
