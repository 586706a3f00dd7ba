"""Two-scenario evaluation, the logistic-regression baseline and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import TRAIN_SPLITS, Cohort, Visit
from .errors import EmptyTrainingSet
from .hypergraph import Hypergraph, build_finetune_graph, build_inference_graph
from .metrics import accuracy, aupr_macro, auroc_macro
from .model import ModelConfig, predict
from .numerics import ParamStore
from .training import LEARNING_CURVE_COLUMNS, scenario_edges

SCENARIOS = ("basic", "full")
METRICS = ("acc", "auroc_macro", "aupr_macro")
REPORT_COLUMNS = ("model", "scenario", "acc", "auroc_macro", "aupr_macro", "seed", "config_hash")
# fixed conventions, echoed into report metadata
ACC_THRESHOLD = 0.5
ACC_REDUCTION = "macro over labels"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class MetricsTable:
    model: str
    seed: int
    config_hash: str
    scores: dict[str, dict[str, float]]
    n_visits: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(SCENARIOS) - set(self.scores)
        if missing:
            raise ValueError(f"metrics table lacks scenarios {sorted(missing)}")

    def rows(self) -> list[dict]:
        return [{"model": self.model, "scenario": s, **{m: self.scores[s][m] for m in METRICS},
                 "seed": self.seed, "config_hash": self.config_hash} for s in SCENARIOS]


def score_all(pred: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    return {"acc": accuracy(pred, labels, ACC_THRESHOLD),
            "auroc_macro": auroc_macro(pred, labels),
            "aupr_macro": aupr_macro(pred, labels)}


def scenario_predictions(params: ParamStore, cohort: Cohort, cfg: ModelConfig, split: str,
                         base: Hypergraph) -> dict[str, tuple[np.ndarray, np.ndarray, list[int]]]:
    """Predictions for the extra-group ``split`` visits under both scenarios."""
    out = {}
    for scenario in SCENARIOS:
        graph = build_inference_graph(base, cohort, split, scenario)
        edges, labels = scenario_edges(graph, cohort, split)
        ids = [graph.edge_visit_ids[e] for e in edges]
        out[scenario] = (predict(graph, params, cfg, edges), labels, ids)
    return out


def evaluate_scenarios(params: ParamStore, cohort: Cohort, cfg: ModelConfig, split: str,
                       base: Hypergraph | None = None, basic_subset: Iterable[int] | None = None,
                       model: str = "hypercare", seed: int = 0, cfg_hash: str = "") -> MetricsTable:
    """Score the same visits with extra codes masked (``basic``) and kept (``full``).

    ``base`` is the finetuning graph; pass ``basic_subset`` instead to rebuild it.
    """
    if base is None:
        if basic_subset is None:
            raise ValueError("need the finetune base graph or the basic subset that built it")
        base = build_finetune_graph(cohort, basic_subset)
    preds = scenario_predictions(params, cohort, cfg, split, base)
    scores = {s: score_all(p, y) for s, (p, y, _) in preds.items()}
    n = len(preds["basic"][2])
    assert preds["basic"][2] == preds["full"][2]
    return MetricsTable(model, seed, cfg_hash, scores, n)


# ---------------------------------------------------------------------------
# logistic-regression baseline


@dataclass
class LinearModel:
    mode: str
    weights: np.ndarray
    bias: np.ndarray
    n_basic: int
    n_codes: int


def multi_hot(visits: Sequence[Visit], width: int, n_basic: int, keep_extra: bool) -> np.ndarray:
    x = np.zeros((len(visits), width))
    for i, v in enumerate(visits):
        cols = [c for c in v.codes if c < width and (keep_extra or c < n_basic)]
        x[i, cols] = 1.0
    return x


def train_logistic_regression(cohort: Cohort, mode: str, l2: float = 1e-3, iters: int = 500,
                              lr: float = 0.5) -> LinearModel:
    """Per-label logistic regression by full-batch gradient descent from zero weights.

    ``basic``: basic views of all training visits.  ``full``: extra-group
    training visits with every code.  ``both``: all training visits, with the
    extra columns of basic-only visits left at zero.
    """
    if mode not in ("basic", "full", "both"):
        raise ValueError(f"unknown mode {mode!r}")
    groups = ("extra",) if mode == "full" else ("basic_only", "extra")
    visits = cohort.select(splits=TRAIN_SPLITS, groups=groups)
    if not visits:
        raise EmptyTrainingSet(f"no training visits for mode {mode!r}")
    width = cohort.n_basic if mode == "basic" else cohort.num_codes
    x = multi_hot(visits, width, cohort.n_basic, keep_extra=mode != "basic")
    y = cohort.label_matrix(visits)
    n = len(visits)
    w = np.zeros((width, cohort.num_labels))
    b = np.zeros(cohort.num_labels)
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        r = (p - y) / n
        w = w - lr * (x.T @ r + l2 * w)
        b = b - lr * r.sum(axis=0)
    return LinearModel(mode, w, b, cohort.n_basic, cohort.num_codes)


def predict_lr(model: LinearModel, visits: Sequence[Visit], scenario: str) -> np.ndarray:
    width = model.weights.shape[0]
    x = multi_hot(visits, width, model.n_basic, keep_extra=scenario == "full")
    return 1.0 / (1.0 + np.exp(-(x @ model.weights + model.bias)))


def evaluate_lr(model: LinearModel, cohort: Cohort, split: str, seed: int = 0, cfg_hash: str = "") -> MetricsTable:
    visits = cohort.select(splits=(split,), groups=("extra",))
    y = cohort.label_matrix(visits)
    scores = {s: score_all(predict_lr(model, visits, s), y) for s in SCENARIOS}
    return MetricsTable(f"lr_{model.mode}", seed, cfg_hash, scores, len(visits))


# ---------------------------------------------------------------------------
# reports


ABLATION_CELLS = {"sr+gr": (True, True), "sr-only": (True, False), "gr-only": (False, True), "vanilla": (False, False)}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def report_rows(tables: Sequence[MetricsTable]) -> list[dict]:
    return [row for t in tables for row in t.rows()]


def emit_report(tables: Sequence[MetricsTable], path, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and its JSON mirror ``<path>.json``; returns both paths."""
    if not tables:
        raise ValueError("no metrics tables to report")
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    rows = report_rows(tables)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    doc = {
        "columns": list(REPORT_COLUMNS),
        "rows": rows,
        "meta": {"acc_threshold": ACC_THRESHOLD, "acc_reduction": ACC_REDUCTION,
                 "aupr": "step-wise average precision", **(meta or {})},
    }
    names = {t.model for t in tables}
    if set(ABLATION_CELLS) <= names:
        doc["ablation_grid"] = {
            cell: {"enable_sr": sr, "enable_gr": gr,
                   **{s: next(t.scores[s] for t in tables if t.model == cell) for s in SCENARIOS}}
            for cell, (sr, gr) in ABLATION_CELLS.items()
        }
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    try:
        csv_path.write_text(buf.getvalue(), encoding="utf-8")
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot write report: {exc}") from exc
    return csv_path, json_path


def write_learning_curve(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LEARNING_CURVE_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in LEARNING_CURVE_COLUMNS])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path
