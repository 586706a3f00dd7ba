"""Run configuration, the canonical tiny instance and the staged pipeline.

Stages read and write fixed file names inside one output directory, so the
CLI subcommands can be run one at a time or chained by ``run_all``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import os
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cohort import Cohort, SyntheticConfig, cohort_stats, generate_synthetic, load_cohort, save_cohort
from .errors import ConfigError, HypercareError, InvalidValue, MissingRequired, UnknownKey
from .evaluation import (
    ABLATION_CELLS,
    SCENARIOS,
    MetricsTable,
    config_hash,
    emit_report,
    evaluate_lr,
    evaluate_scenarios,
    train_logistic_regression,
    write_learning_curve,
)
from .hypergraph import Hypergraph, build_finetune_graph
from .model import ModelConfig, bce_loss, init_params, model_forward, predict
from .numerics import ParamStore, Tape
from .training import (
    EmaState,
    GroupWeights,
    TrainConfig,
    child_seed,
    compute_group_gradients,
    finetune,
    finetune_group_loss,
    predicted_reduction,
    prepare_finetune,
    pretrain,
)

DEFAULT_OUT = "hypercare_out"
OUT_ENV = "HYPERCARE_OUT"

# artifact names inside the output directory
RESOLVED_CONFIG = "config.resolved.json"
COHORT_FILE = "cohort.jsonl"
PRETRAIN_CKPT = "pretrain.ckpt"
PRETRAIN_LOG = "pretrain_loss.csv"
FINETUNE_CKPT = "finetune.ckpt"
LEARNING_CURVE = "learning_curve.csv"
REPORT = "report"
ABLATION_REPORT = "ablation_report"
ABLATION_DIR = "ablation"

GRAD_TOL = 1e-4


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    cohort_path: str | None = None
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = DEFAULT_OUT
    scenarios: tuple[str, ...] = SCENARIOS
    ablation: bool = False
    baselines: bool = True

    def validate(self) -> None:
        if (self.cohort_path is None) == (self.synthetic is None):
            raise InvalidValue("cohort: give exactly one of 'path' and 'synthetic'")
        bad = [s for s in self.scenarios if s not in SCENARIOS]
        if bad or not self.scenarios:
            raise InvalidValue(f"scenarios: expected a non-empty subset of {list(SCENARIOS)}, got {list(self.scenarios)}")
        for path, sub in (("cohort.synthetic", self.synthetic), ("model", self.model), ("train", self.train)):
            if sub is None:
                continue
            try:
                sub.validate()
            except HypercareError as exc:
                raise InvalidValue(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        cohort = {"path": self.cohort_path} if self.cohort_path is not None else {
            "synthetic": _section_dict(self.synthetic)}
        return {
            "seed": self.seed,
            "cohort": cohort,
            "model": _section_dict(self.model),
            "train": _section_dict(self.train),
            "out": self.out,
            "scenarios": list(self.scenarios),
            "ablation": self.ablation,
            "baselines": self.baselines,
        }

    def identity(self) -> str:
        """Hash of everything that influences results (the output path does not)."""
        doc = self.to_dict()
        doc.pop("out")
        return config_hash(doc)


# nested seeds are always taken from the single top-level seed
_SEEDED = (SyntheticConfig, TrainConfig)


def _section_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    if isinstance(obj, _SEEDED):
        d.pop("seed")
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif origin is tuple:
        if isinstance(value, list):
            args = typing.get_args(hint)
            inner = args[0]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
            if len(value) == len(args):
                return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    else:
        raise TypeError(f"unsupported config field type {hint!r}")
    raise InvalidValue(f"{path}: expected {getattr(hint, '__name__', hint)}, got {json.dumps(value)}")


def _build_section(cls, doc, path: str, seed: int | None = None):
    if not isinstance(doc, dict):
        raise InvalidValue(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)}
    if cls in _SEEDED:
        allowed.discard("seed")
    kwargs = {}
    for key, value in doc.items():
        if key not in allowed:
            raise UnknownKey(f"unknown key {path}.{key}" if path else f"unknown key {key}")
        kwargs[key] = _coerce(value, hints[key], f"{path}.{key}")
    if seed is not None:
        kwargs["seed"] = seed
    return cls(**kwargs)


_TOP_KEYS = ("seed", "cohort", "model", "train", "out", "scenarios", "ablation", "baselines")


def config_from_dict(doc) -> RunConfig:
    """Strictly parse a config object; every absent field takes its default."""
    if not isinstance(doc, dict):
        raise InvalidValue("config: top level must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise UnknownKey(f"unknown key {key}")
    seed = _coerce(doc.get("seed", 0), int, "seed")
    if seed < 0:
        raise InvalidValue("seed: must be >= 0")
    cohort_path, synthetic = None, SyntheticConfig(seed=seed)
    if "cohort" in doc:
        c = doc["cohort"]
        if not isinstance(c, dict):
            raise InvalidValue("cohort: expected an object")
        for key in c:
            if key not in ("path", "synthetic"):
                raise UnknownKey(f"unknown key cohort.{key}")
        if not c:
            raise MissingRequired("cohort: needs 'path' or 'synthetic'")
        if "path" in c and "synthetic" in c:
            raise InvalidValue("cohort: give exactly one of 'path' and 'synthetic'")
        if "path" in c:
            cohort_path, synthetic = _coerce(c["path"], str, "cohort.path"), None
        else:
            synthetic = _build_section(SyntheticConfig, c["synthetic"], "cohort.synthetic", seed)
    cfg = RunConfig(
        seed=seed,
        cohort_path=cohort_path,
        synthetic=synthetic,
        model=_build_section(ModelConfig, doc.get("model", {}), "model"),
        train=_build_section(TrainConfig, doc.get("train", {}), "train", seed),
        out=_coerce(doc.get("out", DEFAULT_OUT), str, "out"),
        scenarios=_coerce(doc.get("scenarios", list(SCENARIOS)), tuple[str, ...], "scenarios"),
        ablation=_coerce(doc.get("ablation", False), bool, "ablation"),
        baselines=_coerce(doc.get("baselines", True), bool, "baselines"),
    )
    cfg.validate()
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is JSON, else a bare string."""
    if "=" not in assignment:
        raise InvalidValue(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if not all(parts):
        raise InvalidValue(f"--set: malformed key {dotted!r}")
    node = doc
    for i, part in enumerate(parts[:-1]):
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise InvalidValue(f"--set: {'.'.join(parts[:i + 1])} is not an object")
        node = nxt
    node[parts[-1]] = _parse_value(raw)
    return doc


def parse_config(path=None, overrides=(), out: str | None = None, seed: int | None = None,
                 environ=None) -> RunConfig:
    """Resolve a RunConfig from an optional JSON file, ``--set`` overrides and flags.

    Precedence, lowest first: file, overrides, ``--seed``/``--out`` flags, then
    the output directory from the environment.
    """
    environ = os.environ if environ is None else environ
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidValue(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidValue("config: top level must be a JSON object")
    doc = copy.deepcopy(doc)
    for assignment in overrides:
        apply_override(doc, assignment)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    if environ.get(OUT_ENV):
        doc["out"] = environ[OUT_ENV]
    return config_from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# canonical tiny instance


TINY_EDGES = ((0, 1, 2), (1, 3), (2, 4, 5), (0, 3, 5))
TINY_LABELS = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
TINY_CONFIG = ModelConfig(d=8, h=2, L=2, d_m=16, T=2)


@dataclass
class TinyInstance:
    graph: Hypergraph
    params: ParamStore
    cfg: ModelConfig
    labels: np.ndarray
    edges: np.ndarray


TINY_KINK_MARGIN = 1e-4


def relu_margin(graph: Hypergraph, params: ParamStore, cfg: ModelConfig, edges) -> float:
    """Smallest |input| over every relu evaluated in one forward pass."""
    tape = Tape()
    model_forward(graph, params, cfg, edges, tape)
    inputs = [rec[2][0].value for rec in tape.records if rec[0] == "relu"]
    return min(float(np.abs(v).min()) for v in inputs) if inputs else float("inf")


def tiny_instance(seed: int = 0, max_tries: int = 100) -> TinyInstance:
    """Six codes, four visits, d=8, h=2, L=2, two labels.

    Parameters come from the first seeded draw whose relu inputs all stay
    ``TINY_KINK_MARGIN`` away from zero, so finite differences never straddle
    a kink.
    """
    graph = Hypergraph.from_edges(6, TINY_EDGES, list(range(len(TINY_EDGES))))
    edges = np.arange(graph.num_edges)
    for k in range(max_tries):
        params = init_params(TINY_CONFIG, graph.num_nodes, child_seed(seed, 100 + k))
        if relu_margin(graph, params, TINY_CONFIG, edges) >= TINY_KINK_MARGIN:
            return TinyInstance(graph, params, TINY_CONFIG, TINY_LABELS.copy(), edges)
    raise HypercareError(f"no smooth tiny instance within {max_tries} draws for seed {seed}")


def grad_check(seed: int = 0, eps: float = 1e-5, report: dict | None = None) -> float:
    """Max relative error of bce(model_forward) gradients on the tiny instance, all coordinates.

    ``seed=0`` is the canonical instance.
    """
    inst = tiny_instance(seed)

    def loss_fn(params: ParamStore, tape: Tape):
        return bce_loss(model_forward(inst.graph, params, inst.cfg, inst.edges, tape), inst.labels)

    return nx.finite_diff_check(loss_fn, inst.params, eps=eps, sample=inst.params.size, report=report)


TINY_GROUPS = (np.array([0, 1]), np.array([2, 3]))


def taylor_errors(seed: int, alpha: float, mu: float = 0.5) -> tuple[float, float]:
    """``(predicted, actual)`` change in ``l_b + l_e`` after one reweighted step of size ``alpha``.

    Groups are the first and last two tiny visits, weights (0.5, 0.5), and the
    smoothed teacher is a frozen copy of the starting point.
    """
    inst = tiny_instance(seed)
    (eb, ee), y = TINY_GROUPS, inst.labels
    ema = EmaState.from_params(inst.params, 0.5)
    teacher = {k: predict(inst.graph, ema.params, inst.cfg, e) for k, e in (("b", eb), ("e", ee))}

    def total_loss(params: ParamStore) -> float:
        lb = finetune_group_loss(params, ema, inst.graph, inst.cfg, eb, y[eb], mu, teacher=teacher["b"])
        le = finetune_group_loss(params, ema, inst.graph, inst.cfg, ee, y[ee], mu, teacher=teacher["e"])
        return float(lb.value) + float(le.value)

    s_b, s_e, _, _ = compute_group_gradients(inst.params, ema, inst.graph, inst.cfg, eb, y[eb], ee, y[ee], mu)
    omega = GroupWeights(0.5, 0.5)
    moved = inst.params.copy()
    moved.load_flat(inst.params.flat() - alpha * (omega.omega_b * s_b + omega.omega_e * s_e))
    return predicted_reduction(omega, s_b, s_e, alpha), total_loss(moved) - total_loss(inst.params)


def taylor_ratio(alpha: float, seeds=range(10)) -> float:
    """Mean over seeds of err(alpha/2) / err(alpha); first-order accuracy gives about 0.25."""
    ratios = []
    for seed in seeds:
        errs = [abs(p - a) for p, a in (taylor_errors(seed, a_) for a_ in (alpha, alpha / 2))]
        ratios.append(errs[1] / errs[0])
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# pipeline stages


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HypercareError(f"output directory {path} is not writable: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise HypercareError(f"output directory {path} is not writable")
    return path


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.identity(), "seed": cfg.seed, "model_config": cfg.model.to_dict(), **extra}


def write_resolved_config(cfg: RunConfig) -> Path:
    path = out_dir(cfg) / RESOLVED_CONFIG
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def load_run_cohort(cfg: RunConfig) -> Cohort:
    if cfg.cohort_path is not None:
        return load_cohort(cfg.cohort_path)
    return generate_synthetic(cfg.synthetic)


def stage_generate(cfg: RunConfig) -> dict:
    """Write the resolved config and (for synthetic sources) the cohort file."""
    write_resolved_config(cfg)
    cohort = load_run_cohort(cfg)
    if cfg.synthetic is not None:
        save_cohort(cohort, out_dir(cfg) / COHORT_FILE)
    return cohort_stats(cohort)


def _write_loss_log(losses, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("iter", "loss"))
    for i, loss in enumerate(losses, start=1):
        writer.writerow((i, repr(float(loss))))
    path.write_text(buf.getvalue(), encoding="utf-8")


def stage_pretrain(cfg: RunConfig, cohort: Cohort | None = None):
    cohort = load_run_cohort(cfg) if cohort is None else cohort
    result = pretrain(cohort, cfg.model, cfg.train)
    out = out_dir(cfg)
    nx.save_checkpoint(out / PRETRAIN_CKPT, result.params, _meta(cfg, stage="pretrain"))
    _write_loss_log(result.losses, out / PRETRAIN_LOG)
    return result


def _load_stage_checkpoint(cfg: RunConfig, name: str) -> tuple[ParamStore, dict]:
    path = Path(cfg.out) / name
    if not path.exists():
        raise HypercareError(f"missing {path}; run the earlier stage first")
    store, meta = nx.load_checkpoint(path)
    if meta.get("config_hash") != cfg.identity():
        raise HypercareError(f"{path} was produced by a different configuration")
    return store, meta


def stage_finetune(cfg: RunConfig, cohort: Cohort | None = None, pretrained: ParamStore | None = None,
                   train: TrainConfig | None = None, directory: Path | None = None):
    cohort = load_run_cohort(cfg) if cohort is None else cohort
    if pretrained is None:
        pretrained, _ = _load_stage_checkpoint(cfg, PRETRAIN_CKPT)
    train = cfg.train if train is None else train
    result = finetune(pretrained, cohort, cfg.model, train)
    out = out_dir(cfg) if directory is None else directory
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, stage="finetune", best_iter=result.best_iter, basic_subset=result.basic_subset,
                 enable_sr=train.enable_sr, enable_gr=train.enable_gr)
    nx.save_checkpoint(out / FINETUNE_CKPT, result.params, meta)
    write_learning_curve(result.curve, out / LEARNING_CURVE)
    return result


def evaluate_tables(cfg: RunConfig, cohort: Cohort, finetuned: ParamStore, pretrained: ParamStore,
                    basic_subset, split: str = "test") -> list[MetricsTable]:
    """Finetuned model, pretrained checkpoint and (optionally) the linear baselines."""
    h = cfg.identity()
    base = build_finetune_graph(cohort, basic_subset)
    tables = [evaluate_scenarios(finetuned, cohort, cfg.model, split, base=base, model="hypercare",
                                 seed=cfg.seed, cfg_hash=h)]
    # the finetuning start point: same extra-code rows, no finetuning steps
    extended = prepare_finetune(pretrained, cohort, cfg.train)[0]
    tables.append(evaluate_scenarios(extended, cohort, cfg.model, split, base=base, model="pretrained",
                                     seed=cfg.seed, cfg_hash=h))
    if cfg.baselines:
        for mode in ("basic", "full", "both"):
            lr = train_logistic_regression(cohort, mode)
            tables.append(evaluate_lr(lr, cohort, split, seed=cfg.seed, cfg_hash=h))
    return tables


def _report_meta(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.identity(), "seed": cfg.seed, "scenarios": list(cfg.scenarios),
            "split": "test", "protocol": "extra-group test visits, extra codes masked (basic) or kept (full)",
            **extra}


def _filter_scenarios(paths, cfg: RunConfig):
    """Drop report rows for scenarios the config did not request."""
    if set(cfg.scenarios) == set(SCENARIOS):
        return paths
    csv_path, json_path = paths
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    col = header.index("scenario")
    kept = [lines[0]] + [ln for ln in lines[1:] if ln.split(",")[col] in cfg.scenarios]
    csv_path.write_text("\n".join(kept) + "\n", encoding="utf-8")
    doc = json.loads(json_path.read_text(encoding="utf-8"))
    doc["rows"] = [r for r in doc["rows"] if r["scenario"] in cfg.scenarios]
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def stage_evaluate(cfg: RunConfig, cohort: Cohort | None = None) -> tuple[Path, Path]:
    cohort = load_run_cohort(cfg) if cohort is None else cohort
    finetuned, meta = _load_stage_checkpoint(cfg, FINETUNE_CKPT)
    pretrained, _ = _load_stage_checkpoint(cfg, PRETRAIN_CKPT)
    tables = evaluate_tables(cfg, cohort, finetuned, pretrained, meta["basic_subset"])
    paths = emit_report(tables, out_dir(cfg) / REPORT, _report_meta(cfg, best_iter=meta["best_iter"]))
    return _filter_scenarios(paths, cfg)


def stage_ablate(cfg: RunConfig, cohort: Cohort | None = None, pretrained: ParamStore | None = None,
                 reuse: dict | None = None) -> tuple[Path, Path]:
    """Finetune the four {+-SR, +-GR} cells from one pretrained checkpoint and report them together.

    ``reuse`` maps a cell name to an already finished FinetuneResult.
    """
    cohort = load_run_cohort(cfg) if cohort is None else cohort
    if pretrained is None:
        pretrained, _ = _load_stage_checkpoint(cfg, PRETRAIN_CKPT)
    reuse = reuse or {}
    h = cfg.identity()
    tables = []
    for cell, (sr, gr) in ABLATION_CELLS.items():
        train = replace(cfg.train, enable_sr=sr, enable_gr=gr)
        result = reuse.get(cell)
        directory = out_dir(cfg) / ABLATION_DIR / cell.replace("+", "_")
        if result is None:
            result = stage_finetune(cfg, cohort, pretrained, train, directory)
        tables.append(evaluate_scenarios(result.params, cohort, cfg.model, "test", base=result.graph,
                                         model=cell, seed=cfg.seed, cfg_hash=h))
    paths = emit_report(tables, out_dir(cfg) / ABLATION_REPORT, _report_meta(cfg))
    return _filter_scenarios(paths, cfg)


def run_all(cfg: RunConfig) -> dict[str, Path]:
    """generate -> pretrain -> finetune -> evaluate (-> ablate); returns the written artifacts."""
    out = out_dir(cfg)
    stage_generate(cfg)
    cohort = load_run_cohort(cfg)
    pre = stage_pretrain(cfg, cohort)
    ft = stage_finetune(cfg, cohort, pre.params)
    report_csv, report_json = stage_evaluate(cfg, cohort)
    artifacts = {
        "config": out / RESOLVED_CONFIG,
        "pretrain_checkpoint": out / PRETRAIN_CKPT,
        "pretrain_loss": out / PRETRAIN_LOG,
        "finetune_checkpoint": out / FINETUNE_CKPT,
        "learning_curve": out / LEARNING_CURVE,
        "report_csv": report_csv,
        "report_json": report_json,
    }
    if cfg.synthetic is not None:
        artifacts["cohort"] = out / COHORT_FILE
    if cfg.ablation:
        main_cell = next(c for c, flags in ABLATION_CELLS.items()
                         if flags == (cfg.train.enable_sr, cfg.train.enable_gr))
        a_csv, a_json = stage_ablate(cfg, cohort, pre.params, reuse={main_cell: ft})
        artifacts["ablation_csv"], artifacts["ablation_json"] = a_csv, a_json
    return artifacts
