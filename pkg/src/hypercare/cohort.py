"""Visit/code data model, JSON-Lines cohort files and the synthetic generator.

A cohort is a list of visits over a vocabulary of medical codes.  Codes are
split into two tiers: ``basic`` codes are recorded for everybody, ``extra``
codes only for the visits of a local institute (``group == "extra"``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigMismatch,
    CohortError,
    EmptyAfterMask,
    EmptyCohort,
    InfeasibleConfig,
    MalformedRecord,
    RaggedLabels,
    UnknownCode,
)

FORMAT_TAG = "hypercare-cohort-v1"

TIERS = ("basic", "extra")
GROUPS = ("basic_only", "extra")
SPLITS = ("pretrain_train", "finetune_train", "validation", "test")
TRAIN_SPLITS = ("pretrain_train", "finetune_train")


@dataclass(frozen=True)
class MedicalCode:
    code_id: int
    name: str
    tier: str


@dataclass(frozen=True)
class Visit:
    visit_id: int
    codes: tuple[int, ...]
    labels: tuple[int, ...]
    group: str
    split: str

    def __post_init__(self):
        if not self.codes:
            raise CohortError(f"visit {self.visit_id}: empty code set")
        if len(set(self.codes)) != len(self.codes):
            raise CohortError(f"visit {self.visit_id}: duplicate codes")
        if any(lab not in (0, 1) for lab in self.labels):
            raise CohortError(f"visit {self.visit_id}: labels must be 0/1")
        if not self.labels:
            raise CohortError(f"visit {self.visit_id}: at least one label required")
        if self.group not in GROUPS:
            raise CohortError(f"visit {self.visit_id}: bad group {self.group!r}")
        if self.split not in SPLITS:
            raise CohortError(f"visit {self.visit_id}: bad split {self.split!r}")


@dataclass(frozen=True)
class Cohort:
    codes: tuple[MedicalCode, ...]
    visits: tuple[Visit, ...]
    num_labels: int

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        object.__setattr__(self, "visits", tuple(self.visits))
        for i, c in enumerate(self.codes):
            if c.code_id != i:
                raise CohortError(f"code ids must be contiguous from 0; got {c.code_id} at {i}")
            if c.tier not in TIERS:
                raise CohortError(f"code {c.code_id}: bad tier {c.tier!r}")
        tiers = [c.tier for c in self.codes]
        if "extra" in tiers and "basic" in tiers[tiers.index("extra"):]:
            raise CohortError("basic-tier codes must precede every extra-tier code")
        n_basic = self.n_basic
        seen = set()
        for v in self.visits:
            if v.visit_id in seen:
                raise CohortError(f"duplicate visit_id {v.visit_id}")
            seen.add(v.visit_id)
            if len(v.labels) != self.num_labels:
                raise RaggedLabels(f"visit {v.visit_id}: expected {self.num_labels} labels")
            for c in v.codes:
                if not 0 <= c < len(self.codes):
                    raise UnknownCode(f"visit {v.visit_id}: unknown code {c}")
            if v.group == "basic_only" and any(c >= n_basic for c in v.codes):
                raise CohortError(f"visit {v.visit_id}: basic_only visit carries extra codes")
        if self.n_extra and not any(v.group == "extra" for v in self.visits):
            raise CohortError("extra-tier codes exist but no visit is in the extra group")

    @property
    def n_basic(self) -> int:
        return sum(c.tier == "basic" for c in self.codes)

    @property
    def n_extra(self) -> int:
        return len(self.codes) - self.n_basic

    @property
    def num_codes(self) -> int:
        return len(self.codes)

    def select(self, splits: Iterable[str] = SPLITS, groups: Iterable[str] = GROUPS) -> list[Visit]:
        splits, groups = set(splits), set(groups)
        return [v for v in self.visits if v.split in splits and v.group in groups]

    def by_id(self) -> dict[int, Visit]:
        return {v.visit_id: v for v in self.visits}

    def label_matrix(self, visits: Sequence[Visit]) -> np.ndarray:
        return np.array([v.labels for v in visits], dtype=np.float64).reshape(len(visits), self.num_labels)


# ---------------------------------------------------------------------------
# file format


def _header(cohort: Cohort) -> dict:
    return {
        "format": FORMAT_TAG,
        "num_labels": cohort.num_labels,
        "codes": [{"id": c.code_id, "name": c.name, "tier": c.tier} for c in cohort.codes],
    }


def _visit_record(v: Visit) -> dict:
    return {
        "visit_id": v.visit_id,
        "codes": list(v.codes),
        "labels": list(v.labels),
        "group": v.group,
        "split": v.split,
    }


def dumps_cohort(cohort: Cohort) -> str:
    lines = [json.dumps(_header(cohort), separators=(",", ":"))]
    lines += [json.dumps(_visit_record(v), separators=(",", ":")) for v in cohort.visits]
    return "\n".join(lines) + "\n"


def save_cohort(cohort: Cohort, path) -> Path:
    path = Path(path)
    path.write_text(dumps_cohort(cohort), encoding="utf-8")
    return path


def load_cohort(path) -> Cohort:
    """Read a JSON-Lines cohort file.

    The first non-blank line is the header carrying the code vocabulary; every
    following line is one visit.  Errors name the offending line number.
    """
    with open(path, encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(raw_lines) if ln.strip()]
    if not numbered:
        raise MalformedRecord("line 1: missing header record")

    lineno, text = numbered[0]
    try:
        header = json.loads(text)
        if header.get("format") != FORMAT_TAG:
            raise ValueError(f"format tag must be {FORMAT_TAG!r}")
        codes = tuple(
            MedicalCode(int(c["id"]), str(c["name"]), str(c["tier"])) for c in header["codes"]
        )
        declared_t = header.get("num_labels")
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedRecord(f"line {lineno}: bad header: {exc}") from exc
    code_ids = {c.code_id for c in codes}

    visits = []
    num_labels = None
    for lineno, text in numbered[1:]:
        try:
            rec = json.loads(text)
            vid = int(rec["visit_id"])
            vcodes = [int(c) for c in rec["codes"]]
            labels = tuple(int(y) for y in rec["labels"])
            group, split = str(rec["group"]), str(rec["split"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedRecord(f"line {lineno}: {exc}") from exc
        for c in vcodes:
            if c not in code_ids:
                raise UnknownCode(f"line {lineno}: visit {vid} references unknown code {c}")
        if num_labels is None:
            num_labels = len(labels)
        elif len(labels) != num_labels:
            raise RaggedLabels(f"line {lineno}: {len(labels)} labels, expected {num_labels}")
        try:
            visits.append(Visit(vid, tuple(sorted(vcodes)), labels, group, split))
        except CohortError as exc:
            raise MalformedRecord(f"line {lineno}: {exc}") from exc

    if not visits:
        raise EmptyCohort(f"{path}: no visit records")
    if declared_t is not None and declared_t != num_labels:
        raise RaggedLabels(f"header declares {declared_t} labels, visits carry {num_labels}")
    try:
        return Cohort(codes, tuple(visits), num_labels)
    except CohortError as exc:
        if isinstance(exc, (UnknownCode, RaggedLabels)):
            raise
        raise MalformedRecord(str(exc)) from exc


def mask_to_basic(cohort: Cohort) -> Cohort:
    """Drop extra-tier codes from every visit; the vocabulary is kept."""
    n_basic = cohort.n_basic
    visits = []
    for v in cohort.visits:
        kept = tuple(c for c in v.codes if c < n_basic)
        if not kept:
            raise EmptyAfterMask(f"visit {v.visit_id} has no basic codes")
        visits.append(replace(v, codes=kept) if len(kept) != len(v.codes) else v)
    return Cohort(cohort.codes, tuple(visits), cohort.num_labels)


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class SyntheticConfig:
    n_visits: int = 2000
    n_basic: int = 40
    n_extra: int = 60
    label_prior: float = 0.4
    basic_separation: float = 0.1
    extra_separation: float = 0.3
    base_rate: float = 0.2
    extra_fraction: float = 0.15
    split_fractions: tuple[float, float, float, float] = (0.5, 0.25, 0.1, 0.15)
    num_labels: int = 1
    seed: int = 0
    # +1/-1 effect direction per code; False gives every code a positive effect
    signed_effects: bool = True

    def validate(self) -> None:
        if self.n_visits < 1 or self.n_basic < 1 or self.n_extra < 0 or self.num_labels < 1:
            raise InfeasibleConfig("n_visits, n_basic, num_labels must be >= 1 and n_extra >= 0")
        if not 0.0 < self.label_prior < 1.0:
            raise InfeasibleConfig(f"label_prior {self.label_prior} outside (0, 1)")
        for name, delta in (("basic_separation", self.basic_separation), ("extra_separation", self.extra_separation)):
            if not 0.0 <= delta < 1.0:
                raise InfeasibleConfig(f"{name} {delta} outside [0, 1)")
            lo, hi = self.base_rate - delta / 2, self.base_rate + delta / 2
            if not (0.0 < lo and hi < 1.0):
                raise InfeasibleConfig(f"base_rate +/- {name}/2 = [{lo}, {hi}] leaves (0, 1)")
        if not 0.0 <= self.extra_fraction <= 1.0:
            raise InfeasibleConfig("extra_fraction outside [0, 1]")
        fr = self.split_fractions
        if len(fr) != 4 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise InfeasibleConfig(f"split_fractions {fr} must be 4 non-negative values summing to 1")
        if self.n_extra > 0 and self.n_extra_visits == 0:
            raise InfeasibleConfig("extra codes exist but extra_fraction selects no visits")
        if self.n_extra_visits > self.n_visits - self.split_counts[0]:
            raise InfeasibleConfig("more extra visits than non-pretraining split slots")

    @property
    def n_extra_visits(self) -> int:
        return int(math.floor(self.n_visits * self.extra_fraction + 0.5))

    @property
    def split_counts(self) -> list[int]:
        """Largest-remainder apportionment of ``n_visits`` over the four splits."""
        exact = [f * self.n_visits for f in self.split_fractions]
        counts = [int(math.floor(x)) for x in exact]
        order = sorted(range(4), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[: self.n_visits - sum(counts)]:
            counts[i] += 1
        return counts

    def code_probabilities(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(p_absent_label, p_present_label, label_column)`` per code.

        ``p0[j]`` is the inclusion probability of code ``j`` given y=0 and
        ``p1[j]`` given y=1, where y is label column ``label_column[j]``.
        """
        n_codes = self.n_basic + self.n_extra
        delta = np.concatenate([np.full(self.n_basic, self.basic_separation), np.full(self.n_extra, self.extra_separation)])
        sign = np.ones(n_codes)
        if self.signed_effects:
            local = np.concatenate([np.arange(self.n_basic), np.arange(self.n_extra)])
            sign = np.where(local % 2 == 0, 1.0, -1.0)
        p1 = self.base_rate + sign * delta / 2
        p0 = self.base_rate - sign * delta / 2
        column = np.arange(n_codes) % self.num_labels
        return p0, p1, column


def generate_synthetic(config: SyntheticConfig) -> Cohort:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, k = config.n_visits, config.n_extra_visits
    n_basic, n_codes = config.n_basic, config.n_basic + config.n_extra

    counts = config.split_counts
    slots = np.repeat(np.arange(4), counts)
    pre_slots, other_slots = slots[: counts[0]], slots[counts[0]:]

    order = rng.permutation(n)
    is_extra = np.zeros(n, dtype=bool)
    is_extra[order[:k]] = True
    other_slots = rng.permutation(other_slots)
    split_idx = np.empty(n, dtype=np.int64)
    split_idx[order[:k]] = other_slots[:k]
    split_idx[order[k:]] = rng.permutation(np.concatenate([pre_slots, other_slots[k:]]))

    y = (rng.random((n, config.num_labels)) < config.label_prior).astype(np.int64)
    p0, p1, column = config.code_probabilities()
    probs = np.where(y[:, column] == 1, p1, p0)
    present = rng.random((n, n_codes)) < probs
    present[~is_extra, n_basic:] = False

    # every visit needs a basic view, so the injection also covers extra-only visits
    empty = np.flatnonzero(~present[:, :n_basic].any(axis=1))
    if empty.size:
        present[empty, rng.integers(0, n_basic, size=empty.size)] = True

    codes = tuple(
        MedicalCode(j, f"b{j}" if j < n_basic else f"e{j - n_basic}", "basic" if j < n_basic else "extra")
        for j in range(n_codes)
    )
    visits = tuple(
        Visit(
            visit_id=i,
            codes=tuple(int(c) for c in np.flatnonzero(present[i])),
            labels=tuple(int(t) for t in y[i]),
            group="extra" if is_extra[i] else "basic_only",
            split=SPLITS[split_idx[i]],
        )
        for i in range(n)
    )
    return Cohort(codes, visits, config.num_labels)


def bayes_optimal_scores(cohort: Cohort, config: SyntheticConfig, scenario: str,
                         visits: Sequence[Visit] | None = None) -> np.ndarray:
    """Exact naive-Bayes posterior P(y=1 | observed codes) under the generator.

    Extra codes count as observed only for extra-group visits in the ``full``
    scenario; otherwise they are marginalised out (they drop from the sum).
    Returns an array of shape (n_visits, T) in the order of ``visits``.
    """
    if scenario not in ("basic", "full"):
        raise ValueError(f"unknown scenario {scenario!r}")
    if (cohort.n_basic, cohort.n_extra, cohort.num_labels) != (config.n_basic, config.n_extra, config.num_labels):
        raise ConfigMismatch(
            f"cohort has {cohort.n_basic}/{cohort.n_extra} codes and {cohort.num_labels} labels, "
            f"config expects {config.n_basic}/{config.n_extra} and {config.num_labels}"
        )
    visits = cohort.visits if visits is None else visits
    p0, p1, column = config.code_probabilities()
    w_present = np.log(p1) - np.log(p0)
    w_absent = np.log1p(-p1) - np.log1p(-p0)
    onehot = np.zeros((cohort.num_codes, cohort.num_labels))
    onehot[np.arange(cohort.num_codes), column] = 1.0

    x = np.zeros((len(visits), cohort.num_codes))
    observed = np.zeros_like(x)
    observed[:, : cohort.n_basic] = 1.0
    for i, v in enumerate(visits):
        x[i, list(v.codes)] = 1.0
        if scenario == "full" and v.group == "extra":
            observed[i, cohort.n_basic:] = 1.0
    contrib = observed * (x * w_present + (1.0 - x) * w_absent)
    logit = contrib @ onehot + math.log(config.label_prior) - math.log1p(-config.label_prior)
    return 1.0 / (1.0 + np.exp(-logit))


def cohort_stats(cohort: Cohort) -> dict:
    """Dataset statistics in the row layout of the usual dataset table."""
    n_basic = cohort.n_basic
    incident = set()
    for v in cohort.visits:
        incident.update(c for c in v.codes if c >= n_basic)
    per_split = {s: {g: 0 for g in GROUPS} for s in SPLITS}
    for v in cohort.visits:
        per_split[v.split][v.group] += 1
    train = [v for v in cohort.visits if v.split in TRAIN_SPLITS]
    return {
        "basic_features": n_basic,
        "extra_features": cohort.n_extra,
        "health_records": len(cohort.visits),
        "train_basic_only": sum(v.group == "basic_only" for v in train),
        "train_extra": sum(v.group == "extra" for v in train),
        "validation": sum(per_split["validation"].values()),
        "test": sum(per_split["test"].values()),
        "incident_extra_features": len(incident),
        "per_split": per_split,
    }
