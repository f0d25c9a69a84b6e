"""Online response-prediction protocol and metrics.

Students are split into a 20% parameter-selection holdout and five
cross-validation folds. For each test student, the model's global
parameters stay frozen while the student-level state is re-estimated on
the first t-1 responses before predicting response t (t > 1; the first
response is never predicted). Reported metrics are accuracy and the
Mann-Whitney AUC with half credit for ties, pooled over all predictions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from . import dkt as dkt_mod
from . import irt as irt_mod
from . import tirt as tirt_mod
from .dataio import Dataset

MODEL_FAMILIES = ("irt", "hirt", "tirt", "dkt", "window", "constant")


class UndefinedMetricError(ValueError):
    """The metric is undefined for this log (empty, or single-class AUC)."""


@dataclass(frozen=True)
class SplitPlan:
    """Holdout students plus five disjoint folds covering the rest."""

    holdout: tuple
    folds: tuple
    seed: int

    def training_students(self, fold: int):
        out = []
        for k, members in enumerate(self.folds):
            if k != fold:
                out.extend(members)
        return out

    def all_fold_students(self):
        out = []
        for members in self.folds:
            out.extend(members)
        return out


def make_split(dataset: Dataset, seed: int, n_folds: int = 5,
               holdout_fraction: float = 0.2) -> SplitPlan:
    """Uniform student split: floor(fraction * n) holdout (at least one),
    remainder partitioned into folds whose sizes differ by at most one."""
    students = list(dataset.student_index)
    if len(students) < 10:
        raise ValueError(f"need at least 10 students, got {len(students)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(students))
    shuffled = [students[k] for k in order]
    n_holdout = max(int(holdout_fraction * len(students)), 1)
    holdout = tuple(shuffled[:n_holdout])
    rest = shuffled[n_holdout:]
    folds = tuple(tuple(chunk) for chunk in
                  np.array_split(np.array(rest, dtype=object), n_folds))
    return SplitPlan(holdout=holdout, folds=folds, seed=seed)


@dataclass(eq=False)
class PredictionLog:
    """Per-response predictions with the observed outcomes."""

    student_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    time_indices: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    observed: list = field(default_factory=list)
    unseen: list = field(default_factory=list)

    def append(self, student_id, item_id, time_index, probability, correct,
               unseen_item=False):
        if not np.isfinite(probability):
            raise ValueError(f"non-finite prediction for {student_id}/{item_id}")
        self.student_ids.append(student_id)
        self.item_ids.append(item_id)
        self.time_indices.append(int(time_index))
        self.probabilities.append(float(probability))
        self.observed.append(int(correct))
        self.unseen.append(bool(unseen_item))

    def __len__(self):
        return len(self.probabilities)

    def prob_array(self):
        return np.asarray(self.probabilities, dtype=float)

    def observed_array(self):
        return np.asarray(self.observed, dtype=int)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["student_id", "item_id", "time_index",
                             "prediction", "correct", "unseen_flag"])
            for k in range(len(self)):
                writer.writerow([self.student_ids[k], self.item_ids[k],
                                 self.time_indices[k],
                                 repr(self.probabilities[k]),
                                 self.observed[k], int(self.unseen[k])])


def accuracy(log: PredictionLog) -> float:
    """Fraction of responses whose correctness matches p > 0.5 (strict)."""
    if len(log) == 0:
        raise UndefinedMetricError("accuracy of an empty prediction log")
    p = log.prob_array()
    r = log.observed_array()
    hits = ((p > 0.5) & (r == 1)) | ((p <= 0.5) & (r == 0))
    return float(np.mean(hits))


def auc(log: PredictionLog) -> float:
    """Mann-Whitney AUC pooled over all responses, ties counted half."""
    p = log.prob_array()
    r = log.observed_array()
    n_pos = int(np.sum(r == 1))
    n_neg = int(np.sum(r == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC requires both outcome classes")
    ranks = rankdata(p)
    pos_rank_sum = float(np.sum(ranks[r == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def windowed_baseline(corrects, w: int) -> np.ndarray:
    """Majority-vote predictions from a rolling window of w responses.

    Returns 0/1 predictions for positions w..T-1; a response is predicted
    correct when at least half of the previous w responses were correct.
    Earlier positions (fewer than w predecessors) are skipped.
    """
    if w < 1:
        raise ValueError("window length must be at least 1")
    corrects = np.asarray(corrects, dtype=int)
    t_len = len(corrects)
    if t_len <= w:
        return np.empty(0, dtype=int)
    csum = np.concatenate([[0], np.cumsum(corrects)])
    window_sums = csum[w:t_len] - csum[:t_len - w]
    return (2 * window_sums >= w).astype(int)


class _IrtFamilyModel:
    """Shared online harness for the static and hierarchical variants."""

    def __init__(self, family: str, params: dict):
        self.family = family
        self.hyper = dict(params)
        self.fit_options = irt_mod.FitOptions()
        self.beta = None
        self.seen_items = None

    def fit(self, dataset: Dataset, students):
        train = dataset.restrict_to_students(students)
        if self.family == "hirt":
            fitted = irt_mod.fit_hirt(train, self.hyper["sigma2"],
                                      self.hyper["tau2"], self.fit_options)
        else:
            fitted = irt_mod.fit_irt(train, self.fit_options)
        self.beta = fitted.beta
        self.fitted = fitted
        self.seen_items = {dataset.item_index[rec.item_id]
                           for rec in train.records}
        return self

    def predict_sequence(self, items, corrects, times):
        gamma2 = self.hyper.get("gamma2", 0.0) if self.family == "tirt" else 0.0
        betas = self.beta[items]
        probs = np.empty(len(items) - 1)
        theta = 0.0
        for t in range(1, len(items)):
            if self.family == "tirt":
                lags = times[t] - times[:t]
                discounts = tirt_mod.discount_factor(gamma2, lags)
            else:
                discounts = None
            theta = irt_mod.solve_theta_map(betas[:t], corrects[:t],
                                            discounts, x0=theta)
            probs[t - 1] = ndtr(theta - betas[t])
        flags = np.array([i not in self.seen_items for i in items[1:]])
        return probs, flags


class _DktModel:
    def __init__(self, params: dict):
        self.hyper = dict(params)
        self.label_space = self.hyper.pop("label_space", "item")
        self.params = None
        self.mapping = None
        self.seen_labels = None

    def fit(self, dataset: Dataset, students):
        hp = dkt_mod.DktHyperparams(**self.hyper)
        train = dataset.restrict_to_students(students)
        self.params = dkt_mod.train_dkt(train, hp, label_space=self.label_space)
        if self.label_space == "group":
            self.mapping = dataset.item_group
        elif self.label_space == "skill":
            self.mapping = dataset.item_skill
        else:
            self.mapping = None
        seen = set()
        for labels, _ in dkt_mod.dataset_sequences(train, self.label_space)[0]:
            seen.update(int(v) for v in labels)
        self.seen_labels = seen
        return self

    def predict_sequence(self, items, corrects, times):
        labels = items if self.mapping is None else self.mapping[items]
        probs = dkt_mod.predict_sequence(self.params, labels, corrects)
        flags = np.array([int(v) not in self.seen_labels for v in labels[1:]])
        return probs, flags


class _WindowModel:
    def __init__(self, params: dict):
        self.w = int(params.get("w", 1))
        if self.w < 1:
            raise ValueError("window length must be at least 1")

    def fit(self, dataset: Dataset, students):
        return self

    def predict_sequence(self, items, corrects, times):
        preds = windowed_baseline(corrects, self.w)
        probs = np.full(len(items) - 1, np.nan)
        probs[self.w - 1:] = preds.astype(float)
        flags = np.zeros(len(items) - 1, dtype=bool)
        return probs, flags


class _ConstantModel:
    """Predicts the training population's percent correct everywhere."""

    def __init__(self, params: dict):
        self.p = None

    def fit(self, dataset: Dataset, students):
        train = dataset.restrict_to_students(students)
        _, _, r, _ = train.arrays
        self.p = float(np.mean(r)) if len(r) else 0.5
        return self

    def predict_sequence(self, items, corrects, times):
        return (np.full(len(items) - 1, self.p),
                np.zeros(len(items) - 1, dtype=bool))


@dataclass(frozen=True)
class ModelSpec:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")


def build_model(spec: ModelSpec):
    if spec.family in ("irt", "hirt", "tirt"):
        return _IrtFamilyModel(spec.family, spec.params)
    if spec.family == "dkt":
        return _DktModel(spec.params)
    if spec.family == "window":
        return _WindowModel(spec.params)
    return _ConstantModel(spec.params)


def online_predict(model, dataset: Dataset, students) -> PredictionLog:
    """Run the online protocol for every given student.

    The model must already be fitted; its student-level state is
    recomputed per step from the first t-1 responses only. Students with a
    single response contribute nothing.
    """
    log = PredictionLog()
    id_of_student = {v: k for k, v in dataset.student_index.items()}
    id_of_item = {v: k for k, v in dataset.item_index.items()}
    ordered = sorted(dataset.student_index[s] for s in students)
    sequences = dataset.sequences
    for s_idx in ordered:
        items, corrects, times = sequences[s_idx]
        if len(items) < 2:
            continue
        probs, flags = model.predict_sequence(items, corrects, times)
        sid = id_of_student[s_idx]
        for t in range(1, len(items)):
            p = probs[t - 1]
            if np.isnan(p):
                continue  # baseline skips positions without a full window
            log.append(sid, id_of_item[items[t]], int(times[t]), p,
                       int(corrects[t]), bool(flags[t - 1]))
    return log


@dataclass(eq=False)
class EvalReport:
    model: str
    hyperparams: dict
    dataset_label: str
    dataset_hash: str
    fold_acc: list
    fold_auc: list

    @staticmethod
    def _mean_stderr(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None, None
        arr = np.asarray(vals, dtype=float)
        if len(arr) == 1:
            return float(arr[0]), 0.0
        return float(np.mean(arr)), float(np.std(arr, ddof=1) / np.sqrt(len(arr)))

    @property
    def acc_mean(self):
        return self._mean_stderr(self.fold_acc)[0]

    @property
    def acc_stderr(self):
        return self._mean_stderr(self.fold_acc)[1]

    @property
    def auc_mean(self):
        return self._mean_stderr(self.fold_auc)[0]

    @property
    def auc_stderr(self):
        return self._mean_stderr(self.fold_auc)[1]

    def metric_rows(self):
        """Rows for the machine-readable table: model,fold,acc,auc."""
        rows = []
        for k, (a, u) in enumerate(zip(self.fold_acc, self.fold_auc)):
            rows.append([self.model, str(k), repr(a),
                         "" if u is None else repr(u)])
        return rows

    def text_lines(self):
        lines = [f"model: {self.model}"]
        if self.hyperparams:
            pairs = ", ".join(f"{k}={v}" for k, v in sorted(self.hyperparams.items()))
            lines.append(f"hyperparameters: {pairs}")
        lines.append(f"dataset: {self.dataset_label} ({self.dataset_hash})")
        for k, (a, u) in enumerate(zip(self.fold_acc, self.fold_auc)):
            auc_txt = "n/a" if u is None else f"{u:.4f}"
            lines.append(f"fold {k}: acc={a:.4f} auc={auc_txt}")
        lines.append(f"acc mean={self.acc_mean:.4f} stderr={self.acc_stderr:.4f}")
        if self.auc_mean is not None:
            lines.append(f"auc mean={self.auc_mean:.4f} stderr={self.auc_stderr:.4f}")
        return lines


def cross_validate(spec: ModelSpec, dataset: Dataset, plan: SplitPlan,
                   dataset_label: str = "dataset",
                   collect_logs: bool = False):
    """Five-fold online evaluation; mean and standard error across folds.

    For each fold the model's global parameters are trained on the other
    four folds (the holdout never participates). Returns the report, plus
    the per-fold PredictionLogs when ``collect_logs`` is set.
    """
    known = set(dataset.student_index)
    for members in plan.folds:
        missing = set(members) - known
        if missing:
            raise ValueError(f"split plan references unknown students: "
                             f"{sorted(missing)[:5]}")
    fold_acc, fold_auc, logs = [], [], []
    for fold in range(len(plan.folds)):
        try:
            model = build_model(spec)
            model.fit(dataset, plan.training_students(fold))
            log = online_predict(model, dataset, plan.folds[fold])
            fold_acc.append(accuracy(log))
            if spec.family == "window":
                fold_auc.append(None)
            else:
                try:
                    fold_auc.append(auc(log))
                except UndefinedMetricError:
                    fold_auc.append(None)
            logs.append(log)
        except Exception as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
    report = EvalReport(model=spec.family, hyperparams=dict(spec.params),
                        dataset_label=dataset_label,
                        dataset_hash=dataset.content_hash(),
                        fold_acc=fold_acc, fold_auc=fold_auc)
    return (report, logs) if collect_logs else report


@dataclass(frozen=True)
class SweepGrid:
    """Ordered hyperparameter grid; simpler settings first for tie-breaks."""

    family: str
    points: tuple

    @classmethod
    def from_points(cls, family, points):
        return cls(family=family, points=tuple(dict(p) for p in points))


def default_grid(family: str) -> SweepGrid:
    if family == "tirt":
        points = [{"gamma2": g} for g in (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)]
    elif family == "hirt":
        points = [{"sigma2": s2, "tau2": t2}
                  for t2 in (1e-8, 0.125, 0.25, 0.5)
                  for s2 in (0.125, 0.25, 0.5, 1.0)]
    elif family == "dkt":
        points = [{"compressed_dim": c, "hidden_dim": h, "dropout_p": p,
                   "step_size": s}
                  for c in (10, 50) for h in (50, 100)
                  for p in (0.0, 0.25) for s in (0.25, 0.5)]
    elif family == "window":
        points = [{"w": w} for w in (1, 2, 3, 5, 8, 16, 32, 64)]
    elif family == "irt":
        points = [{}]
    else:
        raise ValueError(f"no default grid for family {family!r}")
    return SweepGrid.from_points(family, points)


def sweep(grid: SweepGrid, dataset: Dataset, plan: SplitPlan):
    """Score every grid point on the parameter-selection holdout.

    Global parameters are trained on all fold students; the score is the
    holdout AUC (accuracy for the degenerate-probability baseline). Ties
    keep the earlier (simpler) grid point. Returns (best point, table),
    the table rows being (params, acc, auc, score).
    """
    if not grid.points:
        raise ValueError("empty sweep grid")
    train_students = plan.all_fold_students()
    rows = []
    best_idx, best_score = None, -np.inf
    for idx, point in enumerate(grid.points):
        spec = ModelSpec(family=grid.family, params=dict(point))
        model = build_model(spec)
        model.fit(dataset, train_students)
        log = online_predict(model, dataset, plan.holdout)
        acc_val = accuracy(log)
        if grid.family == "window":
            auc_val = None
        else:
            try:
                auc_val = auc(log)
            except UndefinedMetricError:
                auc_val = None
        score = acc_val if auc_val is None else auc_val
        rows.append((dict(point), acc_val, auc_val, score))
        if score > best_score:
            best_idx, best_score = idx, score
    return dict(grid.points[best_idx]), rows
