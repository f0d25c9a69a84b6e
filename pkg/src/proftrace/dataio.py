"""Dataset ingestion, preprocessing, and synthetic data generation.

All parsers normalize raw exports into the same canonical representation:
one record per interaction, grouped per student in time order, with string
identifiers resolved through contiguous index maps. Preprocessing
(deduplication, dummy-skill assignment, single-skill retention) is logged
in the dataset's provenance.
"""

from __future__ import annotations

import csv
import hashlib
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np
from scipy.special import ndtr

DUMMY_SKILL = "__no_skill__"
CANONICAL_COLUMNS = ("student_id", "item_id", "group_id", "correct")

ASSISTMENTS_COLUMNS = ("order_id", "user_id", "problem_id", "template_id",
                       "skill_id", "correct")
KDD_COLUMNS = ("Anon Student Id", "Problem Name", "Step Name", "KC",
               "Correct First Attempt")

# Step names repeat across problems; the pair is the real item identity.
_KDD_ITEM_SEP = "||"
_KDD_KC_SEP = "~~"


class DataError(ValueError):
    """Base class for ingestion failures."""


class FormatError(DataError):
    """The source table is structurally unusable (e.g. a missing column)."""


class RowError(DataError):
    """A single row failed to parse; carries the 1-based row number."""

    def __init__(self, row_number: int, message: str):
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


class EmptyDatasetError(DataError):
    """Preprocessing produced no records."""


@dataclass(frozen=True)
class InteractionRecord:
    """One (student, item, correctness, time) tuple.

    ``time_index`` is the per-student interaction ordinal, starting at 0.
    ``group_id`` is the optional item grouping (template / problem / concept).
    """

    student_id: str
    item_id: str
    group_id: Optional[str]
    skill_id: str
    correct: int
    time_index: int


@dataclass(frozen=True)
class LabelConfig:
    """Which source columns identify the item and the (optional) item group."""

    item_field: str
    group_field: Optional[str] = None


@dataclass
class Provenance:
    source: str
    rows_read: int = 0
    duplicates_dropped: int = 0
    dummy_skill_assigned: int = 0
    notes: list = field(default_factory=list)

    def log_lines(self):
        lines = [
            f"source: {self.source}",
            f"rows read: {self.rows_read}",
            f"duplicates dropped: {self.duplicates_dropped}",
            f"dummy-skill assignments: {self.dummy_skill_assigned}",
        ]
        lines.extend(self.notes)
        return lines


@dataclass(frozen=True)
class DatasetSummary:
    n_interactions: int
    n_students: int
    n_items: int
    n_groups: int
    n_skills: int
    percent_correct: Optional[float]

    def lines(self):
        pc = "n/a" if self.percent_correct is None else f"{100 * self.percent_correct:.2f}%"
        return [
            f"interactions: {self.n_interactions}",
            f"students: {self.n_students}",
            f"items: {self.n_items}",
            f"groups: {self.n_groups}",
            f"skills: {self.n_skills}",
            f"percent correct: {pc}",
        ]


@dataclass(eq=False)
class Dataset:
    """Immutable canonical dataset: records plus contiguous index maps.

    Records are grouped per student; within a student they are in time order
    (time_index 0..k-1 with no gaps). A dataset restricted to a student
    subset shares the parent's index maps so that parameter arrays keep
    their meaning across training/test splits.
    """

    records: list
    student_index: dict
    item_index: dict
    group_index: dict
    skill_index: dict
    provenance: Provenance

    @classmethod
    def from_records(cls, records, source, *, duplicates_dropped=0,
                     dummy_skill_assigned=0, rows_read=None, notes=None):
        if not records:
            raise EmptyDatasetError(f"no records after preprocessing ({source})")
        student_index, item_index, group_index, skill_index = {}, {}, {}, {}
        for rec in records:
            student_index.setdefault(rec.student_id, len(student_index))
            item_index.setdefault(rec.item_id, len(item_index))
            if rec.group_id is not None:
                group_index.setdefault(rec.group_id, len(group_index))
            skill_index.setdefault(rec.skill_id, len(skill_index))
        prov = Provenance(source=source,
                          rows_read=len(records) if rows_read is None else rows_read,
                          duplicates_dropped=duplicates_dropped,
                          dummy_skill_assigned=dummy_skill_assigned,
                          notes=list(notes or []))
        ds = cls(records, student_index, item_index, group_index, skill_index, prov)
        ds._validate()
        return ds

    def _validate(self):
        seen = {}
        for rec in self.records:
            if rec.correct not in (0, 1):
                raise DataError(f"correct must be 0/1, got {rec.correct!r}")
            expected = seen.get(rec.student_id, 0)
            if rec.time_index != expected:
                raise DataError(
                    f"student {rec.student_id!r}: time_index {rec.time_index} "
                    f"(expected {expected})")
            seen[rec.student_id] = expected + 1

    @property
    def n_students(self):
        return len(self.student_index)

    @property
    def n_items(self):
        return len(self.item_index)

    @property
    def n_groups(self):
        return len(self.group_index)

    @cached_property
    def arrays(self):
        """(student_idx, item_idx, correct, time_index) as int arrays."""
        n = len(self.records)
        s = np.empty(n, dtype=np.int64)
        i = np.empty(n, dtype=np.int64)
        r = np.empty(n, dtype=np.int64)
        t = np.empty(n, dtype=np.int64)
        for k, rec in enumerate(self.records):
            s[k] = self.student_index[rec.student_id]
            i[k] = self.item_index[rec.item_id]
            r[k] = rec.correct
            t[k] = rec.time_index
        return s, i, r, t

    @cached_property
    def item_group(self):
        """Per-item group index, -1 where the item has no group."""
        out = np.full(self.n_items, -1, dtype=np.int64)
        for rec in self.records:
            if rec.group_id is None:
                continue
            i = self.item_index[rec.item_id]
            g = self.group_index[rec.group_id]
            if out[i] == -1:
                out[i] = g
        return out

    @cached_property
    def item_skill(self):
        """Per-item skill index (first seen)."""
        out = np.full(self.n_items, -1, dtype=np.int64)
        for rec in self.records:
            i = self.item_index[rec.item_id]
            if out[i] == -1:
                out[i] = self.skill_index[rec.skill_id]
        return out

    @cached_property
    def sequences(self):
        """Per-student (item_idx, correct, time_index) arrays, in time order.

        Indexed by student index; students present in the index maps but
        without records (restricted views) get empty arrays.
        """
        buckets = [[] for _ in range(self.n_students)]
        s, i, r, t = self.arrays
        for k in range(len(self.records)):
            buckets[s[k]].append(k)
        out = []
        for idx_list in buckets:
            ks = np.asarray(idx_list, dtype=np.int64)
            out.append((i[ks], r[ks], t[ks]))
        return out

    @cached_property
    def students_with_records(self):
        return {rec.student_id for rec in self.records}

    def restrict_to_students(self, student_ids) -> "Dataset":
        """View containing only the given students' records.

        Index maps are shared with the parent so fitted parameter arrays
        stay aligned with the full dataset.
        """
        keep = set(student_ids)
        unknown = keep - set(self.student_index)
        if unknown:
            raise DataError(f"unknown students: {sorted(unknown)[:5]}")
        records = [rec for rec in self.records if rec.student_id in keep]
        prov = Provenance(source=self.provenance.source,
                          rows_read=self.provenance.rows_read,
                          duplicates_dropped=self.provenance.duplicates_dropped,
                          dummy_skill_assigned=self.provenance.dummy_skill_assigned,
                          notes=self.provenance.notes
                          + [f"restricted to {len(keep)} students"])
        return Dataset(records, self.student_index, self.item_index,
                       self.group_index, self.skill_index, prov)

    def content_hash(self) -> str:
        h = hashlib.md5()
        for rec in self.records:
            h.update(f"{rec.student_id},{rec.item_id},{rec.group_id or ''},"
                     f"{rec.skill_id},{rec.correct},{rec.time_index}\n".encode())
        return h.hexdigest()

    def index_hash(self) -> str:
        h = hashlib.md5()
        for m in (self.student_index, self.item_index, self.group_index):
            for key in m:
                h.update(key.encode())
                h.update(b"\x00")
            h.update(b"\x01")
        return h.hexdigest()


@dataclass(eq=False)
class SyntheticTruth:
    """Generating parameters for a synthetic dataset (recovery-test oracle)."""

    true_theta: np.ndarray
    true_beta: np.ndarray
    true_mu: Optional[np.ndarray]
    generator_config: dict


def _open_rows(rows: Union[str, Path, TextIO, Iterable[str]]):
    if isinstance(rows, (str, Path)):
        return open(rows, "r", encoding="utf-8", newline=""), True
    return rows, False


def _parse_correct(value, row_number):
    v = str(value).strip()
    if v in ("0", "1"):
        return int(v)
    try:
        f = float(v)
    except ValueError:
        raise RowError(row_number, f"unparseable correctness value {value!r}") from None
    if f in (0.0, 1.0):
        return int(f)
    raise RowError(row_number, f"correctness value {value!r} not in {{0,1}}")


def _column_positions(header, required, source):
    positions = {}
    for name in required:
        if name not in header:
            raise FormatError(f"{source}: missing required column {name!r}")
        positions[name] = header.index(name)
    return positions


def _arbitrate_skill(skills):
    """Deterministic single-skill retention: lexicographically smallest."""
    present = sorted(sk for sk in skills if sk)
    return present[0] if present else DUMMY_SKILL


def _finish(groups, source, *, rows_read, duplicates_dropped, notes=None):
    """Assign time indices per student and build the Dataset.

    ``groups``: student_id -> list of (sort_key, item, group, skill, correct).
    """
    records = []
    dummy_count = 0
    for student_id, rows in groups.items():
        rows.sort(key=lambda row: row[0])
        for t, (_, item, group, skill, correct) in enumerate(rows):
            if skill == DUMMY_SKILL:
                dummy_count += 1
            records.append(InteractionRecord(student_id, item, group, skill,
                                             correct, t))
    return Dataset.from_records(records, source,
                                duplicates_dropped=duplicates_dropped,
                                dummy_skill_assigned=dummy_count,
                                rows_read=rows_read, notes=notes)


def parse_assistments(rows, labels: Optional[LabelConfig] = None,
                      keep_duplicates: bool = False) -> Dataset:
    """Parse a skill-builder export (comma-delimited).

    Rows sharing an ``order_id`` represent one interaction tagged with
    multiple skills; unless ``keep_duplicates`` is set, they are collapsed
    to a single record retaining the lexicographically smallest skill.
    Rows without a skill get the dummy skill.
    """
    labels = labels or LabelConfig("problem_id", "template_id")
    stream, should_close = _open_rows(rows)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            raise FormatError("assistments: empty input")
        header = [h.strip() for h in header]
        pos = _column_positions(header, ASSISTMENTS_COLUMNS, "assistments")
        for name in (labels.item_field, labels.group_field):
            if name is not None and name not in header:
                raise FormatError(f"assistments: label column {name!r} not present")
        item_pos = header.index(labels.item_field)
        group_pos = header.index(labels.group_field) if labels.group_field else None

        rows_read = 0
        # order_id -> [sort_key, item, group, skills-seen, correct]
        interactions: dict = {}
        duplicate_rows = 0
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            rows_read += 1
            order_id = row[pos["order_id"]].strip()
            student = row[pos["user_id"]].strip()
            if not order_id or not student:
                raise RowError(row_number, "empty order_id or user_id")
            item = row[item_pos].strip()
            if not item:
                raise RowError(row_number, f"empty {labels.item_field}")
            group = row[group_pos].strip() if group_pos is not None else ""
            skill = row[pos["skill_id"]].strip()
            correct = _parse_correct(row[pos["correct"]], row_number)
            try:
                order_key = (0, int(order_id), row_number)
            except ValueError:
                order_key = (1, order_id, row_number)
            if keep_duplicates:
                key = (order_id, row_number)
            else:
                key = order_id
            entry = interactions.get(key)
            if entry is None:
                interactions[key] = [student, order_key, sys.intern(item),
                                     sys.intern(group) if group else None,
                                     {skill}, correct]
            else:
                duplicate_rows += 1
                entry[4].add(skill)

        by_student: dict = {}
        for student, order_key, item, group, skills, correct in interactions.values():
            skill = sys.intern(_arbitrate_skill(skills))
            by_student.setdefault(student, []).append(
                (order_key, item, group, skill, correct))
        return _finish(by_student, "assistments", rows_read=rows_read,
                       duplicates_dropped=duplicate_rows)
    finally:
        if should_close:
            stream.close()


def _resolve_kdd_kc_column(header):
    if "KC" in header:
        return header.index("KC")
    for idx, name in enumerate(header):
        if name.startswith("KC("):
            return idx
    raise FormatError("kdd: missing required column 'KC'")


def parse_kdd(rows, labels: Optional[LabelConfig] = None,
              keep_duplicates: bool = False) -> Dataset:
    """Parse a tutor step export (tab-delimited).

    Item identity is the (problem, step) pair when the item field is
    ``Step Name`` since step names repeat across problems. Multi-KC cells
    keep the lexicographically smallest KC; KC-less rows get the dummy
    skill. Identical (student, problem, step, time) rows are duplicates.
    """
    labels = labels or LabelConfig("Step Name", "Problem Name")
    stream, should_close = _open_rows(rows)
    try:
        reader = csv.reader(stream, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise FormatError("kdd: empty input")
        header = [h.strip() for h in header]
        pos = _column_positions(
            header, ("Anon Student Id", "Problem Name", "Step Name",
                     "Correct First Attempt"), "kdd")
        kc_pos = _resolve_kdd_kc_column(header)

        def label_pos(name):
            if name == "KC":
                return kc_pos
            if name not in header:
                raise FormatError(f"kdd: label column {name!r} not present")
            return header.index(name)

        item_pos = label_pos(labels.item_field)
        group_pos = label_pos(labels.group_field) if labels.group_field else None
        # String order is chronological for the zero-padded timestamp format.
        time_pos = None
        for time_col in ("First Transaction Time", "Step Start Time"):
            if time_col in header:
                time_pos = header.index(time_col)
                break

        rows_read = 0
        interactions: dict = {}
        duplicate_rows = 0
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            rows_read += 1
            student = row[pos["Anon Student Id"]].strip()
            problem = row[pos["Problem Name"]].strip()
            step = row[pos["Step Name"]].strip()
            if not student or not problem or not step:
                raise RowError(row_number, "empty student, problem, or step")
            stamp = row[time_pos].strip() if time_pos is not None else ""
            correct = _parse_correct(row[pos["Correct First Attempt"]], row_number)
            kcs = {kc.strip() for kc in row[kc_pos].split(_KDD_KC_SEP)}

            if item_pos == pos["Step Name"]:
                item = problem + _KDD_ITEM_SEP + step
            elif item_pos == kc_pos:
                item = _arbitrate_skill(kcs)
            else:
                item = row[item_pos].strip()
            if group_pos is None:
                group = None
            elif group_pos == kc_pos:
                group = _arbitrate_skill(kcs)
            else:
                group = row[group_pos].strip() or None

            if keep_duplicates:
                key = (student, problem, step, stamp, row_number)
            else:
                key = (student, problem, step, stamp)
            entry = interactions.get(key)
            if entry is None:
                interactions[key] = [student, (stamp, row_number),
                                     sys.intern(item),
                                     sys.intern(group) if group else None,
                                     set(kcs), correct]
            else:
                duplicate_rows += 1
                entry[4].update(kcs)

        by_student: dict = {}
        for student, sort_key, item, group, kcs, correct in interactions.values():
            skill = sys.intern(_arbitrate_skill(kcs))
            by_student.setdefault(student, []).append(
                (sort_key, item, group, skill, correct))
        return _finish(by_student, "kdd", rows_read=rows_read,
                       duplicates_dropped=duplicate_rows)
    finally:
        if should_close:
            stream.close()


def parse_canonical(rows) -> Dataset:
    """Parse the canonical interchange format (no preprocessing applied)."""
    stream, should_close = _open_rows(rows)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            raise FormatError("canonical: empty input")
        header = [h.strip() for h in header]
        pos = _column_positions(header, CANONICAL_COLUMNS, "canonical")

        rows_read = 0
        by_student: dict = {}
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            rows_read += 1
            student = row[pos["student_id"]].strip()
            item = row[pos["item_id"]].strip()
            if not student or not item:
                raise RowError(row_number, "empty student_id or item_id")
            group = row[pos["group_id"]].strip() or None
            correct = _parse_correct(row[pos["correct"]], row_number)
            by_student.setdefault(student, []).append(
                (row_number, sys.intern(item),
                 sys.intern(group) if group else None, DUMMY_SKILL, correct))
        return _finish(by_student, "canonical", rows_read=rows_read,
                       duplicates_dropped=0)
    finally:
        if should_close:
            stream.close()


def write_canonical(dataset: Dataset, dest: Union[str, Path, TextIO]):
    """Write the canonical comma-delimited form (one row per interaction)."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_canonical(dataset, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for rec in dataset.records:
        writer.writerow([rec.student_id, rec.item_id, rec.group_id or "",
                         rec.correct])


def generate_synthetic(n_students: int, n_items: int, n_groups: int,
                       responses_per_student: int, *,
                       sigma2_theta: float = 1.0, tau2: float = 1.0,
                       sigma2: float = 1.0, seed: int = 0,
                       drift_gamma2: float = 0.0):
    """Sample a dataset from the generative probit model.

    theta_s ~ N(0, sigma2_theta). With groups, mu_j ~ N(0, tau2) and
    beta_i ~ N(mu_j(i), sigma2); without, beta_i ~ N(0, 1). Items are
    assigned uniformly at random per response and correctness is
    Bernoulli(Phi(theta - beta)). With ``drift_gamma2 > 0`` each student's
    proficiency takes a random-walk step of variance drift_gamma2 between
    consecutive responses. Deterministic given ``seed``.

    Returns (Dataset, SyntheticTruth); the truth records initial thetas.
    """
    for name, v in (("n_students", n_students), ("n_items", n_items),
                    ("responses_per_student", responses_per_student)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if n_groups < 0:
        raise ValueError(f"n_groups must be non-negative, got {n_groups}")

    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, np.sqrt(sigma2_theta), size=n_students)
    if n_groups > 0:
        mu = rng.normal(0.0, np.sqrt(tau2), size=n_groups)
        item_group = np.arange(n_items) % n_groups
        beta = rng.normal(mu[item_group], np.sqrt(sigma2))
    else:
        mu = None
        item_group = None
        beta = rng.normal(0.0, 1.0, size=n_items)

    sw = max(len(str(n_students - 1)), 1)
    iw = max(len(str(n_items - 1)), 1)
    gw = max(len(str(max(n_groups - 1, 0))), 1)
    records = []
    for s in range(n_students):
        items = rng.integers(0, n_items, size=responses_per_student)
        if drift_gamma2 > 0:
            steps = rng.normal(0.0, np.sqrt(drift_gamma2),
                               size=responses_per_student)
            steps[0] = 0.0
            theta_path = theta[s] + np.cumsum(steps)
        else:
            theta_path = np.full(responses_per_student, theta[s])
        u = rng.random(responses_per_student)
        correct = (u < ndtr(theta_path - beta[items])).astype(int)
        student_id = f"s{s:0{sw}d}"
        for t in range(responses_per_student):
            i = int(items[t])
            group_id = f"g{item_group[i]:0{gw}d}" if n_groups > 0 else None
            records.append(InteractionRecord(student_id, f"i{i:0{iw}d}",
                                             group_id, DUMMY_SKILL,
                                             int(correct[t]), t))
    config = {"n_students": n_students, "n_items": n_items,
              "n_groups": n_groups,
              "responses_per_student": responses_per_student,
              "sigma2_theta": sigma2_theta, "tau2": tau2, "sigma2": sigma2,
              "seed": seed, "drift_gamma2": drift_gamma2}
    dataset = Dataset.from_records(records, "synthetic")
    # Index maps are first-appearance ordered; align the truth to them so
    # truth arrays index the same way as fitted parameter arrays.
    theta_aligned = np.array([theta[int(sid[1:])] for sid in dataset.student_index])
    beta_aligned = np.array([beta[int(iid[1:])] for iid in dataset.item_index])
    mu_aligned = None
    if n_groups > 0:
        mu_aligned = np.array([mu[int(gid[1:])] for gid in dataset.group_index])
    truth = SyntheticTruth(theta_aligned, beta_aligned, mu_aligned, config)
    return dataset, truth


def summarize(dataset: Dataset) -> DatasetSummary:
    n = len(dataset.records)
    pc = None
    if n > 0:
        pc = sum(rec.correct for rec in dataset.records) / n
    return DatasetSummary(n_interactions=n, n_students=dataset.n_students,
                          n_items=dataset.n_items, n_groups=dataset.n_groups,
                          n_skills=len(dataset.skill_index),
                          percent_correct=pc)
