"""Shared data model: units, samples and matched designs.

All containers are frozen dataclasses. Array views (``Sample.z``,
``Sample.scores`` ...) are rebuilt on access, so callers that loop should
grab them once.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a sample or design violates a structural invariant."""

    def __init__(self, message: str, unit_id: str | None = None, line: int | None = None):
        self.unit_id = unit_id
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if unit_id is not None:
            prefix += f"unit {unit_id!r}: "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Unit:
    id: str
    treatment: int
    outcome: float | None = None
    covariates: tuple[float, ...] = ()
    score: float | None = None


@dataclass(frozen=True)
class Sample:
    units: tuple[Unit, ...]
    strata: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        if self.strata is not None:
            object.__setattr__(self, "strata", tuple(str(s) for s in self.strata))

    def __len__(self) -> int:
        return len(self.units)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.units]

    @property
    def z(self) -> np.ndarray:
        return np.array([u.treatment for u in self.units], dtype=np.int8)

    @property
    def y(self) -> np.ndarray:
        return np.array([np.nan if u.outcome is None else u.outcome for u in self.units], dtype=float)

    @property
    def X(self) -> np.ndarray:
        p = len(self.units[0].covariates) if self.units else 0
        return np.array([u.covariates for u in self.units], dtype=float).reshape(len(self.units), p)

    @property
    def scores(self) -> np.ndarray:
        return np.array([np.nan if u.score is None else u.score for u in self.units], dtype=float)

    def index(self) -> dict[str, int]:
        return {u.id: i for i, u in enumerate(self.units)}

    def with_scores(self, scores: Sequence[float]) -> "Sample":
        if len(scores) != len(self.units):
            raise ValidationError("score vector length does not match sample size")
        units = tuple(replace(u, score=float(s)) for u, s in zip(self.units, scores))
        return Sample(units, self.strata)

    def with_outcomes(self, outcomes: Sequence[float]) -> "Sample":
        units = tuple(
            replace(u, outcome=None if v is None else float(v)) for u, v in zip(self.units, outcomes)
        )
        return Sample(units, self.strata)

    def with_treatments(self, treatments: Sequence[int]) -> "Sample":
        units = tuple(replace(u, treatment=int(t)) for u, t in zip(self.units, treatments))
        return Sample(units, self.strata)


@dataclass(frozen=True)
class MatchedDesign:
    """Pairs are ``(treated_id, control_id)``; unmatched entries carry frozen treatments."""

    pairs: tuple[tuple[str, str], ...]
    unmatched: tuple[tuple[str, int], ...]
    objective: float
    caliper: float | None = None
    stratum_of: Mapping[str, str] | None = field(default=None, compare=False, hash=False)

    @property
    def K(self) -> int:
        return len(self.pairs)

    def pair_set(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.pairs)

    def unmatched_set(self) -> frozenset[tuple[str, int]]:
        return frozenset(self.unmatched)

    def same_structure(self, other: "MatchedDesign") -> bool:
        return self.pair_set() == other.pair_set() and self.unmatched_set() == other.unmatched_set()


def validate_sample(sample: Sample) -> Sample:
    seen: set[str] = set()
    p = None
    for u in sample.units:
        if u.id in seen:
            raise ValidationError("duplicate id", u.id)
        seen.add(u.id)
        if u.treatment not in (0, 1):
            raise ValidationError(f"treatment must be 0 or 1, got {u.treatment!r}", u.id)
        if u.score is not None and not (0.0 < u.score < 1.0):
            raise ValidationError(f"score {u.score!r} outside (0, 1)", u.id)
        if p is None:
            p = len(u.covariates)
        elif len(u.covariates) != p:
            raise ValidationError(f"expected {p} covariates, got {len(u.covariates)}", u.id)
        if any(not math.isfinite(x) for x in u.covariates):
            raise ValidationError("non-finite covariate", u.id)
        if u.outcome is not None and math.isnan(u.outcome):
            raise ValidationError("outcome is NaN; encode missing outcomes as None", u.id)
    if sample.strata is not None and len(sample.strata) != len(sample.units):
        raise ValidationError("strata labels must have one entry per unit")
    return sample


def jitter_ties(sample: Sample, magnitude: float = 1e-9, seed: int = 0) -> Sample:
    """Perturb tied scores so that every score is distinct.

    Only members of a tie group move; each moves by less than ``magnitude``.
    """
    scores = sample.scores
    present = ~np.isnan(scores)
    vals = scores[present]
    if vals.size < 2:
        return sample
    uniq = np.unique(vals)
    if uniq.size == vals.size:
        return sample
    if magnitude <= 0:
        raise ValidationError("jitter magnitude must be positive")
    if uniq.size > 1:
        min_gap = float(np.min(np.diff(uniq)))
        if magnitude >= min_gap / 4:
            raise ValidationError(
                f"jitter magnitude {magnitude} too large for minimal score gap {min_gap}"
            )
    rng = np.random.default_rng(seed)
    out = scores.copy()
    idx = np.flatnonzero(present)
    order = idx[np.argsort(vals, kind="stable")]
    sorted_vals = scores[order]
    start = 0
    while start < len(order):
        stop = start + 1
        while stop < len(order) and sorted_vals[stop] == sorted_vals[start]:
            stop += 1
        if stop - start > 1:
            members = order[start:stop]
            # distinct offsets in (-magnitude, magnitude); redraw on the (unlikely) collision
            while True:
                offsets = rng.uniform(-magnitude, magnitude, size=len(members)) * 0.999
                moved = sorted_vals[start] + offsets
                if np.unique(moved).size == len(members):
                    break
            moved = np.clip(moved, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
            out[members] = moved
        start = stop
    units = tuple(
        replace(u, score=float(out[i])) if present[i] else u for i, u in enumerate(sample.units)
    )
    return Sample(units, sample.strata)


def design_objective(design: MatchedDesign, sample: Sample) -> float:
    idx = sample.index()
    s = sample.scores
    return float(sum(abs(s[idx[t]] - s[idx[c]]) for t, c in design.pairs))


def check_design(design: MatchedDesign, sample: Sample, tol: float = 1e-12) -> None:
    """Raise ValidationError unless ``design`` is structurally consistent with ``sample``."""
    idx = sample.index()
    z = sample.z
    used: set[str] = set()
    for t, c in design.pairs:
        for uid in (t, c):
            if uid not in idx:
                raise ValidationError("design references unknown unit", uid)
            if uid in used:
                raise ValidationError("unit appears in more than one pair", uid)
            used.add(uid)
        if z[idx[t]] != 1 or z[idx[c]] != 0:
            raise ValidationError("pair does not contain exactly one treated unit", t)
    for uid, zt in design.unmatched:
        if uid not in idx:
            raise ValidationError("design references unknown unit", uid)
        if uid in used:
            raise ValidationError("unit both matched and unmatched", uid)
        if int(zt) != int(z[idx[uid]]):
            raise ValidationError("frozen treatment disagrees with sample", uid)
        used.add(uid)
    if len(used) != len(idx):
        missing = sorted(set(idx) - used)
        raise ValidationError("units missing from design", missing[0])
    obj = design_objective(design, sample)
    if abs(obj - design.objective) > tol * max(1.0, len(design.pairs)):
        raise ValidationError(f"stored objective {design.objective} != recomputed {obj}")


# ---------------------------------------------------------------- CSV ingestion

def read_sample_csv(source: str | io.TextIOBase, score_column: str | None = "score") -> Sample:
    """Read ``id,z,y,x1..xp[,stratum][,score]``. Empty ``y`` means missing outcome."""
    if isinstance(source, str):
        with open(source, newline="") as fh:
            return read_sample_csv(fh, score_column)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return Sample(())
    for col in ("id", "z", "y"):
        if col not in header:
            raise ValidationError(f"missing required column {col!r}", line=1)
    xcols = sorted(
        (h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:])
    )
    has_stratum = "stratum" in header
    has_score = score_column is not None and score_column in header
    pos = {h: i for i, h in enumerate(header)}
    units = []
    strata = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        uid = row[pos["id"]].strip()
        try:
            z = int(row[pos["z"]])
        except ValueError:
            raise ValidationError(f"bad treatment {row[pos['z']]!r}", uid, lineno) from None
        ytxt = row[pos["y"]].strip()
        try:
            y = float(ytxt) if ytxt else None
            x = tuple(float(row[pos[h]]) for h in xcols)
            score = None
            if has_score and row[pos[score_column]].strip():
                score = float(row[pos[score_column]])
        except ValueError as exc:
            raise ValidationError(str(exc), uid, lineno) from None
        units.append(Unit(uid, z, y, x, score))
        if has_stratum:
            strata.append(row[pos["stratum"]].strip())
    sample = Sample(tuple(units), tuple(strata) if has_stratum else None)
    try:
        return validate_sample(sample)
    except ValidationError as exc:
        if exc.unit_id is not None:
            line = 2 + sample.ids.index(exc.unit_id)
            raise ValidationError(str(exc), line=line) from None
        raise


def write_sample_csv(sample: Sample, dest: str | io.TextIOBase, include_scores: bool = True) -> None:
    if isinstance(dest, str):
        with open(dest, "w", newline="") as fh:
            write_sample_csv(sample, fh, include_scores)
        return
    p = len(sample.units[0].covariates) if sample.units else 0
    header = ["id", "z", "y"] + [f"x{j + 1}" for j in range(p)]
    if sample.strata is not None:
        header.append("stratum")
    with_scores = include_scores and any(u.score is not None for u in sample.units)
    if with_scores:
        header.append("score")
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(header)
    for i, u in enumerate(sample.units):
        row = [u.id, u.treatment, "" if u.outcome is None else repr(float(u.outcome))]
        row += [repr(float(x)) for x in u.covariates]
        if sample.strata is not None:
            row.append(sample.strata[i])
        if with_scores:
            row.append("" if u.score is None else repr(float(u.score)))
        w.writerow(row)


def write_design_csv(design: MatchedDesign, sample: Sample, dest: str | io.TextIOBase) -> None:
    """Pairs as ``pair_id,treated_id,control_id,distance``, then an ``unmatched`` section."""
    if isinstance(dest, str):
        with open(dest, "w", newline="") as fh:
            write_design_csv(design, sample, fh)
        return
    idx = sample.index()
    s = sample.scores
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["pair_id", "treated_id", "control_id", "distance"])
    for k, (t, c) in enumerate(design.pairs):
        w.writerow([k, t, c, repr(float(abs(s[idx[t]] - s[idx[c]])))])
    w.writerow(["unmatched"])
    w.writerow(["unit_id", "z"])
    for uid, zt in design.unmatched:
        w.writerow([uid, zt])


def read_design_csv(source: str | io.TextIOBase, sample: Sample, caliper: float | None = None) -> MatchedDesign:
    if isinstance(source, str):
        with open(source, newline="") as fh:
            return read_design_csv(fh, sample, caliper)
    rows = list(csv.reader(source))
    if not rows or rows[0][:3] != ["pair_id", "treated_id", "control_id"]:
        raise ValidationError("design file lacks pair header", line=1)
    pairs: list[tuple[str, str]] = []
    unmatched: list[tuple[str, int]] = []
    section = "pairs"
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if row == ["unmatched"]:
            section = "unmatched_header"
            continue
        if section == "unmatched_header":
            section = "unmatched"
            continue
        if section == "pairs":
            pairs.append((row[1], row[2]))
        else:
            unmatched.append((row[0], int(row[1])))
    design = MatchedDesign(tuple(pairs), tuple(unmatched), 0.0, caliper)
    return replace(design, objective=design_objective(design, sample))

