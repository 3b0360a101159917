"""Run-off triangle data model and long-format CSV ingestion.

A portfolio holds K business lines observed over I accident semesters and
J development lags with I = J; the observed upper set is
T_U = {(i, j): i + j <= I + 1} and the future lower set is
T_L = {(i, j): i + j > I + 1} (1-based indices).  Each line carries earned
premiums per accident semester and incremental loss ratios
``ratio[i, j] = incremental_claim[i, j] / premium[i]`` on T_U.

CSV schema (header required, one row per observed cell):

    line_id,region,coverage,accident_semester,development_lag,premium,incremental_claim

Accident semesters are labeled ``YYYY-1`` / ``YYYY-2`` in files and mapped
to i = 1..I in chronological order.  Floats are written back with 17
significant digits so a save/load round trip is bit-exact.
"""
import csv
import re
from dataclasses import dataclass, field

import numpy as np

from triangle_risk.exceptions import IngestionError

CSV_HEADER = [
    "line_id",
    "region",
    "coverage",
    "accident_semester",
    "development_lag",
    "premium",
    "incremental_claim",
]

_SEMESTER_RE = re.compile(r"^(\d{4})-([12])$")


@dataclass(frozen=True)
class TriangleIndex:
    """Dimensions of the run-off grid and the observed/future partition."""

    I: int
    J: int

    def __post_init__(self):
        if self.I < 1 or self.J < 1:
            raise IngestionError("I and J must be positive")
        if self.I != self.J:
            raise IngestionError(
                "this model requires a square run-off grid (I = J), got "
                "I=%d J=%d" % (self.I, self.J)
            )

    @property
    def n_upper(self):
        return self.J * (self.J + 1) // 2

    @property
    def n_lower(self):
        return self.J * (self.J - 1) // 2

    def n_observed(self, i):
        """Number of observed lags for accident semester i (= J + 1 - i)."""
        return self.J + 1 - i

    def in_upper(self, i, j):
        return 1 <= i <= self.I and 1 <= j <= self.J and i + j <= self.I + 1

    def in_lower(self, i, j):
        return 1 <= i <= self.I and 1 <= j <= self.J and i + j > self.I + 1

    def upper_cells(self):
        """Row-major list of observed cells (1-based)."""
        return [
            (i, j)
            for i in range(1, self.I + 1)
            for j in range(1, self.J + 2 - i)
        ]

    def lower_cells(self):
        """Row-major list of future cells (1-based)."""
        return [
            (i, j)
            for i in range(1, self.I + 1)
            for j in range(self.J + 2 - i, self.J + 1)
        ]


@dataclass
class LossTriangle:
    """One business line: premiums by accident semester, ratios on T_U."""

    line_id: str
    index: TriangleIndex
    premiums: np.ndarray
    ratios: dict
    claims: dict = field(repr=False, default=None)
    region: str = ""
    coverage: str = ""
    clamp_count: int = 0

    def __post_init__(self):
        self.premiums = np.asarray(self.premiums, dtype=float)
        if self.premiums.shape != (self.index.I,):
            raise IngestionError(
                "line %s: expected %d premiums, got shape %s"
                % (self.line_id, self.index.I, self.premiums.shape)
            )
        if np.any(~np.isfinite(self.premiums)) or np.any(self.premiums <= 0.0):
            raise IngestionError("line %s: premiums must be finite and > 0" % self.line_id)
        expected = set(self.index.upper_cells())
        got = set(self.ratios)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise IngestionError(
                "line %s: ratio cells do not cover the upper triangle "
                "(missing %s, extra %s)" % (self.line_id, missing[:5], extra[:5])
            )
        vals = np.array([self.ratios[c] for c in self.index.upper_cells()])
        if np.any(~np.isfinite(vals)) or np.any(vals < 0.0):
            raise IngestionError("line %s: ratios must be finite and >= 0" % self.line_id)
        if self.claims is None:
            self.claims = {
                (i, j): self.ratios[(i, j)] * self.premiums[i - 1]
                for (i, j) in self.ratios
            }

    def ratio_vector(self):
        """Ratios in row-major upper-triangle order."""
        return np.array([self.ratios[c] for c in self.index.upper_cells()])

    def premium_of(self, i):
        return float(self.premiums[i - 1])


def from_incremental_claims(
    line_id, index, premiums, claims, region="", coverage=""
):
    """Build a LossTriangle from incremental claims on the upper triangle.

    Negative incremental claims are clamped to zero (the Tweedie support is
    nonnegative); the number of clamped cells is surfaced as
    ``triangle.clamp_count``.
    """
    premiums = np.asarray(premiums, dtype=float)
    if premiums.shape != (index.I,):
        raise IngestionError(
            "expected %d premiums, got shape %s" % (index.I, premiums.shape)
        )
    if np.any(~np.isfinite(premiums)) or np.any(premiums <= 0.0):
        raise IngestionError("premiums must be finite and > 0")
    expected = index.upper_cells()
    missing = [c for c in expected if c not in claims]
    if missing:
        raise IngestionError(
            "missing incremental claim at cell (i=%d, j=%d)" % missing[0]
        )
    clamped = 0
    ratios = {}
    kept = {}
    for (i, j) in expected:
        c = float(claims[(i, j)])
        if not np.isfinite(c):
            raise IngestionError("claim at (%d, %d) is not finite" % (i, j))
        if c < 0.0:
            c = 0.0
            clamped += 1
        kept[(i, j)] = c
        ratios[(i, j)] = c / premiums[i - 1]
    return LossTriangle(
        line_id=line_id,
        index=index,
        premiums=premiums,
        ratios=ratios,
        claims=kept,
        region=region,
        coverage=coverage,
        clamp_count=clamped,
    )


@dataclass
class Portfolio:
    """Ordered business lines sharing one TriangleIndex."""

    lines: list
    semester_labels: list

    def __post_init__(self):
        if not self.lines:
            raise IngestionError("portfolio has no lines")
        index = self.lines[0].index
        for tri in self.lines:
            if tri.index != index:
                raise IngestionError("all lines must share the same TriangleIndex")
        if len(self.semester_labels) != index.I:
            raise IngestionError(
                "expected %d semester labels, got %d"
                % (index.I, len(self.semester_labels))
            )
        ids = [tri.line_id for tri in self.lines]
        if len(set(ids)) != len(ids):
            raise IngestionError("duplicate line_id in portfolio")

    @property
    def index(self):
        return self.lines[0].index

    @property
    def line_ids(self):
        return [tri.line_id for tri in self.lines]

    @property
    def K(self):
        return len(self.lines)

    def line(self, line_id):
        for tri in self.lines:
            if tri.line_id == line_id:
                return tri
        raise KeyError(line_id)


def _semester_sort_key(label):
    m = _SEMESTER_RE.match(label)
    if not m:
        raise IngestionError(
            "accident_semester %r is not of the form YYYY-1 or YYYY-2" % label
        )
    return int(m.group(1)) * 2 + int(m.group(2))


def default_semester_labels(I, start_year=2003, start_half=1):
    """Consecutive semester labels, e.g. 2003-1, 2003-2, 2004-1, ..."""
    labels = []
    year, half = start_year, start_half
    for _ in range(I):
        labels.append("%d-%d" % (year, half))
        if half == 1:
            half = 2
        else:
            half = 1
            year += 1
    return labels


def load_csv(path):
    """Read a long-format portfolio CSV into a Portfolio."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("no rows") from None
        if header != CSV_HEADER:
            raise IngestionError(
                "bad header: expected %s, got %s" % (",".join(CSV_HEADER), header)
            )
        rows = list(reader)
    if not rows:
        raise IngestionError("no rows")

    labels = set()
    per_line = {}
    line_order = []
    for rownum, row in enumerate(rows, start=2):
        if len(row) != len(CSV_HEADER):
            raise IngestionError(
                "row %d: expected %d fields, got %d"
                % (rownum, len(CSV_HEADER), len(row))
            )
        line_id, region, coverage, sem, lag_s, prem_s, claim_s = row
        if not _SEMESTER_RE.match(sem):
            raise IngestionError(
                "row %d: accident_semester %r is not YYYY-1/YYYY-2" % (rownum, sem)
            )
        try:
            lag = int(lag_s)
            premium = float(prem_s)
            claim = float(claim_s)
        except ValueError as exc:
            raise IngestionError("row %d: %s" % (rownum, exc)) from None
        if lag < 1:
            raise IngestionError("row %d: development_lag must be >= 1" % rownum)
        labels.add(sem)
        if line_id not in per_line:
            per_line[line_id] = {
                "region": region,
                "coverage": coverage,
                "cells": {},
                "premiums": {},
                "rownums": {},
            }
            line_order.append(line_id)
        rec = per_line[line_id]
        if rec["region"] != region or rec["coverage"] != coverage:
            raise IngestionError(
                "row %d: region/coverage inconsistent for line %s" % (rownum, line_id)
            )
        key = (sem, lag)
        if key in rec["cells"]:
            raise IngestionError(
                "row %d: duplicate cell (line %s, %s, lag %d); first seen at row %d"
                % (rownum, line_id, sem, lag, rec["rownums"][key])
            )
        if sem in rec["premiums"] and rec["premiums"][sem] != premium:
            raise IngestionError(
                "row %d: premium %r for %s disagrees with earlier value %r"
                % (rownum, premium, sem, rec["premiums"][sem])
            )
        rec["premiums"][sem] = premium
        rec["cells"][key] = claim
        rec["rownums"][key] = rownum

    ordered_labels = sorted(labels, key=_semester_sort_key)
    I = len(ordered_labels)
    J = max(lag for rec in per_line.values() for (_, lag) in rec["cells"])
    if J != I:
        raise IngestionError(
            "grid is not square: %d accident semesters but max development_lag %d"
            % (I, J)
        )
    index = TriangleIndex(I, J)
    sem_to_i = {s: k + 1 for k, s in enumerate(ordered_labels)}

    lines = []
    for line_id in line_order:
        rec = per_line[line_id]
        claims = {}
        for (sem, lag), claim in rec["cells"].items():
            i = sem_to_i[sem]
            if not index.in_upper(i, lag):
                raise IngestionError(
                    "row %d: lower-triangle cell in input (line %s, i=%d, j=%d)"
                    % (rec["rownums"][(sem, lag)], line_id, i, lag)
                )
            claims[(i, lag)] = claim
        missing_sem = [s for s in ordered_labels if s not in rec["premiums"]]
        if missing_sem:
            raise IngestionError(
                "line %s: no rows for accident semester %s" % (line_id, missing_sem[0])
            )
        premiums = np.array([rec["premiums"][s] for s in ordered_labels])
        if np.any(premiums <= 0.0):
            raise IngestionError("line %s: premiums must be > 0" % line_id)
        lines.append(
            from_incremental_claims(
                line_id,
                index,
                premiums,
                claims,
                region=rec["region"],
                coverage=rec["coverage"],
            )
        )
    return Portfolio(lines=lines, semester_labels=ordered_labels)


def _fmt(x):
    return "%.17g" % x


def save_csv(portfolio, path):
    """Write a Portfolio in the long CSV format (17 significant digits)."""
    index = portfolio.index
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for tri in portfolio.lines:
            for (i, j) in index.upper_cells():
                writer.writerow(
                    [
                        tri.line_id,
                        tri.region,
                        tri.coverage,
                        portfolio.semester_labels[i - 1],
                        j,
                        _fmt(tri.premiums[i - 1]),
                        _fmt(tri.claims[(i, j)]),
                    ]
                )
