"""Counting-process panel data model.

Subject follow-up is stored long-format: one row per (start, stop]
interval carrying the covariate values and treatment statuses in force on
that interval, with outcome/censoring indicators on the terminal row.
From a validated panel the module derives treatment-eligibility
schedules, censoring anchors, pooled pseudo-subjects, and discretized
(binned) panels for the aligned-time comparator.

Conventions
-----------
* Per subject, rows partition (0, t_K] exactly and are ordered by start.
* Covariates on a row are the most recent measurements taken at the row's
  start (last observation carried forward).
* A treatment initiation is a 0 -> 1 status flip at a row boundary u; the
  initiation is observed at u. A subject already on treatment in its
  first row is treated as a baseline condition, not an initiation.
* Treatment indices are 1-based in user-facing structures, matching the
  ``A1..AW`` column names.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError

__all__ = [
    "ColumnSchema",
    "ObservationRow",
    "CountingProcessPanel",
    "EligibilitySchedule",
    "FollowupAnchor",
    "PseudoSubject",
    "PseudoSubjectSet",
    "ingest_panel",
    "write_panel",
    "derive_eligibility",
    "eligibility_to_csv",
    "followup_anchor",
    "to_pseudosubjects",
    "discretize",
]

_STANDARD_COLUMNS = ("id", "tstart", "tstop", "event", "censor")


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from panel fields to CSV column names.

    ``treatments=None`` autodetects columns named ``A1, A2, ...`` (in
    numeric order); ``covariates=None`` takes every remaining column.
    """

    id: str = "id"
    tstart: str = "tstart"
    tstop: str = "tstop"
    event: str = "event"
    censor: str = "censor"
    treatments: tuple[str, ...] | None = None
    covariates: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ObservationRow:
    """One (t_start, t_stop] follow-up interval of a subject."""

    subject_id: str
    t_start: float
    t_stop: float
    covariates: tuple[float, ...]
    treatment_status: tuple[int, ...]
    outcome_event: int
    censor_event: int


@dataclass
class CountingProcessPanel:
    """Long-format subject histories packed into column arrays.

    Rows are grouped by subject (``row_offsets[i]:row_offsets[i+1]``) and
    sorted by start time within subject. All invariants are enforced by
    :meth:`validate`, which construction paths call.
    """

    subject_ids: list[str]
    row_offsets: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str]
    event: np.ndarray
    censor: np.ndarray
    max_followup: float

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_rows(self) -> int:
        return self.start.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.treatments.shape[1]

    @property
    def t_last(self) -> np.ndarray:
        """Last follow-up time t_K per subject."""
        return self.stop[self.row_offsets[1:] - 1]

    @property
    def terminal_rows(self) -> np.ndarray:
        """Index of each subject's last row."""
        return self.row_offsets[1:] - 1

    def subject_rows(self, i: int) -> slice:
        return slice(int(self.row_offsets[i]), int(self.row_offsets[i + 1]))

    def row_subject(self) -> np.ndarray:
        """Subject index of every row."""
        counts = np.diff(self.row_offsets)
        return np.repeat(np.arange(self.n_subjects), counts)

    def rows(self) -> Iterator[ObservationRow]:
        for i, sid in enumerate(self.subject_ids):
            for k in range(self.row_offsets[i], self.row_offsets[i + 1]):
                yield ObservationRow(
                    subject_id=sid,
                    t_start=float(self.start[k]),
                    t_stop=float(self.stop[k]),
                    covariates=tuple(float(v) for v in self.covariates[k]),
                    treatment_status=tuple(int(v) for v in self.treatments[k]),
                    outcome_event=int(self.event[k]),
                    censor_event=int(self.censor[k]),
                )

    def validate(self) -> "CountingProcessPanel":
        """Check every panel invariant; raise DataValidationError on the
        first violation, naming the subject and row."""
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.n_rows:
            raise DataValidationError("row_offsets do not span the row arrays")
        if not np.all(np.isfinite(self.covariates)):
            bad = int(np.argwhere(~np.isfinite(self.covariates).all(axis=1))[0, 0])
            raise DataValidationError(self._row_msg(bad, "non-finite covariate value"))
        if not np.isin(self.treatments, (0, 1)).all():
            bad = int(np.argwhere(~np.isin(self.treatments, (0, 1)).all(axis=1))[0, 0])
            raise DataValidationError(self._row_msg(bad, "treatment flag not 0/1"))
        for arr, name in ((self.event, "event"), (self.censor, "censor")):
            if not np.isin(arr, (0, 1)).all():
                bad = int(np.argwhere(~np.isin(arr, (0, 1)))[0, 0])
                raise DataValidationError(self._row_msg(bad, f"{name} flag not 0/1"))
        both = (self.event == 1) & (self.censor == 1)
        if both.any():
            raise DataValidationError(
                self._row_msg(int(np.argwhere(both)[0, 0]), "event and censor both set")
            )
        for i, sid in enumerate(self.subject_ids):
            lo, hi = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
            if hi <= lo:
                raise DataValidationError(f"subject {sid}: no rows")
            s, e = self.start[lo:hi], self.stop[lo:hi]
            if s[0] != 0.0:
                raise DataValidationError(f"subject {sid}, row 0: follow-up must begin at 0")
            if not np.all(s < e):
                k = int(np.argwhere(~(s < e))[0, 0])
                raise DataValidationError(f"subject {sid}, row {k}: t_start >= t_stop")
            if hi - lo > 1 and not np.array_equal(s[1:], e[:-1]):
                k = int(np.argwhere(s[1:] != e[:-1])[0, 0]) + 1
                if s[k] < e[k - 1]:
                    raise DataValidationError(f"subject {sid}, row {k}: overlapping intervals")
                raise DataValidationError(f"subject {sid}, row {k}: gap in follow-up intervals")
            flagged = np.argwhere((self.event[lo:hi] == 1) | (self.censor[lo:hi] == 1))
            if flagged.size and (flagged.size > 1 or flagged[0, 0] != hi - lo - 1):
                k = int(flagged[0, 0])
                raise DataValidationError(
                    f"subject {sid}, row {k}: event/censor on non-terminal row"
                )
            if e[-1] > self.max_followup:
                raise DataValidationError(
                    f"subject {sid}: follow-up exceeds max_followup {self.max_followup}"
                )
        return self

    def _row_msg(self, row: int, what: str) -> str:
        i = int(np.searchsorted(self.row_offsets, row, side="right") - 1)
        local = row - int(self.row_offsets[i])
        return f"subject {self.subject_ids[i]}, row {local}: {what}"

    def take_subjects(self, indices: Sequence[int]) -> "CountingProcessPanel":
        """New panel from subject indices (repeats allowed; resampled
        subjects get fresh ids so bootstrap copies stay distinct)."""
        indices = np.asarray(indices, dtype=np.int64)
        rows = np.concatenate(
            [np.arange(self.row_offsets[i], self.row_offsets[i + 1]) for i in indices]
        )
        counts = (self.row_offsets[indices + 1] - self.row_offsets[indices]).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        ids = [f"{self.subject_ids[i]}#{k}" for k, i in enumerate(indices)]
        return CountingProcessPanel(
            subject_ids=ids,
            row_offsets=offsets,
            start=self.start[rows].copy(),
            stop=self.stop[rows].copy(),
            treatments=self.treatments[rows].copy(),
            covariates=self.covariates[rows].copy(),
            covariate_names=list(self.covariate_names),
            event=self.event[rows].copy(),
            censor=self.censor[rows].copy(),
            max_followup=self.max_followup,
        )


@dataclass(frozen=True)
class EligibilitySchedule:
    """Eligibility intervals (V_j, U_j] of one subject for one treatment.

    ``initiated[j]`` marks intervals closed by an initiation at U_j; an
    interval ending at t_K without initiation has ``initiated[j]=False``.
    Q (initiation count) and J (interval count) satisfy Q in {J-1, J},
    with Q < J exactly when the final interval runs out at t_K.
    """

    subject_id: str
    treatment: int
    intervals: tuple[tuple[float, float], ...]
    initiated: tuple[bool, ...]
    t_last: float

    @property
    def J(self) -> int:
        return len(self.intervals)

    @property
    def Q(self) -> int:
        return int(sum(self.initiated))

    @property
    def initiation_times(self) -> tuple[float, ...]:
        return tuple(u for (v, u), ini in zip(self.intervals, self.initiated) if ini)


@dataclass(frozen=True)
class FollowupAnchor:
    """Censoring-weight evaluation time G and which branch produced it."""

    subject_id: str
    G: float
    kind: str  # "event" | "administrative_end" | "censored"


@dataclass(frozen=True)
class PseudoSubject:
    """One LTRC record: covariates frozen on [t_left, t_right)."""

    t_left: float
    t_right: float
    delta: int
    covariates: tuple[float, ...]


class PseudoSubjectSet:
    """Array-backed sequence of pooled pseudo-subjects.

    Behaves like a list of :class:`PseudoSubject` while exposing the
    column arrays (`left`, `right`, `delta`, `x`) that the fitting code
    consumes directly.
    """

    def __init__(self, left, right, delta, x, names: Sequence[str]):
        self.left = np.asarray(left, dtype=np.float64)
        self.right = np.asarray(right, dtype=np.float64)
        self.delta = np.asarray(delta, dtype=np.int8)
        self.x = np.asarray(x, dtype=np.float64)
        self.names = list(names)

    def __len__(self) -> int:
        return self.left.shape[0]

    def __getitem__(self, k: int) -> PseudoSubject:
        return PseudoSubject(
            t_left=float(self.left[k]),
            t_right=float(self.right[k]),
            delta=int(self.delta[k]),
            covariates=tuple(float(v) for v in self.x[k]),
        )

    def __iter__(self) -> Iterator[PseudoSubject]:
        return (self[k] for k in range(len(self)))


def _format_value(v: float) -> str:
    # repr of a Python float is the shortest round-tripping decimal form,
    # which makes write->read bit-exact for finite doubles.
    f = float(v)
    if f.is_integer() and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def ingest_panel(
    source, schema: ColumnSchema | None = None, max_followup: float | None = None
) -> CountingProcessPanel:
    """Read and validate a delimiter-separated panel.

    Parameters
    ----------
    source : path or text stream
        Header row required; '.' decimal, UTF-8.
    schema : ColumnSchema, optional
        Column mapping; defaults autodetect ``A1..AW`` treatment columns
        and take every remaining column as a covariate.
    max_followup : float, optional
        Administrative horizon t^o; defaults to the largest stop time.

    Raises
    ------
    DataValidationError
        Missing columns, overlapping intervals, non-finite values, event
        on a non-terminal row; messages carry subject id and row number.
    """
    schema = schema or ColumnSchema()
    if hasattr(source, "read"):
        reader = csv.reader(source)
        rows = list(reader)
    else:
        with open(source, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    if not rows:
        raise DataValidationError("empty input: no header row")
    header = rows[0]
    col = {name: k for k, name in enumerate(header)}
    for std in _STANDARD_COLUMNS:
        if getattr(schema, std) not in col:
            raise DataValidationError(f"missing column '{getattr(schema, std)}'")
    if schema.treatments is None:
        trt_names = sorted(
            (c for c in header if len(c) > 1 and c[0] == "A" and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
    else:
        trt_names = list(schema.treatments)
    for c in trt_names:
        if c not in col:
            raise DataValidationError(f"missing treatment column '{c}'")
    if schema.covariates is None:
        used = {getattr(schema, s) for s in _STANDARD_COLUMNS} | set(trt_names)
        cov_names = [c for c in header if c not in used]
    else:
        cov_names = list(schema.covariates)
        for c in cov_names:
            if c not in col:
                raise DataValidationError(f"missing covariate column '{c}'")

    body = rows[1:]
    n_rows = len(body)
    ids_raw = [r[col[schema.id]] for r in body]
    try:
        start = np.array([float(r[col[schema.tstart]]) for r in body])
        stop = np.array([float(r[col[schema.tstop]]) for r in body])
        event = np.array([int(float(r[col[schema.event]])) for r in body], dtype=np.int8)
        censor = np.array([int(float(r[col[schema.censor]])) for r in body], dtype=np.int8)
        trt = np.array(
            [[int(float(r[col[c]])) for c in trt_names] for r in body], dtype=np.int8
        ).reshape(n_rows, len(trt_names))
        cov = np.array(
            [[float(r[col[c]]) for c in cov_names] for r in body], dtype=np.float64
        ).reshape(n_rows, len(cov_names))
    except ValueError as exc:
        raise DataValidationError(f"unparseable numeric value: {exc}") from exc
    if not np.all(np.isfinite(start)) or not np.all(np.isfinite(stop)):
        raise DataValidationError("non-finite start/stop time")

    order = {}
    for sid in ids_raw:
        order.setdefault(sid, len(order))
    sid_codes = np.array([order[s] for s in ids_raw], dtype=np.int64)
    perm = np.lexsort((start, sid_codes))
    sid_codes = sid_codes[perm]
    counts = np.bincount(sid_codes, minlength=len(order))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    panel = CountingProcessPanel(
        subject_ids=list(order),
        row_offsets=offsets,
        start=start[perm],
        stop=stop[perm],
        treatments=trt[perm],
        covariates=cov[perm],
        covariate_names=cov_names,
        event=event[perm],
        censor=censor[perm],
        max_followup=float(max_followup if max_followup is not None else stop.max(initial=0.0)),
    )
    return panel.validate()


def write_panel(panel: CountingProcessPanel, dest) -> None:
    """Write a panel as CSV; inverse of :func:`ingest_panel` bit-exactly."""
    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh)
        trt_names = [f"A{w_+1}" for w_ in range(panel.n_treatments)]
        w.writerow(list(_STANDARD_COLUMNS) + trt_names + panel.covariate_names)
        subj = panel.row_subject()
        for k in range(panel.n_rows):
            w.writerow(
                [
                    panel.subject_ids[subj[k]],
                    _format_value(panel.start[k]),
                    _format_value(panel.stop[k]),
                    int(panel.event[k]),
                    int(panel.censor[k]),
                ]
                + [int(v) for v in panel.treatments[k]]
                + [_format_value(v) for v in panel.covariates[k]]
            )
    finally:
        if own:
            fh.close()


def panel_to_csv_text(panel: CountingProcessPanel) -> str:
    buf = io.StringIO()
    write_panel(panel, buf)
    return buf.getvalue()


def derive_eligibility(panel: CountingProcessPanel, w: int) -> list[EligibilitySchedule]:
    """Derive eligibility schedules for treatment ``w`` (1-based).

    Off-treatment spans become (V_j, U_j] intervals. A 0 -> 1 status flip
    at boundary u closes the open interval with an initiation observed at
    U_j = u; an interval still open at t_K closes there without counting
    toward Q. A subject on treatment in its first row contributes no
    interval before that course ends; a subject on treatment throughout
    has an empty schedule (J = 0).
    """
    if not 1 <= w <= panel.n_treatments:
        raise ConfigError(f"treatment index {w} out of range 1..{panel.n_treatments}")
    out = []
    a = panel.treatments[:, w - 1]
    for i, sid in enumerate(panel.subject_ids):
        lo, hi = int(panel.row_offsets[i]), int(panel.row_offsets[i + 1])
        t_k = float(panel.stop[hi - 1])
        intervals: list[tuple[float, float]] = []
        initiated: list[bool] = []
        open_v: float | None = None if a[lo] == 1 else 0.0
        for k in range(lo + 1, hi):
            if a[k] == a[k - 1]:
                continue
            u = float(panel.start[k])
            if a[k] == 1:  # initiation at boundary u
                intervals.append((open_v, u))
                initiated.append(True)
                open_v = None
            else:  # course ends; eligibility resumes
                open_v = u
        if open_v is not None:
            intervals.append((open_v, t_k))
            initiated.append(False)
        out.append(
            EligibilitySchedule(
                subject_id=sid,
                treatment=w,
                intervals=tuple(intervals),
                initiated=tuple(initiated),
                t_last=t_k,
            )
        )
    return out


def eligibility_to_csv(schedules: Iterable[EligibilitySchedule], dest) -> None:
    """Export schedules as ``id, w, j, V, U, initiated`` rows."""
    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(["id", "w", "j", "V", "U", "initiated"])
        for sch in schedules:
            for j, ((v, u), ini) in enumerate(zip(sch.intervals, sch.initiated), start=1):
                w.writerow(
                    [sch.subject_id, sch.treatment, j, _format_value(v), _format_value(u), int(ini)]
                )
    finally:
        if own:
            fh.close()


def followup_anchor(panel: CountingProcessPanel) -> list[FollowupAnchor]:
    """Censoring anchors G per subject.

    G = T when the outcome occurred; G = C when censoring was observed at
    C <= t_K; otherwise the subject reached administrative end and
    G = t_K. The branches are exhaustive.
    """
    out = []
    for i, sid in enumerate(panel.subject_ids):
        last = int(panel.row_offsets[i + 1]) - 1
        t_k = float(panel.stop[last])
        if panel.event[last] == 1:
            out.append(FollowupAnchor(sid, t_k, "event"))
        elif panel.censor[last] == 1:
            out.append(FollowupAnchor(sid, t_k, "censored"))
        else:
            out.append(FollowupAnchor(sid, t_k, "administrative_end"))
    return out


def to_pseudosubjects(panel: CountingProcessPanel) -> PseudoSubjectSet:
    """Pool every subject row into independent LTRC pseudo-subjects.

    One pseudo-subject per row, n = sum_i J^(i); the outcome indicator
    rides on the terminal row of each subject.
    """
    return PseudoSubjectSet(
        left=panel.start,
        right=panel.stop,
        delta=panel.event,
        x=panel.covariates,
        names=panel.covariate_names,
    )


def discretize(panel: CountingProcessPanel, dt: float) -> CountingProcessPanel:
    """Re-bin each subject's follow-up onto the grid {0, dt, 2dt, ...}.

    Bin covariates are the last observed values at or before the bin
    start (LOCF); a treatment flag is set if the subject was on treatment
    at any point in the bin; the event/censor indicator lands in the bin
    containing T*. Discretizing an already-aligned panel with its own
    spacing is the identity, and the operation is idempotent for fixed dt.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    starts_all, stops_all, trt_all, cov_all, ev_all, ce_all, counts = [], [], [], [], [], [], []
    for i in range(panel.n_subjects):
        lo, hi = int(panel.row_offsets[i]), int(panel.row_offsets[i + 1])
        s, e = panel.start[lo:hi], panel.stop[lo:hi]
        t_k = float(e[-1])
        n_bins = max(1, int(np.ceil(t_k / dt - 1e-12)))
        edges = np.arange(n_bins + 1, dtype=np.float64) * dt
        # covariates: row whose start is the last <= bin start
        cov_idx = np.searchsorted(s, edges[:-1], side="right") - 1
        cov = panel.covariates[lo:hi][cov_idx]
        # treatment: any overlap of an on-row with the bin
        j0 = np.searchsorted(e, edges[:-1], side="right")
        j1 = np.searchsorted(s, edges[1:], side="left")
        csum = np.concatenate(
            [np.zeros((1, panel.n_treatments)), np.cumsum(panel.treatments[lo:hi], axis=0)]
        )
        trt = ((csum[j1] - csum[j0]) > 0).astype(np.int8)
        ev = np.zeros(n_bins, dtype=np.int8)
        ce = np.zeros(n_bins, dtype=np.int8)
        ev[-1] = panel.event[hi - 1]
        ce[-1] = panel.censor[hi - 1]
        starts_all.append(edges[:-1])
        stops_all.append(edges[1:])
        trt_all.append(trt)
        cov_all.append(cov)
        ev_all.append(ev)
        ce_all.append(ce)
        counts.append(n_bins)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    stops = np.concatenate(stops_all) if stops_all else np.empty(0)
    return CountingProcessPanel(
        subject_ids=list(panel.subject_ids),
        row_offsets=offsets,
        start=np.concatenate(starts_all) if starts_all else np.empty(0),
        stop=stops,
        treatments=np.concatenate(trt_all) if trt_all else np.empty((0, panel.n_treatments), dtype=np.int8),
        covariates=np.concatenate(cov_all) if cov_all else np.empty((0, len(panel.covariate_names))),
        covariate_names=list(panel.covariate_names),
        event=np.concatenate(ev_all) if ev_all else np.empty(0, dtype=np.int8),
        censor=np.concatenate(ce_all) if ce_all else np.empty(0, dtype=np.int8),
        max_followup=float(
            max(np.ceil(panel.max_followup / dt) * dt, stops.max(initial=0.0))
        ),
    ).validate()
