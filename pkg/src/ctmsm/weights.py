"""Continuous-time stabilized inverse-probability weights.

Each treatment's initiation process contributes, per subject, a product
over its eligibility intervals: an interval closed by an initiation at U
contributes the ratio of conditional densities f(U | eligibility resumed
at V), and a final interval reaching the end of follow-up contributes a
ratio of survival functions; the integrals restart at each interval's V
on the study-time clock. Multiplying the per-treatment factors in an
assumed administration order, and a censoring survival ratio evaluated
at the follow-up anchor G, gives the per-subject weight that the
structural fit uses.

Numerator models condition on treatment histories only; denominator
models add the covariate history. Four estimator backends are supported:
(i) Cox intensity ratio with a step Nelson-Aalen baseline, (ii) the same
with a kernel-smoothed baseline, (iii) a relative-risk forest intensity
ratio with a step baseline, and (iv) the forest with a smoothed baseline.

A discrete-time comparator computes classical per-bin stabilized
probability ratios on an aligned panel, restricted to bins where the
subject is eligible to initiate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataValidationError, PositivityError
from .forest import ForestParams, LtrcForest, fit_binary_forest, fit_ltrc_forest
from ._risk import RiskSetEngine, newton_solve
from .intensity import (
    BaselineIntensity,
    MultiplicativeIntensityModel,
    StepPath,
    conditional_survival_density,
    fit_cox_intensity,
    kernel_smooth,
    nelson_aalen,
    select_bandwidth,
)
from .panel import CountingProcessPanel, EligibilitySchedule, FollowupAnchor

__all__ = [
    "OrderingSpec",
    "WeightFactor",
    "WeightTable",
    "WeightConfig",
    "SubjectHistory",
    "treatment_weight",
    "censoring_weight",
    "joint_weight",
    "estimate_weights",
    "discrete_time_weights",
]

_LOG_FLOOR = math.log(1e-300)
ESTIMATORS = ("i", "ii", "iii", "iv")


@dataclass(frozen=True)
class OrderingSpec:
    """Administration order of the treatments (1-based indices).

    The treatment at position k may condition on the current-time status
    of treatments earlier in the order and on the just-prior status of
    later ones.
    """

    order: tuple[int, ...]

    def validate(self, n_treatments: int) -> "OrderingSpec":
        if sorted(self.order) != list(range(1, n_treatments + 1)):
            raise ConfigError(f"ordering must be a permutation of 1..{n_treatments}")
        return self

    @staticmethod
    def by_size(panel: CountingProcessPanel) -> "OrderingSpec":
        """Decreasing order of treatment sizes (subjects ever treated)."""
        sizes = []
        subj = panel.row_subject()
        for w in range(panel.n_treatments):
            treated = np.unique(subj[panel.treatments[:, w] == 1]).size
            sizes.append((-treated, w + 1))
        return OrderingSpec(tuple(w for _, w in sorted(sizes)))

    def earlier(self, w: int) -> tuple[int, ...]:
        k = self.order.index(w)
        return self.order[:k]


@dataclass(frozen=True)
class WeightFactor:
    """One stabilized factor: numerator and denominator path likelihoods."""

    subject_id: str
    process: str  # "A<w>" or "censoring"
    numerator: float
    denominator: float

    @property
    def value(self) -> float:
        return self.numerator / self.denominator


@dataclass
class WeightTable:
    """Per-subject stabilized weights with their factorization."""

    subject_ids: list[str]
    treatment_weights: np.ndarray  # (n, W)
    censor_weights: np.ndarray  # (n,)
    estimator: str = ""
    ordering: tuple[int, ...] = ()
    truncated: tuple[float, float] | None = None

    @property
    def totals(self) -> np.ndarray:
        tot = np.prod(self.treatment_weights, axis=1) * self.censor_weights
        if self.truncated is not None:
            lo, hi = np.percentile(tot, self.truncated)
            tot = np.clip(tot, lo, hi)
        return tot

    def diagnostics(self) -> dict[str, float]:
        """Five-number summary of the total weights."""
        tot = self.totals
        return {
            "min": float(tot.min()),
            "q1": float(np.percentile(tot, 25)),
            "mean": float(tot.mean()),
            "q3": float(np.percentile(tot, 75)),
            "max": float(tot.max()),
        }

    def summary(self) -> str:
        d = self.diagnostics()
        head = f"weights[{self.estimator}]" if self.estimator else "weights"
        return (
            f"{head}: min={d['min']:.4g} q1={d['q1']:.4g} mean={d['mean']:.4g} "
            f"q3={d['q3']:.4g} max={d['max']:.4g}"
        )

    def to_csv(self, dest) -> None:
        own = not hasattr(dest, "write")
        fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
        try:
            wtr = csv.writer(fh)
            n_trt = self.treatment_weights.shape[1]
            wtr.writerow(
                ["id"] + [f"omega_A{w+1}" for w in range(n_trt)] + ["omega_C", "omega_total"]
            )
            totals = self.totals
            for i, sid in enumerate(self.subject_ids):
                wtr.writerow(
                    [sid]
                    + [repr(float(v)) for v in self.treatment_weights[i]]
                    + [repr(float(self.censor_weights[i])), repr(float(totals[i]))]
                )
        finally:
            if own:
                fh.close()


@dataclass(frozen=True)
class WeightConfig:
    """Knobs of the weight-estimation pipeline."""

    estimator: str = "iv"
    kernel: str = "gaussian"
    bandwidth: float | None = None  # None: cross-validated per model
    bandwidth_grid: tuple[float, ...] | None = None
    cv_folds: int = 5
    forest: ForestParams = field(default_factory=ForestParams)
    include_count: bool = False
    calibrate_forest: bool = True
    truncate: tuple[float, float] | None = None  # e.g. (1, 99) percentiles
    terminal_bracket: str = "survival_ratio"  # or "initiation_probability"
    dt_model: str = "forest"  # discrete-time comparator: "forest" | "logistic"
    seed: int = 0

    def validate(self) -> "WeightConfig":
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.terminal_bracket not in ("survival_ratio", "initiation_probability"):
            raise ConfigError("unknown terminal_bracket variant")
        if self.dt_model not in ("forest", "logistic"):
            raise ConfigError("dt_model must be 'forest' or 'logistic'")
        return self


# ---------------------------------------------------------------------------
# feature construction


@dataclass
class _ProcessData:
    """Fitting/evaluation arrays for one treatment's initiation process."""

    w: int
    eligible: np.ndarray  # (R,) rows where the subject may initiate w
    delta: np.ndarray  # (R,) eligible rows closed by an initiation at stop
    num_names: list[str]
    den_names: list[str]
    num_int: np.ndarray
    num_stop: np.ndarray
    den_int: np.ndarray
    den_stop: np.ndarray


def _next_row_index(panel: CountingProcessPanel) -> np.ndarray:
    idx = np.arange(panel.n_rows) + 1
    last = panel.terminal_rows
    idx[last] = last
    return idx


def _course_counts(panel: CountingProcessPanel, w: int) -> np.ndarray:
    """Number of treatment-w courses begun at or before each row's start
    (baseline courses included)."""
    a = panel.treatments[:, w - 1]
    first = np.zeros(panel.n_rows, dtype=bool)
    first[panel.row_offsets[:-1]] = True
    prev_off = np.empty(panel.n_rows, dtype=bool)
    prev_off[0] = True
    prev_off[1:] = panel.treatments[:-1, w - 1] == 0
    course_start = (a == 1) & (first | prev_off)
    csum = np.cumsum(course_start)
    base = np.zeros(panel.n_rows, dtype=np.int64)
    lo = panel.row_offsets[:-1]
    base_vals = csum[lo] - course_start[lo]
    base = np.repeat(base_vals, np.diff(panel.row_offsets))
    return (csum - base).astype(np.float64)


def _build_processes(
    panel: CountingProcessPanel, ordering: OrderingSpec, include_count: bool
) -> dict[int, _ProcessData]:
    nxt = _next_row_index(panel)
    out: dict[int, _ProcessData] = {}
    counts = {w: _course_counts(panel, w) for w in range(1, panel.n_treatments + 1)}
    for w in range(1, panel.n_treatments + 1):
        earlier = set(ordering.earlier(w))
        a = panel.treatments[:, w - 1]
        eligible = a == 0
        delta = np.zeros(panel.n_rows, dtype=np.int8)
        interior = np.arange(panel.n_rows) != nxt
        delta[(eligible) & interior & (panel.treatments[nxt, w - 1] == 1)] = 1
        num_names: list[str] = []
        cols_int: list[np.ndarray] = []
        cols_stop: list[np.ndarray] = []
        for j in ordering.order:
            if j == w:
                continue
            num_names.append(f"A{j}")
            cols_int.append(panel.treatments[:, j - 1].astype(np.float64))
            if j in earlier:
                cols_stop.append(panel.treatments[nxt, j - 1].astype(np.float64))
            else:
                cols_stop.append(panel.treatments[:, j - 1].astype(np.float64))
        if include_count:
            num_names.append(f"q{w}")
            cols_int.append(counts[w])
            cols_stop.append(counts[w])
            for j in ordering.order:
                if j != w:
                    num_names.append(f"q{j}")
                    cols_int.append(counts[j])
                    # an earlier-ordered treatment's same-instant initiation
                    # is already part of the history at this decision
                    if j in earlier:
                        cols_stop.append(counts[j][nxt])
                    else:
                        cols_stop.append(counts[j])
        num_int = np.column_stack(cols_int) if cols_int else np.empty((panel.n_rows, 0))
        num_stop = np.column_stack(cols_stop) if cols_stop else np.empty((panel.n_rows, 0))
        den_names = num_names + list(panel.covariate_names)
        den_int = np.column_stack([num_int, panel.covariates])
        # covariates stay predictable (the row's own, most recent prior
        # measurement); only the ordered treatment statuses above may
        # look across the boundary
        den_stop = np.column_stack([num_stop, panel.covariates])
        out[w] = _ProcessData(
            w=w,
            eligible=eligible,
            delta=delta,
            num_names=list(num_names),
            den_names=den_names,
            num_int=num_int,
            num_stop=num_stop,
            den_int=den_int,
            den_stop=den_stop,
        )
    return out


def _censor_features(panel: CountingProcessPanel):
    nxt = _next_row_index(panel)
    names = [f"A{w+1}" for w in range(panel.n_treatments)] + list(panel.covariate_names)
    x_int = np.column_stack([panel.treatments.astype(np.float64), panel.covariates])
    x_stop = np.column_stack(
        [panel.treatments[nxt].astype(np.float64), panel.covariates[nxt]]
    )
    return names, x_int, x_stop


# ---------------------------------------------------------------------------
# model fitting per estimator backend


def _auto_grid(times: np.ndarray) -> tuple[float, ...]:
    if times.size < 2:
        return (1.0,)
    span = float(times.max() - times.min())
    if span <= 0:
        return (1.0,)
    return tuple(np.geomspace(max(span / 60.0, 1e-3), span / 6.0, 6))


def _derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed & 0x7FFFFFFF, *tags]).generate_state(1)[0])


def _fit_intensity_model(
    estimator: str,
    left,
    right,
    delta,
    x_int,
    x_stop,
    names,
    config: WeightConfig,
    seed_tag: int,
    bandwidth: float | None = None,
) -> MultiplicativeIntensityModel:
    """Fit IR + baseline for one process with the chosen backend.

    A stabilized ratio needs the numerator and denominator baselines
    smoothed with one common bandwidth, so callers may pass a
    pre-selected value; otherwise it is cross-validated here.
    """
    if int(np.sum(delta == 1)) == 0:
        model = MultiplicativeIntensityModel(kind="identity", feature_names=list(names))
        return model.with_baseline(
            BaselineIntensity("step", np.empty(0), np.empty(0))
        )
    if estimator in ("i", "ii"):
        model = fit_cox_intensity((left, right, delta, x_int), x_stop=x_stop)
        model.feature_names = list(names)
    else:
        params = replace(config.forest, seed=_derived_seed(config.seed, seed_tag))
        forest = fit_ltrc_forest((left, right, delta, x_int), params, x_stop=x_stop)
        forest.feature_names = list(names)
        model = MultiplicativeIntensityModel(
            kind="forest", feature_names=list(names), forest=forest
        )
        if config.calibrate_forest:
            # ensemble averaging shrinks the fitted log-risk scale; a
            # one-parameter partial-likelihood calibration of the score
            # restores it (IR -> IR^kappa)
            score = np.log(np.maximum(forest.predict(x_int), 1e-8)).reshape(-1, 1)
            score_stop = (
                np.log(np.maximum(forest.predict(x_stop), 1e-8)).reshape(-1, 1)
                if x_stop is not None else None
            )
            if float(score.std()) > 1e-10:
                eng = RiskSetEngine(left, right, delta)
                res = newton_solve(eng, score, x_stop=score_stop)
                if res.converged and np.isfinite(res.theta[0]):
                    model.forest_power = float(np.clip(res.theta[0], 0.5, 2.0))
    baseline = nelson_aalen(model, (left, right, delta, x_int), x_stop=x_stop)
    if estimator in ("ii", "iv"):
        b = bandwidth if bandwidth is not None else config.bandwidth
        if b is None:
            grid = config.bandwidth_grid or _auto_grid(baseline.jump_times)
            b = select_bandwidth(
                baseline, grid, kernel=config.kernel, folds=config.cv_folds,
                seed=_derived_seed(config.seed, seed_tag, 7),
            )
        baseline = kernel_smooth(baseline, kernel=config.kernel, bandwidth=b)
    return model.with_baseline(baseline)


# ---------------------------------------------------------------------------
# batched log-weight evaluation


def _ragged_ranges(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate arange(lo[k], hi[k]) for all k, plus the repeat index."""
    counts = (hi - lo).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rep = np.repeat(np.arange(lo.size), counts)
    offs = np.concatenate([[0], np.cumsum(counts)])[:-1]
    within = np.arange(total) - np.repeat(offs, counts)
    return np.repeat(lo, counts) + within, rep


def _model_log_factor(
    panel: CountingProcessPanel,
    model: MultiplicativeIntensityModel,
    x_int: np.ndarray,
    x_stop: np.ndarray,
    eligible: np.ndarray,
    delta: np.ndarray,
    is_denominator: bool,
    process: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject log path-likelihood under one model.

    The interval product telescopes: the whole eligible exposure integral
    is subtracted, the jump mass at each initiation time is excluded from
    it (the density's survival part stops just before the jump), and the
    log density mass at each initiation is added. Also returns the log
    survival over the final open eligibility interval, which the
    bracketed-difference compatibility variant needs separately.
    """
    n = panel.n_subjects
    subj = panel.row_subject()
    base = model.baseline
    rows = np.flatnonzero(eligible)
    ir_int = model.intensity_ratio(x_int[rows]) if rows.size else np.empty(0)
    ir_stop = model.intensity_ratio(x_stop[rows]) if rows.size else np.empty(0)
    drows = np.flatnonzero(delta == 1)
    dpos = np.searchsorted(rows, drows)  # initiation rows are eligible rows

    log_factor = np.zeros(n)
    term_rows, term_rep = _last_interval_rows(panel, eligible, subj)
    log_term = np.zeros(n)
    if base.representation == "step":
        jt, inc = base.jump_times, base.increments
        jlo = np.searchsorted(jt, panel.start[rows], side="right")
        jhi = np.searchsorted(jt, panel.stop[rows], side="right")
        jidx, rep = _ragged_ranges(jlo, jhi)
        if jidx.size:
            at_stop = jt[jidx] == panel.stop[rows[rep]]
            mass = inc[jidx] * np.where(at_stop, ir_stop[rep], ir_int[rep])
            log_factor -= np.bincount(subj[rows[rep]], weights=mass, minlength=n)
            in_term = term_rep[rep]
            log_term -= np.bincount(
                subj[rows[rep[in_term]]], weights=mass[in_term], minlength=n
            )
        if drows.size:
            du = panel.stop[drows]
            if jt.size:
                dj = np.minimum(np.searchsorted(jt, du), jt.size - 1)
                d_inc = np.where(jt[dj] == du, inc[dj], 0.0)
            else:
                d_inc = np.zeros(drows.size)
            dens = d_inc * ir_stop[dpos]
            _check_positivity(dens, panel, subj[drows], du, is_denominator, process)
            with np.errstate(divide="ignore"):
                log_dens = np.log(dens)
            log_factor += np.bincount(subj[drows], weights=log_dens, minlength=n)
            # the density's survival part excludes the jump at U itself
            log_factor += np.bincount(subj[drows], weights=dens, minlength=n)
    else:
        if rows.size:
            mass = ir_int * (
                base.cumulative(panel.stop[rows]) - base.cumulative(panel.start[rows])
            )
            log_factor -= np.bincount(subj[rows], weights=mass, minlength=n)
            log_term -= np.bincount(
                subj[rows[term_rep]], weights=mass[term_rep], minlength=n
            )
        if drows.size:
            du = panel.stop[drows]
            dens = base.density(du) * ir_stop[dpos]
            _check_positivity(dens, panel, subj[drows], du, is_denominator, process)
            with np.errstate(divide="ignore"):
                log_dens = np.log(dens)
            log_factor += np.bincount(subj[drows], weights=log_dens, minlength=n)
    return log_factor, log_term


def _last_interval_rows(panel, eligible, subj):
    """Rows of each subject's final open eligibility interval (empty when
    the subject is on treatment at t_K). Returns (rows, member mask over
    eligible rows)."""
    n = panel.n_subjects
    first = np.zeros(panel.n_rows, dtype=bool)
    first[panel.row_offsets[:-1]] = True
    prev_elig = np.empty(panel.n_rows, dtype=bool)
    prev_elig[0] = False
    prev_elig[1:] = eligible[:-1]
    prev_elig[panel.row_offsets[:-1]] = False
    run_start = eligible & (first | ~prev_elig)
    v_last = np.full(n, -np.inf)
    rs_rows = np.flatnonzero(run_start)
    np.maximum.at(v_last, subj[rs_rows], panel.start[rs_rows])
    has_term = np.zeros(n, dtype=bool)
    has_term[subj[panel.terminal_rows]] = eligible[panel.terminal_rows]
    rows = np.flatnonzero(eligible)
    member = has_term[subj[rows]] & (panel.start[rows] >= v_last[subj[rows]])
    return rows[member], member


def _check_positivity(values, panel, subj_codes, times, is_denominator, process):
    bad = values <= 0
    if bad.any():
        k = int(np.argmax(bad))
        side = "denominator" if is_denominator else "numerator"
        raise PositivityError(
            f"positivity violation: {side} density of process {process} is 0 "
            f"for subject {panel.subject_ids[int(subj_codes[k])]} at t={float(times[k])}"
        )


def _apply_bracket(log_num, log_den, term_num, term_den):
    """Swap the terminal survival ratio for the bracketed initiation
    probability ratio (1 - S)num / (1 - S)den."""

    def _switch(logf, term):
        m = -term  # cumulative intensity over the last interval
        with np.errstate(divide="ignore"):
            adj = np.where(m > 0, np.log1p(-np.exp(-np.maximum(m, 1e-300))), -np.inf)
        return logf - term + adj

    has = term_den < 0
    out_n = np.where(has, _switch(log_num, term_num), log_num)
    out_d = np.where(has, _switch(log_den, term_den), log_den)
    return out_n, out_d


def _finalize_ratio(panel, log_num, log_den, process):
    if np.any(log_den < _LOG_FLOOR) or not np.all(np.isfinite(log_den)):
        i = int(np.argmin(log_den))
        raise PositivityError(
            f"positivity violation: denominator for process {process} vanishes "
            f"for subject {panel.subject_ids[i]}"
        )
    if np.any(log_num < _LOG_FLOOR) or not np.all(np.isfinite(log_num)):
        i = int(np.argmin(log_num))
        raise PositivityError(
            f"numerator path probability vanishes for subject {panel.subject_ids[i]} "
            f"(process {process})"
        )
    return np.exp(log_num - log_den)


# ---------------------------------------------------------------------------
# public per-subject operations


@dataclass
class SubjectHistory:
    """One subject's covariate/treatment paths for weight evaluation:
    feature values on (knots[k], knots[k+1]] for the numerator and
    denominator models."""

    knots: np.ndarray
    x_num: np.ndarray
    x_den: np.ndarray

    def num_path(self) -> StepPath:
        return StepPath(self.knots, self.x_num)

    def den_path(self) -> StepPath:
        return StepPath(self.knots, self.x_den)


def treatment_weight(
    schedule: EligibilitySchedule,
    num_model: MultiplicativeIntensityModel,
    den_model: MultiplicativeIntensityModel,
    history: SubjectHistory,
    terminal_bracket: str = "survival_ratio",
) -> WeightFactor:
    """Stabilized weight factor for one subject and one treatment.

    The product over eligibility intervals: density ratios at each
    initiation, times a survival ratio (or the bracketed initiation
    probability, under the compatibility variant) on a final interval
    with no initiation.
    """
    log_num = log_den = 0.0
    for (v, u), ini in zip(schedule.intervals, schedule.initiated):
        s_n, f_n = conditional_survival_density(num_model, history.num_path(), v, u)
        s_d, f_d = conditional_survival_density(den_model, history.den_path(), v, u)
        if ini:
            contrib_n, contrib_d = f_n, f_d
        elif terminal_bracket == "initiation_probability":
            contrib_n, contrib_d = 1.0 - s_n, 1.0 - s_d
        else:
            contrib_n, contrib_d = s_n, s_d
        if contrib_d <= 0:
            raise PositivityError(
                f"positivity violation: denominator vanishes for subject "
                f"{schedule.subject_id} on interval ({v}, {u}]"
            )
        if contrib_n <= 0:
            raise PositivityError(
                f"numerator vanishes for subject {schedule.subject_id} on interval ({v}, {u}]"
            )
        log_num += math.log(contrib_n)
        log_den += math.log(contrib_d)
    return WeightFactor(
        subject_id=schedule.subject_id,
        process=f"A{schedule.treatment}",
        numerator=math.exp(log_num),
        denominator=math.exp(log_den),
    )


def censoring_weight(
    anchor: FollowupAnchor,
    num_model: MultiplicativeIntensityModel,
    den_model: MultiplicativeIntensityModel,
    history: SubjectHistory,
) -> WeightFactor:
    """Censoring factor: ratio of censoring survival functions at G."""
    s_n, _ = conditional_survival_density(num_model, history.num_path(), 0.0, anchor.G)
    s_d, _ = conditional_survival_density(den_model, history.den_path(), 0.0, anchor.G)
    if s_d <= 0:
        raise PositivityError(
            f"positivity violation: censoring denominator vanishes for subject "
            f"{anchor.subject_id} at G={anchor.G}"
        )
    if s_n <= 0:
        raise PositivityError(
            f"censoring numerator vanishes for subject {anchor.subject_id} at G={anchor.G}"
        )
    return WeightFactor(anchor.subject_id, "censoring", s_n, s_d)


def joint_weight(factors: list[WeightFactor]) -> float:
    """Product of one subject's treatment and censoring factors."""
    out = 1.0
    for f in factors:
        out *= f.value
    return out


# ---------------------------------------------------------------------------
# pipeline


def estimate_weights(
    panel: CountingProcessPanel,
    estimator: str | None = None,
    ordering: OrderingSpec | None = None,
    config: WeightConfig = WeightConfig(),
) -> WeightTable:
    """Fit all process models with the chosen backend and evaluate the
    continuous-time stabilized weights for every subject.

    Numerator models use treatment-history features only; denominator
    models add the covariate history. The censoring numerator is
    history-free (marginal censoring survival); with no censoring events
    the censoring factor is identically 1.
    """
    config = config.validate()
    if estimator is not None:
        config = replace(config, estimator=estimator)
        config.validate()
    ordering = (ordering or OrderingSpec.by_size(panel)).validate(panel.n_treatments)
    procs = _build_processes(panel, ordering, config.include_count)

    n = panel.n_subjects
    trt_w = np.empty((n, panel.n_treatments))
    for w in range(1, panel.n_treatments + 1):
        pd = procs[w]
        rows = np.flatnonzero(pd.eligible)
        left, right = panel.start[rows], panel.stop[rows]
        dsub = pd.delta[rows]
        den = _fit_intensity_model(
            config.estimator, left, right, dsub,
            pd.den_int[rows], pd.den_stop[rows], pd.den_names, config, seed_tag=2 * w + 1,
        )
        shared_b = den.baseline.bandwidth  # None unless smoothed
        num = _fit_intensity_model(
            config.estimator, left, right, dsub,
            pd.num_int[rows], pd.num_stop[rows], pd.num_names, config, seed_tag=2 * w,
            bandwidth=shared_b,
        )
        log_num, term_num = _model_log_factor(
            panel, num, pd.num_int, pd.num_stop, pd.eligible, pd.delta, False, f"A{w}"
        )
        log_den, term_den = _model_log_factor(
            panel, den, pd.den_int, pd.den_stop, pd.eligible, pd.delta, True, f"A{w}"
        )
        if config.terminal_bracket == "initiation_probability":
            log_num, log_den = _apply_bracket(log_num, log_den, term_num, term_den)
        trt_w[:, w - 1] = _finalize_ratio(panel, log_num, log_den, f"A{w}")

    cens = _censoring_factors(panel, config)
    table = WeightTable(
        subject_ids=list(panel.subject_ids),
        treatment_weights=trt_w,
        censor_weights=cens,
        estimator=config.estimator,
        ordering=ordering.order,
        truncated=config.truncate,
    )
    return table


def _censoring_factors(panel: CountingProcessPanel, config: WeightConfig) -> np.ndarray:
    n = panel.n_subjects
    if int(panel.censor.sum()) == 0:
        return np.ones(n)
    names, x_int, x_stop = _censor_features(panel)
    left, right, delta = panel.start, panel.stop, panel.censor
    den = _fit_intensity_model(
        config.estimator, left, right, delta, x_int, x_stop, names, config, seed_tag=1,
    )
    num = _fit_intensity_model(
        config.estimator, left, right, delta,
        np.empty((panel.n_rows, 0)), np.empty((panel.n_rows, 0)), [], config, seed_tag=0,
        bandwidth=den.baseline.bandwidth,
    )
    everywhere = np.ones(panel.n_rows, dtype=bool)
    no_events = np.zeros(panel.n_rows, dtype=np.int8)
    log_num, _ = _model_log_factor(
        panel, num, np.empty((panel.n_rows, 0)), np.empty((panel.n_rows, 0)),
        everywhere, no_events, False, "censoring",
    )
    log_den, _ = _model_log_factor(
        panel, den, x_int, x_stop, everywhere, no_events, True, "censoring"
    )
    return _finalize_ratio(panel, log_num, log_den, "censoring")


# ---------------------------------------------------------------------------
# discrete-time comparator


def _logistic_irls(x: np.ndarray, y: np.ndarray, max_iter: int = 100, tol: float = 1e-10):
    xd = np.column_stack([np.ones(x.shape[0]), x])
    beta = np.zeros(xd.shape[1])
    for _ in range(max_iter):
        lp = np.clip(xd @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-lp))
        wdiag = np.maximum(p * (1 - p), 1e-10)
        grad = xd.T @ (y - p)
        hess = (xd * wdiag[:, None]).T @ xd
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(grad)) < tol:
            break
    return beta


def _dt_prob_model(x: np.ndarray, y: np.ndarray, config: WeightConfig, seed_tag: int):
    if config.dt_model == "logistic":
        beta = _logistic_irls(x, y)

        def predict(xq):
            lp = np.clip(np.column_stack([np.ones(xq.shape[0]), xq]) @ beta, -30, 30)
            return 1.0 / (1.0 + np.exp(-lp))

        return predict
    params = replace(
        config.forest,
        n_trees=min(config.forest.n_trees, 50),
        seed=_derived_seed(config.seed, 100 + seed_tag),
    )
    forest = fit_binary_forest(x, y, params)
    return forest.predict


def _check_aligned(panel: CountingProcessPanel) -> float:
    durations = panel.stop - panel.start
    dt = float(durations[0])
    if not np.allclose(durations, dt, rtol=0, atol=1e-9):
        raise DataValidationError("panel is not aligned on a common grid")
    k = np.round(panel.start / dt)
    if not np.allclose(panel.start, k * dt, rtol=0, atol=1e-9):
        raise DataValidationError("panel bins do not sit on the common grid")
    return dt


def discrete_time_weights(
    panel: CountingProcessPanel,
    ordering: OrderingSpec | None = None,
    config: WeightConfig = WeightConfig(),
    models: dict | None = None,
) -> WeightTable:
    """Classical per-bin stabilized weights on an aligned (binned) panel.

    For each treatment in order, a per-bin initiation-probability model is
    fit on eligible person-bins (previous bin off treatment), and each
    subject accumulates the product of stabilized probability ratios of
    its observed statuses over its eligible bins.

    `models` may supply prefit per-bin probability models as
    ``{w: (num_predict, den_predict)}`` callables mapping the numerator /
    denominator feature matrices to initiation probabilities; by default
    they are fit here with the configured backend.
    """
    config = config.validate()
    _check_aligned(panel)
    ordering = (ordering or OrderingSpec.by_size(panel)).validate(panel.n_treatments)
    n = panel.n_subjects
    subj = panel.row_subject()
    first = np.zeros(panel.n_rows, dtype=bool)
    first[panel.row_offsets[:-1]] = True
    trt_w = np.ones((n, panel.n_treatments))
    for w in range(1, panel.n_treatments + 1):
        a = panel.treatments[:, w - 1].astype(np.float64)
        prev = np.empty(panel.n_rows)
        prev[0] = 0.0
        prev[1:] = a[:-1]
        prev[first] = 0.0
        eligible = prev == 0
        y = a[eligible]
        counts = _course_counts(panel, w)
        # per-bin probabilities vary with time since entry; the bin index
        # is a feature of both models, as in pooled-logistic practice
        cols_num = [panel.start]
        for j in ordering.order:
            if j == w:
                continue
            aj = panel.treatments[:, j - 1].astype(np.float64)
            if j in set(ordering.earlier(w)):
                cols_num.append(aj)  # current-bin status, treatment decided earlier
            else:
                prev_j = np.empty(panel.n_rows)
                prev_j[0] = 0.0
                prev_j[1:] = aj[:-1]
                prev_j[first] = 0.0
                cols_num.append(prev_j)
        if config.include_count:
            cols_num.append(counts)
            for j in ordering.order:
                if j != w:
                    cols_num.append(_course_counts(panel, j))
        x_num = np.column_stack(cols_num) if cols_num else np.empty((panel.n_rows, 0))
        x_den = np.column_stack([x_num, panel.covariates])
        if models is not None and w in models:
            num_predict, den_predict = models[w]
        else:
            if y.sum() == 0:
                continue
            num_predict = _dt_prob_model(x_num[eligible], y, config, seed_tag=4 * w)
            den_predict = _dt_prob_model(x_den[eligible], y, config, seed_tag=4 * w + 1)
        p_num = num_predict(x_num[eligible])
        p_den = den_predict(x_den[eligible])
        prob_num = np.where(y == 1, p_num, 1.0 - p_num)
        prob_den = np.where(y == 1, p_den, 1.0 - p_den)
        if np.any(prob_den <= 0):
            k = int(np.argmax(prob_den <= 0))
            sid = panel.subject_ids[int(subj[np.flatnonzero(eligible)[k]])]
            raise PositivityError(
                f"positivity violation: per-bin denominator probability is 0 for subject {sid}"
            )
        with np.errstate(divide="ignore"):
            log_ratio = np.log(prob_num) - np.log(prob_den)
        log_w = np.bincount(subj[eligible], weights=log_ratio, minlength=n)
        if not np.all(np.isfinite(log_w)):
            i = int(np.argmax(~np.isfinite(log_w)))
            raise PositivityError(
                f"per-bin numerator probability is 0 for subject {panel.subject_ids[i]}"
            )
        trt_w[:, w - 1] = np.exp(log_w)
    return WeightTable(
        subject_ids=list(panel.subject_ids),
        treatment_weights=trt_w,
        censor_weights=np.ones(n),
        estimator=f"dt-{config.dt_model}",
        ordering=ordering.order,
        truncated=config.truncate,
    )
