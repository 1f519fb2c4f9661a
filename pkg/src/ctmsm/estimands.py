"""Counterfactual survival curves and their summaries.

A static regimen assigns each treatment an on/off path over a horizon.
The curve multiplies the fitted weighted Breslow baseline increments by
the structural hazard ratio of the regimen's status vector at each jump
time; survival probabilities and restricted mean survival times are then
exact step-function functionals of the curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .msmfit import PsiEstimate

__all__ = [
    "Regimen",
    "CounterfactualCurve",
    "counterfactual_survival",
    "survival_at",
    "rmst",
    "curve_to_csv",
    "estimand_report",
]


@dataclass(frozen=True)
class Regimen:
    """Static assignment paths: treatment w is ON during the union of its
    (a, b] intervals (left-open), OFF elsewhere on [0, horizon]."""

    label: str
    horizon: float
    on: dict[int, tuple[tuple[float, float], ...]] = field(default_factory=dict)

    def validate(self, n_treatments: int) -> "Regimen":
        if not self.horizon > 0:
            raise ConfigError("regimen horizon must be positive")
        for w, spans in self.on.items():
            if not 1 <= int(w) <= n_treatments:
                raise ConfigError(f"regimen references treatment index {w} > W={n_treatments}")
            for a, b in spans:
                if not 0 <= a < b:
                    raise ConfigError(f"regimen span ({a}, {b}] is empty or negative")
        return self

    def status(self, t: np.ndarray) -> np.ndarray:
        """(len(t), max treatment index) 0/1 matrix; value at a switch
        time is the one on the interval containing it (left-open)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        n_w = max(self.on.keys(), default=0)
        out = np.zeros((t.size, n_w), dtype=np.float64)
        for w, spans in self.on.items():
            for a, b in spans:
                out[:, int(w) - 1] += ((t > a) & (t <= b)).astype(np.float64)
        return np.minimum(out, 1.0)

    @staticmethod
    def always(label: str, treatments: tuple[int, ...], horizon: float) -> "Regimen":
        return Regimen(label, horizon, {w: ((0.0, horizon),) for w in treatments})

    @staticmethod
    def never(label: str, horizon: float) -> "Regimen":
        return Regimen(label, horizon, {})


@dataclass(frozen=True)
class CounterfactualCurve:
    """Right-continuous step survival curve on an evaluation grid."""

    times: np.ndarray
    survival: np.ndarray
    regimen_label: str
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "survival", np.asarray(self.survival, dtype=np.float64))


def counterfactual_survival(
    fit: PsiEstimate, regimen: Regimen, grid: np.ndarray | None = None
) -> CounterfactualCurve:
    """S(t) = exp(-sum_{s_j <= t} dLambda_0(s_j) * r(a(s_j); psi)).

    The hazard ratio r uses the regimen's status vector at each baseline
    jump time, expanded through the fit's main and interaction terms. The
    default grid is {0} + jump times within the horizon + {horizon}.
    """
    n_w = sum(1 for name in fit.term_names if ":" not in name)
    regimen.validate(n_w)
    jt = fit.baseline_times
    keep = jt <= regimen.horizon
    jt = jt[keep]
    inc = fit.baseline_increments[keep]
    statuses = np.zeros((jt.size, n_w))
    st = regimen.status(jt) if jt.size else np.zeros((0, 0))
    statuses[:, : st.shape[1]] = st
    z = _design_from_terms(fit.term_names, statuses)
    r = np.exp(z @ fit.psi_hat) if fit.psi_hat.size else np.ones(jt.size)
    cum = np.cumsum(inc * r)
    if grid is None:
        grid = np.unique(np.concatenate([[0.0], jt, [regimen.horizon]]))
    else:
        grid = np.unique(np.asarray(grid, dtype=np.float64))
        if grid.min(initial=0.0) < 0 or grid.max(initial=0.0) > regimen.horizon:
            raise ConfigError("evaluation grid must lie in [0, horizon]")
        if grid[0] != 0.0:
            grid = np.concatenate([[0.0], grid])
    idx = np.searchsorted(jt, grid, side="right")
    cum_at = np.concatenate([[0.0], cum])[idx]
    return CounterfactualCurve(
        times=grid, survival=np.exp(-cum_at), regimen_label=regimen.label, horizon=regimen.horizon
    )


def _design_from_terms(term_names: list[str], statuses: np.ndarray) -> np.ndarray:
    cols = []
    for name in term_names:
        col = np.ones(statuses.shape[0])
        for part in name.split(":"):
            col = col * statuses[:, int(part[1:]) - 1]
        cols.append(col)
    return np.column_stack(cols) if cols else np.zeros((statuses.shape[0], 0))


def survival_at(curve: CounterfactualCurve, t: float) -> float:
    """Right-continuous step interpolation of the curve at t."""
    if t < 0 or t > curve.horizon:
        raise ConfigError("t outside the curve horizon")
    idx = int(np.searchsorted(curve.times, t, side="right")) - 1
    return float(curve.survival[max(idx, 0)])


def rmst(curve: CounterfactualCurve, tau: float) -> float:
    """Restricted mean survival time: exact integral of the step curve
    over [0, tau]."""
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if tau > curve.horizon:
        raise ConfigError("tau exceeds the curve horizon")
    t = curve.times
    s = curve.survival
    hi = np.minimum(np.append(t[1:], curve.horizon), tau)
    widths = np.clip(hi - np.minimum(t, tau), 0.0, None)
    return float(np.sum(s * widths))


def curve_to_csv(curve: CounterfactualCurve, dest) -> None:
    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(["t", "S"])
        for t, s in zip(curve.times, curve.survival):
            w.writerow([repr(float(t)), repr(float(s))])
    finally:
        if own:
            fh.close()


def estimand_report(
    fit: PsiEstimate,
    regimens: list[Regimen],
    tau: float,
    dest,
    cis: dict[str, tuple[float, float, float, float]] | None = None,
) -> list[dict]:
    """Per-regimen survival-at-tau and RMST rows, optionally with
    bootstrap CI columns (keyed by regimen label:
    (s_lo, s_hi, rmst_lo, rmst_hi))."""
    rows = []
    for reg in regimens:
        curve = counterfactual_survival(fit, reg)
        s_tau = survival_at(curve, tau)
        r_tau = rmst(curve, tau)
        ci = cis.get(reg.label) if cis else None
        rows.append(
            {
                "regimen_label": reg.label,
                "estimand": "S_at_tau",
                "value": s_tau,
                "ci_lo": "" if ci is None else ci[0],
                "ci_hi": "" if ci is None else ci[1],
            }
        )
        rows.append(
            {
                "regimen_label": reg.label,
                "estimand": "rmst_tau",
                "value": r_tau,
                "ci_lo": "" if ci is None else ci[2],
                "ci_hi": "" if ci is None else ci[3],
            }
        )
    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(["regimen_label", "estimand", "value", "ci_lo", "ci_hi"])
        for row in rows:
            w.writerow([row["regimen_label"], row["estimand"], row["value"], row["ci_lo"], row["ci_hi"]])
    finally:
        if own:
            fh.close()
    return rows
