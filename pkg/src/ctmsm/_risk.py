"""Risk-set sums and Newton solver for weighted LTRC partial likelihoods.

One engine serves every multiplicative-intensity fit in the package:
treatment-initiation intensities, censoring intensities, and the weighted
structural (outcome) model. Rows are (start, stop] intervals; the risk
set at time s is {rows: start < s <= stop}, and events sit at their row's
stop time. Breslow handling of ties falls out of grouping by unique
event times.

Covariates may change exactly at a row boundary (a new measurement taken
at the decision time). Callers can pass a second feature matrix `x_stop`
holding the values in force at each row's stop; risk-set sums evaluated
at a time equal to a row's stop then use that row's stop features, while
strictly interior times use the row's own features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonIdentifiableError, SeparationError

__all__ = ["RiskSetEngine", "NewtonResult", "newton_solve"]

_EXP_CLIP = 700.0


def _suffix_sums(values: np.ndarray) -> np.ndarray:
    """suffix[k] = sum(values[k:]); one extra trailing zero for k = len."""
    n = values.shape[0]
    out = np.zeros((n + 1,) + values.shape[1:], dtype=np.float64)
    if n:
        out[:n] = np.cumsum(values[::-1], axis=0)[::-1]
    return out


class RiskSetEngine:
    """Precomputed orderings for repeated risk-set sums on fixed rows."""

    def __init__(self, start: np.ndarray, stop: np.ndarray, delta: np.ndarray):
        self.start = np.asarray(start, dtype=np.float64)
        self.stop = np.asarray(stop, dtype=np.float64)
        self.delta = np.asarray(delta)
        self.n_rows = self.start.shape[0]
        self.event_rows = np.flatnonzero(self.delta == 1)
        self.times = np.unique(self.stop[self.event_rows])
        self.n_times = self.times.shape[0]
        self.order_stop = np.argsort(self.stop, kind="stable")
        self.order_start = np.argsort(self.start, kind="stable")
        self._sorted_stop = self.stop[self.order_stop]
        self._sorted_start = self.start[self.order_start]
        # risk set {start < s <= stop}: rows with stop >= s minus rows with start >= s
        self.idx_stop = np.searchsorted(self._sorted_stop, self.times, side="left")
        self.idx_start = np.searchsorted(self._sorted_start, self.times, side="left")
        # rows whose stop coincides with an event time (at-stop feature swap)
        pos = np.searchsorted(self.times, self.stop)
        pos_c = np.minimum(pos, max(self.n_times - 1, 0))
        if self.n_times:
            match = self.times[pos_c] == self.stop
        else:
            match = np.zeros(self.n_rows, dtype=bool)
        self.stop_time_id = np.where(match, pos_c, -1)
        self._boundary_rows = np.flatnonzero(match)
        self.event_time_id = self.stop_time_id[self.event_rows]

    def event_sums(self, row_values: np.ndarray) -> np.ndarray:
        """Sum `row_values` over event rows, grouped by unique event time."""
        v = row_values[self.event_rows]
        if v.ndim == 1:
            return np.bincount(self.event_time_id, weights=v, minlength=self.n_times)
        out = np.empty((self.n_times, v.shape[1]))
        for j in range(v.shape[1]):
            out[:, j] = np.bincount(self.event_time_id, weights=v[:, j], minlength=self.n_times)
        return out

    def s0(self, ws: np.ndarray, ws_stop: np.ndarray | None = None) -> np.ndarray:
        """Risk-set sums of per-row values at every unique event time."""
        a = _suffix_sums(ws[self.order_stop])[self.idx_stop]
        b = _suffix_sums(ws[self.order_start])[self.idx_start]
        out = a - b
        if ws_stop is not None and self._boundary_rows.size:
            rows = self._boundary_rows
            out += np.bincount(
                self.stop_time_id[rows],
                weights=(ws_stop - ws)[rows],
                minlength=self.n_times,
            )
        return out

    def s_vec(self, vals: np.ndarray, vals_stop: np.ndarray | None = None) -> np.ndarray:
        """Like :meth:`s0` for (n_rows, k) matrices; returns (n_times, k)."""
        a = _suffix_sums(vals[self.order_stop])[self.idx_stop]
        b = _suffix_sums(vals[self.order_start])[self.idx_start]
        out = a - b
        if vals_stop is not None and self._boundary_rows.size:
            rows = self._boundary_rows
            diff = vals_stop[rows] - vals[rows]
            for j in range(vals.shape[1]):
                out[:, j] += np.bincount(
                    self.stop_time_id[rows], weights=diff[:, j], minlength=self.n_times
                )
        return out


@dataclass
class NewtonResult:
    theta: np.ndarray
    loglik: float
    score: np.ndarray
    information: np.ndarray
    n_iter: int
    converged: bool
    frozen: np.ndarray  # boolean mask of zero-information columns pinned at 0


def _linear_predictor(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    if x.shape[1] == 0:
        return np.zeros(x.shape[0])
    return np.clip(x @ theta, -_EXP_CLIP, _EXP_CLIP)


def newton_solve(
    engine: RiskSetEngine,
    x: np.ndarray,
    x_stop: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 30,
) -> NewtonResult:
    """Maximize the (weighted) Breslow partial likelihood by Newton's
    method with step-halving.

    Columns carrying no information on the event risk sets (for example a
    covariate identically zero) are pinned at coefficient 0 and the
    reduced system is solved; a singular information matrix among
    informative columns raises :class:`NonIdentifiableError`, and failed
    step-halving with a diverging coefficient raises
    :class:`SeparationError`.
    """
    n, p = x.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    xs = x if x_stop is None else x_stop
    theta = np.zeros(p)
    ev = engine.event_rows
    d_w = engine.event_sums(w)  # weighted event multiplicity per unique time
    lin_event_x = (w[ev, None] * xs[ev]).sum(axis=0) if p else np.zeros(0)

    def _sums(theta):
        lp = _linear_predictor(x, theta)
        ws = w * np.exp(lp)
        if x_stop is not None:
            ws_stop = w * np.exp(_linear_predictor(x_stop, theta))
        else:
            ws_stop = None
        s0 = engine.s0(ws, ws_stop)
        if p:
            wx = ws[:, None] * x
            wx_stop = ws_stop[:, None] * x_stop if ws_stop is not None else None
            s1 = engine.s_vec(wx, wx_stop)
            xx = x[:, :, None] * x[:, None, :]
            wxx = (ws[:, None, None] * xx).reshape(n, p * p)
            if ws_stop is not None:
                xx_s = x_stop[:, :, None] * x_stop[:, None, :]
                wxx_stop = (ws_stop[:, None, None] * xx_s).reshape(n, p * p)
            else:
                wxx_stop = None
            s2 = engine.s_vec(wxx, wxx_stop).reshape(engine.n_times, p, p)
        else:
            s1 = np.zeros((engine.n_times, 0))
            s2 = np.zeros((engine.n_times, 0, 0))
        return lp, s0, s1, s2

    def _loglik(theta, s0):
        lp = _linear_predictor(xs, theta)
        term = float((w[ev] * lp[ev]).sum()) if n else 0.0
        return term - float((d_w * np.log(s0)).sum())

    frozen = np.zeros(p, dtype=bool)
    lp, s0, s1, s2 = _sums(theta)
    ll = _loglik(theta, s0)
    n_iter = 0
    converged = False
    for n_iter in range(1, max_iter + 1):
        zbar = s1 / s0[:, None] if p else s1
        grad = lin_event_x - (d_w[:, None] * zbar).sum(axis=0)
        info = (
            (d_w[:, None, None] * (s2 / s0[:, None, None] - zbar[:, :, None] * zbar[:, None, :])).sum(axis=0)
            if p
            else np.zeros((0, 0))
        )
        if p == 0 or np.max(np.abs(grad), initial=0.0) < tol:
            converged = True
            break
        # freeze columns with no curvature (no information on risk sets)
        diag = np.diag(info)
        scale = max(diag.max(initial=0.0), 1.0)
        dead = diag <= 1e-12 * scale
        if dead.any():
            frozen |= dead
        free = ~frozen
        if not free.any():
            converged = bool(np.max(np.abs(grad[~frozen]), initial=0.0) < tol)
            break
        try:
            step_free = np.linalg.solve(info[np.ix_(free, free)], grad[free])
        except np.linalg.LinAlgError:
            raise NonIdentifiableError("non-identifiable covariates") from None
        if not np.all(np.isfinite(step_free)):
            raise NonIdentifiableError("non-identifiable covariates")
        step = np.zeros(p)
        step[free] = step_free
        if np.max(np.abs(grad[free])) < tol:
            converged = True
            break
        factor = 1.0
        improved = False
        for _ in range(max_halvings):
            cand = theta + factor * step
            lp_c, s0_c, s1_c, s2_c = _sums(cand)
            ll_c = _loglik(cand, s0_c)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(abs(ll), 1.0):
                theta, ll, s0, s1, s2 = cand, ll_c, s0_c, s1_c, s2_c
                improved = True
                break
            factor *= 0.5
        if not improved:
            if np.max(np.abs(theta), initial=0.0) > 50.0:
                raise SeparationError("separation detected")
            break
    else:
        n_iter = max_iter
    if not converged and np.max(np.abs(theta), initial=0.0) > 50.0:
        raise SeparationError("separation detected")
    zbar = s1 / s0[:, None] if p else s1
    grad = lin_event_x - (d_w[:, None] * zbar).sum(axis=0)
    info = (
        (d_w[:, None, None] * (s2 / s0[:, None, None] - zbar[:, :, None] * zbar[:, None, :])).sum(axis=0)
        if p
        else np.zeros((0, 0))
    )
    if p and not converged and np.max(np.abs(grad[~frozen]), initial=0.0) < tol:
        converged = True
    return NewtonResult(
        theta=theta,
        loglik=ll,
        score=grad,
        information=info,
        n_iter=n_iter,
        converged=converged,
        frozen=frozen,
    )
