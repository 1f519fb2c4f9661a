"""Weighted partial-score estimation of the structural parameters.

The structural proportional-hazards model puts a log hazard ratio on each
treatment status and on selected status products. Each subject enters the
score and the risk set multiplied by its single stabilized weight (the
treatment factors times the censoring factor, fixed at the subject's last
follow-up). Standard errors come from the robust sandwich
Sigma_0^{-1} Sigma_1 Sigma_0^{-1}: Sigma_0 the weighted observed
information, Sigma_1 the outer products of per-subject weighted score
residuals against the weighted Breslow compensator. Percentile bootstrap
over subjects is available as the weight-uncertainty-aware alternative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from ._risk import RiskSetEngine, newton_solve
from .errors import ConfigError, DataValidationError, NumericalError
from .panel import CountingProcessPanel
from .weights import OrderingSpec, WeightConfig, WeightTable, estimate_weights

__all__ = [
    "StructuralModelSpec",
    "PsiEstimate",
    "fit_weighted_cox",
    "robust_sandwich",
    "bootstrap_ci",
]


@dataclass(frozen=True)
class StructuralModelSpec:
    """Terms of the structural hazard model: one main effect per
    treatment plus the listed interaction index sets."""

    n_treatments: int
    interactions: tuple[tuple[int, ...], ...] = ()

    def validate(self) -> "StructuralModelSpec":
        for s in self.interactions:
            if len(s) < 2 or len(set(s)) != len(s):
                raise ConfigError("interaction sets need >= 2 distinct treatments")
            if any(not 1 <= w <= self.n_treatments for w in s):
                raise ConfigError("interaction references treatment index out of range")
        return self

    @property
    def term_names(self) -> list[str]:
        names = [f"A{w}" for w in range(1, self.n_treatments + 1)]
        names += [":".join(f"A{w}" for w in s) for s in self.interactions]
        return names

    @property
    def n_terms(self) -> int:
        return self.n_treatments + len(self.interactions)

    def design(self, statuses: np.ndarray) -> np.ndarray:
        """Term matrix from an (n, W) 0/1 status matrix."""
        statuses = np.asarray(statuses, dtype=np.float64)
        cols = [statuses[:, w - 1] for w in range(1, self.n_treatments + 1)]
        for s in self.interactions:
            prod = np.ones(statuses.shape[0])
            for w in s:
                prod = prod * statuses[:, w - 1]
            cols.append(prod)
        return np.column_stack(cols)


@dataclass
class PsiEstimate:
    """Structural estimates with robust covariance and the weighted
    Breslow baseline that counterfactual curves are built from."""

    psi_hat: np.ndarray
    sandwich_cov: np.ndarray
    term_names: list[str]
    baseline_times: np.ndarray
    baseline_increments: np.ndarray
    loglik: float = 0.0
    n_iter: int = 0
    converged: bool = True
    score_norm: float = 0.0
    n_subjects: int = 0
    n_events: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_cov), 0.0, None))

    def ci(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        z = float(ndtri(0.5 + level / 2.0))
        return self.psi_hat - z * self.se, self.psi_hat + z * self.se

    def report(self) -> dict:
        lo, hi = self.ci()
        return {
            "format": "ctmsm-fit-report",
            "version": 1,
            "terms": list(self.term_names),
            "psi_hat": [float(v) for v in self.psi_hat],
            "robust_se": [float(v) for v in self.se],
            "ci95_lo": [float(v) for v in lo],
            "ci95_hi": [float(v) for v in hi],
            "loglik": float(self.loglik),
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
            "score_norm": float(self.score_norm),
            "n_subjects": int(self.n_subjects),
            "n_events": int(self.n_events),
        }

    def to_json(self) -> str:
        d = self.report()
        d["baseline_times"] = [float(v) for v in self.baseline_times]
        d["baseline_increments"] = [float(v) for v in self.baseline_increments]
        d["sandwich_cov"] = [[float(v) for v in row] for row in self.sandwich_cov]
        return json.dumps(d)

    @staticmethod
    def from_json(text: str) -> "PsiEstimate":
        d = json.loads(text)
        if d.get("format") != "ctmsm-fit-report":
            raise ConfigError("unrecognized fit report format")
        return PsiEstimate(
            psi_hat=np.asarray(d["psi_hat"]),
            sandwich_cov=np.asarray(d["sandwich_cov"]),
            term_names=list(d["terms"]),
            baseline_times=np.asarray(d["baseline_times"]),
            baseline_increments=np.asarray(d["baseline_increments"]),
            loglik=d["loglik"],
            n_iter=d["n_iter"],
            converged=d["converged"],
            score_norm=d["score_norm"],
            n_subjects=d["n_subjects"],
            n_events=d["n_events"],
        )


def _subject_weights(panel: CountingProcessPanel, weights) -> np.ndarray:
    if weights is None:
        return np.ones(panel.n_subjects)
    if isinstance(weights, WeightTable):
        w = weights.totals
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != panel.n_subjects:
        raise DataValidationError("weight vector length != number of subjects")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise DataValidationError("weights must be strictly positive and finite")
    return w


def fit_weighted_cox(
    panel: CountingProcessPanel,
    weights: WeightTable | np.ndarray | None,
    spec: StructuralModelSpec,
) -> PsiEstimate:
    """Solve the weighted partial score equation for psi.

    Each subject's stabilized weight multiplies both its score
    contribution and its at-risk indicator; the weighted Breslow baseline
    increments are stored for estimand construction, and the robust
    sandwich covariance is attached.
    """
    spec.validate()
    if spec.n_treatments != panel.n_treatments:
        raise ConfigError("structural spec treatment count != panel treatment count")
    w_subj = _subject_weights(panel, weights)
    if int(panel.event.sum()) < 1:
        raise DataValidationError("no outcome events in panel")
    subj = panel.row_subject()
    w_row = w_subj[subj]
    z = spec.design(panel.treatments)
    engine = RiskSetEngine(panel.start, panel.stop, panel.event)
    res = newton_solve(engine, z, weights=w_row)
    lp = z @ res.theta if spec.n_terms else np.zeros(panel.n_rows)
    ws = w_row * np.exp(np.clip(lp, -700, 700))
    s0 = engine.s0(ws)
    incr = engine.event_sums(w_row) / s0
    fit = PsiEstimate(
        psi_hat=res.theta,
        sandwich_cov=np.zeros((spec.n_terms, spec.n_terms)),
        term_names=spec.term_names,
        baseline_times=engine.times,
        baseline_increments=incr,
        loglik=res.loglik,
        n_iter=res.n_iter,
        converged=res.converged,
        score_norm=float(np.max(np.abs(res.score), initial=0.0)),
        n_subjects=panel.n_subjects,
        n_events=int(panel.event.sum()),
    )
    fit.sandwich_cov = robust_sandwich(fit, panel, weights)
    return fit


def robust_sandwich(
    fit: PsiEstimate,
    panel: CountingProcessPanel,
    weights: WeightTable | np.ndarray | None,
) -> np.ndarray:
    """Sigma_0^{-1} Sigma_1 Sigma_0^{-1} at the fitted psi.

    Sigma_0 is the weighted observed information; Sigma_1 sums the outer
    products of per-subject residuals
    Omega_i * integral {Z_i - Zbar} (dN_i - Y_i r_i dLambda_0),
    whose compensator part reduces to cumulative sums of the weighted
    Breslow increments over each subject's at-risk rows.
    """
    w_subj = _subject_weights(panel, weights)
    subj = panel.row_subject()
    w_row = w_subj[subj]
    spec_p = fit.psi_hat.shape[0]
    z = np.column_stack(
        [_term_column(panel, name) for name in fit.term_names]
    ) if spec_p else np.empty((panel.n_rows, 0))
    engine = RiskSetEngine(panel.start, panel.stop, panel.event)
    lp = z @ fit.psi_hat if spec_p else np.zeros(panel.n_rows)
    r = np.exp(np.clip(lp, -700, 700))
    ws = w_row * r
    s0 = engine.s0(ws)
    s1 = engine.s_vec(ws[:, None] * z) if spec_p else np.zeros((engine.n_times, 0))
    zbar = s1 / s0[:, None] if spec_p else s1
    d_w = engine.event_sums(w_row)
    incr = d_w / s0  # weighted Breslow dLambda_0
    # Sigma_0: weighted information
    if spec_p:
        zz = z[:, :, None] * z[:, None, :]
        s2 = engine.s_vec((ws[:, None, None] * zz).reshape(panel.n_rows, spec_p**2)).reshape(
            engine.n_times, spec_p, spec_p
        )
        sigma0 = (
            d_w[:, None, None] * (s2 / s0[:, None, None] - zbar[:, :, None] * zbar[:, None, :])
        ).sum(axis=0)
    else:
        sigma0 = np.zeros((0, 0))
    # per-subject score residuals
    n = panel.n_subjects
    u = np.zeros((n, spec_p))
    ev = engine.event_rows
    if ev.size and spec_p:
        contrib = z[ev] - zbar[engine.event_time_id]
        for j in range(spec_p):
            u[:, j] += np.bincount(subj[ev], weights=contrib[:, j], minlength=n)
    # compensator: cumulative Breslow sums over each row's covered event times
    cum0 = np.concatenate([[0.0], np.cumsum(incr)])
    cum1 = np.concatenate([np.zeros((1, spec_p)), np.cumsum(incr[:, None] * zbar, axis=0)])
    lo = np.searchsorted(engine.times, panel.start, side="right")
    hi = np.searchsorted(engine.times, panel.stop, side="right")
    lam0 = cum0[hi] - cum0[lo]
    lam1 = cum1[hi] - cum1[lo]
    comp = r[:, None] * (z * lam0[:, None] - lam1)
    for j in range(spec_p):
        u[:, j] -= np.bincount(subj, weights=comp[:, j], minlength=n)
    u *= w_subj[:, None]
    sigma1 = u.T @ u
    try:
        s0inv = np.linalg.inv(sigma0)
    except np.linalg.LinAlgError:
        raise NumericalError("singular weighted information matrix") from None
    return s0inv @ sigma1 @ s0inv


def _term_column(panel: CountingProcessPanel, name: str) -> np.ndarray:
    out = np.ones(panel.n_rows)
    for part in name.split(":"):
        w = int(part[1:])
        out = out * panel.treatments[:, w - 1]
    return out


def bootstrap_ci(
    panel: CountingProcessPanel,
    config: WeightConfig,
    spec: StructuralModelSpec,
    B: int = 100,
    seed: int = 0,
    ordering: OrderingSpec | None = None,
    estimand_fn=None,
    n_jobs: int = 1,
    min_B: int = 50,
) -> dict:
    """Nonparametric bootstrap over subjects.

    Each replicate resamples subjects with replacement, re-estimates the
    weights and refits the structural model; intervals are the 2.5/97.5
    percentiles. `estimand_fn(fit)` may map each replicate's fit to extra
    scalars (for survival/RMST intervals). Replicate seeds derive from
    (seed, replicate), so results do not depend on worker count; failed
    replicates are skipped, and more than 10% failures is an error.
    """
    if B < min_B:
        raise ConfigError(f"need B >= {min_B} bootstrap replicates")
    jobs = [(b, _derived(seed, b)) for b in range(B)]
    psis: list[np.ndarray | None] = [None] * B
    extras: list[np.ndarray | None] = [None] * B
    failures: list[str] = []

    def _one(job):
        b, s = job
        rng = np.random.Generator(np.random.Philox(key=np.array([s, 0], dtype=np.uint64)))
        idx = rng.integers(0, panel.n_subjects, size=panel.n_subjects)
        pb = panel.take_subjects(idx)
        wt = estimate_weights(pb, ordering=ordering, config=config)
        fit = fit_weighted_cox(pb, wt, spec)
        extra = np.asarray(estimand_fn(fit), dtype=np.float64) if estimand_fn else None
        return b, fit.psi_hat, extra

    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            futures = [ex.submit(_bootstrap_worker, panel, config, spec, ordering, estimand_fn, job) for job in jobs]
            for fut in futures:
                try:
                    b, psi, extra = fut.result()
                    psis[b], extras[b] = psi, extra
                except NumericalError as exc:
                    failures.append(str(exc))
    else:
        for job in jobs:
            try:
                b, psi, extra = _one(job)
                psis[b], extras[b] = psi, extra
            except NumericalError as exc:
                failures.append(str(exc))
    ok = [p for p in psis if p is not None]
    if len(failures) > 0.1 * B:
        raise NumericalError(
            f"bootstrap failed on {len(failures)}/{B} replicates: {failures[0]}"
        )
    mat = np.vstack(ok)
    lo = np.percentile(mat, 2.5, axis=0)
    hi = np.percentile(mat, 97.5, axis=0)
    out = {
        "psi_ci_lo": lo,
        "psi_ci_hi": hi,
        "psi_draws": mat,
        "n_ok": len(ok),
        "n_failed": len(failures),
    }
    if estimand_fn is not None:
        emat = np.vstack([e for e in extras if e is not None])
        out["estimand_ci_lo"] = np.percentile(emat, 2.5, axis=0)
        out["estimand_ci_hi"] = np.percentile(emat, 97.5, axis=0)
        out["estimand_draws"] = emat
    return out


def _derived(seed: int, b: int) -> int:
    return int(np.random.SeedSequence([seed & 0x7FFFFFFF, 0xB0, b]).generate_state(1)[0])


def _bootstrap_worker(panel, config, spec, ordering, estimand_fn, job):
    b, s = job
    rng = np.random.Generator(np.random.Philox(key=np.array([s, 0], dtype=np.uint64)))
    idx = rng.integers(0, panel.n_subjects, size=panel.n_subjects)
    pb = panel.take_subjects(idx)
    wt = estimate_weights(pb, ordering=ordering, config=config)
    fit = fit_weighted_cox(pb, wt, spec)
    extra = np.asarray(estimand_fn(fit), dtype=np.float64) if estimand_fn else None
    return b, fit.psi_hat, extra
