"""Command-line pipeline: simulate, weight, fit, summarize, benchmark.

Every command is a pure function of its inputs, configuration and seed;
re-running writes byte-identical artifacts, and the worker count changes
wall time only. Exit codes: 2 configuration, 3 data validation,
4 numerical failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .benchmark import benchmark_to_csv, run_benchmark
from .errors import ConfigError, CtmsmError, DataValidationError, NumericalError
from .estimands import Regimen, counterfactual_survival, curve_to_csv, estimand_report
from .forest import ForestParams
from .msmfit import PsiEstimate, StructuralModelSpec, bootstrap_ci, fit_weighted_cox
from .panel import ingest_panel, write_panel
from .simulate import SimConfig, make_ragged, simulate_rectangular
from .weights import OrderingSpec, WeightConfig, discrete_time_weights, estimate_weights

_EXIT_IO = 5


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("CTMSM_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _load_sim_config(args) -> SimConfig:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = SimConfig.from_json(fh.read())
    else:
        cfg = SimConfig()
    overrides = {}
    for field in ("n", "seed"):
        v = getattr(args, field, None)
        if v is not None:
            overrides[field] = v
    if overrides:
        cfg = replace(cfg, **overrides).validate()
    return cfg


def _weight_config(args) -> WeightConfig:
    forest = ForestParams(
        n_trees=getattr(args, "trees", None) or 100,
        seed=getattr(args, "seed", None) or 0,
    )
    return WeightConfig(
        estimator=getattr(args, "estimator", "iv") or "iv",
        forest=forest,
        truncate=None,
        seed=getattr(args, "seed", None) or 0,
    ).validate()


def _ordering(args, panel) -> OrderingSpec:
    if getattr(args, "ordering", None):
        order = tuple(int(v) for v in args.ordering.split(","))
        return OrderingSpec(order).validate(panel.n_treatments)
    return OrderingSpec.by_size(panel)


def _structural_spec(args, panel) -> StructuralModelSpec:
    inter = ()
    if getattr(args, "interactions", None):
        inter = tuple(
            tuple(int(v) for v in grp.split("*")) for grp in args.interactions.split(",")
        )
    return StructuralModelSpec(panel.n_treatments, inter).validate()


def cmd_simulate(args) -> int:
    cfg = _load_sim_config(args)
    panel = simulate_rectangular(cfg)
    if args.ragged:
        panel = make_ragged(
            panel, cfg.ragged.subject_fraction, cfg.ragged.drop_prob,
            seed=cfg.seed + 1_000_003,
        )
    write_panel(panel, args.out)
    print(f"wrote {panel.n_subjects} subjects / {panel.n_rows} rows to {args.out}")
    return 0


def cmd_weights(args) -> int:
    panel = ingest_panel(args.panel)
    table = estimate_weights(panel, ordering=_ordering(args, panel), config=_weight_config(args))
    table.to_csv(args.out)
    print(table.summary())
    return 0


def cmd_fit(args) -> int:
    panel = ingest_panel(args.panel)
    weights = None
    if args.weights:
        import csv as _csv

        with open(args.weights, "r", encoding="utf-8") as fh:
            rows = list(_csv.DictReader(fh))
        by_id = {r["id"]: float(r["omega_total"]) for r in rows}
        try:
            weights = np.array([by_id[sid] for sid in panel.subject_ids])
        except KeyError as exc:
            raise DataValidationError(f"weight table is missing subject {exc}") from exc
    spec = _structural_spec(args, panel)
    fit = fit_weighted_cox(panel, weights, spec)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(fit.to_json())
    rep = fit.report()
    for name, est, lo, hi in zip(rep["terms"], rep["psi_hat"], rep["ci95_lo"], rep["ci95_hi"]):
        print(f"{name}: {est:+.4f}  (95% CI {lo:+.4f}, {hi:+.4f})")
    return 0


def _load_regimens(path, n_treatments: int) -> list[Regimen]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    out = []
    for d in data:
        on = {int(w): tuple((float(a), float(b)) for a, b in spans) for w, spans in d.get("on", {}).items()}
        out.append(Regimen(d["label"], float(d["horizon"]), on).validate(n_treatments))
    return out


def cmd_estimands(args) -> int:
    with open(args.fit, "r", encoding="utf-8") as fh:
        fit = PsiEstimate.from_json(fh.read())
    n_trt = sum(1 for t in fit.term_names if ":" not in t)
    regimens = _load_regimens(args.regimens, n_trt)
    tau = args.tau
    cis = None
    if args.panel and args.bootstrap:
        panel = ingest_panel(args.panel)
        spec = StructuralModelSpec(
            n_trt,
            tuple(tuple(int(p[1:]) for p in t.split(":")) for t in fit.term_names if ":" in t),
        )

        def estimand_fn(f):
            vals = []
            for reg in regimens:
                curve = counterfactual_survival(f, reg)
                from .estimands import rmst as _rmst, survival_at as _sat

                vals.extend([_sat(curve, tau), _rmst(curve, tau)])
            return vals

        boot = bootstrap_ci(
            panel, _weight_config(args), spec, B=args.bootstrap,
            seed=args.seed or 0, estimand_fn=estimand_fn, n_jobs=_threads(args),
        )
        lo, hi = boot["estimand_ci_lo"], boot["estimand_ci_hi"]
        cis = {
            reg.label: (lo[2 * k], hi[2 * k], lo[2 * k + 1], hi[2 * k + 1])
            for k, reg in enumerate(regimens)
        }
    rows = estimand_report(fit, regimens, tau, args.out, cis=cis)
    for reg in regimens:
        if args.curves_dir:
            os.makedirs(args.curves_dir, exist_ok=True)
            curve = counterfactual_survival(fit, reg)
            curve_to_csv(curve, os.path.join(args.curves_dir, f"curve_{reg.label}.csv"))
    for row in rows:
        print(f"{row['regimen_label']} {row['estimand']} = {row['value']:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_sim_config(args)
    estimators = tuple(args.estimators.split(",")) if args.estimators else ("i", "ii", "iii", "iv")
    rows = run_benchmark(
        cfg,
        estimators=estimators,
        methods=("JMSSM-CT",),
        reps=args.reps,
        seed=cfg.seed,
        data_format=args.data_format,
        weight_config=_weight_config(args),
        n_jobs=_threads(args),
    )
    benchmark_to_csv(rows, args.out, extra={"data_format": args.data_format})
    for r in rows:
        print(f"{r.method} ({r.estimator}) {r.param}: MAB={r.mab:.4f} RMSE={r.rmse:.4f} CP={r.cp:.3f}")
    return 0


def cmd_compare_dt(args) -> int:
    cfg = _load_sim_config(args)
    dts = tuple(float(v) for v in (args.dts.split(",") if args.dts else ("2", "1", "0.5")))
    methods = ("JMSSM-CT",) + tuple(f"JMSM-DT:{dt:g}" for dt in dts)
    all_rows = []
    formats = ("rectangular", "ragged") if args.data_format == "both" else (args.data_format,)
    for fmt in formats:
        rows = run_benchmark(
            cfg,
            estimators=(args.estimator or "iv",),
            methods=methods,
            reps=args.reps,
            seed=cfg.seed,
            data_format=fmt,
            weight_config=_weight_config(args),
            n_jobs=_threads(args),
        )
        all_rows.append((fmt, rows))
    import csv as _csv

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["data_format", "method", "estimator", "param", "MAB", "RMSE", "CP", "reps", "n"])
        for fmt, rows in all_rows:
            for r in rows:
                w.writerow([fmt, r.method, r.estimator, r.param, repr(r.mab), repr(r.rmse), repr(r.cp), r.reps, r.n])
    for fmt, rows in all_rows:
        for r in rows:
            print(f"[{fmt}] {r.method} {r.param}: MAB={r.mab:.4f} CP={r.cp:.3f}")
    return 0


def cmd_print_config(args) -> int:
    cfg = _load_sim_config(args)
    wcfg = _weight_config(args)
    out = {
        "simulation": json.loads(cfg.to_json()),
        "weights": {
            "estimator": wcfg.estimator,
            "kernel": wcfg.kernel,
            "bandwidth": wcfg.bandwidth,
            "cv_folds": wcfg.cv_folds,
            "include_count": wcfg.include_count,
            "calibrate_forest": wcfg.calibrate_forest,
            "terminal_bracket": wcfg.terminal_bracket,
            "dt_model": wcfg.dt_model,
            "forest": asdict(wcfg.forest),
        },
        "threads": _threads(args),
    }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmsm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--config", help="JSON simulation config file")

    sp = sub.add_parser("simulate", help="generate a panel CSV")
    common(sp, seed_required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--ragged", action="store_true")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("weights", help="estimate stabilized weights for a panel")
    common(sp)
    sp.add_argument("--panel", required=True)
    sp.add_argument("--estimator", choices=("i", "ii", "iii", "iv"), default="iv")
    sp.add_argument("--ordering", help="comma-separated treatment order, e.g. 2,1")
    sp.add_argument("--trees", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("fit", help="fit the weighted structural model")
    common(sp)
    sp.add_argument("--panel", required=True)
    sp.add_argument("--weights", help="weight table CSV (omit for unit weights)")
    sp.add_argument("--interactions", help="e.g. 1*2 or 1*2,1*3")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("estimands", help="counterfactual survival and RMST per regimen")
    common(sp)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--regimens", required=True, help="JSON regimen file")
    sp.add_argument("--tau", type=float, default=14.0)
    sp.add_argument("--panel", help="panel CSV, required for bootstrap CIs")
    sp.add_argument("--bootstrap", type=int, default=0)
    sp.add_argument("--estimator", choices=("i", "ii", "iii", "iv"), default="iv")
    sp.add_argument("--trees", type=int, default=None)
    sp.add_argument("--curves-dir")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("benchmark", help="replicated bias/RMSE/coverage study")
    common(sp, seed_required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--estimators", help="comma list from i,ii,iii,iv")
    sp.add_argument("--data-format", choices=("ragged", "rectangular"), default="ragged")
    sp.add_argument("--trees", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("compare-dt", help="continuous vs discrete-time comparison table")
    common(sp, seed_required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--dts", help="comma list of bin widths, default 2,1,0.5")
    sp.add_argument("--estimator", choices=("i", "ii", "iii", "iv"), default="iv")
    sp.add_argument("--data-format", choices=("ragged", "rectangular", "both"), default="both")
    sp.add_argument("--trees", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("print-config", help="print resolved configuration defaults")
    common(sp)
    sp.add_argument("--estimator", choices=("i", "ii", "iii", "iv"), default="iv")
    sp.add_argument("--trees", type=int, default=None)
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "weights": cmd_weights,
    "fit": cmd_fit,
    "estimands": cmd_estimands,
    "benchmark": cmd_benchmark,
    "compare-dt": cmd_compare_dt,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    if os.environ.get("CTMSM_TMPDIR"):
        import tempfile

        tempfile.tempdir = os.environ["CTMSM_TMPDIR"]
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except DataValidationError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return DataValidationError.exit_code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except CtmsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return _EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
