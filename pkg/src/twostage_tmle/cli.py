"""Command-line surface: simulate, analyze, truth.

``simulate`` runs the Monte Carlo benchmark and writes the metrics table
(CSV) plus optional per-replicate raw results (newline-delimited JSON).
``analyze`` runs the full two-stage analysis on an individual-level CSV
according to a strict JSON config and writes a JSON report with a mandatory
audit block (seeds, probability-bound hits, learner selections) --
reproducibility of the adaptive selection is the point of the method.
``truth`` prints the generated-population true effects as JSON.

Every command is deterministic given its flags; seeds are explicit.
Exit codes: 0 success, 2 usage/schema violation, 3 a cluster contributed
no measured outcomes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from ._backend import backend_name
from .adaptive_prespec import select_adjustment_multi
from .dataio import (
    SchemaError,
    json_safe,
    load_analysis_config,
    read_individual_csv,
    write_json_atomic,
)
from .dgp import DgpSpec, true_values
from .harness import (
    ESTIMATORS,
    ExperimentConfig,
    run_experiment,
    write_metrics_csv,
    write_raw_ndjson,
)
from .seeds import split_seed
from .stage1 import (
    NoMeasuredOutcomesError,
    estimate_endpoint,
    estimate_ratio_endpoint,
)
from .stage2 import ClusterSummary, Stage2Config, weights_for

_DGP_NAMES = {"main": "main", "supp": "supplementary", "supplementary": "supplementary"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostage-tmle",
        description="Two-stage targeted estimation for cluster randomized trials",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a seeded simulation study")
    sim.add_argument("--dgp", choices=sorted(_DGP_NAMES), required=True)
    sim.add_argument("--clusters", type=int, default=30)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument(
        "--estimators",
        default=",".join(ESTIMATORS),
        help="comma-separated subset of: " + ", ".join(ESTIMATORS),
    )
    sim.add_argument("--null", action="store_true", help="null-effect process")
    sim.add_argument("--out", required=True, help="metrics CSV path")
    sim.add_argument("--raw-out", default=None, help="raw per-replicate NDJSON path")
    sim.add_argument("--jobs", type=int, default=1)

    ana = sub.add_parser("analyze", help="two-stage analysis of a trial CSV")
    ana.add_argument("--data", required=True)
    ana.add_argument("--config", required=True)
    ana.add_argument("--out", required=True)

    tru = sub.add_parser("truth", help="true effects of a generated population")
    tru.add_argument("--dgp", choices=sorted(_DGP_NAMES), required=True)
    tru.add_argument("--pop", type=int, default=5000)
    tru.add_argument("--seed", type=int, default=0)
    tru.add_argument("--null", action="store_true")
    return parser


def cmd_simulate(args) -> int:
    try:
        estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
        config = ExperimentConfig(
            dgp=DgpSpec(
                kind=_DGP_NAMES[args.dgp],
                n_clusters=args.clusters,
                null_effect=args.null,
                seed=args.seed,
            ),
            replicates=args.reps,
            estimators=estimators,
            jobs=args.jobs,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = run_experiment(config)
    write_metrics_csv(result.rows, args.out)
    if args.raw_out:
        write_raw_ndjson(result.raw, args.raw_out)
    if result.failures:
        print(
            f"warning: {len(result.failures)} of {config.replicates} replicates "
            "failed and were excluded from aggregates",
            file=sys.stderr,
        )
    return 0


def _stage1_json(res) -> dict:
    out = {"y_hat_c": res.y_hat_c, "n": res.n, "n_measured": res.n_measured}
    if res.diagnostics is not None:
        out["diagnostics"] = dataclasses.asdict(res.diagnostics)
    if res.components is not None:
        out["components"] = [_stage1_json(c) for c in res.components]
    return out


def _estimate_json(est) -> dict:
    return {
        "psi1": est.psi1,
        "psi0": est.psi0,
        "rd": est.rd,
        "rr": est.rr if est.rr_defined else None,
        "log_rr": est.log_rr,
        "se_rd": est.se_rd,
        "se_log_rr": est.se_log_rr,
        "df": est.df,
        "ci_rd": list(est.ci_rd),
        "ci_rr": list(est.ci_rr),
        "pvalue_rd": est.pvalue_rd,
        "pvalue_rr": est.pvalue_rr,
        "rr_defined": est.rr_defined,
        "adjustment": est.adjustment,
        "ic_rd": est.ic_rd,
        "ic_log_rr": est.ic_log_rr,
    }


def _selection_json(report) -> dict:
    return {
        "candidates": [list(c) for c in report.candidates],
        "chosen_or": list(report.chosen_or),
        "chosen_ps": list(report.chosen_ps),
        "scheme": report.scheme,
        "scale": report.scale,
        "cv_variances": [
            {"or": list(o), "ps": list(p), "variance": v}
            for (o, p), v in report.cv_variances.items()
        ],
    }


def cmd_analyze(args) -> int:
    try:
        config = load_analysis_config(args.config)
        clusters = read_individual_csv(args.data)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2

    stage1_results = []
    try:
        for i, cluster in enumerate(clusters):
            s1 = dataclasses.replace(config.stage1, seed=split_seed(config.seed, i))
            if config.endpoint_type == "ratio":
                res = estimate_ratio_endpoint(cluster, s1, s1, config.num, config.den)
            else:
                res = estimate_endpoint(cluster, s1, outcome=config.outcome)
            stage1_results.append(res)
    except NoMeasuredOutcomesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    summaries = []
    for cluster, res in zip(clusters, stage1_results):
        covariates = dict(cluster.e_c)
        covariates.update(
            {f"{k}_mean": float(np.mean(v)) for k, v in cluster.w.items()}
        )
        summaries.append(
            ClusterSummary(
                id=cluster.id,
                a_c=cluster.a_c,
                y_hat_c=res.y_hat_c,
                covariates=covariates,
                pair_id=cluster.pair_id,
                size=cluster.n,
            )
        )
    alphas = weights_for(summaries, config.weights)
    summaries = [
        dataclasses.replace(s, alpha=float(w)) for s, w in zip(summaries, alphas)
    ]

    scales = {"rd": ("rd",), "rr": ("log_rr",), "both": ("rd", "log_rr")}[config.scale]
    stage2_cfg = Stage2Config(
        known_ps=config.known_ps, matched=config.matched, weights=config.weights
    )
    reports = select_adjustment_multi(summaries, config.candidates, stage2_cfg, scales)

    results = {}
    for scale in scales:
        key = "rd" if scale == "rd" else "rr"
        results[key] = {
            "selection": _selection_json(reports[scale]),
            "estimate": _estimate_json(reports[scale].chosen_estimate),
        }

    diag = [r.diagnostics for r in stage1_results if r.diagnostics is not None]
    learner_counts: dict[str, dict] = {"outcome": {}, "measurement": {}}
    for d in diag:
        learner_counts["outcome"][d.outcome_learner] = (
            learner_counts["outcome"].get(d.outcome_learner, 0) + 1
        )
        learner_counts["measurement"][d.measurement_learner] = (
            learner_counts["measurement"].get(d.measurement_learner, 0) + 1
        )

    report = {
        "results": results,
        "stage1": [
            {"id": c.id, **_stage1_json(r)} for c, r in zip(clusters, stage1_results)
        ],
        "audit": {
            "seed": config.seed,
            "cluster_seeds": [split_seed(config.seed, i) for i in range(len(clusters))],
            "backend": backend_name(),
            "n_clusters": len(clusters),
            "n_individuals": int(sum(c.n for c in clusters)),
            "g_bound_hits": int(sum(d.g_truncated for d in diag)),
            "learner_selections": learner_counts,
            "weights": config.weights,
            "candidates": [list(c) if isinstance(c, tuple) else c for c in config.candidates],
            "matched": config.matched,
            "endpoint": {
                "type": config.endpoint_type,
                "outcome": config.outcome,
                "num": config.num,
                "den": config.den,
            },
        },
    }
    write_json_atomic(json_safe(report), args.out)
    return 0


def cmd_truth(args) -> int:
    spec = DgpSpec(
        kind=_DGP_NAMES[args.dgp], null_effect=args.null, seed=args.seed
    )
    try:
        values = true_values(spec, args.pop)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(values, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args)
    if args.command == "analyze":
        return cmd_analyze(args)
    return cmd_truth(args)


if __name__ == "__main__":
    sys.exit(main())
