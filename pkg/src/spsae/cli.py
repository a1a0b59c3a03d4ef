"""Command-line interface.

Subcommands: fit, predict, mse, simulate, gof, synth. Options may come from
flags or from a key=value config file (flags win); every run echoes its
fully resolved configuration into the output header. Exit codes: 0 success,
2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import em, io, mse as mse_mod, simulate, synth
from ._version import __version__
from .exceptions import DataError, EstimationError
from .predict import predict_areas

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
CV_THRESHOLD = 33.0  # conventional publishability bound for CV percent


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _load_config_file(path) -> dict:
    values = {}
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {lineno} is not key=value")
            key, _, raw = line.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _coerce(raw: str):
    for convert in (int, float):
        try:
            return convert(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _resolved_config(args, keys) -> dict:
    return {key: getattr(args, key) for key in keys if getattr(args, key, None) is not None}


def _em_config(args) -> em.EmConfig:
    return em.EmConfig(
        max_iter=args.max_iter,
        tol_rel_loglik=args.tol,
        n_random_starts=args.starts,
        perturb_scale=args.perturb_scale,
        min_mass=args.min_mass,
        rng_seed=args.seed,
    )


def _cmd_fit(args) -> int:
    data, coding = io.load_sample(args.sample)
    config = _em_config(args)
    if args.g is not None:
        result = em.fit(data, args.g, config, compute_covariance=False)
    else:
        result = em.select_G(
            data, args.g_min, args.g_max, config,
            criterion=args.criterion, compute_covariance=False,
        )
    result = em.attach_covariance(result, data, method=args.covariance)
    header = _resolved_config(
        args, ["sample", "g", "g_min", "g_max", "criterion", "seed", "max_iter",
               "tol", "starts", "perturb_scale", "min_mass", "covariance"]
    )
    header["seed"] = args.seed
    io.write_fit(args.out, result, coding=coding, header=header)
    print(f"fit: G={result.params.G} loglik={result.loglik:.6f} aic={result.aic:.6f} "
          f"bic={result.bic:.6f} converged={result.converged}")
    print(f"intercept={result.params.mean_intercept():.6f} "
          f"mixing_sd={np.sqrt(result.params.mixing_variance()):.6f}")
    if result.covariance_error:
        print(f"warning: covariance unavailable ({result.covariance_error})", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def _cmd_predict(args) -> int:
    fit, coding = io.read_fit(args.fit)
    if coding is None:
        raise DataError(f"{args.fit}: fit file has no covariate coding; refit via the CLI")
    tabs = io.load_crosstab(args.crosstab, coding)
    data = None
    if args.sample:
        data, _ = io.load_sample(args.sample, coding)
    predictions = predict_areas(fit, list(tabs.values()), data=data)
    header = _resolved_config(args, ["fit", "crosstab", "sample"])
    rows = [
        [pred.area_id, _fmt(tabs[pred.area_id].N_i), _fmt(pred.p_hat),
         _fmt(pred.alpha_hat), int(pred.out_of_sample)]
        for pred in predictions
    ]
    io.write_table(args.out, ["area_id", "N_i", "p_hat", "alpha_hat", "out_of_sample"],
                   rows, header=header)
    n_out = sum(pred.out_of_sample for pred in predictions)
    print(f"predict: {len(rows)} areas ({n_out} out-of-sample); wrote {args.out}")
    return 0


def _cmd_mse(args) -> int:
    fit, coding = io.read_fit(args.fit)
    if coding is None:
        raise DataError(f"{args.fit}: fit file has no covariate coding; refit via the CLI")
    data, _ = io.load_sample(args.sample, coding)
    tabs = io.load_crosstab(args.crosstab, coding)
    V = fit.covariance
    if V is None:
        V = em.attach_covariance(fit, data).covariance
        if V is None:
            raise EstimationError("no parameter covariance available for the MSE")
    report = mse_mod.mse_report(
        fit, data, list(tabs.values()), V=V, bias_correct=not args.no_bias_correction
    )
    header = _resolved_config(args, ["fit", "sample", "crosstab", "no_bias_correction"])
    columns = ["area_id", "p_hat", "d_term", "e_term", "b1", "b2",
               "mse_plain", "mse_star", "mse_star_floored", "cv_percent"]
    rows = [
        [aid, _fmt(report.p_hat[i]), _fmt(report.d[i]), _fmt(report.e[i]),
         _fmt(report.b1[i]), _fmt(report.b2[i]), _fmt(report.mse_plain[i]),
         _fmt(report.mse_star[i]), int(report.star_floored[i]), _fmt(report.cv_percent[i])]
        for i, aid in enumerate(report.area_ids)
    ]
    io.write_table(args.out, columns, rows, header=header)
    finite_cv = report.cv_percent[np.isfinite(report.cv_percent)]
    share = float((finite_cv > CV_THRESHOLD).mean()) if finite_cv.size else float("nan")
    print(f"mse: {len(rows)} areas; bias_corrected={report.bias_corrected}; "
          f"share of areas with CV > {CV_THRESHOLD:.0f}%: {share:.3f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    config = simulate.ScenarioConfig(
        scenario=args.scenario, m=args.m, N_i=args.big_n, n_i=args.n,
        T=args.t, beta=args.beta, rng_seed=args.seed,
    )
    predictors = tuple(p.strip() for p in args.predictors.split(",") if p.strip())
    estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    options = simulate.StudyOptions(
        g_min=args.g_min, g_max=args.g_max,
        em=em.EmConfig(n_random_starts=args.starts, rng_seed=args.seed),
        gauss_B=args.gauss_b,
    )
    report = simulate.run_study(config, predictors, estimators, options, n_workers=args.workers)
    header = _resolved_config(
        args, ["scenario", "m", "big_n", "n", "t", "beta", "seed", "predictors",
               "estimators", "g_min", "g_max", "starts", "gauss_b"]
    )
    columns = ["area", "predictor", "mse_estimator", "bias", "rmse", "mae", "r_ratio", "coverage"]
    rows = []
    for name in report.predictors:
        for i in range(config.m):
            rows.append([i, name, "", _fmt(report.bias[name][i]), _fmt(report.rmse[name][i]),
                         _fmt(report.mae[name][i]), "", ""])
    for key in report.rmse_hat:
        predictor, estimator = key.split(":")
        for i in range(config.m):
            rows.append([i, predictor, estimator, "", "", "",
                         _fmt(report.r_ratio[key][i]), _fmt(report.coverage[key][i])])
    io.write_table(args.out_metrics, columns, rows, header=header)
    if args.out_raw:
        raw_cols = ["rep", "area", "true_p"] + [f"p_hat_{p}" for p in report.predictors] + [
            f"rmse_hat_{e}" for e in report.mse_estimators
        ]
        raw_rows = []
        for t in range(config.T):
            if not report.success[t]:
                continue
            for i in range(config.m):
                row = [t, i, _fmt(report.true_p[t, i])]
                row += [_fmt(report.predictions[p][t, i]) for p in report.predictors]
                row += [_fmt(report.rmse_hat[f"sp-ebp:{e}"][t, i]) for e in report.mse_estimators]
                raw_rows.append(row)
        io.write_table(args.out_raw, raw_cols, raw_rows, header=header)
    summary = report.summary()
    print(f"simulate: scenario {config.scenario}, m={config.m}, T={config.T}, "
          f"failed={report.n_failed}")
    print(f"G selection frequencies: {summary['g_frequencies']}")
    for name in report.predictors:
        print(f"{name}: mean RMSE {summary[name]['mean_rmse']:.5f} "
              f"mean bias {summary[name]['mean_bias']:+.5f}")
    for key in report.rmse_hat:
        print(f"{key}: mean R {summary[key]['mean_r_ratio']:.3f} "
              f"mean coverage {summary[key]['mean_coverage']:.3f}")
    print(f"wrote {args.out_metrics}")
    return 0


def _cmd_gof(args) -> int:
    data, _ = io.load_sample(args.sample)
    ids, direct, variances = io.direct_estimates(data)
    _, rows = io.read_table(args.mse_table)
    model = {row["area_id"]: row for row in rows}
    pairs = [(aid, d, v) for aid, d, v in zip(ids, direct, variances) if str(aid) in model]
    if not pairs:
        raise DataError("no overlapping areas between the sample and the MSE table")
    direct_v = np.array([d for _, d, _ in pairs])
    var_v = np.array([v for _, _, v in pairs])
    pred_v = np.array([float(model[str(aid)]["p_hat"]) for aid, _, _ in pairs])
    mse_v = np.array([float(model[str(aid)][args.mse_column]) for aid, _, _ in pairs])
    W, df, p_value = io.wald_gof(direct_v, pred_v, var_v, mse_v)
    verdict = "not significantly different" if p_value > args.alpha else "significantly different"
    print(f"wald: W={W:.4f} df={df} p={p_value:.4f}")
    print(f"model-based estimates are {verdict} from direct estimates at alpha={args.alpha}")
    if args.out:
        io.write_table(args.out, ["W", "df", "p_value"], [[_fmt(W), df, _fmt(p_value)]],
                       header=_resolved_config(args, ["sample", "mse_table", "mse_column", "alpha"]))
        print(f"wrote {args.out}")
    return 0


def _cmd_synth(args) -> int:
    truth = synth.write_lookalike(args.out_sample, args.out_crosstab,
                                  m_areas=args.areas, seed=args.seed)
    print(f"synth: {args.areas} areas ({truth['n_out_of_sample']} out-of-sample), "
          f"3-component truth; wrote {args.out_sample} and {args.out_crosstab}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spsae",
        description="Semi-parametric small area estimation of proportions.",
    )
    parser.add_argument("--version", action="version", version=f"spsae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the mixture model to a sample file")
    p_fit.add_argument("--sample", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--g", type=int, default=None, help="fixed number of components")
    p_fit.add_argument("--g-min", type=int, default=2)
    p_fit.add_argument("--g-max", type=int, default=6)
    p_fit.add_argument("--criterion", choices=("aic", "bic"), default="aic")
    p_fit.add_argument("--covariance", choices=("sandwich", "observed"), default="sandwich")
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict", help="predict area proportions from a fit")
    p_pred.add_argument("--fit", required=True)
    p_pred.add_argument("--crosstab", required=True)
    p_pred.add_argument("--sample", default=None)
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=_cmd_predict)

    p_mse = sub.add_parser("mse", help="MSE decomposition for predicted areas")
    p_mse.add_argument("--fit", required=True)
    p_mse.add_argument("--sample", required=True)
    p_mse.add_argument("--crosstab", required=True)
    p_mse.add_argument("--out", required=True)
    p_mse.add_argument("--no-bias-correction", action="store_true")
    p_mse.set_defaults(func=_cmd_mse)

    p_sim = sub.add_parser("simulate", help="run the replication study")
    p_sim.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    p_sim.add_argument("--m", type=int, default=100)
    p_sim.add_argument("--big-n", type=int, default=100, help="population size per area")
    p_sim.add_argument("--n", type=int, default=10, help="sample size per area")
    p_sim.add_argument("--t", type=int, default=200, help="replications")
    p_sim.add_argument("--beta", type=float, default=1.0)
    p_sim.add_argument("--predictors", default="sp-ebp")
    p_sim.add_argument("--estimators", default="plain,star")
    p_sim.add_argument("--g-min", type=int, default=2)
    p_sim.add_argument("--g-max", type=int, default=5)
    p_sim.add_argument("--gauss-b", type=int, default=2500)
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--out-metrics", required=True)
    p_sim.add_argument("--out-raw", default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_gof = sub.add_parser("gof", help="Wald comparison with direct estimates")
    p_gof.add_argument("--sample", required=True)
    p_gof.add_argument("--mse-table", required=True)
    p_gof.add_argument("--mse-column", default="mse_star")
    p_gof.add_argument("--alpha", type=float, default=0.05)
    p_gof.add_argument("--out", default=None)
    p_gof.set_defaults(func=_cmd_gof)

    p_synth = sub.add_parser("synth", help="write a synthetic lookalike dataset")
    p_synth.add_argument("--out-sample", required=True)
    p_synth.add_argument("--out-crosstab", required=True)
    p_synth.add_argument("--areas", type=int, default=80)
    p_synth.set_defaults(func=_cmd_synth)

    for sp in (p_fit, p_pred, p_mse, p_sim, p_gof, p_synth):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--max-iter", type=int, default=500)
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--starts", type=int, default=10)
        sp.add_argument("--perturb-scale", type=float, default=0.5)
        sp.add_argument("--min-mass", type=float, default=1e-6)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        known = set(vars(args)) - {"func", "command", "config"}
        unknown = set(file_values) - known
        if unknown:
            print(f"error: unknown config key(s): {sorted(unknown)}", file=sys.stderr)
            return EXIT_VALIDATION
        typed = {}
        for key, raw in file_values.items():
            current = getattr(args, key)
            if isinstance(current, bool):
                typed[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int) and not isinstance(current, bool):
                typed[key] = int(raw)
            elif isinstance(current, float):
                typed[key] = float(raw)
            elif current is None:
                typed[key] = _coerce(raw)
            else:
                typed[key] = raw
        parser.set_defaults(**typed)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
