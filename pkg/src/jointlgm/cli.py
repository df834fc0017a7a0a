"""Command-line interface: simulate, fit, predict and oracle-compare.

Exit codes: 0 success, 2 parse/config error, 3 simulation failure,
4 optimizer failure, 5 non-finite posterior, 6 oracle guard.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import dataio, inference, mcmc, predict
from .errors import (
    BisectionFailed,
    DataFormatError,
    DimensionTooLarge,
    JointLgmError,
    MaxIterations,
    NewtonDiverged,
    OptimizerFailed,
    SingularHessian,
)
from .inference import FitResult, Summary
from .model import (
    AssociationStructure,
    GridConfig,
    JointData,
    ModelConfig,
    SplineConfig,
    stack,
)
from .simulate import SimScenario, simulate_joint

log = logging.getLogger("jointlgm")

EXIT_PARSE = 2
EXIT_SIMULATION = 3
EXIT_OPTIMIZER = 4
EXIT_NONFINITE = 5
EXIT_ORACLE_GUARD = 6


def model_config_from_dict(d: dict) -> ModelConfig:
    spline_d = d.get("spline", {})
    if spline_d is None:
        spline = None
    else:
        spline = SplineConfig(
            n_knots=int(spline_d.get("n_knots", 25)),
            scaled=bool(spline_d.get("scaled", True)),
            knots=tuple(spline_d["knots"]) if "knots" in spline_d else None,
        )
    grid_d = d.get("grid", {})
    grid = GridConfig(
        step=float(grid_d.get("step", 0.75)),
        log_drop=float(grid_d.get("log_drop", 6.0)),
        max_dense_dim=int(grid_d.get("max_dense_dim", 4)),
        ccd_f0=float(grid_d.get("ccd_f0", 1.1)),
        strategy=str(grid_d.get("strategy", "auto")),
    )
    return ModelConfig(
        association=AssociationStructure(d.get("association", "eq6")),
        baseline_hazard=d.get("baseline", "weibull"),
        spline=spline,
        frailty=bool(d.get("frailty", False)),
        priors=dict(d.get("priors", {})),
        fixed={k: float(v) for k, v in d.get("fixed", {}).items()},
        fixed_effect_precision=float(d.get("fixed_effect_precision", 0.001)),
        grid=grid,
    )


def scenario_from_dict(d: dict, seed_override=None) -> SimScenario:
    obs = d.get("obs_times", {"n": 9, "max": 4.0})
    if isinstance(obs, dict):
        obs_times = tuple(np.linspace(0.0, float(obs.get("max", 4.0)),
                                      int(obs.get("n", 9))))
    else:
        obs_times = tuple(float(t) for t in obs)
    seed = int(d.get("seed", 0)) if seed_override is None else int(seed_override)
    return SimScenario(
        n_subjects=int(d.get("n_subjects", 300)),
        obs_times=obs_times,
        trajectory=d.get("trajectory", "quadratic"),
        beta=tuple(d.get("beta", [])),
        gamma=tuple(d.get("gamma", [])),
        sigma_w=float(d.get("sigma_w", 0.5)),
        sigma_v=float(d.get("sigma_v", 0.0)),
        rho=float(d.get("rho", 0.0)),
        association=AssociationStructure(d.get("association", "eq4")),
        nu=tuple(d.get("nu", [1.0])),
        kappa=float(d.get("kappa", 1.0)),
        tau_eps=float(d.get("tau_eps", 10.0)),
        censor_horizon=float(d.get("censor_horizon", 4.0)),
        hazard_mode=d.get("hazard_mode", "at_event_time"),
        seed=seed,
    )


def summary_dict(s: Summary) -> dict:
    return s.to_dict()


def fit_result_to_dict(fit: FitResult, config_dict: dict) -> dict:
    grid = fit.grid
    out = {
        "model": config_dict,
        "log_marginal_likelihood": fit.log_marginal_likelihood,
        "association": fit.association_kind,
        "kappa_mean": fit.kappa_mean,
        "nu_mean": list(fit.nu_mean),
        "hyperparameters": {nm: summary_dict(s) for nm, s in fit.hyper.items()},
        "latent": {
            blk: {k: list(v) for k, v in d.items()}
            for blk, d in fit.latent.items()
        },
        "spline": None if fit.spline is None else {
            "knots": list(fit.spline["knots"]), "mean": list(fit.spline["mean"]),
            "lower": list(fit.spline["lower"]), "upper": list(fit.spline["upper"]),
        },
        "subjects": [str(s) for s in fit.subjects],
        "subject_effects": {str(k): v for k, v in fit.subject_effects.items()},
        "subject_trajectory": None if fit.subject_trajectory is None else {
            "times": list(fit.subject_trajectory["times"]),
            "per_subject": {
                str(k): {"mean": list(v["mean"]), "sd": list(v["sd"])}
                for k, v in fit.subject_trajectory["per_subject"].items()
            },
        },
        "theta_grid": None if grid is None else {
            "names": list(grid.names),
            "points_unconstrained": [list(p) for p in grid.points],
            "log_posterior": list(grid.log_posterior),
            "weight": list(grid.weights),
            "mode_index": grid.mode_index,
            "hessian_at_mode": [list(r) for r in grid.hessian_at_mode],
            "strategy": grid.strategy,
        },
    }
    return out


def fit_result_from_dict(d: dict) -> FitResult:
    """Rebuild the parts of a fit that prediction needs from fit.json."""
    hyper = {nm: Summary(mode=s.get("mode"), mean=s["mean"], sd=s["sd"],
                         q025=s["q0.025"], q500=s["q0.5"], q975=s["q0.975"])
             for nm, s in d["hyperparameters"].items()}
    latent = {blk: {k: np.asarray(v) for k, v in m.items()}
              for blk, m in d["latent"].items()}
    traj = d.get("subject_trajectory")
    if traj is not None:
        traj = {"times": np.asarray(traj["times"]), "per_subject": {
            k: {"mean": np.asarray(v["mean"]), "sd": np.asarray(v["sd"])}
            for k, v in traj["per_subject"].items()}}
    spline = d.get("spline")
    if spline is not None:
        spline = {k: np.asarray(v) for k, v in spline.items()}
    return FitResult(
        hyper=hyper, latent=latent, spline=spline,
        subjects=list(d["subjects"]),
        subject_effects=d["subject_effects"],
        subject_trajectory=traj,
        log_marginal_likelihood=d["log_marginal_likelihood"],
        grid=None,
        kappa_mean=d["kappa_mean"],
        nu_mean=tuple(d["nu_mean"]),
        association_kind=d["association"],
    )


def _require_files(*paths):
    for p in paths:
        if p and not os.path.exists(p):
            raise DataFormatError(f"input file not found: {p}")


def cmd_simulate(args) -> int:
    try:
        d = dataio.read_json(args.scenario) if args.scenario else {}
        scenario = scenario_from_dict(d, seed_override=args.seed)
    except (OSError, ValueError, KeyError, DataFormatError) as e:
        log.error("scenario error: %s", e)
        return EXIT_PARSE
    try:
        data, truth = simulate_joint(scenario)
    except (BisectionFailed, JointLgmError) as e:
        log.error("simulation failed: %s", e)
        return EXIT_SIMULATION
    os.makedirs(args.out, exist_ok=True)
    dataio.write_long_csv(os.path.join(args.out, "long.csv"), data.long_rows)
    dataio.write_surv_csv(os.path.join(args.out, "surv.csv"), data.surv_rows)
    dataio.write_json(os.path.join(args.out, "truth.json"), truth)
    log.info("wrote %d longitudinal and %d survival rows to %s",
             len(data.long_rows), len(data.surv_rows), args.out)
    return 0


def _load_design(args):
    _require_files(args.long, args.surv, args.config)
    config_dict = dataio.read_json(args.config) if args.config else {}
    config = model_config_from_dict(config_dict)
    data = dataio.joint_data_from_csvs(args.long, args.surv)
    return stack(data, config), config_dict


def cmd_fit(args) -> int:
    t0 = time.time()
    try:
        design, config_dict = _load_design(args)
    except (DataFormatError, ValueError, KeyError, JointLgmError) as e:
        log.error("input error: %s", e)
        return EXIT_PARSE
    try:
        fit = inference.fit(design, n_threads=args.threads)
    except (OptimizerFailed, SingularHessian) as e:
        log.error("optimizer failed: %s", e)
        return EXIT_OPTIMIZER
    except (NewtonDiverged, MaxIterations) as e:
        log.error("non-finite posterior: %s", e)
        return EXIT_NONFINITE
    if not np.isfinite(fit.log_marginal_likelihood):
        log.error("non-finite posterior")
        return EXIT_NONFINITE
    elapsed = time.time() - t0
    os.makedirs(args.out, exist_ok=True)
    dataio.write_json(os.path.join(args.out, "fit.json"),
                      fit_result_to_dict(fit, config_dict))
    if fit.spline is not None:
        lines = ["time,mean,lower,upper"]
        for t, m, lo, hi in zip(fit.spline["knots"], fit.spline["mean"],
                                fit.spline["lower"], fit.spline["upper"]):
            lines.append(",".join(dataio.format_float(v) for v in (t, m, lo, hi)))
        dataio.atomic_write_text(os.path.join(args.out, "trajectory.csv"),
                                 "\n".join(lines) + "\n")
    dataio.atomic_write_text(
        os.path.join(args.out, "fit.log"),
        f"elapsed_seconds {elapsed:.3f}\n"
        f"theta_grid_points {fit.grid.n_points}\n"
        f"strategy {fit.grid.strategy}\n")
    log.info("fit finished in %.2f s (%d grid points)", elapsed, fit.grid.n_points)
    return 0


def cmd_predict(args) -> int:
    try:
        _require_files(args.fit, args.surv)
        fit = fit_result_from_dict(dataio.read_json(args.fit))
    except (OSError, ValueError, KeyError, DataFormatError) as e:
        log.error("cannot load fit: %s", e)
        return EXIT_PARSE
    os.makedirs(args.out, exist_ok=True)

    times = None
    if args.surv:
        try:
            surv_rows = dataio.read_surv_csv(args.surv)
        except DataFormatError as e:
            log.error("%s", e)
            return EXIT_PARSE
        km = predict.kaplan_meier([r.s for r in surv_rows], [r.c for r in surv_rows])
        horizon = max(r.s for r in surv_rows)
        times = np.linspace(0.0, horizon, args.n_times)
        dataio.write_curve_csv(os.path.join(args.out, "km.csv"),
                               [km, predict.mean_survival(fit, times)])
    if times is None:
        horizon = 1.0
        if fit.subject_trajectory is not None:
            horizon = float(np.max(fit.subject_trajectory["times"]))
        times = np.linspace(0.0, horizon, args.n_times)

    subjects = [s.strip() for s in args.subjects.split(",") if s.strip()] \
        if args.subjects else []
    for sid in subjects:
        try:
            curve = predict.subject_survival(fit, sid, times)
        except JointLgmError as e:
            log.error("%s", e)
            return EXIT_PARSE
        curves = [curve]
        if fit.subject_trajectory is not None:
            grid = np.asarray(fit.subject_trajectory["times"])
            mean, lo, hi = predict.trajectory(fit, sid, grid)
            curves += [
                predict.SurvivalCurve(grid, mean, "TrajectoryMean", subject_id=sid),
                predict.SurvivalCurve(grid, lo, "TrajectoryLower", subject_id=sid),
                predict.SurvivalCurve(grid, hi, "TrajectoryUpper", subject_id=sid),
            ]
        dataio.write_curve_csv(os.path.join(args.out, f"subject_{sid}.csv"), curves)
    return 0


def cmd_compare(args) -> int:
    try:
        design, config_dict = _load_design(args)
    except (DataFormatError, ValueError, KeyError, JointLgmError) as e:
        log.error("input error: %s", e)
        return EXIT_PARSE
    try:
        fit = inference.fit(design, n_threads=args.threads)
    except (OptimizerFailed, SingularHessian) as e:
        log.error("optimizer failed: %s", e)
        return EXIT_OPTIMIZER
    cfg = mcmc.McmcConfig(iterations=args.iterations, burn_in=args.burn_in,
                          thinning=args.thinning, seed=args.seed or 0)
    try:
        oracle = mcmc.run_mcmc(design, cfg, start_z=fit.grid.z_mode)
    except DimensionTooLarge as e:
        log.error("oracle guard: %s", e)
        return EXIT_ORACLE_GUARD
    os.makedirs(args.out, exist_ok=True)

    # parameter rows: hyperparameters and fixed effects (the model's reported
    # parameter set); latent-state rows are appended as diagnostics
    rows = []
    for nm in design.free_names:
        la = fit.hyper[nm].mean
        mc = oracle.hyper[nm]
        rows.append(("parameter", nm, la, mc["mean"], mc["sd"], mc["mcse"]))
    for blk in ("beta", "gamma"):
        if blk in oracle.latent:
            summ = oracle.latent[blk]
            la_mean = fit.latent[blk]["mean"]
            for i in range(summ.mean.size):
                rows.append(("parameter", f"{blk}[{i}]", float(la_mean[i]),
                             float(summ.mean[i]), float(summ.sd[i]), float(summ.mcse[i])))
    for blk, summ in oracle.latent.items():
        if blk in ("beta", "gamma"):
            continue
        la_mean = fit.latent[blk]["mean"]
        for i in range(summ.mean.size):
            rows.append(("latent", f"{blk}[{i}]", float(la_mean[i]), float(summ.mean[i]),
                         float(summ.sd[i]), float(summ.mcse[i])))
    lines = ["kind,name,laplace_mean,mcmc_mean,mcmc_sd,mcse,abs_diff_over_sd"]
    for kind, nm, la, mc_mean, mc_sd, mcse in rows:
        ratio = abs(la - mc_mean) / mc_sd if mc_sd > 0 else float("inf")
        lines.append(",".join([kind, nm] + [dataio.format_float(v)
                                            for v in (la, mc_mean, mc_sd, mcse, ratio)]))
    dataio.atomic_write_text(os.path.join(args.out, "compare.csv"),
                             "\n".join(lines) + "\n")
    dataio.write_json(os.path.join(args.out, "oracle.json"), oracle.to_dict())
    log.info("compare wrote %d parameter rows", len(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointlgm",
                                description="Joint longitudinal-survival modeling "
                                            "via latent Gaussian approximation")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic joint dataset")
    ps.add_argument("--scenario", help="scenario JSON (defaults to the built-in template)")
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit the joint model")
    pf.add_argument("--long", help="longitudinal CSV (id,time,y[,x...])")
    pf.add_argument("--surv", help="survival CSV (id,time,event[,z...])")
    pf.add_argument("--config", help="model JSON config")
    pf.add_argument("--threads", type=int, default=1)
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_fit)

    pp = sub.add_parser("predict", help="survival curves and trajectories from a fit")
    pp.add_argument("--fit", required=True, help="fit.json from the fit subcommand")
    pp.add_argument("--surv", help="survival CSV for the Kaplan-Meier curve")
    pp.add_argument("--subjects", default="", help="comma-separated subject ids")
    pp.add_argument("--n-times", type=int, default=101)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_predict)

    pc = sub.add_parser("compare", help="fit and MCMC-validate on the same data")
    pc.add_argument("--long")
    pc.add_argument("--surv")
    pc.add_argument("--config")
    pc.add_argument("--iterations", type=int, default=20000)
    pc.add_argument("--burn-in", type=int, default=5000)
    pc.add_argument("--thinning", type=int, default=10)
    pc.add_argument("--threads", type=int, default=1)
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
