"""Command-line entry point: ``fit``, ``placebo``, ``compare`` and ``simulate``.

Exit codes: 0 success, 1 usage, 2 data, 3 convergence, 4 internal. On
failure a JSON object with the error is written to stderr and no primary
output file is left half-written.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, dumps, rows_csv, write_json
from .errors import DataError, NoMissingCellsWarning, RetroPanelError, UsageError, WindowNotAllTreated
from .inference import (
    DEFAULT_N_BOOT,
    PLACEBO_MODES,
    estimate_with_ci,
    placebo_config,
    rmse_comparison,
    run_placebo_suite,
)
from .mc_solver import PenaltyConfig, extract_latent_trends
from .panel_data import load_panel_csv
from .pipeline import PipelineConfig, run_on_dataset
from .synthetic_dgp import CovariateSpec, DgpConfig, generate_panel, write_simulation

logger = logging.getLogger("retropanel")

DEFAULTS = {
    "input": None,
    "output_dir": ".",
    "seed": 0,
    "threads": 1,
    "estimator": "mc",
    "no_covariates": False,
    "no_propensity_weights": False,
    "no_elapsed_weights": False,
    "elapsed_weights": False,
    "n_boot": DEFAULT_N_BOOT,
    "block_length": None,
    "t0": None,
    "ratios": "0.5,0.8,0.97",
    "mode": None,
    "elapsed_scale": None,
    "lambda_grid": None,
    "n_folds": 5,
    "n_runs": 100,
    "estimators": "mc,did,scm",
    # simulate
    "n_at": 30,
    "n_lt": 23,
    "periods": 60,
    "rank": 3,
    "factor_scale": 0.5,
    "loading_scale": 0.5,
    "fe_scale": 1.0,
    "noise": 0.1,
    "ar": 0.0,
    "tau": 0.0,
    "effect_profile": "constant",
    "covariate_beta": None,
    "covariate_shift": 0.0,
}


class ArgumentError(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _shared(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of option values (flags win)")
    p.add_argument("--input", default=S, help="panel CSV (unit, period, outcome, treated[, covariate])")
    p.add_argument("--output-dir", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="worker processes (0 = all cores)")
    p.add_argument("--estimator", choices=("mc", "did", "scm"), default=S)
    p.add_argument("--no-covariates", action="store_const", const=True, default=S)
    p.add_argument("--no-propensity-weights", action="store_const", const=True, default=S)
    p.add_argument("--no-elapsed-weights", action="store_const", const=True, default=S)
    p.add_argument("--n-boot", type=int, default=S)
    p.add_argument("--block-length", type=int, default=S)
    p.add_argument("--t0", type=int, default=S)
    p.add_argument("--ratios", default=S, help="comma-separated placebo T0/T ratios")
    p.add_argument("--mode", choices=("simultaneous", "staggered", "both"), default=S)
    p.add_argument("--elapsed-scale", type=float, default=S)
    p.add_argument("--lambda-grid", default=S, help="comma-separated nuclear-norm penalty grid")
    p.add_argument("--n-folds", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retropanel", description="Retrospective panel effect estimation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    S = argparse.SUPPRESS

    p = sub.add_parser("fit", help="estimate effects for later-treated units")
    _shared(p)

    p = sub.add_parser("placebo", help="placebo tests on the all-treated window")
    _shared(p)
    p.add_argument("--elapsed-weights", action="store_const", const=True, default=S)

    p = sub.add_parser("compare", help="RMSE comparison of estimators on the all-treated window")
    _shared(p)
    p.add_argument("--n-runs", type=int, default=S)
    p.add_argument("--estimators", default=S, help="comma-separated subset of mc,did,scm")
    p.add_argument("--elapsed-weights", action="store_const", const=True, default=S)

    p = sub.add_parser("simulate", help="write a synthetic panel and its ground truth")
    _shared(p)
    p.add_argument("--n-at", type=int, default=S)
    p.add_argument("--n-lt", type=int, default=S)
    p.add_argument("--periods", type=int, default=S)
    p.add_argument("--rank", type=int, default=S)
    p.add_argument("--factor-scale", type=float, default=S)
    p.add_argument("--loading-scale", type=float, default=S)
    p.add_argument("--fe-scale", type=float, default=S)
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--ar", type=float, default=S)
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--effect-profile", choices=("constant", "ramp"), default=S)
    p.add_argument("--covariate-beta", type=float, default=S)
    p.add_argument("--covariate-shift", type=float, default=S)
    return parser


def resolve_options(argv) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    ns = vars(build_parser().parse_args(argv))
    opts = dict(DEFAULTS)
    cfg_path = ns.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path, encoding="utf-8") as fh:
                file_opts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in file_opts.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            opts[key] = val
    opts.update(ns)
    return opts


def _ratios(opts) -> list:
    raw = opts["ratios"]
    try:
        vals = [float(r) for r in raw.split(",")] if isinstance(raw, str) else [float(r) for r in raw]
    except ValueError as exc:
        raise UsageError(f"bad ratio list {raw!r}") from exc
    if not vals or any(not 0 < r < 1 for r in vals):
        raise UsageError("ratios must lie strictly between 0 and 1")
    return vals


def _modes(opts, default) -> tuple:
    mode = opts["mode"] or default
    return PLACEBO_MODES if mode == "both" else (mode,)


def _pipeline_config(opts, placebo: bool = False) -> PipelineConfig:
    grid = opts["lambda_grid"]
    if grid is not None:
        try:
            grid = [float(v) for v in (grid.split(",") if isinstance(grid, str) else grid)]
        except ValueError as exc:
            raise UsageError(f"bad penalty grid {opts['lambda_grid']!r}") from exc
        if not grid or any(v < 0 for v in grid):
            raise UsageError("penalty grid values must be nonnegative")
        grid = np.array(grid)
    penalties = PenaltyConfig(lambda_L_grid=grid, n_folds=int(opts["n_folds"]), cv_seed=int(opts["seed"]))
    if placebo:
        elapsed = bool(opts["elapsed_weights"]) and not opts["no_elapsed_weights"]
        use_cov = False
    else:
        elapsed = not opts["no_elapsed_weights"]
        use_cov = False if opts["no_covariates"] else None
    prop = not opts["no_propensity_weights"]
    if elapsed and not prop:
        raise UsageError("elapsed-time weighting requires propensity weighting; add --no-elapsed-weights")
    return PipelineConfig(
        estimator=opts["estimator"],
        use_covariates=use_cov,
        propensity_weights=prop,
        elapsed_weights=elapsed,
        elapsed_scale=opts["elapsed_scale"],
        penalties=penalties,
    )


def _load(opts):
    if not opts["input"]:
        raise UsageError("--input is required")
    try:
        return load_panel_csv(opts["input"])
    except OSError as exc:
        raise DataError(f"cannot read {opts['input']}: {exc.strerror or exc}") from exc


def _out_dir(opts) -> Path:
    return Path(opts["output_dir"])


def _config_record(opts) -> dict:
    keep = {k: v for k, v in opts.items() if k != "output_dir"}
    keep["input"] = None if not opts["input"] else Path(opts["input"]).name
    return keep


def cmd_fit(opts) -> int:
    ds = _load(opts)
    cfg = _pipeline_config(opts)
    ds.require_retrospective()
    if cfg.use_covariates is None and ds.covariates is None:
        cfg.use_covariates = False
    cfg.validate(ds.covariates is not None)
    n_boot = int(opts["n_boot"])
    if n_boot < 0:
        raise UsageError("--n-boot must be nonnegative")
    out = _out_dir(opts)
    if n_boot > 0:
        est, result = estimate_with_ci(ds, cfg, n_boot, opts["block_length"], int(opts["seed"]), int(opts["threads"]))
        lower, upper, tau_ci, p_value = est.ci_lower, est.ci_upper, est.tau_ci, est.p_value
        n_failed = est.n_failed
        block_length = est.block_length
    else:
        result = run_on_dataset(ds, cfg)
        nan = np.full(ds.shape[1], np.nan)
        lower, upper, tau_ci, p_value, n_failed, block_length = nan, nan, (None, None), None, 0, None

    rows = []
    for t in np.flatnonzero(np.isfinite(result.tau_t)):
        rows.append((ds.period_ids[t], float(result.tau_t[t]), float(lower[t]), float(upper[t])))
    rows.append(("pooled", float(result.tau), tau_ci[0], tau_ci[1]))
    effects_text = rows_csv(["period", "tau", "ci_lower", "ci_upper"], rows)

    record = {
        "estimator": cfg.estimator,
        "config": _config_record(opts),
        "pipeline": {
            "use_covariates": cfg.use_covariates,
            "propensity_weights": cfg.propensity_weights,
            "elapsed_weights": cfg.elapsed_weights,
        },
        "n_units": ds.shape[0],
        "n_periods": ds.shape[1],
        "n_later_treated": ds.n_lt,
        "tau": result.tau,
        "tau_ci": list(tau_ci),
        "p_value": p_value,
        "n_boot": n_boot,
        "n_failed": n_failed,
        "block_length": block_length,
        "penalties": result.penalties.to_dict(),
    }
    extra = {}
    if cfg.estimator == "mc":
        record["outcome_fit"] = result.outcome_fit.summary()
        if result.covariate_fit is not None:
            record["covariate_fit"] = result.covariate_fit.summary()
        if result.treatment_fit is not None:
            record["treatment_fit"] = result.treatment_fit.mc_fit.summary()
        k = min(2, result.outcome_fit.rank)
        trends = extract_latent_trends(result.outcome_fit, k, ds.groups)
        head = ["period"] + [f"factor_{j + 1}" for j in range(k)]
        trows = [(ds.period_ids[t], *[float(v) for v in trends.factors[:, t]]) for t in range(ds.shape[1])]
        extra["latent_trends.csv"] = rows_csv(head, trows)
        record["latent_trend_loadings"] = trends.group_loading_summary
        if result.weights is not None:
            extra["weights.json"] = dumps(result.weights.diagnostics(ds.treatment == 1))
    elif cfg.estimator == "did":
        record["did"] = result.baseline_fit.to_dict()
    else:
        record["scm"] = {ds.unit_ids[i]: f.to_dict() for i, f in result.baseline_fit.items()}

    atomic_write_text(out / "effects.csv", effects_text)
    for name, text in extra.items():
        atomic_write_text(out / name, text)
    atomic_write_text(out / "fit.json", dumps(record))
    return 0


def _post_window(ds):
    cols = ds.post_window()
    if cols.size < 3:
        raise WindowNotAllTreated(
            f"post-treatment window has {cols.size} all-treated periods; at least 3 are needed"
        )
    return ds.select_periods(cols)


def cmd_placebo(opts) -> int:
    ds = _load(opts)
    post = _post_window(ds)
    cfg = placebo_config(_pipeline_config(opts, placebo=True))
    treated = np.flatnonzero(ds.is_lt) if ds.n_lt and ds.n_at else None
    ratios = _ratios(opts)
    if opts["t0"] is not None:
        t0 = int(opts["t0"])
        if not 0 < t0 < post.shape[1]:
            raise UsageError(f"--t0 must lie in (0, {post.shape[1]})")
        ratios = [t0 / post.shape[1]]
    table = run_placebo_suite(
        post,
        ratios,
        _modes(opts, "both"),
        cfg,
        int(opts["n_boot"]),
        int(opts["seed"]),
        opts["block_length"],
        int(opts["threads"]),
        treated,
    )
    header = list(table.columns)
    out = _out_dir(opts)
    atomic_write_text(out / "placebo.csv", rows_csv(header, table.itertuples(index=False)))
    write_json(out / "placebo.json", {"config": _config_record(opts), "rows": table.to_dict("records")})
    return 0


def cmd_compare(opts) -> int:
    ds = _load(opts)
    post = _post_window(ds)
    estimators = [e.strip() for e in str(opts["estimators"]).split(",") if e.strip()]
    if opts["estimator"] != "mc" and opts["estimators"] == DEFAULTS["estimators"]:
        estimators = [opts["estimator"]]
    cfg = placebo_config(_pipeline_config(opts, placebo=True))
    tables = []
    for mode in _modes(opts, "simultaneous"):
        tables.append(
            rmse_comparison(
                post, estimators, _ratios(opts), int(opts["n_runs"]), int(opts["seed"]), mode,
                int(opts["threads"]), cfg,
            )
        )
    header = ["estimator", "ratio", "mode", "metric", "value", "stderr"]
    rows = []
    for table in tables:
        for r in table.itertuples(index=False):
            rows.append((r.estimator, float(r.ratio), r.mode, r.metric, float(r.value), float(r.stderr)))
    atomic_write_text(_out_dir(opts) / "compare.csv", rows_csv(header, rows))
    return 0


def cmd_simulate(opts) -> int:
    cov = None
    if opts["covariate_beta"] is not None:
        cov = CovariateSpec(beta=float(opts["covariate_beta"]), shift=float(opts["covariate_shift"]))
    cfg = DgpConfig(
        n_at=int(opts["n_at"]),
        n_lt=int(opts["n_lt"]),
        T=int(opts["periods"]),
        t0=int(opts["t0"]) if opts["t0"] is not None else 24,
        rank=int(opts["rank"]),
        factor_scale=float(opts["factor_scale"]),
        loading_scale=float(opts["loading_scale"]),
        fe_scale=float(opts["fe_scale"]),
        noise_sigma=float(opts["noise"]),
        ar_coef=float(opts["ar"]),
        tau_true=float(opts["tau"]),
        effect_profile=opts["effect_profile"],
        covariate=cov,
        seed=int(opts["seed"]),
    )
    ds, truth = generate_panel(cfg)
    paths = write_simulation(ds, truth, _out_dir(opts))
    logger.info("wrote %s", paths)
    return 0


COMMANDS = {"fit": cmd_fit, "placebo": cmd_placebo, "compare": cmd_compare, "simulate": cmd_simulate}


def _setup_logging() -> None:
    level = os.environ.get("RETROPANEL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    _setup_logging()
    warnings.simplefilter("ignore", NoMissingCellsWarning)
    try:
        opts = resolve_options(sys.argv[1:] if argv is None else argv)
        return COMMANDS[opts["command"]](opts)
    except RetroPanelError as exc:
        return _fail(exc, exc.exit_code)
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        return _fail(exc, 4)


if __name__ == "__main__":
    sys.exit(main())
