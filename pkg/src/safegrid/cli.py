"""Command-line harness wiring the full toolkit.

Subcommands: generate, calibrate, detect, certify, simulate, audit-fdr.
Exit codes: 0 success, 2 configuration error, 3 runtime error.  File schemas
are documented in FORMATS.md; set SAFEGRID_LOG=DEBUG for verbose logging.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from safegrid import aggregation, anomaly, conformal, dependence, diagnostics, formats
from safegrid import pipeline as pl
from safegrid import sim
from safegrid.het import HetPredictor
from safegrid.topology import grid_topology

log = logging.getLogger("safegrid")


class ConfigError(Exception):
    """User-facing configuration problem (exit code 2)."""


def _load_config(path):
    sim_cfg, pipe_cfg = {}, {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        doc = formats.read_json(path)
        unknown = set(doc) - {"sim", "pipeline"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sim_cfg = doc.get("sim", {})
        pipe_cfg = doc.get("pipeline", {})
    return sim_cfg, pipe_cfg


def _build(cls, overrides, **extra):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**overrides, **extra}
    if "anomaly_kinds" in merged and isinstance(merged["anomaly_kinds"], list):
        merged["anomaly_kinds"] = tuple(merged["anomaly_kinds"])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _require_dir(path, create=False):
    if create:
        if not os.path.isdir(path):
            parent = os.path.dirname(os.path.abspath(path)) or "."
            if not os.path.isdir(parent):
                raise ConfigError(f"output directory not creatable: {path}")
            os.makedirs(path, exist_ok=True)
    elif not os.path.isdir(path):
        raise ConfigError(f"directory not found: {path}")
    return path


def _dataset_meta(data_dir):
    meta_path = os.path.join(data_dir, "dataset.json")
    if not os.path.exists(meta_path):
        raise ConfigError(f"dataset metadata missing: {meta_path}")
    return formats.read_json(meta_path)


def _load_dataset(data_dir):
    meta = _dataset_meta(data_dir)
    panel = formats.read_long_csv(os.path.join(data_dir, "observations.csv"))
    masks = formats.read_mask_csv(os.path.join(data_dir, "masks.csv"))
    sim_config = _build(sim.SimConfig, meta["sim_config"])
    return sim.Dataset(
        panel=panel, masks=masks,
        train=slice(*meta["train"]), calibration=slice(*meta["calibration"]),
        test=slice(*meta["test"]), gap_steps=meta["gap_steps"], config=sim_config,
    )


# --------------------------------------------------------------- subcommands

def cmd_generate(args):
    sim_over, _ = _load_config(args.config)
    if args.seed is not None:
        sim_over["seed"] = args.seed
    config = _build(sim.SimConfig, sim_over)
    out = _require_dir(args.out, create=True)
    dataset = sim.generate_dataset(config, n_steps=args.steps,
                                   gap_steps=args.gap)
    formats.write_panel_csv(os.path.join(out, "observations.csv"), dataset.panel)
    formats.write_mask_csv(os.path.join(out, "masks.csv"), dataset.masks)
    formats.write_json(os.path.join(out, "dataset.json"), {
        "sim_config": dataclasses.asdict(config),
        "steps": args.steps,
        "gap_steps": dataset.gap_steps,
        "train": [dataset.train.start, dataset.train.stop],
        "calibration": [dataset.calibration.start, dataset.calibration.stop],
        "test": [dataset.test.start, dataset.test.stop],
    })
    print(f"wrote {dataset.panel.shape[0]} steps x {dataset.panel.shape[1]} cells "
          f"to {out}")
    return 0


def _predictor_to_json(predictor):
    return {
        "mean_weights": predictor.mean_weights.tolist(),
        "logsig_weights": predictor.logsig_weights.tolist(),
        "reg_lambda": predictor.reg_lambda,
        "sigma_floor": predictor.sigma_floor,
    }


def _predictor_from_json(doc):
    return HetPredictor(
        mean_weights=np.asarray(doc["mean_weights"]),
        logsig_weights=np.asarray(doc["logsig_weights"]),
        reg_lambda=doc["reg_lambda"], sigma_floor=doc["sigma_floor"])


def cmd_calibrate(args):
    _, pipe_over = _load_config(args.config)
    cfg = _build(pl.PipelineConfig, pipe_over)
    dataset = _load_dataset(_require_dir(args.data))
    out = _require_dir(args.out, create=True)
    seed = args.seed if args.seed is not None else 0

    predictor = pl._fit_forecaster(cfg, dataset)
    ledger, _, _ = pl._fit_ledger(cfg, dataset, predictor, seed)

    cal = dataset.panel[dataset.calibration]
    mu_cal, sigma_cal = pl._predict_panel(predictor, cal, cfg.window)
    y_cal = cal[cfg.window:]
    pit, ks = diagnostics.pit_values(mu_cal.ravel(), sigma_cal.ravel(), y_cal.ravel())
    levels = np.arange(0.1, 1.0, 0.1)
    coverages, cal_err = diagnostics.reliability_curve(
        mu_cal.ravel(), sigma_cal.ravel(), y_cal.ravel(), levels)

    test = dataset.panel[dataset.test]
    mu_te, sigma_te = pl._predict_panel(predictor, test, cfg.window)
    y_te = test[cfg.window:]
    bundle = conformal.ForecastBundle(
        mu=mu_te, sigma=sigma_te, clusters=ledger.clusters.labels)
    intervals = conformal.build_intervals(bundle, ledger)
    data_range = float(y_te.max() - y_te.min())
    report = conformal.evaluate_coverage(intervals, y_te, data_range)

    formats.atomic_write_text(os.path.join(out, "ledger.json"), ledger.to_json())
    formats.write_json(os.path.join(out, "predictor.json"),
                       _predictor_to_json(predictor))
    formats.write_intervals_csv(os.path.join(out, "intervals.csv"),
                                intervals.lower, intervals.upper)
    formats.write_pit_csv(os.path.join(out, "pit.csv"), pit)
    formats.write_reliability_csv(os.path.join(out, "reliability.csv"),
                                  levels, coverages)
    formats.write_json(os.path.join(out, "coverage_report.json"), {
        "coverage": report.coverage, "riw": report.riw,
        "efficiency": report.efficiency, "pit_ks": ks,
        "reliability_error": cal_err,
    })
    print(f"coverage={report.coverage:.4f} riw={report.riw:.4f} "
          f"efficiency={report.efficiency:.4f} (target {1 - cfg.alpha:.0%})")
    print(f"pit_ks={ks:.4f} reliability_error={cal_err:.4f}")
    return 0


def cmd_detect(args):
    _, pipe_over = _load_config(args.config)
    cfg = _build(pl.PipelineConfig, pipe_over)
    dataset = _load_dataset(_require_dir(args.data))
    model_dir = _require_dir(args.model)
    out = _require_dir(args.out, create=True)
    ledger_path = os.path.join(model_dir, "ledger.json")
    if not os.path.exists(ledger_path):
        raise ConfigError(f"ledger missing: {ledger_path}")
    with open(ledger_path) as fh:
        ledger = conformal.CalibrationLedger.from_json(fh.read())
    predictor = _predictor_from_json(
        formats.read_json(os.path.join(model_dir, "predictor.json")))

    train = dataset.panel[dataset.train]
    mu_tr, sigma_tr = pl._predict_panel(predictor, train, cfg.window)
    z_train = anomaly.normalize_residuals(train[cfg.window:], mu_tr, sigma_tr)
    scorer = anomaly.fit_scorer(z_train.ravel(), kind=cfg.scorer_kind)

    cal = dataset.panel[dataset.calibration]
    mu_cal, sigma_cal = pl._predict_panel(predictor, cal, cfg.window)
    z_cal = anomaly.normalize_residuals(cal[cfg.window:], mu_cal, sigma_cal)
    trimmed = anomaly.trim_calibration(scorer.score(z_cal.ravel()),
                                       cfg.trim_fraction)

    test = dataset.panel[dataset.test]
    if test.shape[0] <= cfg.window:
        raise ConfigError("test split is empty (or shorter than the window)")
    mu_te, sigma_te = pl._predict_panel(predictor, test, cfg.window)
    z_te = anomaly.normalize_residuals(test[cfg.window:], mu_te, sigma_te)
    scores = scorer.score(z_te)
    pvals = anomaly.conformal_pvalue(trimmed, scores)

    reject_by = np.zeros_like(pvals, dtype=bool)
    reject_bh = np.zeros_like(pvals, dtype=bool)
    for t in range(pvals.shape[0]):
        reject_by[t] = anomaly.by_procedure(pvals[t], cfg.fdr_alpha).reject
        reject_bh[t] = anomaly.bh_procedure(pvals[t], cfg.fdr_alpha).reject

    formats.write_pvalues_csv(os.path.join(out, "pvalues.csv"), pvals)
    formats.write_rejections_csv(os.path.join(out, "rejections.csv"), reject_by)

    report = {
        "alpha": cfg.fdr_alpha,
        "trim_fraction": cfg.trim_fraction,
        "c_m": anomaly.harmonic_number(pvals.shape[1]),
        "m": int(pvals.shape[1]),
        "rejections_by": int(reject_by.sum()),
        "rejections_bh": int(reject_bh.sum()),
    }
    truth = dataset.masks[dataset.test][cfg.window:]
    fdr_by, pow_by = anomaly.empirical_fdr(reject_by, truth)
    fdr_bh, pow_bh = anomaly.empirical_fdr(reject_bh, truth)
    # residual scoring trails a persistent anomaly for up to one forecast
    # window; the tolerant figures dilate the truth mask by that horizon
    tolerant = truth.copy()
    for k in range(1, cfg.window + 1):
        tolerant[k:] |= truth[:-k]
    fdr_by_tol, _ = anomaly.empirical_fdr(reject_by, tolerant)
    fdr_bh_tol, _ = anomaly.empirical_fdr(reject_bh, tolerant)
    report.update({"fdr_by": fdr_by, "power_by": pow_by,
                   "fdr_bh": fdr_bh, "power_bh": pow_bh,
                   "fdr_by_tolerant": fdr_by_tol,
                   "fdr_bh_tolerant": fdr_bh_tol})
    formats.write_json(os.path.join(out, "fdr_report.json"), report)
    print(f"BY: {report['rejections_by']} rejections, FDR={fdr_by:.4f} "
          f"(aftermath-tolerant {fdr_by_tol:.4f}), power={pow_by:.4f}")
    print(f"BH: {report['rejections_bh']} rejections, FDR={fdr_bh:.4f} "
          f"(aftermath-tolerant {fdr_bh_tol:.4f}), power={pow_bh:.4f}")
    return 0


def cmd_certify(args):
    sim_over, pipe_over = _load_config(args.config)
    if args.seed is not None:
        sim_over["seed"] = args.seed
    sim_config = _build(sim.SimConfig, sim_over)
    cfg = _build(pl.PipelineConfig, pipe_over)
    out = _require_dir(args.out, create=True)
    seed = args.seed if args.seed is not None else 0

    components, _ = pl.fit_pipeline(sim_config, cfg, seed=seed)
    cert = pl.certify_pipeline(components, rollout_steps=args.rollout_steps,
                               max_rounds=args.max_rounds, seed=seed)
    formats.atomic_write_text(os.path.join(out, "certificate.json"), cert.to_json())
    print(f"epsilon_model={cert.epsilon_model:.6f} epsilon_star="
          f"{cert.epsilon_threshold:.6f}")
    print(f"l_bar={cert.l_bar:.4f} j_bar={cert.j_bar:.4f} "
          f"d_c_bar={cert.d_c_bar:.6f} verdict={cert.verdict}")
    return 0


def cmd_simulate(args):
    sim_over, pipe_over = _load_config(args.config)
    if args.seed is not None:
        sim_over["seed"] = args.seed
    sim_config = _build(sim.SimConfig, sim_over)
    cfg = _build(pl.PipelineConfig, pipe_over)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    out = _require_dir(args.out, create=True)
    base_seed = args.seed if args.seed is not None else 0
    use_filter = args.filter == "on"

    components, _ = pl.fit_pipeline(sim_config, cfg, seed=base_seed)
    rows = []
    for s in range(args.seeds):
        traj, metrics = pl.run_closed_loop(
            components, policy_name=args.policy, use_filter=use_filter,
            n_steps=args.steps, seed=base_seed + 1000 + s)
        formats.write_trajectory_csv(
            os.path.join(out, f"trajectory_seed{s}.csv"), traj)
        formats.write_aggregates_csv(
            os.path.join(out, f"aggregates_seed{s}.csv"),
            traj.mu_int, traj.sigma_int, traj.p_int, traj.flags)
        rows.append(metrics)
        log.info("seed %d: %s", s, metrics)

    def ci(key):
        vals = np.array([r[key] for r in rows], dtype=float)
        half = 1.96 * vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
        return {"mean": float(vals.mean()), "ci95": float(half)}

    summary = {key: ci(key) for key in
               ("mean_reward", "violations_per_episode", "safety_pct",
                "rho_lyapunov", "mean_d_c")}
    summary["seeds"] = args.seeds
    summary["filter"] = args.filter
    summary["policy"] = args.policy
    formats.write_json(os.path.join(out, "metrics.json"), summary)
    print(f"reward={summary['mean_reward']['mean']:.3f}"
          f"±{summary['mean_reward']['ci95']:.3f} "
          f"viol/ep={summary['violations_per_episode']['mean']:.3f} "
          f"safety%={summary['safety_pct']['mean']:.1f} "
          f"rho_lyap={summary['rho_lyapunov']['mean']:.3f}")
    return 0


def cmd_audit_fdr(args):
    data_dir = _require_dir(args.data)
    meta = _dataset_meta(data_dir)
    sim_config = _build(sim.SimConfig, meta["sim_config"])
    pv_path = args.pvalues
    if not os.path.exists(pv_path):
        raise ConfigError(f"p-value panel missing: {pv_path}")
    panel = formats.read_pvalues_csv(pv_path)
    if panel.shape[0] < max(args.time_blocks):
        raise ConfigError(
            f"panel too small for time blocks {args.time_blocks}")
    truth = None
    if args.masks:
        truth = formats.read_mask_csv(args.masks)
        truth = truth[-panel.shape[0]:]
    cps = sim_config.cells_per_side
    topo = grid_topology(sim_config.grid_rows * cps, sim_config.grid_cols * cps,
                         spacing_km=sim_config.tile_km / cps)
    out = _require_dir(args.out, create=True)
    report = dependence.block_bootstrap_verify(
        panel, topo, truth=truth, time_blocks=tuple(args.time_blocks),
        space_hops=tuple(args.space_hops), n_replicates=args.replicates,
        alpha=args.alpha, seed=args.seed if args.seed is not None else 0)
    formats.atomic_write_text(os.path.join(out, "dependence.json"),
                              report.to_json())
    for e in report.entries:
        print(f"blocks {e.time_block}x{e.space_hops}: rho_block={e.rho_block:.3f} "
              f"FDR mean={e.fdr_mean:.4f} q95={e.fdr_q95:.4f}")
    return 0


# --------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="safegrid",
        description="Calibrated intervals, FDR-controlled detection, and "
                    "Lyapunov safety certification on a synthetic traffic grid.")
    parser.add_argument("--config", help="JSON config with 'sim'/'pipeline' sections")
    parser.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1600)
    p.add_argument("--gap", type=int, default=24)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="fit forecaster + conformal ledger")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="conformal p-values and FDR rejections")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="calibrate output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("certify", help="fit the pipeline and emit a certificate")
    p.add_argument("--out", required=True)
    p.add_argument("--rollout-steps", type=int, default=pl.EPISODE_STEPS)
    p.add_argument("--max-rounds", type=int, default=3)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("simulate", help="closed-loop control with safety metrics")
    p.add_argument("--out", required=True)
    p.add_argument("--filter", choices=("on", "off"), default="on")
    p.add_argument("--policy", choices=("greedy", "random"), default="greedy")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int, default=pl.EPISODE_STEPS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit-fdr", help="block-bootstrap dependence report")
    p.add_argument("--data", required=True, help="dataset directory (grid shape)")
    p.add_argument("--pvalues", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--time-blocks", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--space-hops", type=int, nargs="+", default=[1, 2, 4])
    p.set_defaults(func=cmd_audit_fdr)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("SAFEGRID_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure contract
        log.exception("runtime error")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
