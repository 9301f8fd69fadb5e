"""Command-line front end wiring the library into reproducible pipelines.

Every invocation validates its config, runs one stage, writes its outputs
plus a run manifest (config hash, seed, input digests, versions), and
renders companion figures next to the delimited reports unless
``--no-figures`` is given. Errors leave a machine-readable JSON object on
stderr; exit codes: 1 config, 2 data, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__, evalzone, report, tensorad
from .datagrid import (
    AreaTable,
    Bathymetry,
    GridConfig,
    QCConfig,
    grid_records,
    load_bathymetry,
    load_grid,
    read_records_csv,
    save_grid,
    validate_record,
    write_records_csv,
)
from .evalzone import (
    baseline_idw,
    evaluate_external_field,
    extract_zones,
    metrics,
    omz_stats,
    write_metrics_csv,
    write_metrics_json,
)
from .oceangraph import GraphConfig, GridBundle, build_snapshot
from .oxynet import (
    FeatureContext,
    ModelConfig,
    NormStats,
    hyper_zone,
    load_checkpoint,
    save_checkpoint,
    whole_graph,
)
from .synthlab import SynthConfig, generate
from .tensorad import Tensor
from .training import (
    TrainConfig,
    TrainingData,
    crossfold,
    reconstruct_grid,
    save_fold_assignments,
    train,
    write_history_csv,
)

DEFAULT_SEED = 1920  # recorded in the manifest whenever --seed is omitted

ENV_CONFIG_VAR = "OXYRECON_CONFIG"

CONFIG_SECTIONS = {
    "graph": GraphConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "gridding": GridConfig,
    "paths": None,  # free-form string map
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# -- config handling ---------------------------------------------------------


def load_config_file(path):
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return obj


def build_section(cls, config, section, overrides=None):
    """Instantiate a config dataclass from its section, rejecting unknown
    keys; explicit CLI overrides win over file values."""
    raw = dict(config.get(section, {}))
    known = {f.name for f in dc_fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    for key in ("depth_levels", "dims"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [{section}] config: {e}") from e


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config_hash(config):
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()


def write_manifest(out_dir, command, config, seed, seed_was_default, inputs, workers):
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "seed_was_default": seed_was_default,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "workers": workers,
        "versions": {
            "oxyrecon": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- shared loaders ------------------------------------------------------------


BUNDLE_FILES = {
    "do": "obs_DO",
    "temperature": "obs_temperature",
    "salinity": "obs_salinity",
    "nitrate": "obs_nitrate",
    "phosphate": "obs_phosphate",
    "silicate": "obs_silicate",
    "chlorophyll": "obs_chlorophyll",
}


def load_bundle(data_dir) -> GridBundle:
    data_dir = Path(data_dir)
    do_prefix = data_dir / BUNDLE_FILES["do"]
    if not do_prefix.with_suffix(".json").exists():
        raise DataError(f"missing DO grid at {do_prefix}.bin/.json")
    kwargs = {"do": load_grid(do_prefix)}
    for name, stem in BUNDLE_FILES.items():
        if name == "do":
            continue
        prefix = data_dir / stem
        if prefix.with_suffix(".json").exists():
            kwargs[name] = load_grid(prefix)
    bathy_prefix = data_dir / "bathymetry"
    if bathy_prefix.with_suffix(".json").exists():
        kwargs["bathymetry"] = load_bathymetry(bathy_prefix)
    return GridBundle(**kwargs)


def load_area_table(path):
    return AreaTable.from_json(path) if path else AreaTable.default()


# -- commands -------------------------------------------------------------------


def cmd_ingest(args, config):
    records = read_records_csv(args.records)
    accepted_flags = frozenset(int(x) for x in args.accept_flags.split(","))
    qc = QCConfig(accepted_flags=accepted_flags)
    accepted, reasons = [], {}
    for r in records:
        reason = validate_record(r, qc)
        if reason is None:
            accepted.append(r)
        else:
            reasons[reason] = reasons.get(reason, 0) + 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records_csv(out_dir / "accepted.csv", accepted)
    rep = {"n_records": len(records), "n_accepted": len(accepted),
           "n_rejected": len(records) - len(accepted), "reject_reasons": reasons}
    (out_dir / "ingest_report.json").write_text(
        json.dumps(rep, indent=2, sort_keys=True) + "\n"
    )
    print(f"accepted {rep['n_accepted']} / {rep['n_records']} records")
    return [args.records]


def cmd_grid(args, config):
    records = read_records_csv(args.records)
    grid_config = build_section(GridConfig, config, "gridding")
    bathy = load_bathymetry(args.bathymetry) if args.bathymetry else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_var = {}
    for r in records:
        by_var.setdefault(r.variable, []).append(r)
    summary = {}
    for var, recs in sorted(by_var.items()):
        grid, s = grid_records(recs, grid_config, bathy)
        save_grid(out_dir / f"obs_{var}", grid)
        summary[var] = {
            "n_records": s.n_records, "n_gridded": s.n_gridded,
            "n_out_of_bounds": s.n_out_of_bounds, "n_on_land": s.n_on_land,
            "n_cells_filled": s.n_cells_filled,
        }
    (out_dir / "grid_report.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"gridded {len(by_var)} variable(s) into {out_dir}")
    return [args.records]


def cmd_graph(args, config, workers):
    bundle = load_bundle(args.data)
    graph_config = build_section(GraphConfig, config, "graph")
    t = args.year_index
    if not (0 <= t < bundle.do.dims[3]):
        raise DataError(f"year index {t} outside grid time range")
    snap = build_snapshot(bundle, graph_config, t, workers=workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snap.export_csv(out_dir / f"edges_t{t}.csv")
    print(f"snapshot t={t}: {snap.n_nodes} nodes, {snap.n_edges} edges")
    return []


def cmd_synth(args, config, seed):
    synth_config = build_section(SynthConfig, config, "synth", {"seed": seed})
    data = generate(synth_config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_grid(out_dir / "truth_DO", data.do_truth)
    for var, grid in sorted(data.observed.items()):
        save_grid(out_dir / f"obs_{var}", grid)
    (out_dir / "synth_config.json").write_text(
        json.dumps({k: getattr(synth_config, k) for k in synth_config.__dataclass_fields__},
                   indent=2, sort_keys=True, default=list) + "\n"
    )
    frac = 1.0 - data.masks["DO"].mean()
    print(f"synthetic set in {out_dir} (DO missing fraction {frac:.3f})")
    return []


def _train_setup(args, config, seed):
    bundle = load_bundle(args.data)
    model_config = build_section(ModelConfig, config, "model")
    train_config = build_section(TrainConfig, config, "train", {"seed": seed})
    graph_config = build_section(
        GraphConfig, config, "graph", {"half_window": model_config.half_window}
    )
    area_table = load_area_table(args.areas)
    return bundle, model_config, train_config, graph_config, area_table


def cmd_train(args, config, seed, workers, figures):
    bundle, model_config, train_config, graph_config, area_table = _train_setup(
        args, config, seed
    )
    result = train(bundle, model_config, train_config, graph_config=graph_config,
                   area_table=area_table, workers=workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint", result.params, result.model_config,
                    result.norm)
    write_history_csv(out_dir / "history.csv", result.history)
    if figures and result.history:
        report.plot_history(result.history, out_dir / "history.png")
    if result.diverged:
        raise DivergenceError(
            f"training diverged after epoch {result.epochs_run}; "
            f"last finite checkpoint written to {out_dir}"
        )
    print(f"trained {result.epochs_run} epochs (best epoch {result.best_epoch})")
    return []


def cmd_reconstruct(args, config, workers):
    bundle = load_bundle(args.data)
    params, model_config, norm = load_checkpoint(args.checkpoint)
    graph_config = build_section(
        GraphConfig, config, "graph", {"half_window": model_config.half_window}
    )
    data = TrainingData(bundle, model_config, graph_config,
                        load_area_table(args.areas), norm=norm, workers=workers)
    grid = reconstruct_grid(data, params)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_grid(out_dir / "reconstructed_DO", grid)
    print(f"reconstructed field written to {out_dir}")
    return []


def cmd_evaluate(args, config, figures):
    field = load_grid(args.field)
    obs = load_grid(args.obs)
    try:
        pooled, groups = evaluate_external_field(
            field, obs, group_by=args.group_by,
            area_table=load_area_table(args.areas) if args.group_by == "region" else None,
        )
    except evalzone.DimsMismatchError as e:
        raise DataError(str(e)) from e
    except evalzone.NoDataError as e:
        raise DataError(str(e)) from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [pooled] + groups
    write_metrics_csv(out_dir / "metrics.csv", reports)
    write_metrics_json(out_dir / "metrics.json", reports)
    if figures and groups:
        key = next(iter(groups[0].group))
        report.plot_metrics_groups(groups, key, out_dir / "metrics.png")
    print(f"pooled: MAPE {pooled.mape:.3f}% RMSE {pooled.rmse:.3f} "
          f"MAE {pooled.mae:.3f} R2 {pooled.r2:.4f} (n={pooled.n})")
    return []


def cmd_zones(args, config, workers, figures):
    bundle = load_bundle(args.data)
    params, model_config, norm = load_checkpoint(args.checkpoint)
    graph_config = build_section(
        GraphConfig, config, "graph", {"half_window": model_config.half_window}
    )
    t = args.year_index
    snap = build_snapshot(bundle, graph_config, t, workers=workers)
    featctx = FeatureContext(bundle, snap, norm, model_config)
    if not model_config.uses_graph or model_config.no_zoning:
        raise DataError("checkpoint has no zoning hypernetwork to extract zones from")
    za, zb = hyper_zone(Tensor(featctx.xi), params, model_config.message_dim)
    assignment = extract_zones(za.data, zb.data, k=args.zones)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment.export_csv(out_dir / f"zones_t{t}.csv", snap.nodes)
    if figures:
        report.plot_zone_map(snap.nodes, assignment.zone_ids,
                             out_dir / f"zones_t{t}.png")
    n_zones = len(np.unique(assignment.zone_ids))
    print(f"assigned {snap.n_nodes} nodes to {n_zones} zone(s)")
    return []


def cmd_omz(args, config, figures):
    field = load_grid(args.field)
    bathy = load_bathymetry(args.bathymetry) if args.bathymetry else None
    try:
        rho, omz_mask = omz_stats(field, bathymetry=bathy, threshold=args.threshold)
    except evalzone.IncompleteFieldError as e:
        raise DataError(str(e)) from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    years = [field.year_origin + t for t in range(field.dims[3])]
    with open(out_dir / "omz.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["year", "rho_omz"])
        for y, r in zip(years, rho):
            w.writerow([y, repr(float(r))])
    from .datagrid import Grid4D

    L, G, _, T = field.dims
    mask_grid = Grid4D(
        omz_mask.astype(np.float64)[:, :, None, :],
        np.ones((L, G, 1, T), dtype=np.uint8),
        "DO", (0.0,), field.year_origin,
    )
    save_grid(out_dir / "omz_mask", mask_grid)
    if figures:
        report.plot_omz_series(years, rho, out_dir / "omz.png")
    print(f"rho_omz by year: {', '.join(f'{y}={r:.4f}' for y, r in zip(years, rho))}")
    return []


def cmd_crossfold(args, config, seed, workers, figures):
    bundle, model_config, train_config, graph_config, area_table = _train_setup(
        args, config, seed
    )
    result = crossfold(bundle, model_config, train_config, graph_config=graph_config,
                       area_table=area_table, workers=workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = result.to_table_rows()
    cols = ["row", "mape", "mape_std", "r2", "r2_std", "rmse", "rmse_std",
            "mae", "mae_std"]
    with open(out_dir / "crossfold.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row.get("row")] +
                       [repr(float(row[c])) if c in row else "" for c in cols[1:]])
    save_fold_assignments(out_dir / "folds.json", result)
    if figures:
        report.plot_crossfold(rows, out_dir / "crossfold.png")
    print(f"crossfold average MAPE {result.mean['mape']:.3f} "
          f"± {result.std['mape']:.3f}")
    return []


def cmd_idw(args, config):
    obs = load_grid(args.obs)
    bathy = load_bathymetry(args.bathymetry) if args.bathymetry else None
    try:
        grid = baseline_idw(obs, power=args.power, radius_km=args.radius_km,
                            bathymetry=bathy)
    except evalzone.NoSupportError as e:
        raise DataError(str(e)) from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_grid(out_dir / "idw_DO", grid)
    print(f"IDW field written to {out_dir}")
    return []


# -- argument parsing -----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oxyrecon",
        description="Sparse 4D ocean dissolved-oxygen reconstruction pipelines.",
    )
    parser.add_argument("--config", help=f"JSON config (or ${ENV_CONFIG_VAR})")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"global seed (default {DEFAULT_SEED}, recorded in manifest)")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering next to delimited outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate records, split accepted/rejected")
    p.add_argument("--records", required=True)
    p.add_argument("--accept-flags", default="0")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid", help="grid accepted records to 4D lattices")
    p.add_argument("--records", required=True)
    p.add_argument("--bathymetry")
    p.add_argument("--out", required=True)

    p = sub.add_parser("graph", help="build and export one year snapshot")
    p.add_argument("--data", required=True)
    p.add_argument("--year-index", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate the synthetic fixture set")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--areas")
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="fill a complete field from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--areas")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="metrics of a field against observations")
    p.add_argument("--field", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--group-by", choices=["year", "region", "depth", "horizontal"])
    p.add_argument("--areas")
    p.add_argument("--out", required=True)

    p = sub.add_parser("zones", help="extract hypernetwork zoning for one year")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--year-index", type=int, required=True)
    p.add_argument("--zones", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("omz", help="OMZ proportion per year of a complete field")
    p.add_argument("--field", required=True)
    p.add_argument("--bathymetry")
    p.add_argument("--threshold", type=float, default=30.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("crossfold", help="k-fold cross testing with report table")
    p.add_argument("--data", required=True)
    p.add_argument("--areas")
    p.add_argument("--out", required=True)

    p = sub.add_parser("idw", help="inverse-distance-weighted baseline field")
    p.add_argument("--obs", required=True)
    p.add_argument("--bathymetry")
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--radius-km", type=float, default=2500.0)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config_file(args.config)
        seed = args.seed if args.seed is not None else DEFAULT_SEED
        seed_was_default = args.seed is None
        workers = max(1, args.workers)
        figures = not args.no_figures

        inputs = []
        if args.command == "ingest":
            inputs = cmd_ingest(args, config)
        elif args.command == "grid":
            inputs = cmd_grid(args, config)
        elif args.command == "graph":
            inputs = cmd_graph(args, config, workers)
        elif args.command == "synth":
            inputs = cmd_synth(args, config, seed)
        elif args.command == "train":
            inputs = cmd_train(args, config, seed, workers, figures)
        elif args.command == "reconstruct":
            inputs = cmd_reconstruct(args, config, workers)
        elif args.command == "evaluate":
            inputs = cmd_evaluate(args, config, figures)
        elif args.command == "zones":
            inputs = cmd_zones(args, config, workers, figures)
        elif args.command == "omz":
            inputs = cmd_omz(args, config, figures)
        elif args.command == "crossfold":
            inputs = cmd_crossfold(args, config, seed, workers, figures)
        elif args.command == "idw":
            inputs = cmd_idw(args, config)

        if hasattr(args, "out"):
            write_manifest(args.out, args.command, config, seed, seed_was_default,
                           inputs, workers)
        if seed_was_default and args.command in ("synth", "train", "crossfold"):
            print(f"seed not given; using default {seed} (recorded in manifest)")
        return 0
    except ConfigError as e:
        _err("config", e)
        return 1
    except DivergenceError as e:
        _err("divergence", e)
        return 3
    except (DataError, FileNotFoundError, ValueError) as e:
        _err("data", e)
        return 2


def _err(kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__,
                      "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
