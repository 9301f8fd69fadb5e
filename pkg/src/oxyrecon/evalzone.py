"""Evaluation: error metrics, OMZ statistics, gridded-field comparison,
zoning extraction from the hypernetwork, and classical baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .datagrid import NA_SENTINEL, Grid4D, lat_center, lon_center, to_spherical
from .oceangraph import EARTH_RADIUS_KM


class NoDataError(ValueError):
    pass


class DimsMismatchError(ValueError):
    pass


class IncompleteFieldError(ValueError):
    pass


class NoSupportError(ValueError):
    pass


@dataclass
class MetricsReport:
    mape: float          # percent
    rmse: float          # umol/kg
    mae: float           # umol/kg
    r2: float
    n: int
    n_zero_obs: int = 0  # entries skipped by MAPE because the observation is 0
    group: dict = field(default_factory=dict)

    def to_json(self):
        return {"mape": self.mape, "rmse": self.rmse, "mae": self.mae,
                "r2": self.r2, "n": self.n, "n_zero_obs": self.n_zero_obs,
                **self.group}


def metrics(x_obs, x_hat, omega=None, group=None) -> MetricsReport:
    """The four evaluation metrics over observed entries.

    MAPE skips (and counts) entries whose observed value is exactly zero;
    R^2 is computed against the observed mean.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if omega is not None:
        keep = np.asarray(omega).ravel() == 1
        x_obs, x_hat = x_obs[keep], x_hat[keep]
    n = len(x_obs)
    if n == 0:
        raise NoDataError("metrics need at least one observed entry")
    err = x_obs - x_hat
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    nonzero = x_obs != 0.0
    n_zero = int(n - nonzero.sum())
    if nonzero.any():
        mape = float(np.mean(np.abs(err[nonzero] / x_obs[nonzero])) * 100.0)
    else:
        mape = float("nan")
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((x_obs - x_obs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return MetricsReport(mape=mape, rmse=rmse, mae=mae, r2=r2, n=n,
                         n_zero_obs=n_zero, group=dict(group or {}))


def evaluate_external_field(field_grid: Grid4D, obs_grid: Grid4D,
                            group_by=None, area_table=None, depth_bins=None):
    """Metrics of a complete field against observed cells, optionally grouped.

    ``group_by`` may be 'year', 'region' (needs ``area_table``), 'depth'
    (bins by ``depth_bins`` upper bounds, defaulting to each level), or
    'horizontal'. Returns (pooled MetricsReport, list of group reports).
    """
    if field_grid.dims != obs_grid.dims:
        raise DimsMismatchError(
            f"field dims {field_grid.dims} != obs dims {obs_grid.dims}"
        )
    obs_idx = np.argwhere(obs_grid.mask == 1)
    if len(obs_idx) == 0:
        raise NoDataError("no observed cells to evaluate against")
    ii, jj, dd, tt = obs_idx.T
    x_obs = obs_grid.values[ii, jj, dd, tt]
    x_hat = field_grid.values[ii, jj, dd, tt]
    pooled = metrics(x_obs, x_hat)

    groups = []
    if group_by is None:
        return pooled, groups
    L, G = obs_grid.dims[0], obs_grid.dims[1]
    if group_by == "year":
        keys = tt + obs_grid.year_origin
        label = "year"
    elif group_by == "depth":
        levels = np.asarray(obs_grid.depth_levels)
        if depth_bins is None:
            keys = levels[dd].astype(int)
        else:
            keys = np.asarray(depth_bins)[np.searchsorted(depth_bins, levels[dd])]
        label = "depth_m"
    elif group_by == "region":
        if area_table is None:
            raise ValueError("region grouping needs an area table")
        keys = np.array(
            [area_table.assign(lon_center(i, L), lat_center(j, G)) for i, j in zip(ii, jj)]
        )
        label = "area_id"
    elif group_by == "horizontal":
        keys = ii * G + jj
        label = "cell"
    else:
        raise ValueError(f"unknown group_by {group_by!r}")
    for key in np.unique(keys):
        sel = keys == key
        groups.append(metrics(x_obs[sel], x_hat[sel], group={label: int(key)}))
    return pooled, groups


def omz_stats(grid: Grid4D, bathymetry=None, threshold=30.0):
    """Cosine-latitude-weighted OMZ area proportion per year.

    A horizontal cell is OMZ when its minimum DO over (ocean) depth is at or
    below the threshold. The grid must be complete over ocean cells. Returns
    (rho array (T,), omz mask (L, G, T)).
    """
    L, G, D, T = grid.dims
    if bathymetry is not None:
        ocean = bathymetry.ocean_mask(grid.depth_levels)
    else:
        ocean = np.ones((L, G, D), dtype=bool)
    col_ocean = ocean.any(axis=2)
    if np.any((grid.mask[ocean, :] == 0)):
        raise IncompleteFieldError("reconstructed field has NA ocean cells")

    vals = np.where(ocean[:, :, :, None], grid.values, np.inf)
    do_min = vals.min(axis=2)  # (L, G, T)
    omz = (do_min <= threshold) & col_ocean[:, :, None]
    weights = np.cos(np.deg2rad([lat_center(j, G) for j in range(G)]))
    w2d = np.broadcast_to(weights[None, :], (L, G))
    total = float((w2d * col_ocean).sum())
    rho = (w2d[:, :, None] * omz).sum(axis=(0, 1)) / total
    return rho, omz


# -- zoning extraction -----------------------------------------------------


@dataclass
class ZoneAssignment:
    zone_ids: np.ndarray    # per node
    centroids: np.ndarray   # (K, feature_dim)

    def export_csv(self, path, nodes):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["i", "j", "d", "zone_id"])
            for (i, j, d), z in zip(nodes, self.zone_ids):
                w.writerow([int(i), int(j), int(d), int(z)])


def _kmeans_deterministic(points, k, n_iter=100):
    """Lloyd's iterations with value-based (hence permutation-invariant)
    initialization: points are put in lexicographic order and the initial
    centers are quantile-spaced rows of that ordering."""
    order = np.lexsort(points.T[::-1])
    sorted_pts = points[order]
    n = len(points)
    picks = (np.arange(k) * n) // k
    centers = sorted_pts[picks].copy()
    assign_sorted = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        d2 = ((sorted_pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign_sorted):
            assign_sorted = new_assign
            break
        assign_sorted = new_assign
        for c in range(k):
            members = sorted_pts[assign_sorted == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = assign_sorted
    return assignment, centers


def extract_zones(z_alpha, z_beta, k=10) -> ZoneAssignment:
    """Cluster nodes by their flattened zoning parameters.

    Degenerate input (all nodes identical) collapses to a single zone 0.
    """
    n = z_alpha.shape[0]
    flat = np.concatenate([z_alpha.reshape(n, -1), z_beta.reshape(n, -1)], axis=1)
    if np.allclose(flat, flat[0], atol=1e-12):
        return ZoneAssignment(zone_ids=np.zeros(n, dtype=np.int64),
                              centroids=flat[:1].copy())
    k = min(k, n)
    assign, centers = _kmeans_deterministic(flat, k)
    return ZoneAssignment(zone_ids=assign, centroids=centers)


# -- classical baselines -----------------------------------------------------


def baseline_idw(obs_grid: Grid4D, power=2.0, radius_km=2500.0, bathymetry=None):
    """Inverse-distance-weighted interpolation per depth level and year.

    Observed target cells are copied exactly; cells with no observation in
    radius fall back to the level/year mean. A level/year with zero
    observations raises NoSupportError.
    """
    L, G, D, T = obs_grid.dims
    lons = np.array([lon_center(i, L) for i in range(L)])
    lats = np.array([lat_center(j, G) for j in range(G)])
    lon_g, lat_g = np.meshgrid(lons, lats, indexing="ij")
    xyz = np.stack(to_spherical(lon_g.ravel(), lat_g.ravel()), axis=1)  # (L*G, 3)

    ocean = None
    if bathymetry is not None:
        ocean = bathymetry.ocean_mask(obs_grid.depth_levels)

    out_vals = np.full(obs_grid.dims, NA_SENTINEL)
    out_mask = np.zeros(obs_grid.dims, dtype=np.uint8)
    for d in range(D):
        for t in range(T):
            obs_sel = obs_grid.mask[:, :, d, t].ravel() == 1
            cell_sel = np.ones(L * G, dtype=bool) if ocean is None else ocean[:, :, d].ravel()
            if not obs_sel.any():
                if cell_sel.any():
                    raise NoSupportError(f"no observations at level {d}, year index {t}")
                continue
            obs_vals = obs_grid.values[:, :, d, t].ravel()[obs_sel]
            level_mean = obs_vals.mean()
            chord = np.linalg.norm(xyz[cell_sel][:, None, :] - xyz[obs_sel][None, :, :], axis=2)
            dist = EARTH_RADIUS_KM * 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
            filled = np.full(cell_sel.sum(), level_mean)
            exact = dist.min(axis=1) == 0.0
            filled[exact] = obs_vals[np.argmin(dist[exact], axis=1)]
            in_radius = (dist <= radius_km) & ~exact[:, None]
            weights = np.where(in_radius, 1.0 / np.maximum(dist, 1e-9) ** power, 0.0)
            wsum = weights.sum(axis=1)
            has = (wsum > 0) & ~exact
            filled[has] = (weights[has] @ obs_vals) / wsum[has]
            plane_vals = np.full(L * G, NA_SENTINEL)
            plane_mask = np.zeros(L * G, dtype=np.uint8)
            plane_vals[cell_sel] = filled
            plane_mask[cell_sel] = 1
            out_vals[:, :, d, t] = plane_vals.reshape(L, G)
            out_mask[:, :, d, t] = plane_mask.reshape(L, G)
    return Grid4D(out_vals, out_mask, obs_grid.variable,
                  obs_grid.depth_levels, obs_grid.year_origin)


def baseline_mean_predictor(obs_grid: Grid4D):
    """Constant field at the mean of all observations."""
    if obs_grid.mask.sum() == 0:
        raise NoSupportError("no observations")
    mean = float(obs_grid.values[obs_grid.mask == 1].mean())
    vals = np.full(obs_grid.dims, mean)
    return Grid4D(vals, np.ones(obs_grid.dims, dtype=np.uint8),
                  obs_grid.variable, obs_grid.depth_levels, obs_grid.year_origin)


BASELINE_PRESETS = ("mlp_all", "mlp_time", "mlp_env", "vanilla_gnn", "bilstm_only")


def baseline_model_config(preset, base_config):
    """Translate a deep-baseline preset into a model configuration built
    from the same components (degenerate architectures)."""
    from dataclasses import replace

    if preset not in BASELINE_PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return replace(base_config, architecture=preset)


# -- report serialization ----------------------------------------------------


def write_metrics_csv(path, reports):
    keys = sorted({k for r in reports for k in r.group})
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(keys + ["n", "mape", "rmse", "mae", "r2", "n_zero_obs"])
        for r in reports:
            w.writerow(
                [r.group.get(k, "") for k in keys]
                + [r.n, repr(r.mape), repr(r.rmse), repr(r.mae), repr(r.r2), r.n_zero_obs]
            )


def write_metrics_json(path, reports):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_json() for r in reports], f, indent=2, sort_keys=True)
        f.write("\n")
