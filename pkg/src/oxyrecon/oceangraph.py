"""Per-year reconstruction graphs over the 4D lattice.

Nodes are ocean cells at one year. Each node connects to spatial proximity
neighbors (longitude wraps, latitude and depth clamp) and to directed
"information hub" in-edges from high-completeness cells in an expanded
radius. Edge features are attribute differences between the endpoints.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datagrid import (
    Bathymetry,
    Grid4D,
    compute_derived,
    lat_center,
    lon_center,
    to_spherical,
)

EARTH_RADIUS_KM = 6371.0

EDGE_PROXIMITY = 0
EDGE_HUB = 1
EDGE_SELF_LOOP = 2
EDGE_KIND_NAMES = {EDGE_PROXIMITY: "proximity", EDGE_HUB: "hub", EDGE_SELF_LOOP: "self_loop"}

N_EDGE_FEATURES = 5  # dist_km, |ddepth|, ddensity, dpressure, dC_obs


class EmptyGraphError(ValueError):
    """No ocean cell exists, so there is nothing to build a graph on."""


class InvalidWindowError(ValueError):
    pass


class NodeKey(NamedTuple):
    i: int
    j: int
    d: int
    t: int


@dataclass(frozen=True)
class GraphConfig:
    """Neighborhood geometry. ``delta`` and ``depth_radius`` are in grid
    cells (one cell is 1 degree at production resolution)."""

    delta: int = 1
    depth_radius: int = 1
    completeness_threshold: float = 0.5
    hub_radius_factor: int = 3
    max_hubs_per_node: int = 8
    half_window: int = 2

    def __post_init__(self):
        if self.delta <= 0 or self.depth_radius <= 0 or self.half_window <= 0:
            raise ValueError("radii and half_window must be positive")
        if not (0.0 <= self.completeness_threshold <= 1.0):
            raise ValueError("completeness_threshold must be in [0, 1]")
        if self.hub_radius_factor < 1 or self.max_hubs_per_node < 0:
            raise ValueError("bad hub parameters")


def completeness(mask_window, half_window):
    """Observation completeness of a 2T+1 mask window centered on the
    reconstruction year: observed steps excluding the center, over 2T."""
    if half_window <= 0:
        raise InvalidWindowError("half_window must be >= 1")
    w = np.asarray(mask_window, dtype=np.float64)
    if w.shape[-1] != 2 * half_window + 1:
        raise InvalidWindowError(f"window must have {2 * half_window + 1} steps")
    return (w.sum(axis=-1) - w[..., half_window]) / (2.0 * half_window)


def completeness_field(grid: Grid4D, half_window):
    """C_obs for every cell and year; out-of-range window steps count as
    unobserved. Returns a float64 (L, G, D, T) array."""
    if half_window <= 0:
        raise InvalidWindowError("half_window must be >= 1")
    mask = grid.mask.astype(np.float64)
    T = mask.shape[3]
    out = np.zeros_like(mask)
    for off in range(-half_window, half_window + 1):
        if off == 0:
            continue
        lo, hi = max(0, -off), min(T, T - off)
        out[..., lo:hi] += mask[..., lo + off : hi + off]
    return out / (2.0 * half_window)


def proximity_neighbors(node: NodeKey, ocean_mask, config: GraphConfig):
    """Ocean cells within the proximity box, excluding the node itself.

    Longitude wraps at the antimeridian; latitude and depth clamp.
    """
    L, G, D = ocean_mask.shape
    i0, j0, d0, t = node
    out = set()
    for dj in range(max(0, j0 - config.delta), min(G, j0 + config.delta + 1)):
        for dd in range(max(0, d0 - config.depth_radius), min(D, d0 + config.depth_radius + 1)):
            for off in range(-config.delta, config.delta + 1):
                di = (i0 + off) % L
                if (di, dj, dd) == (i0, j0, d0):
                    continue
                if ocean_mask[di, dj, dd]:
                    out.add(NodeKey(di, dj, dd, t))
    return out


def information_hubs(node: NodeKey, cobs_t, ocean_mask, config: GraphConfig):
    """High-completeness cells in the expanded radius, capped at
    ``max_hubs_per_node`` (ties broken by ascending node key)."""
    L, G, D = ocean_mask.shape
    i0, j0, d0, t = node
    prox = proximity_neighbors(node, ocean_mask, config)
    r_h = config.delta * config.hub_radius_factor
    r_v = config.depth_radius * config.hub_radius_factor
    candidates = []
    for dj in range(max(0, j0 - r_h), min(G, j0 + r_h + 1)):
        for dd in range(max(0, d0 - r_v), min(D, d0 + r_v + 1)):
            seen_i = set()
            for off in range(-r_h, r_h + 1):
                di = (i0 + off) % L
                if di in seen_i:
                    continue
                seen_i.add(di)
                key = NodeKey(di, dj, dd, t)
                if (di, dj, dd) == (i0, j0, d0) or key in prox:
                    continue
                if not ocean_mask[di, dj, dd]:
                    continue
                c = cobs_t[di, dj, dd]
                if c >= config.completeness_threshold:
                    candidates.append((-c, (di, dj, dd), key))
    candidates.sort()
    return {key for _, _, key in candidates[: config.max_hubs_per_node]}


@dataclass
class EdgeFeatureContext:
    """Per-year fields needed to featurize an edge."""

    lon_cells: int
    lat_cells: int
    depth_levels: tuple
    density_t: np.ndarray   # (L, G, D)
    pressure_t: np.ndarray  # (L, G, D)
    cobs_t: np.ndarray      # (L, G, D)


def _horizontal_distance_km(lon_m, lat_m, lon_n, lat_n):
    pm = np.array(to_spherical(lon_m, lat_m))
    pn = np.array(to_spherical(lon_n, lat_n))
    chord = np.linalg.norm(pm - pn)
    return EARTH_RADIUS_KM * 2.0 * np.arcsin(min(chord / 2.0, 1.0))


def edge_features(node_m: NodeKey, node_n: NodeKey, ctx: EdgeFeatureContext):
    """Feature vector for the edge m -> n; signed components are value(n)
    minus value(m), so they negate when the endpoints swap."""
    im, jm, dm, _ = node_m
    in_, jn, dn, _ = node_n
    if (im, jm, dm) == (in_, jn, dn):
        return np.zeros(N_EDGE_FEATURES)
    dist = _horizontal_distance_km(
        lon_center(im, ctx.lon_cells), lat_center(jm, ctx.lat_cells),
        lon_center(in_, ctx.lon_cells), lat_center(jn, ctx.lat_cells),
    )
    ddepth = abs(ctx.depth_levels[dn] - ctx.depth_levels[dm])
    ddens = ctx.density_t[in_, jn, dn] - ctx.density_t[im, jm, dm]
    dpress = ctx.pressure_t[in_, jn, dn] - ctx.pressure_t[im, jm, dm]
    dcobs = ctx.cobs_t[in_, jn, dn] - ctx.cobs_t[im, jm, dm]
    return np.array([dist, ddepth, ddens, dpress, dcobs])


@dataclass
class GraphSnapshot:
    """Graph for one reconstruction year: lexicographically ordered nodes,
    directed edge arrays, and per-edge features."""

    t: int
    nodes: np.ndarray            # (N, 3) int: i, j, d
    edge_src: np.ndarray         # (E,) int node indices
    edge_dst: np.ndarray
    edge_kind: np.ndarray        # (E,) uint8
    edge_features: np.ndarray    # (E, 5) float64
    node_index: dict = field(repr=False, default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_edges(self):
        return len(self.edge_src)

    def in_degrees(self):
        return np.bincount(self.edge_dst, minlength=self.n_nodes)

    def export_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(
                ["src_i", "src_j", "src_d", "dst_i", "dst_j", "dst_d", "kind",
                 "f1", "f2", "f3", "f4", "f5"]
            )
            for e in range(self.n_edges):
                si, sj, sd = self.nodes[self.edge_src[e]]
                di, dj, dd = self.nodes[self.edge_dst[e]]
                w.writerow(
                    [si, sj, sd, di, dj, dd, EDGE_KIND_NAMES[int(self.edge_kind[e])]]
                    + [repr(float(x)) for x in self.edge_features[e]]
                )


@dataclass
class GridBundle:
    """All grids a snapshot (and the model) draws from, plus bathymetry."""

    do: Grid4D
    temperature: Grid4D | None = None
    salinity: Grid4D | None = None
    nitrate: Grid4D | None = None
    phosphate: Grid4D | None = None
    silicate: Grid4D | None = None
    chlorophyll: Grid4D | None = None
    bathymetry: Bathymetry | None = None
    _derived: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.bathymetry is None:
            L, G = self.do.dims[0], self.do.dims[1]
            self.bathymetry = Bathymetry.uniform(L, G, self.do.depth_levels[-1])

    def env_grid(self, name) -> Grid4D | None:
        return getattr(self, name)

    def derived(self):
        """(pressure, density) arrays, computed once."""
        if self._derived is None:
            dims = self.do.dims
            temp = self.temperature or Grid4D.empty(dims, "temperature",
                                                    self.do.depth_levels, self.do.year_origin)
            sal = self.salinity or Grid4D.empty(dims, "salinity",
                                                self.do.depth_levels, self.do.year_origin)
            self._derived = compute_derived(temp, sal, self.do.depth_levels)
        return self._derived


def build_snapshot(bundle: GridBundle, config: GraphConfig, t, workers=1) -> GraphSnapshot:
    """Assemble the year-t graph: every node gets a self-loop, symmetric
    proximity in-edges, and directed hub in-edges. Node order is
    lexicographic, so repeated builds are byte-identical."""
    grid = bundle.do
    L, G, D, T = grid.dims
    if not (0 <= t < T):
        raise ValueError(f"t={t} outside grid time range")
    ocean = bundle.bathymetry.ocean_mask(grid.depth_levels)
    node_arr = np.argwhere(ocean)  # C order == lexicographic (i, j, d)
    if len(node_arr) == 0:
        raise EmptyGraphError("grid has no ocean cells")
    node_index = {(int(i), int(j), int(d)): k for k, (i, j, d) in enumerate(node_arr)}

    pressure, density = bundle.derived()
    cobs = completeness_field(grid, config.half_window)
    ctx = EdgeFeatureContext(
        lon_cells=L,
        lat_cells=G,
        depth_levels=grid.depth_levels,
        density_t=density[:, :, :, t],
        pressure_t=pressure[:, :, :, t],
        cobs_t=cobs[:, :, :, t],
    )

    def edges_for(k):
        i, j, d = (int(x) for x in node_arr[k])
        n = NodeKey(i, j, d, t)
        src, kind = [k], [EDGE_SELF_LOOP]
        for m in sorted(proximity_neighbors(n, ocean, config)):
            src.append(node_index[(m.i, m.j, m.d)])
            kind.append(EDGE_PROXIMITY)
        for m in sorted(information_hubs(n, ctx.cobs_t, ocean, config)):
            src.append(node_index[(m.i, m.j, m.d)])
            kind.append(EDGE_HUB)
        return src, kind

    indices = range(len(node_arr))
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_node = list(pool.map(edges_for, indices))
    else:
        per_node = [edges_for(k) for k in indices]

    src = np.concatenate([np.asarray(p[0], dtype=np.int64) for p in per_node])
    dst = np.concatenate(
        [np.full(len(p[0]), k, dtype=np.int64) for k, p in enumerate(per_node)]
    )
    kind = np.concatenate([np.asarray(p[1], dtype=np.uint8) for p in per_node])
    feats = _bulk_edge_features(node_arr, src, dst, ctx)
    return GraphSnapshot(
        t=t, nodes=node_arr.astype(np.int64), edge_src=src, edge_dst=dst,
        edge_kind=kind, edge_features=feats, node_index=node_index,
    )


def _bulk_edge_features(node_arr, src, dst, ctx: EdgeFeatureContext):
    """Vectorized edge_features over whole edge arrays (same math)."""
    lon = np.array([lon_center(i, ctx.lon_cells) for i in range(ctx.lon_cells)])
    lat = np.array([lat_center(j, ctx.lat_cells) for j in range(ctx.lat_cells)])
    xyz = np.stack(
        to_spherical(lon[node_arr[:, 0]], lat[node_arr[:, 1]]), axis=1
    )
    levels = np.asarray(ctx.depth_levels, dtype=np.float64)
    per_node = {
        "depth": levels[node_arr[:, 2]],
        "dens": ctx.density_t[node_arr[:, 0], node_arr[:, 1], node_arr[:, 2]],
        "press": ctx.pressure_t[node_arr[:, 0], node_arr[:, 1], node_arr[:, 2]],
        "cobs": ctx.cobs_t[node_arr[:, 0], node_arr[:, 1], node_arr[:, 2]],
    }
    chord = np.linalg.norm(xyz[src] - xyz[dst], axis=1)
    dist = EARTH_RADIUS_KM * 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    feats = np.column_stack([
        dist,
        np.abs(per_node["depth"][dst] - per_node["depth"][src]),
        per_node["dens"][dst] - per_node["dens"][src],
        per_node["press"][dst] - per_node["press"][src],
        per_node["cobs"][dst] - per_node["cobs"][src],
    ])
    feats[src == dst] = 0.0
    return feats
