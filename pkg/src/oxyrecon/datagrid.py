"""Observation ingestion, quality control, and 4D gridding.

Point records from the five source databases are flag-harmonized, range
checked, and averaged onto a (lon, lat, depth, year) lattice. Also hosts
the simplified equation of state, ocean-area assignment, and the binary
grid file format.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SOURCE_DBS = ("WOD", "CCHDO", "Argo", "GLODAP", "IDP")
VARIABLES = (
    "DO",
    "temperature",
    "salinity",
    "nitrate",
    "phosphate",
    "silicate",
    "chlorophyll",
)

# unified flag classes
FLAG_GOOD = 0
FLAG_UNKNOWN = 1
FLAG_QUESTIONABLE = 2
FLAG_BAD = 3
FLAG_NOT_SAMPLED = 4

# per-database raw flag -> unified class; unlisted flags fall to questionable
_FLAG_TABLE = {
    "WOD": {"0": 0, "1": 2, **{str(k): 3 for k in range(2, 10)}},
    "CCHDO": {"2": 0, "0": 1, "1": 1, "5": 1, "8": 1, "3": 2, "6": 2, "7": 2, "4": 3, "9": 4},
    "Argo": {"1": 0, "2": 2, "3": 2, "4": 3, "0": 4, "5": 4},
    "GLODAP": {"2": 0, "0": 2, "9": 4},
    "IDP": {
        "1": 0, "0": 1, "5": 1,
        "2": 2, "3": 2, "6": 2, "7": 2, "8": 2, "A": 2, "B": 2, "Q": 2,
        "4": 3, "9": 4,
    },
}

# accepted numeric ranges per variable (unit as stored in records)
VARIABLE_RANGES = {
    "DO": (0.0, 523.0),
    "temperature": (-3.0, 35.0),
    "salinity": (0.0, 44.0),
    "nitrate": (0.0, 500.0),
    "phosphate": (0.0, 5.0),
    "silicate": (0.0, 250.0),
    "chlorophyll": (0.0, 50.0),
}

# value written into Grid4D cells with mask 0
NA_SENTINEL = -9.99e33

# standard 33 depth levels, 0-5500 m
DEFAULT_DEPTH_LEVELS = (
    0, 10, 20, 30, 50, 75, 100, 125, 150, 200, 250, 300, 400, 500, 600, 700,
    800, 900, 1000, 1100, 1200, 1300, 1400, 1500, 1750, 2000, 2500, 3000,
    3500, 4000, 4500, 5000, 5500,
)

# simplified linear equation of state
EOS_RHO0 = 1027.0      # kg/m^3 at the reference point
EOS_ALPHA = 2.0e-4     # 1/degC thermal expansion
EOS_BETA = 7.6e-4      # haline contraction (per salinity unit)
EOS_T0 = 10.0          # degC reference temperature
EOS_S0 = 35.0          # reference salinity


def harmonize_flag(source_db: str, raw_flag: str) -> int:
    """Map a database-specific quality flag to the unified 0-4 class.

    Total: unrecognized flags (and unrecognized databases) are treated as
    questionable rather than rejected outright.
    """
    table = _FLAG_TABLE.get(source_db)
    if table is None:
        return FLAG_QUESTIONABLE
    return table.get(str(raw_flag).strip(), FLAG_QUESTIONABLE)


@dataclass(frozen=True)
class Record:
    source_db: str
    lon: float
    lat: float
    depth: float
    year: int
    variable: str
    value: float
    raw_flag: str


@dataclass(frozen=True)
class QCConfig:
    """Acceptance policy: flag classes to keep and per-area range overrides.

    ``range_overrides`` maps area_id -> {variable: (lo, hi)} for marginal-sea
    exceptions; it ships empty.
    """

    accepted_flags: frozenset = frozenset({FLAG_GOOD})
    range_overrides: dict = field(default_factory=dict)


def validate_record(record: Record, qc: QCConfig | None = None, area_id: int | None = None):
    """Return None if the record is accepted, else the reject reason
    ('bad_flag' | 'out_of_range' | 'bad_coordinates')."""
    qc = qc or QCConfig()
    if not (-180.0 <= record.lon < 180.0 and -90.0 <= record.lat <= 90.0 and record.depth >= 0.0):
        return "bad_coordinates"
    if harmonize_flag(record.source_db, record.raw_flag) not in qc.accepted_flags:
        return "bad_flag"
    lo, hi = VARIABLE_RANGES[record.variable]
    if area_id is not None and area_id in qc.range_overrides:
        lo, hi = qc.range_overrides[area_id].get(record.variable, (lo, hi))
    if not (lo <= record.value <= hi):
        return "out_of_range"
    return None


# -- grid geometry -------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    lon_cells: int = 360
    lat_cells: int = 180
    depth_levels: tuple = DEFAULT_DEPTH_LEVELS
    year_start: int = 1920
    year_end: int = 2023

    @property
    def dims(self):
        return (
            self.lon_cells,
            self.lat_cells,
            len(self.depth_levels),
            self.year_end - self.year_start + 1,
        )


def lon_index(lon, n_cells):
    """Cell index for a longitude in [-180, 180)."""
    width = 360.0 / n_cells
    return int(np.floor((lon + 180.0) / width)) % n_cells


def lat_index(lat, n_cells):
    """Cell index for a latitude in [-90, 90]; the pole maps to the last cell."""
    width = 180.0 / n_cells
    return min(int(np.floor((lat + 90.0) / width)), n_cells - 1)


def lon_center(i, n_cells):
    return -180.0 + (i + 0.5) * 360.0 / n_cells


def lat_center(j, n_cells):
    return -90.0 + (j + 0.5) * 180.0 / n_cells


def depth_level_index(depth, levels):
    """Nearest depth level, ties resolved to the shallower level."""
    levels = np.asarray(levels, dtype=np.float64)
    dist = np.abs(levels - depth)
    return int(np.argmin(dist))  # argmin takes the first (shallower) on ties


@dataclass
class Grid4D:
    """Dense 4D field with a binary observation mask.

    ``values`` is float64 (L, G, D, T); cells with ``mask == 0`` hold the NA
    sentinel.
    """

    values: np.ndarray
    mask: np.ndarray
    variable: str
    depth_levels: tuple
    year_origin: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask dims differ")
        levels = tuple(float(x) for x in self.depth_levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("depth_levels must be strictly increasing")
        self.depth_levels = levels

    @property
    def dims(self):
        return self.values.shape

    @classmethod
    def empty(cls, dims, variable, depth_levels, year_origin):
        return cls(
            values=np.full(dims, NA_SENTINEL, dtype=np.float64),
            mask=np.zeros(dims, dtype=np.uint8),
            variable=variable,
            depth_levels=depth_levels,
            year_origin=year_origin,
        )


class Bathymetry:
    """Seafloor elevation per horizontal cell (negative below sea level).

    A (lon, lat, depth) cell is ocean iff depth <= -elevation.
    """

    def __init__(self, elevation):
        self.elevation = np.asarray(elevation, dtype=np.float64)

    @classmethod
    def uniform(cls, lon_cells, lat_cells, seafloor_depth=6000.0):
        return cls(np.full((lon_cells, lat_cells), -abs(seafloor_depth)))

    def is_ocean(self, i, j, depth):
        return depth <= -self.elevation[i, j]

    def ocean_mask(self, depth_levels):
        """(L, G, D) boolean array of ocean cells."""
        levels = np.asarray(depth_levels, dtype=np.float64)
        return levels[None, None, :] <= -self.elevation[:, :, None]


@dataclass
class GridSummary:
    n_records: int = 0
    n_gridded: int = 0
    n_out_of_bounds: int = 0
    n_on_land: int = 0
    n_cells_filled: int = 0


def grid_records(records, config: GridConfig, bathymetry: Bathymetry | None = None):
    """Average accepted records onto the 4D lattice.

    Cell value = arithmetic mean of the records that fall in the cell
    (nearest depth level, shallow tie-break); mask = 1 iff at least one
    record landed there. Land cells are forced to mask 0. Accumulation is
    in (cell, value)-sorted order so the result is bitwise independent of
    record ordering. Returns (Grid4D, GridSummary).
    """
    L, G, D, T = config.dims
    summary = GridSummary(n_records=len(records))
    ocean = bathymetry.ocean_mask(config.depth_levels) if bathymetry is not None else None

    keys, vals = [], []
    variable = records[0].variable if records else "DO"
    for r in records:
        if not (config.year_start <= r.year <= config.year_end):
            summary.n_out_of_bounds += 1
            continue
        if r.depth > config.depth_levels[-1]:
            summary.n_out_of_bounds += 1
            continue
        i = lon_index(r.lon, L)
        j = lat_index(r.lat, G)
        d = depth_level_index(r.depth, config.depth_levels)
        t = r.year - config.year_start
        if ocean is not None and not ocean[i, j, d]:
            summary.n_on_land += 1
            continue
        keys.append(((i * G + j) * D + d) * T + t)
        vals.append(r.value)
        summary.n_gridded += 1

    grid = Grid4D.empty((L, G, D, T), variable, config.depth_levels, config.year_start)
    if keys:
        keys = np.asarray(keys, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((vals, keys))
        keys, vals = keys[order], vals[order]
        cell_ids, starts = np.unique(keys, return_index=True)
        sums = np.add.reduceat(vals, starts)
        counts = np.diff(np.append(starts, len(vals)))
        flat_vals = grid.values.reshape(-1)
        flat_mask = grid.mask.reshape(-1)
        flat_vals[cell_ids] = sums / counts
        flat_mask[cell_ids] = 1
        summary.n_cells_filled = len(cell_ids)
    return grid, summary


# -- derived physical fields ---------------------------------------------


def compute_derived(temperature_grid: Grid4D, salinity_grid: Grid4D, depth_levels):
    """Pressure (dbar ~ depth in m) and density from the linear EOS.

    Missing temperature/salinity cells fall back to the EOS reference values.
    Returns two dense float64 arrays with the grids' dims.
    """
    if temperature_grid.dims != salinity_grid.dims:
        raise ValueError("temperature and salinity grids must share dims")
    dims = temperature_grid.dims
    levels = np.asarray(depth_levels, dtype=np.float64)
    pressure = np.broadcast_to(levels[None, None, :, None], dims).copy()

    temp = np.where(temperature_grid.mask == 1, temperature_grid.values, EOS_T0)
    sal = np.where(salinity_grid.mask == 1, salinity_grid.values, EOS_S0)
    density = EOS_RHO0 * (1.0 - EOS_ALPHA * (temp - EOS_T0) + EOS_BETA * (sal - EOS_S0))
    return pressure, density


# -- ocean areas ----------------------------------------------------------


@dataclass(frozen=True)
class Area:
    id: int
    name: str
    rects: tuple  # of (lon0, lat0, lon1, lat1), half-open upper bounds


class AreaTable:
    """Ordered list of areas; a point belongs to the first area whose
    rectangle list contains it. The final area must cover the globe."""

    def __init__(self, areas):
        self.areas = list(areas)
        if not self.areas:
            raise ValueError("empty area table")
        last = self.areas[-1]
        covers = any(
            r[0] <= -180 and r[1] <= -90 and r[2] >= 180 and r[3] > 90 for r in last.rects
        )
        if not covers:
            raise ValueError("final area must be a global catch-all")

    def __len__(self):
        return len(self.areas)

    def assign(self, lon, lat):
        for area in self.areas:
            for lon0, lat0, lon1, lat1 in area.rects:
                if lon0 <= lon < lon1 and lat0 <= lat < lat1:
                    return area.id
        raise AssertionError("catch-all area failed")  # unreachable by construction

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        areas = [
            Area(id=int(a["id"]), name=a["name"], rects=tuple(tuple(r) for r in a["rects"]))
            for a in obj
        ]
        return cls(areas)

    @classmethod
    def default(cls):
        data = resources.files("oxyrecon.data").joinpath("wod18_areas.json").read_text()
        return cls.from_json(json.loads(data))


def assign_area(lon, lat, area_table: AreaTable) -> int:
    return area_table.assign(lon, lat)


def to_spherical(lon, lat):
    """Unit-sphere coordinates (x, y, z) from degrees."""
    lam = np.deg2rad(lon)
    phi = np.deg2rad(lat)
    return np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)


# -- record CSV -----------------------------------------------------------

RECORD_CSV_HEADER = ["source_db", "lon", "lat", "depth", "year", "variable", "value", "flag"]


def read_records_csv(path):
    """Read the record CSV format; raises ValueError on schema problems."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RECORD_CSV_HEADER:
            raise ValueError(f"bad record CSV header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_CSV_HEADER):
                raise ValueError(f"line {lineno}: expected {len(RECORD_CSV_HEADER)} fields")
            db, lon, lat, depth, year, variable, value, flag = row
            if variable not in VARIABLES:
                raise ValueError(f"line {lineno}: unknown variable {variable!r}")
            if value.strip() == "" or value.strip().upper() == "NA":
                raise ValueError(f"line {lineno}: NA not permitted in value")
            records.append(
                Record(
                    source_db=db,
                    lon=float(lon),
                    lat=float(lat),
                    depth=float(depth),
                    year=int(year),
                    variable=variable,
                    value=float(value),
                    raw_flag=flag,
                )
            )
    return records


def write_records_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(RECORD_CSV_HEADER)
        for r in records:
            w.writerow(
                [r.source_db, repr(r.lon), repr(r.lat), repr(r.depth), r.year,
                 r.variable, repr(r.value), r.raw_flag]
            )


# -- grid binary format ----------------------------------------------------


def save_grid(path_prefix, grid: Grid4D):
    """Little-endian f32 values then u8 mask, with a JSON sidecar."""
    prefix = Path(path_prefix)
    sidecar = {
        "dims": list(grid.dims),
        "depth_levels": list(grid.depth_levels),
        "year_origin": grid.year_origin,
        "variable": grid.variable,
        "na_sentinel": NA_SENTINEL,
    }
    values = np.where(grid.mask == 1, grid.values, NA_SENTINEL)
    blob = values.astype("<f4").tobytes() + grid.mask.astype(np.uint8).tobytes()
    prefix.with_suffix(".bin").write_bytes(blob)
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
    return prefix.with_suffix(".bin"), prefix.with_suffix(".json")


def save_bathymetry(path_prefix, bathymetry: Bathymetry):
    """Elevation grid as little-endian f32 with a JSON dims sidecar."""
    prefix = Path(path_prefix)
    prefix.with_suffix(".bin").write_bytes(bathymetry.elevation.astype("<f4").tobytes())
    prefix.with_suffix(".json").write_text(
        json.dumps({"dims": list(bathymetry.elevation.shape), "kind": "bathymetry"},
                   sort_keys=True)
    )
    return prefix.with_suffix(".bin"), prefix.with_suffix(".json")


def load_bathymetry(path_prefix) -> Bathymetry:
    prefix = Path(path_prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    dims = tuple(sidecar["dims"])
    raw = prefix.with_suffix(".bin").read_bytes()
    elev = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    return Bathymetry(elev)


def load_grid(path_prefix) -> Grid4D:
    prefix = Path(path_prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    dims = tuple(sidecar["dims"])
    n = int(np.prod(dims))
    raw = prefix.with_suffix(".bin").read_bytes()
    values = np.frombuffer(raw[: 4 * n], dtype="<f4").astype(np.float64).reshape(dims)
    mask = np.frombuffer(raw[4 * n : 4 * n + n], dtype=np.uint8).reshape(dims).copy()
    values = np.where(mask == 1, values, NA_SENTINEL)
    return Grid4D(
        values=values,
        mask=mask,
        variable=sidecar["variable"],
        depth_levels=tuple(sidecar["depth_levels"]),
        year_origin=int(sidecar["year_origin"]),
    )
