"""Synthetic ocean generator with stoichiometry-consistent nutrient fields.

Produces a complete dissolved-oxygen truth field plus nitrate/phosphate
fields tied to it through the remineralization ratios (O2:N:P = 138:16:1,
i.e. dDO/dN = -8.625 and dDO/dP = -138), with seeded sparsity masks. This
is the desk-scale oracle the end-to-end suite trains and evaluates on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagrid import NA_SENTINEL, Grid4D
from .oceangraph import GridBundle

FIELD_STYLES = ("smooth_harmonic", "zonal_bands", "omz_pockets")
MASK_MODES = ("bernoulli", "cruise_track")

# stoichiometric slopes of DO against the nutrients
DO_PER_NITRATE = -138.0 / 16.0   # -8.625
DO_PER_PHOSPHATE = -138.0


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (20, 20, 4, 10)
    missing_rate: float = 0.9
    noise_sd: float = 2.0
    seed: int = 0
    field_style: str = "smooth_harmonic"
    nitrate_intercept: float = 550.0
    phosphate_intercept: float = 600.0
    pocket_fraction: float = 0.25
    mask_mode: str = "bernoulli"

    def __post_init__(self):
        if any(n < 2 for n in self.dims):
            raise ValueError("every dim must be >= 2")
        if not (0.0 <= self.missing_rate < 1.0):
            raise ValueError("missing_rate must be in [0, 1)")
        if self.field_style not in FIELD_STYLES:
            raise ValueError(f"unknown field_style {self.field_style!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


@dataclass
class SynthData:
    config: SynthConfig
    truth: dict                 # variable -> complete float64 array
    masks: dict                 # variable -> uint8 array
    observed: dict = field(default_factory=dict)  # variable -> Grid4D

    @property
    def do_truth(self) -> Grid4D:
        d = self.truth["DO"]
        return Grid4D(d, np.ones(d.shape, dtype=np.uint8), "DO",
                      self._levels(), 0)

    def _levels(self):
        D = self.truth["DO"].shape[2]
        return tuple(np.linspace(0, 5500, D))

    def bundle(self) -> GridBundle:
        return GridBundle(
            do=self.observed["DO"],
            temperature=self.observed["temperature"],
            salinity=self.observed["salinity"],
            nitrate=self.observed["nitrate"],
            phosphate=self.observed["phosphate"],
        )


def _axes(dims):
    L, G, D, T = dims
    i = np.arange(L)[:, None, None, None]
    j = np.arange(G)[None, :, None, None]
    d = np.arange(D)[None, None, :, None]
    t = np.arange(T)[None, None, None, :]
    return i / L, j / G, d / D, t / T


def _do_field(config: SynthConfig):
    L, G, D, T = config.dims
    fi, fj, fd, ft = _axes(config.dims)
    if config.field_style == "smooth_harmonic":
        do = (
            250.0
            + 85.0 * np.sin(2 * np.pi * fi + 0.7) * np.cos(2 * np.pi * fj)
            + 60.0 * np.cos(np.pi * (fd + 0.5 / D))
            + 25.0 * np.sin(2 * np.pi * ft + 1.3)
            + 35.0 * np.sin(4 * np.pi * fj + 0.4)
        )
    elif config.field_style == "zonal_bands":
        do = (
            240.0
            + 120.0 * np.tanh(2.0 * np.sin(3 * np.pi * fj))
            + 45.0 * np.cos(np.pi * (fd + 0.5 / D))
            + 20.0 * np.sin(2 * np.pi * ft + 0.9)
            + 25.0 * np.sin(2 * np.pi * fi + 0.2)
        )
    else:  # omz_pockets
        do = np.broadcast_to(
            200.0 + 40.0 * np.cos(np.pi * (fd + 0.5 / D)), config.dims
        ).copy()
        # exactly pocket_fraction of lon columns per latitude row dip below
        # the OMZ threshold, so the area proportion is exact by construction
        n_pockets = round(config.pocket_fraction * L)
        mid = D // 2
        for j in range(G):
            cols = (np.arange(n_pockets) * max(L // max(n_pockets, 1), 1) + j) % L
            cols = np.unique(cols)[:n_pockets]
            do[cols, j, mid, :] = 20.0
    return np.clip(do, 0.0, 523.0)


def _env_fields(config: SynthConfig, do):
    """Temperature/salinity backdrops and Redfield-linked nutrients."""
    _, fj, fd, ft = _axes(config.dims)
    temp = np.broadcast_to(
        24.0 - 18.0 * fd - 12.0 * np.abs(2 * fj - 1.0) + 1.5 * np.sin(2 * np.pi * ft),
        config.dims,
    ).copy()
    sal = np.broadcast_to(35.0 + 1.2 * np.sin(2 * np.pi * fj) - 0.5 * fd, config.dims).copy()
    nit = (config.nitrate_intercept - do) / 8.625
    pho = (config.phosphate_intercept - do) / 138.0
    return {"temperature": temp, "salinity": sal, "nitrate": nit, "phosphate": pho}


def _bernoulli_mask(rng, dims, missing_rate):
    return (rng.random(dims) < (1.0 - missing_rate)).astype(np.uint8)


def _cruise_track_mask(rng, dims, missing_rate):
    """Structured sparsity: random-walk ship tracks observing full columns."""
    L, G, D, T = dims
    mask = np.zeros(dims, dtype=np.uint8)
    target = int(round((1.0 - missing_rate) * L * G * D * T))
    while mask.sum() < target:
        t = int(rng.integers(T))
        i, j = int(rng.integers(L)), int(rng.integers(G))
        for _ in range(max(L, G)):
            mask[i, j, :, t] = 1
            step = rng.integers(0, 4)
            if step == 0:
                i = (i + 1) % L
            elif step == 1:
                i = (i - 1) % L
            elif step == 2:
                j = min(j + 1, G - 1)
            else:
                j = max(j - 1, 0)
            if mask.sum() >= target:
                break
    return mask


def generate(config: SynthConfig) -> SynthData:
    """Build the full synthetic dataset; reproducible from the seed alone."""
    root = np.random.SeedSequence(config.seed)
    streams = {
        name: np.random.Generator(np.random.Philox(ss))
        for name, ss in zip(
            ("noise_n", "noise_p", "mask_DO", "mask_temperature", "mask_salinity",
             "mask_nitrate", "mask_phosphate"),
            root.spawn(7),
        )
    }
    do = _do_field(config)
    truth = {"DO": do, **_env_fields(config, do)}
    if config.noise_sd > 0:
        # noise is expressed in DO-equivalent umol/kg and propagated through
        # the stoichiometric slopes, so both nutrients carry the same
        # oxygen-information error
        eps_n = config.noise_sd * streams["noise_n"].standard_normal(config.dims)
        eps_p = config.noise_sd * streams["noise_p"].standard_normal(config.dims)
        truth["nitrate"] = truth["nitrate"] + eps_n / 8.625
        truth["phosphate"] = truth["phosphate"] + eps_p / 138.0
    truth["nitrate"] = np.clip(truth["nitrate"], 0.0, 500.0)
    truth["phosphate"] = np.clip(truth["phosphate"], 0.0, 5.0)

    mask_fn = _bernoulli_mask if config.mask_mode == "bernoulli" else _cruise_track_mask
    masks = {
        var: mask_fn(streams[f"mask_{var}"], config.dims, config.missing_rate)
        for var in ("DO", "temperature", "salinity", "nitrate", "phosphate")
    }
    D = config.dims[2]
    levels = tuple(np.linspace(0, 5500, D))
    observed = {
        var: observed_view(
            Grid4D(truth[var], np.ones(config.dims, dtype=np.uint8), var, levels, 0),
            masks[var],
        )
        for var in masks
    }
    return SynthData(config=config, truth=truth, masks=masks, observed=observed)


def observed_view(truth: Grid4D, mask) -> Grid4D:
    """The masked matrix: observed entries kept, everything else NA."""
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != truth.dims:
        raise ValueError("mask dims do not match grid")
    values = np.where(mask == 1, truth.values, NA_SENTINEL)
    return Grid4D(values, mask, truth.variable, truth.depth_levels, truth.year_origin)
