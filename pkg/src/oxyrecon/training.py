"""Losses, chemistry-informed gradient-variance regularization, the
area-rebalanced optimization loop, and the k-fold cross-testing harness.

Training groups batches by ocean area; after every epoch the per-area
iteration counts are re-apportioned by a softmax over validation losses,
with a floor of one iteration per area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorad as ta
from .datagrid import NA_SENTINEL, AreaTable, Grid4D, lat_center, lon_center
from .evalzone import MetricsReport, metrics
from .oceangraph import GraphConfig, GridBundle, build_snapshot
from .oxynet import (
    ENV_FACTORS,
    FeatureContext,
    ModelConfig,
    NormStats,
    clamp_do,
    extract_subgraph,
    forward,
    init_params,
)
from .synthlab import observed_view
from .tensorad import Tape, Tensor, grad


class EmptySupervisionError(ValueError):
    pass


class InvalidLossError(ValueError):
    pass


class DegenerateFoldError(ValueError):
    pass


HISTORY_COLUMNS = (
    "epoch", "area", "iter_count", "train_loss", "val_loss",
    "R_N", "R_P", "grad_N_mean", "grad_N_var", "grad_P_mean", "grad_P_var",
)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    learning_rate: float = 3e-3
    epochs: int = 50
    batch_size: int = 32
    iteration_budget: int = 24   # gradient steps per epoch, split across areas
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1
    chem_max_nodes: int = 8      # per nutrient per step; bounds double-backward cost
    batch_mode: str = "cluster"  # 'cluster' draws spatially coherent batches
    no_zoning: bool = False
    no_chem_reg: bool = False
    no_env: bool = False
    no_temporal: bool = False
    n_folds: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_mode not in ("cluster", "random"):
            raise ValueError(f"unknown batch_mode {self.batch_mode!r}")

    def apply_ablations(self, model_config: ModelConfig) -> ModelConfig:
        return replace(model_config, no_zoning=self.no_zoning,
                       no_env=self.no_env, no_temporal=self.no_temporal)

    @property
    def effective_lam(self):
        return 0.0 if self.no_chem_reg else self.lam


# -- losses -------------------------------------------------------------


def reconstruction_loss(xhat, x_obs, omega):
    """Masked MSE over observed entries; raises on an all-unobserved batch."""
    omega = np.asarray(omega, dtype=np.float64)
    count = omega.sum()
    if count == 0:
        raise EmptySupervisionError("no observed entries in batch")
    obs = Tensor(np.where(omega == 1, np.asarray(x_obs, dtype=np.float64), 0.0))
    diff = ta.mul(ta.sub(xhat, obs), Tensor(omega))
    return ta.mul(ta.tsum(ta.square(diff)), 1.0 / count)


def chem_regularizer(xhat, env_input, target_rows, column, raw_scale, eligible,
                     max_nodes=None, rng=None):
    """Variance of per-node gradients of the prediction w.r.t. its own
    nutrient input, differentiable through the reverse sweep.

    ``xhat`` is the (B,) prediction tensor on an active tape; ``env_input``
    the environmental leaf it was computed from; ``target_rows`` the row of
    each prediction inside that leaf; ``column`` the nutrient's value slot;
    ``raw_scale`` the denominator converting normalized-slot gradients to
    raw units. Returns (R, gradients-as-floats); R is None when fewer than
    two batch nodes carry an observation.
    """
    idx = np.where(np.asarray(eligible))[0]
    if max_nodes is not None and len(idx) > max_nodes:
        if rng is None:
            idx = idx[:max_nodes]
        else:
            idx = np.sort(rng.choice(idx, size=max_nodes, replace=False))
    if len(idx) < 2:
        return None, np.zeros(0)
    gs = []
    for m in idx:
        # the sweep only needs the output -> env path; pruning skips the
        # temporal branch entirely
        (g_env,) = grad(xhat[int(m)], [env_input], create_graph=True,
                        through=[env_input])
        g_raw = ta.mul(
            ta.reshape(g_env[int(target_rows[m]), column], (1,)), 1.0 / raw_scale
        )
        gs.append(g_raw)
    g_vec = ta.concat(gs)
    return ta.variance(g_vec), g_vec.data.copy()


def gradient_variance(values):
    """Population variance of a gradient sample (the regularizer's core)."""
    return ta.variance(ta.Tensor(np.asarray(values, dtype=np.float64))).item()


def total_loss(l_r, r_n, r_p, lam):
    """Weighted sum of reconstruction loss and the two nutrient penalties."""
    out = l_r
    if lam > 0:
        for r in (r_n, r_p):
            if r is not None:
                out = ta.add(out, ta.mul(r, lam))
    return out


# -- area schedule --------------------------------------------------------


@dataclass
class AreaSchedule:
    fractions: dict   # area_id -> softmax weight
    counts: dict      # area_id -> integer iterations, sums to budget


def rebalance_areas(val_losses, budget) -> AreaSchedule:
    """Softmax apportionment of the epoch's iteration budget with a floor of
    one iteration per area (largest-remainder rounding)."""
    areas = sorted(val_losses)
    losses = np.array([val_losses[a] for a in areas], dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise InvalidLossError(f"non-finite validation loss: {val_losses}")
    n = len(areas)
    if budget < n:
        raise ValueError(f"budget {budget} below number of areas {n}")
    shifted = losses - losses.max()
    weights = np.exp(shifted)
    fractions = weights / weights.sum()

    remaining = budget - n
    quotas = fractions * remaining
    floors = np.floor(quotas).astype(int)
    leftover = remaining - floors.sum()
    order = np.lexsort((np.arange(n), -(quotas - floors)))
    counts = floors.copy()
    counts[order[:leftover]] += 1
    counts += 1
    return AreaSchedule(
        fractions={a: float(f) for a, f in zip(areas, fractions)},
        counts={a: int(c) for a, c in zip(areas, counts)},
    )


# -- optimizer --------------------------------------------------------------


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            step = self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            params[k].data = params[k].data - step


# -- training data organization ----------------------------------------------


NITRATE_COL = 2 * ENV_FACTORS.index("nitrate")
PHOSPHATE_COL = 2 * ENV_FACTORS.index("phosphate")


@dataclass
class YearContext:
    snapshot: object
    featctx: FeatureContext


class TrainingData:
    """Snapshots, features, and per-area target pools for one bundle."""

    def __init__(self, bundle: GridBundle, model_config: ModelConfig,
                 graph_config: GraphConfig, area_table: AreaTable | None = None,
                 norm: NormStats | None = None, workers=1):
        self.bundle = bundle
        self.model_config = model_config
        self.graph_config = graph_config
        self.area_table = area_table or AreaTable.default()
        self.norm = norm or NormStats.compute(bundle)
        self.years = {}
        L, G, D, T = bundle.do.dims
        self._horizontal_area = np.array(
            [
                [self.area_table.assign(lon_center(i, L), lat_center(j, G))
                 for j in range(G)]
                for i in range(L)
            ]
        )
        self.workers = workers

    def year(self, t) -> YearContext:
        if t not in self.years:
            snap = build_snapshot(self.bundle, self.graph_config, t, workers=self.workers)
            feat = FeatureContext(self.bundle, snap, self.norm, self.model_config)
            self.years[t] = YearContext(snapshot=snap, featctx=feat)
        return self.years[t]

    def node_areas(self, t):
        snap = self.year(t).snapshot
        return self._horizontal_area[snap.nodes[:, 0], snap.nodes[:, 1]]

    def target_pools(self):
        """{area_id: [(t, node_idx), ...]} over observed reconstruction targets."""
        pools = {}
        T = self.bundle.do.dims[3]
        for t in range(T):
            ctx = self.year(t)
            observed = np.where(ctx.featctx.target_mask == 1)[0]
            areas = self.node_areas(t)
            for n in observed:
                pools.setdefault(int(areas[n]), []).append((t, int(n)))
        return pools


def split_validation(pools, fraction, rng):
    """Per-area split of target pools into (train, val); areas with a single
    target keep it for training."""
    train, val = {}, {}
    for area in sorted(pools):
        items = pools[area]
        n = len(items)
        n_val = int(round(fraction * n))
        if n >= 2:
            n_val = max(n_val, 1)
        n_val = min(n_val, n - 1)
        picks = set(rng.choice(n, size=n_val, replace=False).tolist()) if n_val else set()
        train[area] = [it for k, it in enumerate(items) if k not in picks]
        val[area] = [it for k, it in enumerate(items) if k in picks]
    return train, val


# -- trainer ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    norm: NormStats
    model_config: ModelConfig
    history: list
    best_epoch: int
    epochs_run: int
    diverged: bool = False


def _batch_forward(data: TrainingData, config: ModelConfig, params, items):
    """Forward one same-year batch; returns (handles, obs, featctx, subgraph)."""
    t = items[0][0]
    nodes = np.array([n for _, n in items], dtype=np.int64)
    ctx = data.year(t)
    sub = extract_subgraph(ctx.snapshot, nodes, config.n_layers)
    handles = forward(sub, ctx.featctx, params, config)
    obs = ctx.featctx.target_values[nodes]
    return handles, obs, ctx.featctx, sub, nodes


def _eval_loss(data, config, params, items, batch_size=256):
    """Mean squared error (raw units) over a target list, eval mode."""
    if not items:
        return float("nan"), 0
    by_year = {}
    for t, n in items:
        by_year.setdefault(t, []).append((t, n))
    se, count = 0.0, 0
    for t in sorted(by_year):
        year_items = by_year[t]
        for lo in range(0, len(year_items), batch_size):
            chunk = year_items[lo : lo + batch_size]
            handles, obs, _, _, _ = _batch_forward(data, config, params, chunk)
            se += float(np.sum((handles.xhat.data - obs) ** 2))
            count += len(chunk)
    return se / count, count


def train(bundle: GridBundle, model_config: ModelConfig, train_config: TrainConfig,
          graph_config: GraphConfig | None = None, area_table: AreaTable | None = None,
          workers=1) -> TrainResult:
    """Run the optimization loop and return the best-validation parameters.

    History carries one row per (epoch, area) with losses, penalties, and the
    tracked nutrient-gradient statistics. Divergence aborts with the last
    finite parameters and ``diverged=True``.
    """
    graph_config = graph_config or GraphConfig(half_window=model_config.half_window)
    config = train_config.apply_ablations(model_config)
    data = TrainingData(bundle, config, graph_config, area_table, workers=workers)
    pools = data.target_pools()
    if not pools:
        raise EmptySupervisionError("no observed reconstruction targets")

    root = np.random.SeedSequence(train_config.seed, spawn_key=(7,))
    split_ss, batch_ss, chem_ss, init_ss = root.spawn(4)
    train_pools, val_pools = split_validation(
        pools, train_config.val_fraction, np.random.default_rng(split_ss)
    )
    areas = sorted(a for a in train_pools if train_pools[a])
    budget = max(train_config.iteration_budget, len(areas))
    schedule = rebalance_areas({a: 0.0 for a in areas}, budget)

    params = init_params(config, seed=int(init_ss.generate_state(1)[0]))
    adam = Adam(params, lr=train_config.learning_rate)
    batch_rng = np.random.default_rng(batch_ss)
    chem_rng = np.random.default_rng(chem_ss)
    lam = train_config.effective_lam
    sigma_do = data.norm.stds["DO"]

    history = []
    best = (float("inf"), 0, {k: t.data.copy() for k, t in params.items()})
    patience_left = train_config.patience
    last_finite = {k: t.data.copy() for k, t in params.items()}
    diverged = False
    epochs_run = 0

    for epoch in range(1, train_config.epochs + 1):
        epoch_stats = {
            a: {"loss": [], "rn": [], "rp": [], "gn": [], "gp": []} for a in areas
        }
        for area in areas:
            pool = train_pools[area]
            by_year = {}
            for t, n in pool:
                by_year.setdefault(t, []).append((t, n))
            year_keys = sorted(by_year)
            year_weights = np.array([len(by_year[t]) for t in year_keys], dtype=float)
            year_weights /= year_weights.sum()
            for _ in range(schedule.counts[area]):
                t = year_keys[batch_rng.choice(len(year_keys), p=year_weights)]
                year_pool = by_year[t]
                take = min(train_config.batch_size, len(year_pool))
                sel = batch_rng.choice(len(year_pool), size=take, replace=False)
                items = [year_pool[k] for k in sorted(sel)]
                with Tape():
                    handles, obs, featctx, sub, nodes = _batch_forward(
                        data, config, params, items
                    )
                    l_r = reconstruction_loss(handles.xhat, obs, np.ones(len(obs)))
                    r_n = r_p = None
                    g_n = g_p = np.zeros(0)
                    if lam > 0:
                        rows = sub.target_pos
                        r_n, g_n = chem_regularizer(
                            handles.xhat, handles.env_input, rows, NITRATE_COL,
                            data.norm.stds["nitrate"],
                            featctx.env_obs["nitrate"][nodes],
                            max_nodes=train_config.chem_max_nodes, rng=chem_rng,
                        )
                        r_p, g_p = chem_regularizer(
                            handles.xhat, handles.env_input, rows, PHOSPHATE_COL,
                            data.norm.stds["phosphate"],
                            featctx.env_obs["phosphate"][nodes],
                            max_nodes=train_config.chem_max_nodes, rng=chem_rng,
                        )
                    loss = total_loss(l_r, r_n, r_p, lam)
                    grads = grad(loss, list(params.values()))
                grads = dict(zip(params.keys(), grads))
                if not np.isfinite(loss.item()) or any(
                    not np.all(np.isfinite(g.data)) for g in grads.values()
                ):
                    diverged = True
                    break
                adam.step(params, {k: g.data for k, g in grads.items()})
                st = epoch_stats[area]
                st["loss"].append(loss.item())
                if r_n is not None:
                    st["rn"].append(r_n.item())
                    st["gn"].extend(g_n.tolist())
                if r_p is not None:
                    st["rp"].append(r_p.item())
                    st["gp"].extend(g_p.tolist())
            if diverged:
                break

        if diverged:
            for k in params:
                params[k].data = last_finite[k]
            break
        last_finite = {k: t.data.copy() for k, t in params.items()}
        epochs_run = epoch

        val_losses, val_counts = {}, {}
        for area in areas:
            vloss, vcount = _eval_loss(data, config, params, val_pools.get(area, []))
            val_losses[area], val_counts[area] = vloss, vcount
        finite = [v for v in val_losses.values() if np.isfinite(v)]
        fallback = float(np.mean(finite)) if finite else 0.0
        val_filled = {a: (v if np.isfinite(v) else fallback) for a, v in val_losses.items()}

        for area in areas:
            st = epoch_stats[area]
            history.append({
                "epoch": epoch,
                "area": area,
                "iter_count": schedule.counts[area],
                "train_loss": float(np.mean(st["loss"])) if st["loss"] else float("nan"),
                "val_loss": val_losses[area],
                "R_N": float(np.mean(st["rn"])) if st["rn"] else float("nan"),
                "R_P": float(np.mean(st["rp"])) if st["rp"] else float("nan"),
                "grad_N_mean": float(np.mean(st["gn"])) if st["gn"] else float("nan"),
                "grad_N_var": float(np.var(st["gn"])) if st["gn"] else float("nan"),
                "grad_P_mean": float(np.mean(st["gp"])) if st["gp"] else float("nan"),
                "grad_P_var": float(np.var(st["gp"])) if st["gp"] else float("nan"),
            })

        total_n = sum(val_counts[a] for a in areas)
        mean_val = (
            sum(val_filled[a] * val_counts[a] for a in areas) / total_n
            if total_n else fallback
        )
        if mean_val < best[0] - 1e-12:
            best = (mean_val, epoch, {k: t.data.copy() for k, t in params.items()})
            patience_left = train_config.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

        # softmax over sigma-normalized losses keeps the apportionment in a
        # usable dynamic range regardless of the variable's physical units
        schedule = rebalance_areas(
            {a: val_filled[a] / sigma_do**2 for a in areas}, budget
        )

    final = {k: Tensor(v, requires_grad=True) for k, v in best[2].items()}
    return TrainResult(
        params=final, norm=data.norm, model_config=config, history=history,
        best_epoch=best[1], epochs_run=epochs_run, diverged=diverged,
    )


def write_history_csv(path, history):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([
                row["epoch"], row["area"], row["iter_count"],
                *[repr(float(row[k])) for k in HISTORY_COLUMNS[3:]],
            ])


# -- reconstruction and cross-testing -----------------------------------------


def predict_cells(data: TrainingData, params, cells, clamp=True, batch_size=512):
    """Predictions at (i, j, d, t) cells using the training-time pipeline."""
    config = data.model_config
    by_year = {}
    for k, (i, j, d, t) in enumerate(cells):
        by_year.setdefault(int(t), []).append((k, (int(i), int(j), int(d))))
    out = np.zeros(len(cells))
    for t in sorted(by_year):
        ctx = data.year(t)
        entries = by_year[t]
        node_ids = np.array([ctx.snapshot.node_index[c] for _, c in entries])
        for lo in range(0, len(entries), batch_size):
            sel = slice(lo, lo + batch_size)
            sub = extract_subgraph(ctx.snapshot, node_ids[sel], config.n_layers)
            handles = forward(sub, ctx.featctx, params, config)
            vals = handles.xhat.data
            if clamp:
                vals = clamp_do(vals)
            for (k, _), v in zip(entries[sel], vals):
                out[k] = v
    return out


def reconstruct_grid(data: TrainingData, params) -> Grid4D:
    """Complete field: observed entries kept, everything else imputed."""
    grid = data.bundle.do
    L, G, D, T = grid.dims
    values = grid.values.copy()
    mask = np.ones(grid.dims, dtype=np.uint8)
    ocean = data.bundle.bathymetry.ocean_mask(grid.depth_levels)
    for t in range(T):
        ctx = data.year(t)
        nodes = ctx.snapshot.nodes
        missing = np.where(ctx.featctx.target_mask == 0)[0]
        if len(missing):
            cells = [(nodes[n, 0], nodes[n, 1], nodes[n, 2], t) for n in missing]
            preds = predict_cells(data, params, cells)
            values[nodes[missing, 0], nodes[missing, 1], nodes[missing, 2], t] = preds
    land = ~ocean
    values[land] = NA_SENTINEL
    mask[land] = 0
    return Grid4D(values, mask, grid.variable, grid.depth_levels, grid.year_origin)


def make_folds(obs_grid: Grid4D, n_folds, seed):
    """Seeded partition of observed cells into near-equal folds."""
    cells = np.argwhere(obs_grid.mask == 1)
    if len(cells) < n_folds:
        raise DegenerateFoldError("fewer observed cells than folds")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(13,)))
    perm = rng.permutation(len(cells))
    return [cells[part] for part in np.array_split(perm, n_folds)]


def mask_out_cells(bundle: GridBundle, cells) -> GridBundle:
    """Bundle whose DO grid hides the given cells (the fold's test set)."""
    grid = bundle.do
    mask = grid.mask.copy()
    mask[cells[:, 0], cells[:, 1], cells[:, 2], cells[:, 3]] = 0
    hidden = observed_view(
        Grid4D(grid.values, grid.mask, grid.variable, grid.depth_levels,
               grid.year_origin),
        mask,
    )
    return replace(bundle, do=hidden, _derived=None)


@dataclass
class FoldReport:
    fold: int
    report: MetricsReport


@dataclass
class CrossfoldResult:
    folds: list                  # FoldReport
    mean: dict
    std: dict
    fold_cells: list = field(repr=False, default_factory=list)

    def to_table_rows(self):
        """Rows in the benchmark-table layout: one MAPE row per fold, then the
        averaged metrics with their standard deviations."""
        rows = [
            {"row": f"k={fr.fold}", "mape": fr.report.mape} for fr in self.folds
        ]
        rows.append({
            "row": "average",
            "mape": self.mean["mape"], "mape_std": self.std["mape"],
            "r2": self.mean["r2"], "r2_std": self.std["r2"],
            "rmse": self.mean["rmse"], "rmse_std": self.std["rmse"],
            "mae": self.mean["mae"], "mae_std": self.std["mae"],
        })
        return rows


def crossfold(bundle: GridBundle, model_config: ModelConfig,
              train_config: TrainConfig, graph_config: GraphConfig | None = None,
              area_table: AreaTable | None = None, workers=1) -> CrossfoldResult:
    """Hold out each fold of observed cells in turn, train on the rest, and
    report per-fold and averaged metrics."""
    folds = make_folds(bundle.do, train_config.n_folds, train_config.seed)
    for k, cells in enumerate(folds, start=1):
        if len(cells) == 0:
            raise DegenerateFoldError(f"fold {k} has no test cells")
    reports = []
    for k, cells in enumerate(folds, start=1):
        train_bundle = mask_out_cells(bundle, cells)
        result = train(train_bundle, model_config, train_config,
                       graph_config=graph_config, area_table=area_table,
                       workers=workers)
        data = TrainingData(train_bundle, result.model_config,
                            graph_config or GraphConfig(half_window=model_config.half_window),
                            area_table, norm=result.norm, workers=workers)
        preds = predict_cells(data, result.params, cells)
        obs = bundle.do.values[cells[:, 0], cells[:, 1], cells[:, 2], cells[:, 3]]
        reports.append(FoldReport(fold=k, report=metrics(obs, preds, group={"fold": k})))

    names = ("mape", "rmse", "mae", "r2")
    mean = {m: float(np.mean([fr.report.to_json()[m] for fr in reports])) for m in names}
    std = {m: float(np.std([fr.report.to_json()[m] for fr in reports])) for m in names}
    return CrossfoldResult(folds=reports, mean=mean, std=std,
                           fold_cells=[c.tolist() for c in folds])


def save_fold_assignments(path, result: CrossfoldResult):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"folds": result.fold_cells}, f, sort_keys=True)
        f.write("\n")
