"""The reconstruction model: temporal + multi-factor feature extraction,
hypernetwork-generated per-node affine zoning, and zoning-varying message
passing over a year snapshot.

Missing values everywhere enter as (zero-filled value, mask bit) channel
pairs. The forward pass runs entirely on the autodiff tape so that both
parameter gradients and input-channel gradients (for the chemistry
regularizer) are available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorad as ta
from .datagrid import EOS_S0, EOS_T0, lat_center, lon_center, to_spherical
from .oceangraph import GraphSnapshot, GridBundle, completeness_field
from .tensorad import Tensor

ENV_FACTORS = ("temperature", "salinity", "nitrate", "phosphate", "silicate", "chlorophyll")
GEO_DIM = 5                       # x, y, z, norm depth, norm year
ENV_DIM = 2 * len(ENV_FACTORS)    # (value, mask) per factor
XI_DIM = 8                        # x, y, z, norm depth, T, S, density, pressure

ARCHITECTURES = ("full", "vanilla_gnn", "bilstm_only", "mlp_all", "mlp_time", "mlp_env")

DO_RANGE = (0.0, 523.0)

# fixed scales for the hypernetwork context's derived components
_DENSITY_CENTER, _DENSITY_SCALE = 1030.0, 5.0
_PRESSURE_SCALE = 5500.0


@dataclass(frozen=True)
class ModelConfig:
    half_window: int = 2
    hidden_dim: int = 16       # extractor width
    message_dim: int = 12      # per-node feature size in message passing
    n_layers: int = 2
    hyper_hidden: int = 16
    edge_hidden: int = 8
    architecture: str = "full"
    no_zoning: bool = False    # freeze the zoning transform at identity
    no_env: bool = False       # zero the environmental channel (values + masks)
    no_temporal: bool = False  # zero the DO window channel (values + masks)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if min(self.half_window, self.hidden_dim, self.message_dim, self.n_layers) < 1:
            raise ValueError("config dims must be positive")

    @property
    def uses_graph(self):
        return self.architecture in ("full", "vanilla_gnn")

    @property
    def uses_lstm(self):
        return self.architecture in ("full", "vanilla_gnn", "bilstm_only")

    def encoder_input_dim(self):
        """Input width of the factor/window MLP for this architecture."""
        window = 4 * self.half_window  # 2T values + 2T mask bits
        if self.architecture == "mlp_all":
            return window + GEO_DIM + ENV_DIM
        if self.architecture == "mlp_time":
            return window + GEO_DIM
        if self.architecture == "mlp_env":
            return GEO_DIM + ENV_DIM
        return GEO_DIM + ENV_DIM

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class NormStats:
    """Per-variable affine standardization computed on training-fold
    observations; stored alongside checkpoints."""

    means: dict
    stds: dict
    depth_scale: float
    n_years: int

    @classmethod
    def compute(cls, bundle: GridBundle):
        means, stds = {}, {}
        for name in ("DO",) + ENV_FACTORS:
            grid = bundle.do if name == "DO" else bundle.env_grid(name)
            if grid is None or grid.mask.sum() == 0:
                means[name], stds[name] = 0.0, 1.0
                continue
            vals = grid.values[grid.mask == 1]
            means[name] = float(vals.mean())
            stds[name] = float(max(vals.std(), 1e-6))
        return cls(
            means=means,
            stds=stds,
            depth_scale=float(bundle.do.depth_levels[-1] or 1.0),
            n_years=bundle.do.dims[3],
        )

    def norm(self, name, values):
        return (values - self.means[name]) / self.stds[name]

    def to_json(self):
        return {"means": self.means, "stds": self.stds,
                "depth_scale": self.depth_scale, "n_years": self.n_years}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


# -- parameters ----------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_params(config: ModelConfig, seed=0):
    """All learnable tensors, keyed by name. The zoning hypernetwork's output
    layers start at exact identity / zero so training begins as a vanilla
    mean-aggregation network."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    H, Z = config.hidden_dim, config.message_dim
    p = {}
    if config.uses_lstm:
        for d in ("fwd", "bwd"):
            p[f"lstm_{d}_wx"] = _uniform(rng, (2, 4 * H), 2)
            p[f"lstm_{d}_wh"] = _uniform(rng, (H, 4 * H), H)
            p[f"lstm_{d}_b"] = Tensor(np.zeros((1, 4 * H)), requires_grad=True)
    enc_in = config.encoder_input_dim()
    p["enc_w1"] = _uniform(rng, (enc_in, H), enc_in)
    p["enc_b1"] = Tensor(np.zeros((1, H)), requires_grad=True)
    p["enc_w2"] = _uniform(rng, (H, H), H)
    p["enc_b2"] = Tensor(np.zeros((1, H)), requires_grad=True)

    proj_in = 3 * H if config.uses_lstm else H
    p["proj_w"] = _uniform(rng, (proj_in, Z), proj_in)
    p["proj_b"] = Tensor(np.zeros((1, Z)), requires_grad=True)

    if config.uses_graph:
        hh = config.hyper_hidden
        p["hyp_a_w1"] = _uniform(rng, (XI_DIM, hh), XI_DIM)
        p["hyp_a_b1"] = Tensor(np.zeros((1, hh)), requires_grad=True)
        p["hyp_a_w2"] = Tensor(np.zeros((hh, Z * Z)), requires_grad=True)
        p["hyp_a_b2"] = Tensor(np.eye(Z).reshape(1, Z * Z), requires_grad=True)
        p["hyp_b_w1"] = _uniform(rng, (XI_DIM, hh), XI_DIM)
        p["hyp_b_b1"] = Tensor(np.zeros((1, hh)), requires_grad=True)
        p["hyp_b_w2"] = Tensor(np.zeros((hh, Z)), requires_grad=True)
        p["hyp_b_b2"] = Tensor(np.zeros((1, Z)), requires_grad=True)
        eh = config.edge_hidden
        p["edge_w1"] = _uniform(rng, (5, eh), 5)
        p["edge_b1"] = Tensor(np.zeros((1, eh)), requires_grad=True)
        p["edge_w2"] = _uniform(rng, (eh, 1), eh)
        p["edge_b2"] = Tensor(np.zeros((1, 1)), requires_grad=True)
        for layer in range(config.n_layers):
            p[f"msg_w_{layer}"] = _uniform(rng, (Z, Z), Z)

    p["out_w1"] = _uniform(rng, (Z, Z), Z)
    p["out_b1"] = Tensor(np.zeros((1, Z)), requires_grad=True)
    p["out_w2"] = _uniform(rng, (Z, 1), Z)
    p["out_b2"] = Tensor(np.zeros((1, 1)), requires_grad=True)
    return p


# -- feature assembly ------------------------------------------------------


class FeatureContext:
    """Numpy feature matrices for every node of one year snapshot.

    Window values are normalized, zero-filled where unobserved, and paired
    with mask bits, so the model output cannot depend on values hidden by
    the mask.
    """

    def __init__(self, bundle: GridBundle, snapshot: GraphSnapshot,
                 norm: NormStats, config: ModelConfig):
        self.snapshot = snapshot
        self.config = config
        self.norm = norm
        grid = bundle.do
        L, G, D, T = grid.dims
        t = snapshot.t
        nodes = snapshot.nodes
        ii, jj, dd = nodes[:, 0], nodes[:, 1], nodes[:, 2]
        n = len(nodes)
        Tw = config.half_window

        # DO window: past T then future T steps, (value, mask) per step
        vals = np.zeros((n, 2 * Tw))
        mask = np.zeros((n, 2 * Tw))
        offsets = list(range(-Tw, 0)) + list(range(1, Tw + 1))
        for k, off in enumerate(offsets):
            tau = t + off
            if 0 <= tau < T:
                m = grid.mask[ii, jj, dd, tau].astype(np.float64)
                v = norm.norm("DO", grid.values[ii, jj, dd, tau]) * m
                vals[:, k], mask[:, k] = v, m
        if config.no_temporal:
            vals[:] = 0.0
            mask[:] = 0.0
        self.window_vals, self.window_mask = vals, mask

        # geographical channel
        lon = np.array([lon_center(i, L) for i in ii])
        lat = np.array([lat_center(j, G) for j in jj])
        x, y, z = to_spherical(lon, lat)
        depths = np.asarray(grid.depth_levels)[dd]
        geo = np.column_stack([
            x, y, z,
            depths / norm.depth_scale,
            np.full(n, t / max(norm.n_years - 1, 1)),
        ])
        self.geo = geo

        # environmental channel
        env = np.zeros((n, ENV_DIM))
        for k, name in enumerate(ENV_FACTORS):
            g = bundle.env_grid(name)
            if g is None:
                continue
            m = g.mask[ii, jj, dd, t].astype(np.float64)
            env[:, 2 * k] = norm.norm(name, g.values[ii, jj, dd, t]) * m
            env[:, 2 * k + 1] = m
        if config.no_env:
            env[:] = 0.0
        self.env = env

        # hypernetwork context: geography plus physical state with defaults
        pressure, density = bundle.derived()
        temp = bundle.temperature
        sal = bundle.salinity
        t_raw = np.full(n, EOS_T0)
        s_raw = np.full(n, EOS_S0)
        if temp is not None:
            m = temp.mask[ii, jj, dd, t] == 1
            t_raw[m] = temp.values[ii, jj, dd, t][m]
        if sal is not None:
            m = sal.mask[ii, jj, dd, t] == 1
            s_raw[m] = sal.values[ii, jj, dd, t][m]
        self.xi = np.column_stack([
            x, y, z,
            depths / norm.depth_scale,
            norm.norm("temperature", t_raw),
            norm.norm("salinity", s_raw),
            (density[ii, jj, dd, t] - _DENSITY_CENTER) / _DENSITY_SCALE,
            pressure[ii, jj, dd, t] / _PRESSURE_SCALE,
        ])

        # observed targets at the reconstruction year
        self.target_values = grid.values[ii, jj, dd, t]
        self.target_mask = grid.mask[ii, jj, dd, t].astype(np.float64)
        # per-factor observation bits at year t (chem regularizer eligibility)
        self.env_obs = {
            name: (bundle.env_grid(name).mask[ii, jj, dd, t] == 1)
            if bundle.env_grid(name) is not None
            else np.zeros(n, dtype=bool)
            for name in ENV_FACTORS
        }


def build_feature_context(bundle, snapshot, norm, config):
    return FeatureContext(bundle, snapshot, norm, config)


# -- model pieces -----------------------------------------------------------


def lstm_pass(vals, mask, wx, wh, b, reverse=False):
    """Single-direction recurrent pass over (value, mask) steps; returns the
    final hidden state (N, H)."""
    n, steps = vals.shape
    H = wh.shape[0]
    h = Tensor(np.zeros((n, H)))
    c = Tensor(np.zeros((n, H)))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for s in order:
        x = ta.concat([vals[:, s : s + 1], mask[:, s : s + 1]], axis=1)
        zz = ta.matmul(x, wx) + ta.matmul(h, wh) + b
        i = ta.sigmoid(zz[:, :H])
        f = ta.sigmoid(zz[:, H : 2 * H])
        g = ta.tanh(zz[:, 2 * H : 3 * H])
        o = ta.sigmoid(zz[:, 3 * H :])
        c = f * c + i * g
        h = o * ta.tanh(c)
    return h


def encode_temporal(window_vals, window_mask, params):
    """Bidirectional recurrent encoding of the 2T-step window; output is the
    concatenation of the two directions' final hidden states."""
    fwd = lstm_pass(window_vals, window_mask,
                    params["lstm_fwd_wx"], params["lstm_fwd_wh"], params["lstm_fwd_b"])
    bwd = lstm_pass(window_vals, window_mask,
                    params["lstm_bwd_wx"], params["lstm_bwd_wh"], params["lstm_bwd_b"],
                    reverse=True)
    return ta.concat([fwd, bwd], axis=1)


def mlp_tanh(x, layers):
    """Stack of affine layers with tanh after each one."""
    h = x
    for w, b in layers:
        h = ta.tanh(ta.matmul(h, w) + b)
    return h


def encode_factors(geo, env, params):
    """Two-layer tanh embedding of the concatenated geo and env channels."""
    x = ta.concat([geo, env], axis=1)
    return mlp_tanh(x, [(params["enc_w1"], params["enc_b1"]),
                        (params["enc_w2"], params["enc_b2"])])


def hyper_zone(xi, params, message_dim):
    """Per-node zoning parameters (Z_alpha (N, dz, dz), Z_beta (N, dz)) from
    the context vector. Initialization makes Z_alpha exactly identity."""
    hidden_a = ta.tanh(ta.matmul(xi, params["hyp_a_w1"]) + params["hyp_a_b1"])
    alpha = ta.matmul(hidden_a, params["hyp_a_w2"]) + params["hyp_a_b2"]
    hidden_b = ta.tanh(ta.matmul(xi, params["hyp_b_w1"]) + params["hyp_b_b1"])
    beta = ta.matmul(hidden_b, params["hyp_b_w2"]) + params["hyp_b_b2"]
    n = xi.shape[0]
    return ta.reshape(alpha, (n, message_dim, message_dim)), beta


def zone_scale(h, z_alpha, z_beta):
    """Per-node affine modulation: transpose(Z_alpha) . h + Z_beta."""
    n, dz = h.shape
    if z_alpha.shape != (n, dz, dz) or z_beta.shape != (n, dz):
        raise ta.ShapeError(
            f"zone_scale shapes {h.shape}, {z_alpha.shape}, {z_beta.shape} inconsistent"
        )
    hh = ta.reshape(h, (n, dz, 1))
    scaled = ta.tsum(ta.mul(z_alpha, hh), axis=1)
    return scaled + z_beta


def edge_gates(edge_feats, params):
    """Bounded scalar weight per edge from its feature vector."""
    scale = np.array([1e-3, 1e-3, 0.1, 1e-3, 1.0])  # bring features to O(1)
    x = Tensor(edge_feats * scale)
    hidden = ta.tanh(ta.matmul(x, params["edge_w1"]) + params["edge_b1"])
    return ta.sigmoid(ta.matmul(hidden, params["edge_w2"]) + params["edge_b2"])


def message_pass(h, src, dst, gamma, weight, inv_deg, z_alpha=None, z_beta=None):
    """One layer: mean over in-edges of gamma * W * (zoned h of the source),
    followed by tanh. Passing z_alpha/z_beta None skips zoning (vanilla)."""
    hz = zone_scale(h, z_alpha, z_beta) if z_alpha is not None else h
    wh = ta.matmul(hz, weight)
    msgs = ta.mul(ta.gather_rows(wh, src), gamma)
    agg = ta.scatter_rows(msgs, dst, h.shape[0])
    return ta.tanh(ta.mul(agg, inv_deg))


def readout(h, params):
    """Two-layer head to a scalar per node (normalized units, unconstrained)."""
    hidden = ta.tanh(ta.matmul(h, params["out_w1"]) + params["out_b1"])
    return ta.matmul(hidden, params["out_w2"]) + params["out_b2"]


def clamp_do(values):
    """Inference-time clamp to the physical DO range."""
    return np.clip(values, DO_RANGE[0], DO_RANGE[1])


# -- subgraph batching -------------------------------------------------------


@dataclass
class SubGraph:
    """In-neighborhood closure of a target node set, re-indexed locally."""

    node_ids: np.ndarray     # global snapshot indices, sorted
    src: np.ndarray          # local edge endpoints
    dst: np.ndarray
    edge_feats: np.ndarray
    target_pos: np.ndarray   # positions of the requested targets in node_ids
    inv_deg: np.ndarray      # (n, 1) reciprocal in-degree (from the full graph)


def extract_subgraph(snapshot: GraphSnapshot, target_ids, n_hops) -> SubGraph:
    """Closure of ``target_ids`` under ``n_hops`` of in-edges, with all edges
    between closure nodes. In-degrees come from the full snapshot so batched
    and full-graph forwards agree exactly."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    keep = set(target_ids.tolist())
    frontier = keep
    for _ in range(n_hops):
        sel = np.isin(snapshot.edge_dst, np.fromiter(frontier, dtype=np.int64))
        frontier = set(snapshot.edge_src[sel].tolist()) - keep
        if not frontier:
            break
        keep |= frontier
    node_ids = np.array(sorted(keep), dtype=np.int64)
    local = {g: k for k, g in enumerate(node_ids.tolist())}
    sel = np.isin(snapshot.edge_dst, node_ids) & np.isin(snapshot.edge_src, node_ids)
    src = np.array([local[g] for g in snapshot.edge_src[sel].tolist()], dtype=np.int64)
    dst = np.array([local[g] for g in snapshot.edge_dst[sel].tolist()], dtype=np.int64)
    deg = snapshot.in_degrees()[node_ids].astype(np.float64)
    return SubGraph(
        node_ids=node_ids,
        src=src,
        dst=dst,
        edge_feats=snapshot.edge_features[sel],
        target_pos=np.array([local[g] for g in target_ids.tolist()], dtype=np.int64),
        inv_deg=(1.0 / deg)[:, None],
    )


def whole_graph(snapshot: GraphSnapshot) -> SubGraph:
    n = snapshot.n_nodes
    ids = np.arange(n, dtype=np.int64)
    deg = snapshot.in_degrees().astype(np.float64)
    return SubGraph(
        node_ids=ids, src=snapshot.edge_src, dst=snapshot.edge_dst,
        edge_feats=snapshot.edge_features, target_pos=ids,
        inv_deg=(1.0 / deg)[:, None],
    )


# -- full forward -------------------------------------------------------------


@dataclass
class ForwardHandles:
    """Tape handles needed by losses and the chemistry regularizer."""

    xhat: Tensor              # (B,) raw-unit predictions for the targets
    env_input: Tensor         # (C, ENV_DIM) leaf the env channel flows from
    target_pos: np.ndarray    # target rows within the subgraph
    zoning: tuple | None      # (z_alpha, z_beta) tensors, when the graph ran


def forward(subgraph: SubGraph, featctx: FeatureContext, params, config: ModelConfig,
            vanilla=False) -> ForwardHandles:
    """Predict raw-unit DO for the subgraph's targets.

    ``vanilla=True`` routes message passing through the separately coded
    no-zoning path (reference implementation for the equivalence check).
    """
    ids = subgraph.node_ids
    wv = Tensor(featctx.window_vals[ids])
    wm = Tensor(featctx.window_mask[ids])
    geo = Tensor(featctx.geo[ids])
    env = Tensor(featctx.env[ids], requires_grad=True)
    arch = config.architecture

    if arch in ("mlp_all", "mlp_time", "mlp_env"):
        parts = []
        if arch in ("mlp_all", "mlp_time"):
            parts += [wv, wm]
        parts.append(geo)
        if arch in ("mlp_all", "mlp_env"):
            parts.append(env)
        x = ta.concat(parts, axis=1)
        z = mlp_tanh(x, [(params["enc_w1"], params["enc_b1"]),
                         (params["enc_w2"], params["enc_b2"])])
    else:
        z_do = encode_temporal(wv, wm, params)
        z_f = encode_factors(geo, env, params)
        z = ta.concat([z_do, z_f], axis=1)

    h = ta.matmul(z, params["proj_w"]) + params["proj_b"]

    zoning = None
    if config.uses_graph:
        gamma = edge_gates(subgraph.edge_feats, params)
        inv_deg = Tensor(subgraph.inv_deg)
        identity_zoning = vanilla or config.no_zoning or arch == "vanilla_gnn"
        if identity_zoning:
            z_alpha = z_beta = None
        else:
            xi = Tensor(featctx.xi[ids])
            z_alpha, z_beta = hyper_zone(xi, params, config.message_dim)
            zoning = (z_alpha, z_beta)
        for layer in range(config.n_layers):
            h = message_pass(h, subgraph.src, subgraph.dst, gamma,
                             params[f"msg_w_{layer}"], inv_deg, z_alpha, z_beta)

    h_targets = ta.gather_rows(h, subgraph.target_pos)
    out = readout(h_targets, params)
    norm = featctx.norm
    xhat = ta.reshape(out, (len(subgraph.target_pos),)) * norm.stds["DO"] + norm.means["DO"]
    return ForwardHandles(xhat=xhat, env_input=env,
                          target_pos=subgraph.target_pos, zoning=zoning)


def vanilla_reference_forward(subgraph, featctx, params, config):
    """Independently wired mean-aggregation network (no zoning anywhere);
    the full model with identity zoning must match this exactly."""
    return forward(subgraph, featctx, params, config, vanilla=True)


def predict(subgraph, featctx, params, config, clamp=True):
    """Inference: numpy predictions with the physical-range clamp."""
    handles = forward(subgraph, featctx, params, config)
    vals = handles.xhat.data
    return clamp_do(vals) if clamp else vals


# -- checkpoint ---------------------------------------------------------------


def save_checkpoint(path_prefix, params, config: ModelConfig, norm: NormStats):
    extra = {"model_config": config.to_json(), "norm_stats": norm.to_json()}
    return ta.save_params(path_prefix, params, extra=extra)


def load_checkpoint(path_prefix):
    params, extra = ta.load_params(path_prefix, requires_grad=True)
    config = ModelConfig.from_json(extra["model_config"])
    norm = NormStats.from_json(extra["norm_stats"])
    return params, config, norm
