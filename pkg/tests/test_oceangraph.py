import numpy as np
import pytest

from oxyrecon import oceangraph as og
from oxyrecon.datagrid import Bathymetry, Grid4D
from oxyrecon.oceangraph import (
    EdgeFeatureContext,
    GraphConfig,
    GridBundle,
    NodeKey,
    build_snapshot,
    completeness,
    completeness_field,
    edge_features,
    information_hubs,
    proximity_neighbors,
)


def all_ocean(L, G, D):
    return np.ones((L, G, D), dtype=bool)


class TestCompleteness:
    def test_all_observed(self):
        assert completeness(np.ones(9), 4) == 1.0

    def test_none_observed(self):
        assert completeness(np.zeros(9), 4) == 0.0

    def test_partial(self):
        w = np.zeros(9)
        w[[0, 2, 7]] = 1
        assert completeness(w, 4) == pytest.approx(0.375)

    def test_center_excluded(self):
        w = np.zeros(5)
        w[2] = 1  # only the reconstruction year itself
        assert completeness(w, 2) == 0.0

    def test_invalid_window(self):
        with pytest.raises(og.InvalidWindowError):
            completeness(np.ones(1), 0)

    def test_field_matches_scalar(self):
        rng = np.random.default_rng(0)
        mask = (rng.random((3, 3, 2, 8)) < 0.4).astype(np.uint8)
        grid = Grid4D(np.where(mask, 100.0, -9.99e33), mask, "DO", (0, 10), 2000)
        field = completeness_field(grid, 2)
        for i, j, d, t in [(0, 0, 0, 3), (2, 1, 1, 4), (1, 2, 0, 2)]:
            window = np.zeros(5)
            for k, tau in enumerate(range(t - 2, t + 3)):
                if 0 <= tau < 8:
                    window[k] = mask[i, j, d, tau]
            assert field[i, j, d, t] == completeness(window, 2)


class TestProximity:
    def test_interior_count(self):
        cfg = GraphConfig(delta=1, depth_radius=1)
        nbrs = proximity_neighbors(NodeKey(2, 2, 1, 0), all_ocean(5, 5, 3), cfg)
        assert len(nbrs) == 26

    def test_longitude_wraps(self):
        cfg = GraphConfig(delta=1, depth_radius=1)
        nbrs = proximity_neighbors(NodeKey(0, 2, 1, 0), all_ocean(5, 5, 3), cfg)
        assert any(m.i == 4 for m in nbrs)

    def test_no_neighbor_above_surface(self):
        cfg = GraphConfig(delta=1, depth_radius=1)
        nbrs = proximity_neighbors(NodeKey(2, 2, 0, 0), all_ocean(5, 5, 3), cfg)
        assert all(m.d in (0, 1) for m in nbrs)
        assert len(nbrs) == 17

    def test_latitude_does_not_wrap(self):
        cfg = GraphConfig(delta=1, depth_radius=1)
        nbrs = proximity_neighbors(NodeKey(2, 0, 1, 0), all_ocean(5, 5, 3), cfg)
        assert all(m.j in (0, 1) for m in nbrs)

    def test_land_excluded(self):
        ocean = all_ocean(5, 5, 3)
        ocean[3, 2, 1] = False
        cfg = GraphConfig(delta=1, depth_radius=1)
        nbrs = proximity_neighbors(NodeKey(2, 2, 1, 0), ocean, cfg)
        assert NodeKey(3, 2, 1, 0) not in nbrs
        assert len(nbrs) == 25

    def test_symmetry_property(self):
        rng = np.random.default_rng(1)
        ocean = rng.random((6, 6, 3)) < 0.7
        cfg = GraphConfig(delta=2, depth_radius=1)
        keys = [NodeKey(int(i), int(j), int(d), 0) for i, j, d in np.argwhere(ocean)]
        nbr = {k: proximity_neighbors(k, ocean, cfg) for k in keys}
        for n in keys:
            for m in nbr[n]:
                assert n in nbr[m]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        ocean = rng.random((6, 6, 3)) < 0.8
        cfg = GraphConfig(delta=2, depth_radius=1)
        L, G, D = ocean.shape
        for i, j, d in np.argwhere(ocean):
            node = NodeKey(int(i), int(j), int(d), 0)
            got = proximity_neighbors(node, ocean, cfg)
            # O(n^2): scan every cell, measure wrapped lon distance
            expected = set()
            for ii in range(L):
                for jj in range(G):
                    for dd in range(D):
                        if (ii, jj, dd) == (i, j, d) or not ocean[ii, jj, dd]:
                            continue
                        dlon = min((ii - i) % L, (i - ii) % L)
                        if dlon <= cfg.delta and abs(jj - j) <= cfg.delta and \
                                abs(dd - d) <= cfg.depth_radius:
                            expected.add(NodeKey(ii, jj, dd, 0))
            assert got == expected


class TestHubs:
    def _cobs(self, L, G, D, rng):
        return rng.random((L, G, D))

    def test_cap_binds_when_threshold_zero(self):
        rng = np.random.default_rng(3)
        cfg = GraphConfig(delta=1, depth_radius=1, completeness_threshold=0.0,
                          hub_radius_factor=3, max_hubs_per_node=4)
        hubs = information_hubs(NodeKey(5, 5, 1, 0), self._cobs(12, 12, 3, rng),
                                all_ocean(12, 12, 3), cfg)
        assert len(hubs) == 4

    def test_impossible_threshold_gives_empty(self):
        rng = np.random.default_rng(4)
        cobs = self._cobs(12, 12, 3, rng) * 0.9  # strictly below 1
        cfg = GraphConfig(completeness_threshold=1.0)
        assert information_hubs(NodeKey(5, 5, 1, 0), cobs, all_ocean(12, 12, 3), cfg) == set()

    def test_brute_force_filter_oracle(self):
        rng = np.random.default_rng(5)
        L, G, D = 9, 9, 3
        ocean = rng.random((L, G, D)) < 0.8
        cobs = rng.random((L, G, D))
        cfg = GraphConfig(delta=1, depth_radius=1, completeness_threshold=0.5,
                          hub_radius_factor=3, max_hubs_per_node=100)
        node = NodeKey(4, 4, 1, 0)
        got = information_hubs(node, cobs, ocean, cfg)
        prox = proximity_neighbors(node, ocean, cfg)
        expected = set()
        for ii in range(L):
            for jj in range(G):
                for dd in range(D):
                    key = NodeKey(ii, jj, dd, 0)
                    if (ii, jj, dd) == (4, 4, 1) or key in prox or not ocean[ii, jj, dd]:
                        continue
                    dlon = min((ii - 4) % L, (4 - ii) % L)
                    if dlon <= 3 and abs(jj - 4) <= 3 and abs(dd - 1) <= 3 and \
                            cobs[ii, jj, dd] >= 0.5:
                        expected.add(key)
        assert got == expected

    def test_tie_break_ascending_key(self):
        L, G, D = 9, 9, 1
        cobs = np.full((L, G, D), 0.75)
        cfg = GraphConfig(delta=1, depth_radius=1, completeness_threshold=0.5,
                          hub_radius_factor=2, max_hubs_per_node=3)
        hubs = information_hubs(NodeKey(4, 4, 0, 0), cobs, all_ocean(L, G, D), cfg)
        assert sorted(hubs) == [NodeKey(2, 2, 0, 0), NodeKey(2, 3, 0, 0), NodeKey(2, 4, 0, 0)]


def _ctx(L=4, G=4, D=2):
    return EdgeFeatureContext(
        lon_cells=L, lat_cells=G, depth_levels=(0, 100),
        density_t=np.full((L, G, D), 1027.0) + np.arange(L)[:, None, None],
        pressure_t=np.broadcast_to(np.array([0.0, 100.0]), (L, G, D)).copy(),
        cobs_t=np.linspace(0, 1, L * G * D).reshape(L, G, D),
    )


class TestEdgeFeatures:
    def test_self_loop_zero(self):
        ctx = _ctx()
        n = NodeKey(1, 1, 0, 0)
        assert np.array_equal(edge_features(n, n, ctx), np.zeros(5))

    def test_signed_components_antisymmetric(self):
        ctx = _ctx()
        m, n = NodeKey(0, 1, 0, 0), NodeKey(2, 2, 1, 0)
        f_mn = edge_features(m, n, ctx)
        f_nm = edge_features(n, m, ctx)
        assert f_mn[0] == f_nm[0] and f_mn[1] == f_nm[1]
        assert np.allclose(f_mn[2:], -f_nm[2:])

    def test_one_degree_at_equator(self):
        ctx = EdgeFeatureContext(
            lon_cells=360, lat_cells=180, depth_levels=(0,),
            density_t=np.full((360, 180, 1), 1027.0),
            pressure_t=np.zeros((360, 180, 1)),
            cobs_t=np.zeros((360, 180, 1)),
        )
        # adjacent lon cells straddling the equator cell centers at lat -0.5/-0.5
        f = edge_features(NodeKey(0, 90, 0, 0), NodeKey(1, 90, 0, 0), ctx)
        assert f[0] == pytest.approx(111.19, abs=0.05)


def _bundle(mask_prob=0.3, L=4, G=4, D=2, T=6, seed=0, bathymetry=None):
    rng = np.random.default_rng(seed)
    mask = (rng.random((L, G, D, T)) < mask_prob).astype(np.uint8)
    values = np.where(mask, rng.uniform(50, 400, (L, G, D, T)), -9.99e33)
    grid = Grid4D(values, mask, "DO", (0, 100), 2000)
    return GridBundle(do=grid, bathymetry=bathymetry)


class TestBuildSnapshot:
    def test_single_cell_ocean(self):
        elev = np.full((4, 4), 10.0)
        elev[1, 2] = -150.0
        bundle = _bundle(bathymetry=Bathymetry(elev))
        snap = build_snapshot(bundle, GraphConfig(), t=2)
        assert snap.n_nodes == 2  # both depth levels of the wet column
        assert np.all(snap.in_degrees() >= 1)

    def test_all_land_raises(self):
        elev = np.full((4, 4), 10.0)
        with pytest.raises(og.EmptyGraphError):
            build_snapshot(_bundle(bathymetry=Bathymetry(elev)), GraphConfig(), t=0)

    def test_every_node_has_self_loop(self):
        snap = build_snapshot(_bundle(), GraphConfig(), t=3)
        selfs = snap.edge_kind == og.EDGE_SELF_LOOP
        assert np.array_equal(np.sort(snap.edge_dst[selfs]), np.arange(snap.n_nodes))
        assert np.array_equal(snap.edge_src[selfs], snap.edge_dst[selfs])

    def test_no_duplicate_edges(self):
        snap = build_snapshot(_bundle(), GraphConfig(), t=3)
        pairs = set(zip(snap.edge_src.tolist(), snap.edge_dst.tolist()))
        assert len(pairs) == snap.n_edges

    def test_matches_brute_force(self):
        bundle = _bundle(mask_prob=0.4, L=4, G=4, D=2, seed=7)
        cfg = GraphConfig(delta=1, depth_radius=1, completeness_threshold=0.4,
                          hub_radius_factor=2, max_hubs_per_node=5)
        snap = build_snapshot(bundle, cfg, t=3)
        ocean = bundle.bathymetry.ocean_mask(bundle.do.depth_levels)
        cobs = completeness_field(bundle.do, cfg.half_window)[:, :, :, 3]
        got = set()
        for e in range(snap.n_edges):
            si, sj, sd = snap.nodes[snap.edge_src[e]]
            di, dj, dd = snap.nodes[snap.edge_dst[e]]
            got.add((int(si), int(sj), int(sd), int(di), int(dj), int(dd),
                     int(snap.edge_kind[e])))
        expected = set()
        for i, j, d in np.argwhere(ocean):
            n = NodeKey(int(i), int(j), int(d), 3)
            expected.add((n.i, n.j, n.d, n.i, n.j, n.d, og.EDGE_SELF_LOOP))
            for m in proximity_neighbors(n, ocean, cfg):
                expected.add((m.i, m.j, m.d, n.i, n.j, n.d, og.EDGE_PROXIMITY))
            for m in information_hubs(n, cobs, ocean, cfg):
                expected.add((m.i, m.j, m.d, n.i, n.j, n.d, og.EDGE_HUB))
        assert got == expected

    def test_deterministic_and_worker_independent(self):
        b1 = build_snapshot(_bundle(seed=9), GraphConfig(), t=2, workers=1)
        b2 = build_snapshot(_bundle(seed=9), GraphConfig(), t=2, workers=4)
        assert b1.nodes.tobytes() == b2.nodes.tobytes()
        assert b1.edge_src.tobytes() == b2.edge_src.tobytes()
        assert b1.edge_dst.tobytes() == b2.edge_dst.tobytes()
        assert b1.edge_features.tobytes() == b2.edge_features.tobytes()

    def test_csv_export(self, tmp_path):
        snap = build_snapshot(_bundle(), GraphConfig(), t=1)
        out = tmp_path / "edges.csv"
        snap.export_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("src_i,src_j,src_d,dst_i")
        assert len(lines) == snap.n_edges + 1
