import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvla import geometry as geo
from motvla import worldgen
from motvla.action_flow import Trajectory, trajectory_metrics
from motvla.vocab import Vocabulary


def _scene_bytes(sc):
    return {k: v.tobytes() for k, v in sc.to_tensors().items()}, json.dumps(sc.sidecar(), sort_keys=True)


def test_generate_scene_deterministic():
    a, b = worldgen.generate_scene(0), worldgen.generate_scene(0)
    assert _scene_bytes(a) == _scene_bytes(b)
    assert _scene_bytes(a) != _scene_bytes(worldgen.generate_scene(1))


def test_empty_road_is_pure_lane_follow():
    sc = worldgen.generate_scene(5, n_agents=0, road="straight")
    assert len(sc.agents) == 0 and sc.caption == ""
    v = sc.target_velocities
    np.testing.assert_allclose(v, np.tile([sc.ego_speed, 0.0], (worldgen.HORIZON, 1)), atol=1e-12)
    m = trajectory_metrics(Trajectory(sc.expert_trajectory), Trajectory(sc.expert_trajectory), sc.occupancy)
    assert m.collision == 0


def _dense_cover(poly, grid, n=60):
    """Oracle: cells containing any of a dense set of interior sample points."""
    occ = np.zeros((grid, grid), bool)
    u = (np.arange(n) + 0.5) / n
    a, b, d = poly[0], poly[1], poly[3]
    pts = a + u[:, None, None] * (b - a) + u[None, :, None] * (d - a)
    geo.rasterize_points(occ, pts.reshape(-1, 2))
    return occ


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.3, 5), st.floats(0.3, 8), st.floats(-3.2, 3.2))
def test_box_rasterization_covers_interior(cx, cy, w, l, yaw):
    poly = geo.box_corners(cx, cy, w, l, yaw)
    occ = np.zeros((geo.GRID, geo.GRID), bool)
    geo.rasterize_polygon(occ, poly)
    oracle = _dense_cover(poly, geo.GRID)
    assert not (oracle & ~occ).any()
    # every marked cell lies within one cell of the sampled interior
    grown = oracle.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            grown |= np.roll(np.roll(oracle, di, 0), dj, 1)
    assert not (occ & ~grown).any()


def test_agent_straddling_cell_marks_it():
    c = geo.cell_size()
    i, j = 18, 13
    x = -geo.BEV_RANGE + (i + 1) * c          # box centred on the cell's right edge
    y = -geo.BEV_RANGE + (j + 0.5) * c
    agents = np.array([[x, y, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]])
    occ = worldgen.rasterize_occupancy(agents, worldgen.Road(0.0))
    assert occ[i, j] and occ[i + 1, j]


def test_expert_trajectories_collision_free():
    for seed in range(30):
        sc = worldgen.generate_scene(seed)
        assert not geo.trajectory_collides(sc.expert_trajectory, sc.occupancy)
        assert np.all(np.abs(sc.expert_trajectory) <= geo.BEV_RANGE)
        assert np.all(np.abs(sc.agents[:, :2]) <= geo.BEV_RANGE)
        assert 1 <= len(sc.agents) <= 6
        assert sc.nav in worldgen.NAV_COMMANDS
        np.testing.assert_array_equal(sc.ego_history[-1], [0.0, 0.0])


def test_nav_matches_road_curvature():
    for seed in range(20):
        sc = worldgen.generate_scene(seed)
        sign = {"left": 1, "straight": 0, "right": -1}[sc.nav]
        assert np.sign(sc.road_curvature) == sign


def test_captions_tokenize_and_features_finite():
    vocab = Vocabulary()
    for seed in range(40):
        sc = worldgen.generate_scene(seed)
        vocab.encode(sc.caption.split())
        assert all(np.all(np.isfinite(f)) for f in sc.feature_maps)
        assert sc.feature_maps[0].shape[:3] == (2, 16, 16)
        assert sc.feature_maps[1].shape[:3] == (2, 8, 8)


def test_caption_templates():
    car, ped = 0, 2
    agents = np.array([[10, 0, 2, 4, 0, 0, 0, car], [12, 1, 2, 4, 0, 0, 0, car], [0, 8, 1, 1, 0, 0, 0, ped]], float)
    assert worldgen.render_caption(agents) == "two cars ahead and pedestrian left"
    assert worldgen.render_caption(np.zeros((0, 8))) == ""


def test_dataset_splits():
    ds = worldgen.dataset(10, 0)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (8, 1, 1)
    assert not (set(ds.train) & set(ds.val) | set(ds.train) & set(ds.test) | set(ds.val) & set(ds.test))
    assert sorted(ds.train + ds.val + ds.test) == list(range(10))
    assert [s.seed for s in ds.scenes] == list(range(10))
    with pytest.raises(ValueError):
        worldgen.dataset(9)


@pytest.mark.parametrize("n", [10, 37, 512])
def test_split_sizes_and_disjoint(n):
    tr, va, te = worldgen.split_indices(n, 3)
    assert len(tr) == round(0.8 * n) and len(va) == round(0.1 * n)
    assert sorted(tr + va + te) == list(range(n))


def test_default_scene_count_matches_config():
    from motvla.config import DEFAULTS
    assert DEFAULTS["data"]["n_scenes"] == 512


def test_cache_roundtrip_and_identity(tmp_path):
    ds = worldgen.dataset(10, 4)
    files = worldgen.write_cache(ds, tmp_path / "a")
    worldgen.write_cache(ds, tmp_path / "b")
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    back = worldgen.read_cache(tmp_path / "a")
    assert (back.train, back.val, back.test) == (ds.train, ds.val, ds.test)
    for x, y in zip(ds.scenes, back.scenes):
        assert _scene_bytes(x) == _scene_bytes(y)
