import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motvla import probe
from motvla.model import scene_batch
from motvla.probe import (IncomparableConfigsError, ProbeDisabledError, cosine, detection_score,
                          group_cosine, map_score)
from motvla.selfcheck import micro_config, micro_model
from motvla.worldgen import generate_scene

vec = arrays(np.float64, 5, elements=st.floats(-10, 10))


def test_cosine_examples():
    assert cosine([1.0, 0.0], [1.0, 1.0])[0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine([1.0, 2.0], [1.0, 2.0]) == (pytest.approx(1.0), False)
    assert cosine([1.0, 0.0], [0.0, 3.0]) == (0.0, False)
    assert cosine([0.0, 0.0], [1.0, 0.0]) == (0.0, True)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_symmetric_scale_invariant_bounded(v, w, a):
    c, deg = cosine(v, w)
    assert -1.0 <= c <= 1.0
    assert cosine(w, v)[0] == pytest.approx(c, abs=1e-12)
    if not deg and np.linalg.norm(a * v) > 0:
        assert cosine(a * v, w)[0] == pytest.approx(c, abs=1e-9)


def test_group_cosine_pools_then_compares():
    und = np.zeros((1, 3, 2))
    und[0, :, 0] = [1.0, 2.0, 3.0]                          # pooled (2, 0)
    per = np.array([[[1.0, 1.0], [1.0, 1.0]]])             # pooled (1, 1)
    act = np.array([[[0.0, 0.0]]])
    recs = group_cosine({"und": [und], "per": [per], "act": [act]}, "mot", 3, 7)
    assert len(recs) == 1
    r = recs[0]
    assert r.layer == 1 and r.config == "mot" and r.seed == 3 and r.step == 7
    assert r.cos_und_per == pytest.approx(1 / math.sqrt(2))
    assert r.cos_und_act == 0.0 and r.degenerate


def test_group_cosine_requires_snapshots():
    with pytest.raises(ProbeDisabledError):
        group_cosine(None)
    with pytest.raises(ProbeDisabledError):
        group_cosine({"und": [], "per": [], "act": []})


def test_probe_curves_defined_for_every_layer():
    model = micro_model(0, layers=3)
    scenes = [generate_scene(s) for s in range(2)]
    recs = probe.probe_batch(model, scenes, "mot", 0)
    assert [r.layer for r in recs] == [1, 2, 3]
    assert all(-1 <= r.cos_und_per <= 1 and not r.degenerate for r in recs)


def _brute_matches(allowed):
    n_p, n_g = allowed.shape
    best = 0
    for k in range(min(n_p, n_g) + 1):
        for rows in itertools.combinations(range(n_p), k):
            for cols in itertools.permutations(range(n_g), k):
                if all(allowed[r, c] for r, c in zip(rows, cols)):
                    best = max(best, k)
    return best


def test_detection_score_two_object_scene_matches_enumeration():
    gt = np.array([[0.0, 0.0, 2, 4, 0, 0, 0, 0], [1.2, 0.0, 2, 4, 0, 0, 0, 0]])
    pred = np.array([[0.6, 0.0], [2.5, 0.0], [0.3, 0.1]])
    cls = np.array([0, 0, 1])
    want = []
    for t in probe.DET_THRESHOLDS:
        d = np.linalg.norm(pred[:, None] - gt[None, :, :2], axis=-1)
        allowed = (d <= t) & (cls[:, None] == 0)
        want.append(_brute_matches(allowed) / 3)
    assert detection_score([pred], [cls], [gt]) == pytest.approx(np.mean(want), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_detection_matching_is_maximum(seed):
    rng = np.random.default_rng(seed)
    allowed = rng.random((rng.integers(0, 5), rng.integers(0, 5))) < 0.5
    assert probe._matched(allowed) == _brute_matches(allowed)


def test_perfect_stubs_score_one():
    scenes = [generate_scene(s) for s in range(6)]
    boxes = [s.agents[:, :5] for s in scenes]
    classes = [s.agents[:, 7].astype(int) for s in scenes]
    assert detection_score(boxes, classes, [s.agents for s in scenes]) == 1.0
    assert map_score([s.lanes for s in scenes], [s.lane_classes for s in scenes],
                     [s.lanes for s in scenes], [s.lane_classes for s in scenes]) == 1.0
    assert detection_score([np.zeros((0, 5))], [np.zeros(0, int)], [np.zeros((0, 8))]) == 1.0
    assert detection_score([np.zeros((0, 5))], [np.zeros(0, int)], [scenes[0].agents]) == 0.0


def test_evaluate_is_finite_and_side_effect_free():
    model = micro_model(1)
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    scenes = [generate_scene(s) for s in range(3)]
    m = probe.evaluate(model, scenes, euler_steps=2)
    assert {"l2_1s", "l2_2s", "l2_3s", "avg_l2", "collision_rate", "caption_ppl"} <= set(m)
    assert all(np.isfinite(v) for v in m.values())
    assert 0.0 <= m["collision_rate"] <= 100.0
    assert {k: v.tobytes() for k, v in model.state_dict().items()} == before
    assert probe.evaluate(model, scenes, euler_steps=2) == m


def test_incomparable_configs_rejected():
    a, b = micro_config(d=16), micro_config(d=8)
    with pytest.raises(IncomparableConfigsError):
        probe._check_comparable({"mot": a, "shared": b})


def test_interference_experiment_files_deterministic(tmp_path):
    from motvla.perception import PerceptionConfig
    from motvla.training import default_plan
    from motvla.worldgen import dataset

    ds = dataset(12, 0)
    base = micro_config()
    base.perception = PerceptionConfig(d_q=4, n_det=6, n_map=6, samples=1, occ_grid=4, d_o=4,
                                       blocks_before=1, blocks_after=1)
    plans = {1: default_plan(1, epochs=1, steps_per_epoch=1, batch=2),
             2: default_plan(2, epochs=1, steps_per_epoch=1, batch=2)}
    outs = []
    for run in ("a", "b"):
        runs = probe.interference_experiment(base, ds, (0,), tmp_path / run, plans, euler_steps=1)
        outs.append({f: (tmp_path / run / f).read_bytes()
                     for f in ("probe.csv", "metrics.csv", "forgetting.csv", "probe_cosine.svg")})
    assert outs[0] == outs[1]
    header = outs[0]["probe.csv"].decode().splitlines()[0]
    assert header == "config,seed,layer,cos_und_per,cos_und_act"
    assert outs[0]["forgetting.csv"].decode().startswith("config,seed,stage,general_nll,driving_nll")
    assert outs[0]["metrics.csv"].decode().startswith("config,seed,split,metric,value")
    assert outs[0]["probe_cosine.svg"].startswith(b"<svg")
    s = probe.summarize(runs)
    assert len(s["shared_rising"]) == 1 and np.isfinite(s["cos_gap"])
