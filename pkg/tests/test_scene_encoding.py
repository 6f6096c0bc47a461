import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvla import worldgen
from motvla.model import ModelConfig, scene_batch
from motvla.nn import Affine
from motvla.scene_encoding import (EGO_IN, K_VIS, NON_TEXT, ActionLift, DomainError, EgoHistory,
                                   UnderstandingEncoder, caption_token_ids, encode_ego_and_nav,
                                   encode_understanding, flow_interpolate, make_action_tokens,
                                   pooled_visual_features)
from motvla.vocab import BOS, EOS, PAD, SPECIALS, Vocabulary, VocabularyError, driving_tokens


def test_vocabulary_dense_ids_and_specials():
    v = Vocabulary()
    assert [v.index[t] for t in v.tokens] == list(range(len(v)))
    assert all(v.tokens.count(s) == 1 for s in SPECIALS)
    assert 100 <= len(v) <= 140
    assert set(driving_tokens()) <= set(v.tokens)


def test_vocabulary_errors_and_roundtrip(tmp_path):
    v = Vocabulary()
    with pytest.raises(VocabularyError):
        v.encode(["spaceship"])
    with pytest.raises(ValueError):
        Vocabulary(["a", "a", PAD, BOS, EOS])
    with pytest.raises(ValueError):
        Vocabulary(["a", PAD, BOS])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens
    ids = v.encode("two cars ahead".split())
    assert v.decode(ids) == ["two", "cars", "ahead"]


def test_caption_ids_follow_template():
    v = Vocabulary()
    ids = caption_token_ids(v, "straight", "two cars ahead", 11)
    want = [v.index[w] for w in (BOS, "straight", "two", "cars", "ahead", EOS)] + [v.pad] * 5
    assert ids.tolist() == want
    empty = caption_token_ids(v, "left", "", 4)
    assert empty.tolist() == [v.bos, v.index["left"], v.eos, v.pad]
    with pytest.raises(VocabularyError):
        caption_token_ids(v, "straight", "two spaceships", 11)


def test_encode_understanding_layout():
    v = Vocabulary()
    sc = worldgen.generate_scene(3)
    enc = UnderstandingEncoder.init(len(v), 16, np.random.default_rng(0))
    emb, ids = encode_understanding(sc, v, enc, 11)
    assert emb.shape == (1, K_VIS + 11 + 1, 16)
    assert (ids[0, :K_VIS] == NON_TEXT).all() and ids[0, -1] == NON_TEXT
    text = [v.index[w] for w in [BOS, sc.nav, *sc.caption.split(), EOS]]
    assert ids[0, K_VIS:K_VIS + len(text)].tolist() == text
    assert (ids[0, K_VIS + len(text):-1] == v.pad).all()
    emb2, ids2 = encode_understanding(sc, v, enc, 11)
    assert emb.data.tobytes() == emb2.data.tobytes() and ids.tobytes() == ids2.tobytes()


def test_pooled_visual_features_match_block_means():
    rng = np.random.default_rng(0)
    lvl = rng.standard_normal((2, 8, 8, 3))
    out = pooled_visual_features(lvl)
    assert out.shape == (K_VIS, 3)
    np.testing.assert_allclose(out[5], lvl[1, 0:4, 4:8].mean(axis=(0, 1)))


def _ego_affine(seed=0):
    return Affine.init(EGO_IN, 8, np.random.default_rng(seed))


def test_ego_token_zero_history_is_bias_plus_command_column():
    aff = _ego_affine()
    aff.b.data[...] = np.arange(8.0)
    out = encode_ego_and_nav(EgoHistory(np.zeros((4, 2))), "straight", aff).data[0]
    np.testing.assert_allclose(out, aff.b.data + aff.w.data[8 + 1])


def test_ego_token_matches_direct_affine():
    aff = _ego_affine(3)
    hist = np.array([[-3.0, 0.1], [-2.0, 0.05], [-1.0, 0.0], [0.0, 0.0]])
    for i, nav in enumerate(("left", "straight", "right")):
        x = np.concatenate([hist.reshape(-1), np.eye(3)[i]])
        np.testing.assert_allclose(encode_ego_and_nav(EgoHistory(hist), nav, aff).data[0],
                                   x @ aff.w.data + aff.b.data, atol=1e-14)
    left = encode_ego_and_nav(EgoHistory(hist), "left", aff).data
    right = encode_ego_and_nav(EgoHistory(hist), "right", aff).data
    assert not np.array_equal(left, right)
    shifted = hist + np.array([1.0, 0.0])
    shifted[-1] = 0.0
    moved = encode_ego_and_nav(EgoHistory(shifted), "left", aff).data
    assert not np.array_equal(moved, left)


def test_ego_history_and_nav_errors():
    with pytest.raises(ValueError):
        EgoHistory(np.ones((4, 2)))
    with pytest.raises(ValueError):
        encode_ego_and_nav(EgoHistory(np.zeros((4, 2))), "reverse", _ego_affine())


def test_flow_interpolation_examples():
    s = flow_interpolate(np.array([2.0, 0.0]), 0.25, np.zeros(2))
    np.testing.assert_array_equal(s.x_t, [0.5, 0.0])
    np.testing.assert_array_equal(s.u, [2.0, 0.0])
    with pytest.raises(DomainError):
        flow_interpolate(np.zeros(2), 1.5, np.zeros(2))
    with pytest.raises(DomainError):
        flow_interpolate(np.zeros(2), -0.1, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_flow_endpoints_exact(seed):
    rng = np.random.default_rng(seed)
    x1, x0 = rng.standard_normal((6, 2)) * 3, rng.standard_normal((6, 2))
    np.testing.assert_array_equal(flow_interpolate(x1, 1.0, x0).x_t, x1)
    s0 = flow_interpolate(x1, 0.0, x0)
    np.testing.assert_array_equal(s0.x_t, x0)
    np.testing.assert_array_equal(s0.u, x1 - x0)


def test_action_tokens_shape_and_determinism():
    rng = np.random.default_rng(1)
    lift = ActionLift.init(6, 16, rng)
    x1 = rng.standard_normal((3, 6, 2))
    t = np.array([0.1, 0.5, 0.9])
    a, u, s = make_action_tokens(x1, t, 7, lift)
    b, u2, _ = make_action_tokens(x1, t, 7, lift)
    assert a.shape == (3, 6, 16)
    assert a.data.tobytes() == b.data.tobytes() and u.tobytes() == u2.tobytes()
    np.testing.assert_allclose(u, x1 - s.x0)
    c, _, _ = make_action_tokens(x1, t, 8, lift)
    assert not np.array_equal(a.data, c.data)


def test_scene_batch_layout_constant():
    v = Vocabulary()
    cfg = ModelConfig(d=16)
    b = scene_batch([worldgen.generate_scene(s) for s in range(4)], v, cfg, rng=np.random.default_rng(0))
    assert b.text_ids.shape == (4, cfg.text_len)
    assert b.x_t.shape == (4, cfg.horizon, 2) and b.t.shape == (4,)
    assert np.all((b.t >= 0) & (b.t <= 1))
