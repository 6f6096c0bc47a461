import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvla import worldgen
from motvla.model import EmptyObjectiveError, caption_batch, compute_losses, scene_batch, total_loss
from motvla.mot import PROJECTIONS
from motvla.numerics import RankError, Tape, Tensor, backward, checkpoint, finite_diff_check
from motvla.model import DrivingModel
from motvla.perception import PerceptionConfig
from motvla.selfcheck import GRADCHECK_SCENES, micro_config, micro_model
from motvla.vocab import Vocabulary
from motvla.training import (AdamW, AdamState, EmaState, LoraAdapter, StageOrderError, StagePlan, adamw_step,
                             attach_lora, clip_global_norm, default_plan, ema_swap, ema_update, load_stage,
                             lora_apply, lora_merge, param_group, run_stage, trainable)

FAST = dict(epochs=2, steps_per_epoch=2, batch=2)


@pytest.fixture(scope="module")
def scenes():
    return worldgen.dataset(12, 0).split("train")


def _fresh(seed=0):
    cfg = micro_config()
    # room for every agent and lane a generated scene can hold
    cfg.perception = PerceptionConfig(d_q=4, n_det=6, n_map=6, samples=1, occ_grid=4, d_o=4,
                                      blocks_before=1, blocks_after=1)
    return DrivingModel(cfg, Vocabulary(), seed=seed)


# --- objective ----------------------------------------------------------------

def test_total_loss_examples():
    terms = {"ar": Tensor(np.array(0.5)), "per": Tensor(np.array(0.2)), "act": Tensor(np.array(0.3))}
    assert float(total_loss(terms, {"ar": 1, "per": 1, "act": 1}).data) == pytest.approx(1.0)
    assert float(total_loss(terms, {"ar": 2, "per": 0, "act": 0}).data) == pytest.approx(1.0)
    with pytest.raises(EmptyObjectiveError):
        total_loss(terms, enabled=())


def test_zero_weight_term_gives_zero_gradient(scenes):
    model = _fresh()
    batch = scene_batch(scenes[:2], model.vocab, model.cfg)
    params = model.parameters()
    with Tape() as tape:
        loss = compute_losses(model, batch, ("ar", "per", "act"), {"ar": 2.0, "per": 0.0, "act": 0.0})
    grads = backward(tape, loss.total, params)
    for name, g in grads.items():
        if name.startswith(("perc.", "act.")):
            assert not g.any(), name


def test_total_loss_gradcheck_sample():
    # a slice of every group; the full sweep is an acceptance criterion
    model = micro_model()
    batch = scene_batch([worldgen.generate_scene(s) for s in GRADCHECK_SCENES], model.vocab, model.cfg)
    names = ["enc.ego.b", "mot.layer0.und.ln_attn_g", "mot.layer1.per.b2", "mot.layer0.act.ln_ffn_b",
             "act.vel_head.b", "perc.lift.ego.b"]
    allp = model.parameters()
    params = {n: allp[n] for n in names}
    rep = finite_diff_check(lambda: compute_losses(model, batch, ("ar", "per", "act", "motion")).total, params)
    assert rep.passed, rep.summary()


# --- AdamW ----------------------------------------------------------------------

def test_adamw_zero_grad_zero_decay():
    p = Tensor(np.array([1.0, -2.0]))
    st_ = AdamState(np.zeros(2), np.zeros(2))
    adamw_step(p, np.zeros(2), st_, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_quadratic():
    p = Tensor(np.array(1.0))
    st_ = AdamState(np.zeros(()), np.zeros(()))
    adamw_step(p, p.data.copy(), st_, lr=0.1)
    assert p.data < 1.0


def test_adamw_two_step_trace():
    # independent recurrence for f(w) = w^2 / 2, grads equal w
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    w, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        g = w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    p = Tensor(np.array(1.0))
    st_ = AdamState(np.zeros(()), np.zeros(()))
    for _ in range(2):
        adamw_step(p, p.data.copy(), st_, lr=lr)
    assert float(p.data) == pytest.approx(w, abs=1e-15)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)[0] == pytest.approx(1.0)


# --- LoRA ------------------------------------------------------------------------

def test_lora_zero_init_is_identity():
    w = Tensor(np.random.default_rng(0).standard_normal((6, 6)))
    ad = LoraAdapter.init(6, 6, 2, 4.0, np.random.default_rng(1))
    assert lora_apply(ad, w).data.tobytes() == w.data.tobytes()


def test_lora_rank_one_outer_product():
    w = Tensor(np.zeros((3, 3)))
    e1 = np.zeros((3, 1))
    e1[0] = 1.0
    ad = LoraAdapter(Tensor(e1), Tensor(e1.T.copy()), alpha=1.0)
    np.testing.assert_array_equal(lora_apply(ad, w).data, e1 @ e1.T)


def test_lora_rank_errors():
    with pytest.raises(RankError):
        LoraAdapter.init(4, 4, 5, 8.0, np.random.default_rng(0))
    with pytest.raises(RankError):
        LoraAdapter.init(4, 4, 0, 8.0, np.random.default_rng(0))


def test_lora_merge_matches_on_the_fly(scenes):
    model = _fresh()
    attach_lora(model.stack, r=2, alpha=4.0, rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for layer in model.stack.layers:
        for ad in layer.experts["und"].lora.values():
            ad.b.data = rng.standard_normal(ad.b.shape) * 0.1
    batch = caption_batch(scenes[:3], model.vocab, model.cfg)
    before = model.forward(batch, with_per=False, with_act=False).logits.data
    for layer in model.stack.layers:
        for n in list(layer.experts["und"].lora):
            lora_merge(layer.experts["und"], n)
    after = model.forward(batch, with_per=False, with_act=False).logits.data
    assert np.abs(before - after).max() <= 1e-12


# --- EMA -----------------------------------------------------------------------------

def test_ema_examples():
    p = {"w": Tensor(np.array([1.0]))}
    ema = EmaState(0.9, {"w": np.array([0.0])})
    ema_update(ema, p)
    assert ema.shadow["w"][0] == pytest.approx(0.1)
    for _ in range(400):
        ema_update(ema, p)
    assert ema.shadow["w"][0] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_ema_swap_involution(seed):
    rng = np.random.default_rng(seed)
    p = {"a": Tensor(rng.standard_normal(3)), "b": Tensor(rng.standard_normal((2, 2)))}
    before = {k: t.data.tobytes() for k, t in p.items()}
    ema = EmaState(0.5, {k: rng.standard_normal(t.shape) for k, t in p.items()})
    ema_swap(ema, p)
    ema_swap(ema, p)
    assert {k: t.data.tobytes() for k, t in p.items()} == before


# --- plans and groups ------------------------------------------------------------------

def test_param_groups_cover_model():
    model = _fresh()
    groups = {param_group(n) for n, _ in model.named_parameters()}
    assert groups == {"und", "per", "act"}
    assert param_group("mot.lm_head.w") == "und"
    assert param_group("mot.layer1.shared.wq") == "shared"


def test_stage2_understanding_lr():
    plan = default_plan(2)
    assert plan.lr("und") == pytest.approx(1e-4)
    assert plan.lr("per") == plan.lr("act") == pytest.approx(2e-4)


def test_default_epochs_and_terms():
    assert [default_plan(s).epochs for s in (1, 2, 3)] == [3, 30, 15]
    assert default_plan(1).terms == ("ar",)
    assert set(default_plan(2).terms) == {"ar", "per", "act"}
    assert set(default_plan(3).terms) == {"per", "act", "motion"}
    assert default_plan(3).lr("und") == 0.0


def test_stage_order_error(scenes):
    with pytest.raises(StageOrderError):
        run_stage(default_plan(2, **FAST), scenes, _fresh())


def test_lora_bases_frozen_in_stage2():
    model = _fresh()
    model.stage_done = 1
    attach_lora(model.stack)
    names = set(trainable(model, default_plan(2)))
    for i in range(len(model.stack.layers)):
        for p in PROJECTIONS:
            assert f"mot.layer{i}.und.{p}" not in names
            assert f"mot.layer{i}.und.{p}.lora_a" in names
            assert f"mot.layer{i}.per.{p}" in names


# --- the runner ---------------------------------------------------------------------------

def _three_stages(scenes, tmp_path, seed=0):
    model = _fresh(seed)
    out = {}
    for s in (1, 2, 3):
        res = run_stage(default_plan(s, **FAST), scenes, model, seed, tmp_path / f"s{s}.csv", tmp_path / f"s{s}.ckpt")
        out[s] = {k: p.data.copy() for k, p in model.named_parameters()}
        out[f"log{s}"] = res.log
    return model, out


def test_three_stage_contracts(scenes, tmp_path):
    model, out = _three_stages(scenes, tmp_path)
    und = [k for k in out[3] if param_group(k) == "und"]
    assert all(out[2][k].tobytes() == out[3][k].tobytes() for k in und)
    frozen1 = [k for k in out[1] if param_group(k) in ("per", "act")]
    init = {k: p.data for k, p in _fresh().named_parameters()}
    assert all(out[1][k].tobytes() == init[k].tobytes() for k in frozen1)
    header = (tmp_path / "s2.csv").read_text().splitlines()[0]
    assert header == "stage,epoch,ar,per,act,motion,lr_und,lr_per,lr_act"
    assert out["log2"][0]["lr_und"] == pytest.approx(1e-4)
    assert out["log3"][-1]["ar"] == ""


def test_checkpoints_deterministic(scenes, tmp_path):
    _three_stages(scenes, tmp_path / "a")
    _three_stages(scenes, tmp_path / "b")
    for s in (1, 2, 3):
        assert (tmp_path / "a" / f"s{s}.ckpt").read_bytes() == (tmp_path / "b" / f"s{s}.ckpt").read_bytes()


def test_lora_zero_init_preserves_caption_loss(scenes):
    model = _fresh()
    run_stage(default_plan(1, **FAST), scenes, model, 0)
    batch = caption_batch(scenes[:4], model.vocab, model.cfg)
    before = compute_losses(model, batch, ("ar",)).terms["ar"]
    run_stage(default_plan(2, **dict(FAST, epochs=0)), scenes, model, 0)     # adapters attached, no step
    assert model.stack.layers[0].experts["und"].lora
    assert compute_losses(model, batch, ("ar",)).terms["ar"] == before


def test_checkpoint_resume_continues(scenes, tmp_path):
    model = _fresh()
    run_stage(default_plan(1, **FAST), scenes, model, 0, checkpoint_path=tmp_path / "s1.ckpt")
    run_stage(default_plan(2, **FAST), scenes, model, 0, checkpoint_path=tmp_path / "s2.ckpt")
    other = _fresh(5)
    load_stage(tmp_path / "s2.ckpt", other)
    assert other.stage_done == 2
    assert any(e.lora for e in other.stack.layers[0].experts.values())
    a = {k: p.data.tobytes() for k, p in model.named_parameters()}
    assert a == {k: p.data.tobytes() for k, p in other.named_parameters()}
    table = checkpoint.load(tmp_path / "s2.ckpt")
    assert int(table["meta.stage"]) == 2 and any(k.startswith("ema.") for k in table)


def test_caption_loss_blind_to_other_experts(scenes):
    model = _fresh()
    batch = caption_batch(scenes[:4], model.vocab, model.cfg)
    before = compute_losses(model, batch, ("ar",)).terms["ar"]
    rng = np.random.default_rng(2)
    for name, p in model.named_parameters():
        if param_group(name) in ("per", "act"):
            p.data = p.data + rng.standard_normal(p.shape)
    assert compute_losses(model, batch, ("ar",)).terms["ar"] == before


def test_plan_validation():
    with pytest.raises(ValueError):
        StagePlan(stage=4, epochs=1, base_lr=1e-3)
    with pytest.raises(ValueError):
        StagePlan(stage=1, epochs=1, base_lr=1e-3, terms=("speech",))
    with pytest.raises(ValueError):
        StagePlan(stage=1, epochs=1, base_lr=1e-3, frozen=("vision",))


def test_adamw_state_per_name():
    opt = AdamW()
    p = {"x": Tensor(np.array([1.0]))}
    opt.step(p, {"x": np.array([1.0])}, {"x": 0.1})
    assert opt.states["x"].t == 1
