"""Objectives, optimizer, schedules, freeze masks and batch mixing."""

import math

import numpy as np
import pytest

import videotext.tensor as T
import videotext.training as tr
from videotext.params import COMPONENT_TAGS, ParameterStore
from videotext.tensor import Tensor, double_precision, finite_diff_check
from videotext.training import (
    Optimizer,
    OptimizerConfig,
    TrainConfig,
    captioning_loss,
    clip_gradients,
    contrastive_loss,
    freeze_mask,
    lr_schedule,
    mix_batches,
    shift_targets,
    total_loss,
)


# --------------------------------------------------------------- contrastive


def test_contrastive_orthonormal_pairs_closed_form():
    # aligned orthonormal pairs at tau=1: per-row softmax over [1, 0]
    v = Tensor(np.eye(2))
    t = Tensor(np.eye(2))
    loss = contrastive_loss(v, t, Tensor(1.0))
    expected = math.log(1.0 + math.exp(-1.0))
    np.testing.assert_allclose(loss.data, [expected], atol=1e-6)


def test_contrastive_uniform_similarity_is_log_b():
    b, d = 4, 8
    row = np.full(d, 1.0 / math.sqrt(d))
    v = Tensor(np.tile(row, (b, 1)))
    t = Tensor(np.tile(row, (b, 1)))
    loss = contrastive_loss(v, t, Tensor(0.5))
    np.testing.assert_allclose(loss.data, [math.log(b)], atol=1e-6)


def test_contrastive_rejects_batch_of_one():
    v = Tensor(np.ones((1, 4)))
    with pytest.raises(ValueError):
        contrastive_loss(v, v, Tensor(1.0))


def test_contrastive_batch_permutation_invariance():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 8))
    t = rng.standard_normal((5, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    base = contrastive_loss(Tensor(v), Tensor(t), Tensor(0.2)).item()
    perm = rng.permutation(5)
    permuted = contrastive_loss(Tensor(v[perm]), Tensor(t[perm]), Tensor(0.2)).item()
    np.testing.assert_allclose(permuted, base, atol=1e-6)


def test_contrastive_decreases_as_true_pair_aligns():
    d = 8
    t = np.zeros((2, d))
    t[0, 0] = t[1, 1] = 1.0
    losses = []
    for alignment in (0.2, 0.5, 0.9):
        v = t.copy()
        v[0] = np.array([alignment] + [math.sqrt(1 - alignment**2)] + [0] * (d - 2))
        losses.append(contrastive_loss(Tensor(v), Tensor(t), Tensor(1.0)).item())
    assert losses[0] > losses[1] > losses[2]


def test_contrastive_gradient_oracle_including_temperature():
    with double_precision():
        rng = np.random.default_rng(1)
        store = ParameterStore()
        store.add("v", rng.standard_normal((3, 6)), "con_pooler")
        store.add("t", rng.standard_normal((3, 6)), "decoder")
        store.add("log_tau", 0.1, "loss")

        def f():
            v = T.l2_normalize(store["v"])
            t = T.l2_normalize(store["t"])
            return contrastive_loss(v, t, T.exp(store["log_tau"]))

        err = finite_diff_check(f, store)
    assert err < 1e-4


# ---------------------------------------------------------------- captioning


def test_captioning_uniform_logits_log_v():
    logits = Tensor(np.zeros((2, 5, 4)))
    targets = np.array([[1, 2, 3, 0, 0], [2, 2, 1, 3, 0]])
    loss = captioning_loss(logits, targets)
    np.testing.assert_allclose(loss.data, [math.log(4)], atol=1e-6)


def test_captioning_confident_logits_near_zero():
    targets = np.array([[1, 2, 3, 0]])
    logits = np.zeros((1, 4, 4))
    for pos, tgt in enumerate(targets[0]):
        logits[0, pos, tgt] = 50.0
    loss = captioning_loss(Tensor(logits), targets)
    assert loss.item() < 1e-6


def test_captioning_ignores_appended_padding():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((2, 4, 8))
    targets = np.array([[1, 2, 0, 0], [3, 4, 5, 0]])
    base = captioning_loss(Tensor(logits), targets).item()
    wide = np.concatenate([logits, rng.standard_normal((2, 3, 8))], axis=1)
    wide_targets = np.concatenate([targets, np.zeros((2, 3), int)], axis=1)
    padded = captioning_loss(Tensor(wide), wide_targets).item()
    np.testing.assert_allclose(padded, base, atol=1e-6)


def test_captioning_all_pad_rejected():
    with pytest.raises(ValueError):
        captioning_loss(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), int))


def test_shift_targets():
    ids = np.array([[1, 5, 6, 2, 3, 0]])
    np.testing.assert_array_equal(shift_targets(ids), [[5, 6, 2, 3, 0, 0]])


# ---------------------------------------------------------------- total loss


def test_total_loss_weighting():
    one = Tensor(1.0)
    np.testing.assert_allclose(total_loss(one, one, 1.0, 2.0).data, [3.0])
    np.testing.assert_allclose(total_loss(Tensor(0.7), one, 0.0, 1.0).data, [1.0])
    np.testing.assert_allclose(total_loss(one, Tensor(0.7), 1.0, 0.0).data, [1.0])


def test_total_loss_rejects_negative_weights():
    one = Tensor(1.0)
    with pytest.raises(ValueError):
        total_loss(one, one, -1.0, 1.0)


# ------------------------------------------------------------------ schedule


def test_lr_schedule_endpoints():
    cfg = OptimizerConfig(base_lr=1e-5, warmup_steps=1000, total_steps=5000)
    assert lr_schedule(0, cfg) == 0.0
    np.testing.assert_allclose(lr_schedule(1000, cfg), 1e-5)
    assert abs(lr_schedule(5000, cfg)) < 1e-12


def test_lr_schedule_linear_warmup():
    cfg = OptimizerConfig(base_lr=2.0, warmup_steps=100, total_steps=200)
    np.testing.assert_allclose(lr_schedule(25, cfg), 0.5)
    np.testing.assert_allclose(lr_schedule(50, cfg), 1.0)


def test_lr_schedule_cosine_midpoint():
    cfg = OptimizerConfig(base_lr=1.0, warmup_steps=0, total_steps=100)
    np.testing.assert_allclose(lr_schedule(50, cfg), 0.5, atol=1e-12)


def test_lr_schedule_rejects_out_of_range_step():
    cfg = OptimizerConfig(total_steps=10, warmup_steps=0)
    with pytest.raises(ValueError):
        lr_schedule(11, cfg)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(warmup_steps=10, total_steps=5)


# ---------------------------------------------------------------------- clip


def test_clip_scales_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}  # norm 5
    norm = clip_gradients(grads, 1.0)
    np.testing.assert_allclose(norm, 5.0)
    np.testing.assert_allclose(grads["a"], [0.6])
    np.testing.assert_allclose(grads["b"], [0.8])


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3])}
    clip_gradients(grads, 1.0)
    np.testing.assert_allclose(grads["a"], [0.3])


# ----------------------------------------------------------------- optimizer


def quadratic_store(x0=5.0):
    store = ParameterStore()
    store.add("x", np.array([x0]), "encoder")
    return store


def test_optimizer_quadratic_convergence():
    store = quadratic_store()
    cfg = OptimizerConfig(
        base_lr=0.1, weight_decay=0.0, warmup_steps=0, total_steps=2000,
        clip_norm=math.inf,
    )
    opt = Optimizer(store, cfg)
    for _ in range(2000):
        x = float(store["x"].data[0])
        opt.step({"x": np.array([2.0 * (x - 1.0)])}, lr=0.1)
    assert abs(float(store["x"].data[0]) - 1.0) < 1e-3


@pytest.fixture
def fp64():
    with double_precision():
        yield


def test_optimizer_matches_hand_computed_adam_trace(fp64):
    # f(x) = x^2/2, grad = x; two steps from x=1 with lr=0.1, no decay
    store = quadratic_store(1.0)
    cfg = OptimizerConfig(
        base_lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.99, eps=1e-8,
        warmup_steps=0, total_steps=10, clip_norm=math.inf,
    )
    opt = Optimizer(store, cfg)

    # step 1: m=0.1*1, v=0.01*1; m_hat=1, v_hat=1 -> x = 1 - 0.1*1/(1+eps)
    opt.step({"x": np.array([1.0])}, lr=0.1)
    x1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(store["x"].data, [x1], rtol=1e-12)

    # step 2 with grad = x1
    g = x1
    m = 0.9 * 0.1 + 0.1 * g
    v = 0.99 * 0.01 + 0.01 * g * g
    m_hat = m / (1.0 - 0.9**2)
    v_hat = v / (1.0 - 0.99**2)
    x2 = x1 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    opt.step({"x": np.array([g])}, lr=0.1)
    np.testing.assert_allclose(store["x"].data, [x2], rtol=1e-10)


def test_optimizer_decoupled_weight_decay_before_moments(fp64):
    store = quadratic_store(2.0)
    cfg = OptimizerConfig(base_lr=0.1, weight_decay=0.5, warmup_steps=0, total_steps=10)
    opt = Optimizer(store, cfg)
    opt.step({"x": np.array([0.0])}, lr=0.1)
    # zero gradient: only the decay term applies (0 / (sqrt(0) + eps) = 0)
    np.testing.assert_allclose(store["x"].data, [2.0 * (1.0 - 0.1 * 0.5)], rtol=1e-12)


def test_optimizer_skips_frozen_parameters():
    store = ParameterStore()
    store.add("enc", np.array([1.0, 2.0]), "encoder")
    store.add("pool", np.array([3.0]), "gen_pooler")
    store.set_frozen({"gen_pooler"})
    before = store["enc"].data.copy()
    opt = Optimizer(store, OptimizerConfig(warmup_steps=0, total_steps=10))
    for _ in range(100):
        opt.step({"enc": np.ones(2), "pool": np.ones(1)}, lr=0.01)
    np.testing.assert_array_equal(store["enc"].data, before)
    assert store["pool"].data[0] != 3.0


def test_optimizer_aborts_on_non_finite_gradient():
    store = quadratic_store()
    opt = Optimizer(store, OptimizerConfig(warmup_steps=0, total_steps=10))
    before = store["x"].data.copy()
    with pytest.raises(FloatingPointError, match="aborted"):
        opt.step({"x": np.array([np.nan])}, lr=0.1)
    np.testing.assert_array_equal(store["x"].data, before)


def test_optimizer_clamps_temperature():
    store = ParameterStore()
    store.add("log_temperature", np.log(0.07), "loss")
    opt = Optimizer(
        store,
        OptimizerConfig(base_lr=10.0, weight_decay=0.0, warmup_steps=0, total_steps=10),
    )
    for _ in range(50):
        opt.step({"log_temperature": np.array([1.0])}, lr=10.0)
    # compare in log space: float32 storage rounds the clamp bounds
    assert float(store["log_temperature"].data[0]) >= math.log(0.01) - 1e-6
    for _ in range(100):
        opt.step({"log_temperature": np.array([-1.0])}, lr=10.0)
    assert float(store["log_temperature"].data[0]) <= math.log(100.0) + 1e-6


# ----------------------------------------------------------------------- ema


def test_ema_single_step_value():
    store = ParameterStore()
    store.add("p", np.array([1.0]), "encoder")
    store.param("p").ema = np.array([0.0])
    store.ema_update(0.99)
    np.testing.assert_allclose(store.param("p").ema, [0.01])


def test_ema_converges_to_constant_parameter():
    store = ParameterStore()
    store.add("p", np.array([2.0]), "encoder")
    store.param("p").ema = np.array([0.0])
    for _ in range(1000):
        store.ema_update(0.99)
    np.testing.assert_allclose(store.param("p").ema, [2.0], atol=1e-4)


def test_ema_decay_validated():
    store = ParameterStore()
    store.add("p", np.array([1.0]), "encoder")
    with pytest.raises(ValueError):
        store.ema_update(1.0)


def test_ema_shadows_receive_no_gradients():
    store = ParameterStore()
    store.add("p", np.array([1.0]), "encoder")
    store.init_ema()
    (store["p"] * 3.0).sum().backward()
    store.ema_update(0.99)
    np.testing.assert_allclose(store.param("p").ema, [1.0])


def test_ema_swap_and_restore():
    store = ParameterStore()
    store.add("p", np.array([1.0], dtype=np.float32), "encoder")
    store.param("p").ema = np.array([9.0])
    saved = store.swap_in_ema()
    np.testing.assert_allclose(store["p"].data, [9.0])
    store.restore(saved)
    np.testing.assert_allclose(store["p"].data, [1.0])


# -------------------------------------------------------------- freeze masks


def test_freeze_mask_ft_includes_all():
    assert freeze_mask("FT") == frozenset(COMPONENT_TAGS)


def test_freeze_mask_frozen_excludes_encoder_decoder():
    mask = freeze_mask("Frozen")
    assert "encoder" not in mask and "decoder" not in mask
    assert {"gen_pooler", "con_pooler", "loss", "task_head"} <= mask


def test_freeze_mask_lit_keeps_decoder():
    mask = freeze_mask("LiT")
    assert "encoder" not in mask
    assert "decoder" in mask


def test_freeze_mask_switches_at_step():
    assert freeze_mask("FrozenThenFT", step=4, switch_step=5) == freeze_mask("Frozen")
    assert freeze_mask("FrozenThenFT", step=5, switch_step=5) == freeze_mask("FT")


def test_freeze_mask_unknown_mode():
    with pytest.raises(ValueError):
        freeze_mask("partial")


# ------------------------------------------------------------------- mixing


def test_mix_ratio_one_is_pure_a():
    stream = mix_batches(["a1", "a2"], ["b1"], 1.0, 4, seed=0)
    batch = next(stream)
    assert len(batch) == 4 and all(x.startswith("a") for x in batch)


def test_mix_seven_three_split():
    stream = mix_batches(list(range(100)), list(range(100, 200)), 0.7, 10, seed=1)
    for _ in range(5):
        batch = next(stream)
        n_a = sum(1 for x in batch if x < 100)
        assert n_a == 7 and len(batch) == 10


def test_mix_deterministic_given_seed():
    a, b = list(range(50)), list(range(50, 100))
    s1 = mix_batches(a, b, 0.5, 128, seed=3)
    s2 = mix_batches(a, b, 0.5, 128, seed=3)
    for _ in range(10):
        assert next(s1) == next(s2)


def test_mix_long_run_ratio_within_one_percent():
    a, b = ["a"], ["b"]
    stream = mix_batches(a, b, 0.7, 10, seed=4)
    n_a = sum(item == "a" for _ in range(1000) for item in next(stream))
    assert abs(n_a / 10000 - 0.7) <= 0.01


def test_mix_empty_source_with_share_rejected():
    with pytest.raises(ValueError):
        next(mix_batches([], ["b"], 0.5, 4, seed=0))


def test_mix_invalid_ratio_rejected():
    with pytest.raises(ValueError):
        next(mix_batches(["a"], ["b"], 1.5, 4, seed=0))


# ------------------------------------------------------------ training loop


def tiny_setup(adaptor="attentional_pooler", seed=0):
    from videotext.model import ModelConfig, VideoTextModel

    cfg = ModelConfig(
        height=16, width=16, patch_h=8, patch_w=8, d_model=16,
        encoder_layers=1, temporal_layers=1, unimodal_layers=1,
        multimodal_layers=1, n_query_gen=4, vocab_size=16, max_text_len=8,
        max_frames=8, n_heads=2, adaptor=adaptor,
    )
    model = VideoTextModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    frames = rng.random((8, 2, 16, 16, 1)).astype(np.float32)
    ids = np.tile([1, 0, 0, 0, 2, 3, 0, 0], (8, 1))
    ids[:, 1] = rng.integers(5, 12, 8)
    ids[:, 2] = rng.integers(5, 12, 8)
    ids[:, 3] = rng.integers(5, 12, 8)
    return model, frames, ids


def constant_batches(frames, ids):
    while True:
        yield {"frames": frames, "ids": ids, "batch_size": frames.shape[0],
               "frames_per_clip": frames.shape[1]}


def test_train_loss_decreases_on_memorizable_set():
    model, frames, ids = tiny_setup()
    opt_cfg = OptimizerConfig(
        base_lr=3e-3, weight_decay=0.0, warmup_steps=20, total_steps=200
    )
    records = tr.train(
        model, constant_batches(frames, ids), opt_cfg,
        TrainConfig(batch_size=8, frames_per_clip=2), 200,
    )
    totals = [r["total"] for r in records]
    means = [np.mean(totals[i : i + 20]) for i in range(0, 200, 20)]
    assert means[-1] < means[0]
    assert means[-1] < means[1]


def test_train_step_records_are_deterministic():
    recs = []
    for _ in range(2):
        model, frames, ids = tiny_setup(seed=3)
        opt_cfg = OptimizerConfig(base_lr=1e-3, warmup_steps=2, total_steps=20)
        recs.append(
            tr.train(model, constant_batches(frames, ids), opt_cfg,
                     TrainConfig(batch_size=8, frames_per_clip=2), 10)
        )
    for r1, r2 in zip(*recs):
        assert tr.format_step_record(r1) == tr.format_step_record(r2)


def test_frozen_mode_keeps_encoder_decoder_checksums():
    model, frames, ids = tiny_setup()
    before = model.store.component_checksums()
    opt_cfg = OptimizerConfig(base_lr=1e-2, warmup_steps=0, total_steps=200)
    tr.train(
        model, constant_batches(frames, ids), opt_cfg,
        TrainConfig(tuning_mode="Frozen", batch_size=8, frames_per_clip=2), 100,
    )
    after = model.store.component_checksums()
    assert after["encoder"] == before["encoder"]
    assert after["decoder"] == before["decoder"]
    assert after["gen_pooler"] != before["gen_pooler"]
    assert after["con_pooler"] != before["con_pooler"]
    assert after["loss"] != before["loss"]


@pytest.mark.parametrize(
    "mode,changed,unchanged",
    [
        ("FT", {"encoder", "decoder", "gen_pooler", "con_pooler", "loss"}, set()),
        (
            "Frozen",
            {"gen_pooler", "con_pooler", "loss"},
            {"encoder", "decoder"},
        ),
        ("LiT", {"decoder", "gen_pooler", "con_pooler", "loss"}, {"encoder"}),
    ],
)
def test_changed_components_match_freeze_mask(mode, changed, unchanged):
    model, frames, ids = tiny_setup()
    before = model.store.component_checksums()
    opt_cfg = OptimizerConfig(base_lr=1e-2, warmup_steps=0, total_steps=200)
    tr.train(
        model, constant_batches(frames, ids), opt_cfg,
        TrainConfig(tuning_mode=mode, batch_size=8, frames_per_clip=2), 100,
    )
    after = model.store.component_checksums()
    for tag in changed:
        assert after[tag] != before[tag], tag
    for tag in unchanged:
        assert after[tag] == before[tag], tag


def test_frozen_then_ft_switches_at_configured_step():
    model, frames, ids = tiny_setup()
    before = model.store.component_checksums()
    opt_cfg = OptimizerConfig(base_lr=1e-2, warmup_steps=0, total_steps=200)
    train_cfg = TrainConfig(
        tuning_mode="FrozenThenFT", switch_step=50, batch_size=8, frames_per_clip=2
    )
    optimizer = Optimizer(model.store, opt_cfg)
    batches = constant_batches(frames, ids)
    for step in range(50):
        tr.train_step(model, optimizer, next(batches), train_cfg, step)
    mid = model.store.component_checksums()
    assert mid["encoder"] == before["encoder"]
    for step in range(50, 100):
        tr.train_step(model, optimizer, next(batches), train_cfg, step)
    after = model.store.component_checksums()
    assert after["encoder"] != before["encoder"]
