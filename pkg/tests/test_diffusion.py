import math

import numpy as np
import pytest

from circuitscope import tensor as T
from circuitscope.checkpoint import CheckpointError, decode_params, encode_params, load_checkpoint, save_checkpoint
from circuitscope.diffusion import (
    TrainingDivergedError,
    cosine_schedule,
    p_sample_loop,
    prediction_accuracy,
    q_sample,
    scale_timesteps,
    train,
)
from circuitscope.estimator import DiffusionDenoiser, check_images
from circuitscope.interventions import InterventionError, InterventionSpec
from circuitscope.unet import LAYER_GROUPS, UNet, UNetConfig

TINY = UNetConfig(image_size=8, channels=3, base_channels=8, hidden_dim=8, time_embed_dim=8, norm_groups=4, attn_resolution=4)


@pytest.fixture(scope="module")
def tiny_model():
    return UNet(TINY, seed=5)


@pytest.fixture(scope="module")
def tiny_images():
    return np.random.default_rng(0).uniform(-1, 1, (6, 3, 8, 8)).astype(np.float32)


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("T_", [100, 200, 1000])
def test_schedule_invariants(T_):
    s = cosine_schedule(T_)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] > 0.999 and s.alpha_bar[-1] < 0.01
    assert np.all(s.beta > 0) and np.all(s.beta <= 0.999)


def test_schedule_normalized_at_zero():
    assert cosine_schedule(1000).alpha_bar[0] == pytest.approx(1.0, abs=1e-7)


def test_schedule_matches_formula_midway():
    f = lambda t: math.cos(((t / 1000 + 0.008) / 1.008) * math.pi / 2) ** 2
    assert cosine_schedule(1000).alpha_bar[500] == pytest.approx(f(500) / f(0), abs=1e-6)


def test_schedule_rejects_tiny_T():
    with pytest.raises(ValueError):
        cosine_schedule(1)


def test_timestep_scaling():
    assert scale_timesteps([100, 300, 600, 900], 1000) == [100, 300, 600, 900]
    assert scale_timesteps([100, 300, 600, 900], 200) == [20, 60, 120, 180]


# ---------------------------------------------------------------- q_sample


def test_q_sample_limits():
    s = cosine_schedule(1000)
    x0 = np.full((2, 3), 0.7, np.float32)
    eps = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_allclose(q_sample(x0, 0, eps, s), x0, atol=1e-3)
    np.testing.assert_allclose(q_sample(x0, 999, eps, s), eps, atol=5e-3)


def test_q_sample_monte_carlo_moments():
    s = cosine_schedule(200)
    t, n = 80, 10_000
    x0 = np.full((n, 1), 0.6)
    eps = np.random.default_rng(2).standard_normal((n, 1))
    out = q_sample(x0, t, eps, s)[:, 0]
    ab = s.alpha_bar[t]
    mean_sigma = math.sqrt((1 - ab) / n)
    assert abs(out.mean() - math.sqrt(ab) * 0.6) < 3 * mean_sigma
    var_sigma = (1 - ab) * math.sqrt(2 / (n - 1))
    assert abs(out.var(ddof=1) - (1 - ab)) < 3 * var_sigma


def test_q_sample_superposition():
    s = cosine_schedule(100)
    rng = np.random.default_rng(3)
    a0, b0, ea, eb = (rng.standard_normal((4, 5)).astype(np.float32) for _ in range(4))
    lhs = q_sample(a0 + b0, 40, ea + eb, s)
    rhs = q_sample(a0, 40, ea, s) + q_sample(b0, 40, eb, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_q_sample_errors():
    s = cosine_schedule(10)
    with pytest.raises(IndexError):
        q_sample(np.zeros(2), 10, np.zeros(2), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 1, np.zeros(3), s)


# ---------------------------------------------------------------- U-Net


def test_forward_shape(tiny_model, tiny_images):
    assert tiny_model.predict(tiny_images, 3).shape == tiny_images.shape


def test_attention_hooks_give_eight_head_records(tiny_model, tiny_images):
    hooks = tiny_model.hooks()
    for layer in tiny_model.attention_layers:
        hooks.subscribe(layer, "attention")
    tiny_model.predict(tiny_images[:2], 7, hooks=hooks)
    assert len(hooks.records) == 8
    assert sorted(r.head for r in hooks.records) == list(range(8))
    for r in hooks.records:
        np.testing.assert_allclose(r.payload.sum(-1), 1.0, atol=1e-5)


def test_every_subscribed_hook_fires_once(tiny_model, tiny_images):
    hooks = tiny_model.hooks()
    for g in LAYER_GROUPS:
        hooks.subscribe(g)
    tiny_model.predict(tiny_images[:2], 7, hooks=hooks)
    assert sorted(r.name for r in hooks.records) == sorted(LAYER_GROUPS)


def test_hooks_do_not_change_output(tiny_model, tiny_images):
    hooks = tiny_model.hooks()
    for name, kind in tiny_model.capture_points:
        hooks.subscribe(name, kind)
    np.testing.assert_array_equal(tiny_model.predict(tiny_images, 4), tiny_model.predict(tiny_images, 4, hooks=hooks))


def test_unknown_hook_name(tiny_model):
    with pytest.raises(KeyError):
        tiny_model.hooks().subscribe("no_such_layer")


@pytest.mark.parametrize(
    "spec",
    [
        InterventionSpec.scale_features("middle", 1.0),
        InterventionSpec.scale_features("middle.attn", 1.0, head=3),
        InterventionSpec.perturb("encoder_middle.attn", 0.0),
        InterventionSpec.perturb("decoder_middle.attn", 0.0, head=5),
    ],
)
def test_identity_interventions_bit_identical(tiny_model, tiny_images, spec):
    np.testing.assert_array_equal(
        tiny_model.predict(tiny_images, 9), tiny_model.predict(tiny_images, 9, intervention=spec)
    )


def test_ablation_changes_output(tiny_model, tiny_images):
    base = tiny_model.predict(tiny_images, 9)
    for g in LAYER_GROUPS:
        assert not np.array_equal(base, tiny_model.predict(tiny_images, 9, intervention=InterventionSpec.ablate(g)))


def test_intervention_target_not_found(tiny_model, tiny_images):
    with pytest.raises(InterventionError):
        tiny_model.predict(tiny_images, 1, intervention=InterventionSpec.ablate("nowhere"))
    with pytest.raises(InterventionError):
        tiny_model.predict(tiny_images, 1, intervention=InterventionSpec.ablate("middle.attn", head=0))


def test_config_layout_validation():
    assert UNetConfig().total_heads == 8
    with pytest.raises(ValueError):
        UNetConfig(attention_layout=(("middle", 2), ("middle", 2)))
    with pytest.raises(ValueError):
        UNetConfig(hidden_dim=2)


# ---------------------------------------------------------------- training


def test_zero_lr_leaves_parameters(tiny_images):
    model = UNet(TINY, seed=1)
    before = {k: v.data.copy() for k, v in model.params.items()}
    train(tiny_images, TINY, cosine_schedule(20), steps=1, lr=0.0, seed=0, batch_size=2, model=model)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_training_deterministic(tiny_images):
    s = cosine_schedule(20)
    _, a = train(tiny_images, TINY, s, steps=3, seed=4, batch_size=2)
    _, b = train(tiny_images, TINY, s, steps=3, seed=4, batch_size=2)
    assert a == b and len(a) == 3


def test_training_divergence_reported(tiny_images):
    bad = tiny_images.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(bad[:1], TINY, cosine_schedule(20), steps=2, seed=0, batch_size=1)


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train(np.zeros((0, 3, 8, 8)), TINY, cosine_schedule(20), steps=1)


# ---------------------------------------------------------------- sampling and accuracy


def test_sampling_empty_and_finite(tiny_model):
    s = cosine_schedule(10)
    assert p_sample_loop(tiny_model, s, 0).shape == (0, 3, 8, 8)
    out = p_sample_loop(tiny_model, s, 3, seed=2)
    assert out.shape == (3, 3, 8, 8) and np.all(np.isfinite(out))
    assert out.min() >= -1 and out.max() <= 1


def test_accuracy_of_perfect_and_null_predictors(tiny_images):
    s = cosine_schedule(50)
    t = 25
    ab = s.alpha_bar[t]

    def oracle(x_t, tt):
        # the set holds one image, so x0 is known and eps can be recovered exactly
        return (x_t.astype(np.float64) - math.sqrt(ab) * tiny_images[0]) / math.sqrt(1 - ab)

    assert prediction_accuracy(oracle, tiny_images[:1], t, 8, s, seed=1) == pytest.approx(1.0, abs=1e-5)
    zeros = lambda x_t, tt: np.zeros_like(x_t)
    assert prediction_accuracy(zeros, tiny_images, t, 64, s, seed=1) == pytest.approx(0.0, abs=0.02)


def test_accuracy_deterministic(tiny_model, tiny_images):
    s = cosine_schedule(20)
    a = prediction_accuracy(tiny_model, tiny_images, 10, 4, s, seed=3)
    assert a == prediction_accuracy(tiny_model, tiny_images, 10, 4, s, seed=3)
    assert 0.0 <= a <= 1.0


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_images):
    save_checkpoint(tiny_model, tmp_path / "m.dmck")
    back = load_checkpoint(tmp_path / "m.dmck", TINY)
    np.testing.assert_array_equal(back.predict(tiny_images, 5), tiny_model.predict(tiny_images, 5))


def test_checkpoint_layout():
    blob = encode_params({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert blob[:4] == b"DMCK" and blob[4:6] == (1).to_bytes(2, "little")
    assert len(blob) == 6 + 4 + 1 + 4 + 8 + 24
    np.testing.assert_array_equal(decode_params(blob)["w"], np.arange(6).reshape(2, 3))


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:4] + b"\x09\x00" + b[6:], lambda b: b[:-3]])
def test_checkpoint_corruption(mutate):
    blob = encode_params({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(CheckpointError):
        decode_params(mutate(blob))


# ---------------------------------------------------------------- estimator


def test_estimator_params_round_trip():
    est = DiffusionDenoiser(base_channels=8, steps=3)
    params = est.get_params()
    assert params["base_channels"] == 8 and params["steps"] == 3
    clone = DiffusionDenoiser(**params)
    assert clone.get_params() == params


def test_estimator_fit_predict_score(tiny_images):
    est = DiffusionDenoiser(
        image_size=8, base_channels=8, hidden_dim=8, time_embed_dim=8, attn_resolution=4, timesteps=20, steps=2, batch_size=2
    )
    est.set_params(random_state=3)
    with pytest.raises(Exception):
        est.predict(tiny_images, 1)
    est.fit(tiny_images)
    assert est.predict(tiny_images, 4).shape == tiny_images.shape
    assert 0.0 <= est.score(tiny_images, n=4) <= 1.0
    assert len(est.loss_curve_) == 2


def test_check_images_validation():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 3, 8)))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 1, 8, 8)), channels=3)
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 8, 8), np.nan))
