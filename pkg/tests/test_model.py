from __future__ import annotations

import numpy as np
import pytest
from conftest import TINY_MODEL

from musicflow.autodiff import ops
from musicflow.autodiff.array import Array, Tape, backward
from musicflow.model.vector_field import ModelConfig, VectorField, alibi_bias, conv_positional, timestep_embedding
from musicflow.utils.settings import Conditioning


def conditions(model: VectorField, make_features, rng, batch: int = 2, n_frames: int = 125):
    return model.encoder([make_features(rng, n_frames=n_frames) for _ in range(batch)])


def noise(rng, batch: int = 2, n_frames: int = 125) -> np.ndarray:
    return rng.standard_normal((batch, n_frames, 16)).astype(np.float32)


# Positional pieces
def test_alibi_example():
    bias = alibi_bias(3, slopes=np.array([1.0]))
    assert bias[0, 0].tolist() == [0.0, -1.0, -2.0]


def test_alibi_is_symmetric_with_zero_diagonal():
    bias = alibi_bias(10, heads=4)
    assert bias.shape == (4, 10, 10)
    assert np.array_equal(bias, bias.transpose(0, 2, 1))
    assert not np.diagonal(bias, axis1=1, axis2=2).any()
    assert np.allclose(-bias[:, 0, 1], ModelConfig(heads=4, model_dim=32).alibi_slopes)


def test_alibi_slopes_are_geometric():
    slopes = ModelConfig(heads=8, model_dim=64).alibi_slopes
    assert slopes[0] == pytest.approx(0.5)
    assert slopes[-1] == pytest.approx(2.0**-8)
    assert np.allclose(slopes[1:] / slopes[:-1], slopes[1] / slopes[0])


def test_zero_conv_weights_are_identity():
    x = Array(np.random.default_rng(0).standard_normal((2, 9, 4)))
    assert np.array_equal(conv_positional(x, Array(np.zeros((5, 4)))).data, x.data)


def test_centre_tap_preserves_an_impulse():
    x = np.zeros((1, 9, 3))
    x[0, 4] = 1.0
    weight = np.zeros((3, 3))
    weight[1] = 1.0
    assert np.array_equal(ops.conv1d_depthwise(Array(x), Array(weight)).data, x)


def test_timestep_embedding_at_zero():
    emb = timestep_embedding(np.array([0.0, 0.5]), 8)
    assert emb.shape == (2, 8)
    assert np.array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])


# Config
@pytest.mark.parametrize(
    "kwargs",
    [{"layers": 3}, {"layers": 0}, {"conv_pos_kernel": 4}, {"heads": 3}, {"cross_attention_every": 0}],
)
def test_model_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**{**TINY_MODEL, **kwargs})


def test_model_config_array_round_trip():
    cfg = ModelConfig(**TINY_MODEL, conditioning="cross_attention")
    assert ModelConfig.from_array(cfg.to_array()) == cfg


# Forward pass
def test_output_shape_and_determinism(tiny_model, make_features, rng):
    cs = conditions(tiny_model, make_features, rng)
    z = noise(rng)
    out = tiny_model.predict(z, 0.3, cs)
    assert out.shape == (2, 125, 16)
    assert np.all(np.isfinite(out))
    assert np.array_equal(out, tiny_model.predict(z, 0.3, cs))
    assert np.array_equal(out, VectorField(ModelConfig(**TINY_MODEL), seed=0).predict(z, 0.3, cs))


def test_per_element_times(tiny_model, make_features, rng):
    cs = conditions(tiny_model, make_features, rng)
    z = noise(rng)
    both = tiny_model.predict(z, np.array([0.2, 0.7]), cs)
    first = tiny_model.predict(z, 0.2, cs)
    assert np.allclose(both[0], first[0], atol=1e-5)


def test_attention_rows_sum_to_one(tiny_model, make_features, rng):
    tiny_model.predict(noise(rng, 1, 20), 0.5, conditions(tiny_model, make_features, rng, 1, 20))
    weights = tiny_model.blocks[0].self_attn.last_weights
    assert weights.shape == (1, 2, 20, 20)
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)
    cross = tiny_model.blocks[0].cross_attn.last_weights
    assert cross.shape == (1, 2, 20, TINY_MODEL["style_tokens"])


def test_skip_connections(tiny_model):
    d = TINY_MODEL["model_dim"]
    assert len(tiny_model.skip_proj) == TINY_MODEL["layers"] // 2
    assert all(proj.weight.shape == (2 * d, d) for proj in tiny_model.skip_proj)
    assert len(tiny_model.blocks) == TINY_MODEL["layers"]


@pytest.mark.parametrize("conditioning", list(Conditioning))
def test_dropped_conditions_do_not_leak(conditioning, make_features):
    model = VectorField(ModelConfig(**TINY_MODEL, conditioning=conditioning), seed=1)
    rng = np.random.default_rng(4)
    z = noise(rng, 1, 30)
    first = model.encoder([make_features(rng, n_frames=30)]).without_all()
    second = model.encoder([make_features(rng, n_frames=30)]).without_all()
    assert np.array_equal(model.predict(z, 0.4, first), model.predict(z, 0.4, second))


def test_conditions_change_the_output(tiny_model, make_features, rng):
    cs = conditions(tiny_model, make_features, rng, 1, 30)
    z = noise(rng, 1, 30)
    assert not np.allclose(tiny_model.predict(z, 0.4, cs), tiny_model.predict(z, 0.4, cs.without_all()))


def test_time_outside_the_unit_interval_is_rejected(tiny_model, make_features, rng):
    cs = conditions(tiny_model, make_features, rng, 1, 10)
    with pytest.raises(ValueError):
        tiny_model(noise(rng, 1, 10), 1.5, cs)


def test_save_and_load_are_bit_exact(tiny_model, make_features, rng, tmp_path):
    loaded = VectorField.load(tiny_model.save(tmp_path / "model.bin"))
    assert loaded.cfg == tiny_model.cfg
    for name, value in tiny_model.params.state().items():
        assert np.array_equal(loaded.params[name].data, value)
    cs = conditions(tiny_model, make_features, rng, 1, 20)
    z = noise(rng, 1, 20)
    assert np.array_equal(loaded.predict(z, 0.6, cs), tiny_model.predict(z, 0.6, cs))


# Gradients
def test_parameter_gradients_match_finite_differences(make_features):
    model = VectorField(ModelConfig(**TINY_MODEL), seed=2)
    model.params.astype(np.float64)
    rng = np.random.default_rng(5)
    cs = model.encoder([make_features(rng, n_frames=8)])
    z = rng.standard_normal((1, 8, 16))
    readout = rng.standard_normal((1, 8, 16))

    def loss() -> Array:
        return ops.sum(ops.mul(model(z, 0.3, cs), Array(readout)))

    model.params.zero_grad()
    with Tape() as tape:
        root = loss()
    backward(tape, root)

    names = ["output_proj.weight", "input_proj.weight", "down0.ffn.up.weight", "up0.self_attn.q.weight", "conv_pos"]
    eps = 1e-6
    for name in names:
        param = model.params[name]
        analytic = param.grad.copy()
        for flat in np.argsort(np.abs(analytic).ravel())[-3:]:
            idx = np.unravel_index(flat, param.shape)
            original = param.data[idx]
            param.data[idx] = original + eps
            plus = loss().data.item()
            param.data[idx] = original - eps
            minus = loss().data.item()
            param.data[idx] = original
            numeric = (plus - minus) / (2 * eps)
            assert abs(numeric - analytic[idx]) <= 1e-4 * max(1.0, abs(analytic[idx])), f"{name}{idx}"
