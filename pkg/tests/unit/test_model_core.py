import numpy as np
import pytest

from src.data import Batch, SyntheticSpec, generate_synthetic
from src.errors import ConfigError, ContractError, DimensionError, NumericError
from src.model_core import (
    Activation,
    ArchSpec,
    GradientBundle,
    RawBatch,
    SplitModelParams,
    backward_range,
    forward_range,
    forward_with_cache,
    init_params,
    layer_tensors,
    mae,
    map_layer,
    mse_loss_and_grad,
    sgd_step,
)


def full_loss(params, batch):
    out = forward_range(params, 1, params.last_layer, batch.features)
    return mse_loss_and_grad(out.values, batch.target)[0]


def shifted(params, direction, eps):
    layers = tuple(
        map_layer(layer, lambda p, d: p + eps * d, step)
        for layer, step in zip(params.layers, direction.layers)
    )
    return SplitModelParams(layers, params.first_layer)


def random_direction(params, rng):
    layers = tuple(
        map_layer(layer, lambda t: rng.standard_normal(t.shape)) for layer in params.layers
    )
    return SplitModelParams(layers, params.first_layer)


def unit_direction(params, layer_index, name, flat_index):
    layers = tuple(map_layer(layer, np.zeros_like) for layer in params.layers)
    getattr(layers[layer_index], name).flat[flat_index] = 1.0
    return SplitModelParams(layers, params.first_layer)


class TestArchSpec:
    def test_default_split_is_last_client_layer(self, small_arch):
        assert small_arch.split_layer_index == 4
        assert small_arch.total_layers == 6
        assert small_arch.encoder_width == 6

    def test_layer_shapes(self, small_arch):
        assert small_arch.layer_shape(1) == (3, 6)
        assert small_arch.layer_shape(2) == (6, 8)
        assert small_arch.layer_shape(5) == (8, 4)
        assert small_arch.layer_shape(6) == (4, 1)
        with pytest.raises(ContractError):
            small_arch.layer_shape(7)

    @pytest.mark.parametrize("split", [0, 6])
    def test_split_outside_range(self, split):
        with pytest.raises(ConfigError, match="split_layer_index"):
            ArchSpec(split_layer_index=split).validate()

    def test_rejects_zero_width(self):
        with pytest.raises(ConfigError, match="client_hidden"):
            ArchSpec(client_hidden=(8, 0)).validate()


class TestInit:
    def test_same_seed_same_parameters(self, small_arch):
        a, b = init_params(small_arch, 5), init_params(small_arch, 5)
        assert np.array_equal(a.flatten(), b.flatten())
        assert not np.array_equal(a.flatten(), init_params(small_arch, 6).flatten())

    def test_parameter_count_and_biases(self, small_arch):
        params = init_params(small_arch, 0)
        assert params.num_parameters() == 259
        assert all(np.all(layer.bias == 0) for layer in params.dense_layers)
        assert np.all(np.abs(params.encoder.embed_table1) <= 0.05)

    def test_slice_keeps_layer_numbers(self, small_arch):
        params = init_params(small_arch, 0)
        server = params.slice(5, 6)
        assert (server.first_layer, server.last_layer) == (5, 6)
        assert server.encoder is None
        with pytest.raises(ContractError):
            server.layer(4)


class TestForward:
    def test_output_width(self, small_arch, raw_batch):
        params = init_params(small_arch, 0)
        out = forward_range(params, 1, 6, raw_batch.features)
        assert out.values.shape == (5, 1)
        assert out.produced_after_layer == 6

    def test_range_composition(self, small_arch, small_spec):
        rng = np.random.default_rng(0)
        for draw in range(100):
            params = init_params(small_arch, draw)
            data = generate_synthetic(draw, 4, small_spec)
            p = int(rng.integers(1, small_arch.total_layers))
            whole = forward_range(params, 1, 6, data.features())
            head = forward_range(params, 1, p, data.features())
            tail = forward_range(params, p + 1, 6, head)
            assert np.array_equal(whole.values, tail.values)

    def test_activation_must_come_from_previous_layer(self, small_arch, raw_batch):
        params = init_params(small_arch, 0)
        act = forward_range(params, 1, 2, raw_batch.features)
        with pytest.raises(ContractError, match="cannot feed layer 4"):
            forward_range(params, 4, 6, act)

    def test_layer_one_needs_raw_features(self, small_arch):
        params = init_params(small_arch, 0)
        with pytest.raises(ContractError):
            forward_range(params, 1, 2, Activation(np.zeros((2, 3)), 0))

    def test_wrong_numeric_width(self, small_arch):
        params = init_params(small_arch, 0)
        batch = RawBatch(np.zeros((2, 4)), np.array([0, 1]), np.array([0, 2]))
        with pytest.raises(DimensionError, match="width 3"):
            forward_range(params, 1, 6, batch)

    def test_category_outside_vocabulary(self, small_arch):
        params = init_params(small_arch, 0)
        batch = RawBatch(np.zeros((2, 3)), np.array([0, 2]), np.array([0, 1]))
        with pytest.raises(DimensionError, match="cat1"):
            forward_range(params, 1, 6, batch)

    def test_nan_input(self, small_arch):
        params = init_params(small_arch, 0)
        batch = RawBatch(np.full((2, 3), np.nan), np.array([0, 1]), np.array([0, 1]))
        with pytest.raises(NumericError):
            forward_range(params, 1, 6, batch)


class TestBackward:
    def test_matches_finite_differences(self, small_arch, raw_batch):
        rng = np.random.default_rng(1)
        for seed in range(5):
            params = init_params(small_arch, seed)
            out, cache = forward_with_cache(params, 1, 6, raw_batch.features)
            _, grad = mse_loss_and_grad(out.values, raw_batch.target)
            bundle = backward_range(params, 1, 6, cache, grad)

            direction = random_direction(params, rng)
            eps = 1e-7
            numeric = (
                full_loss(shifted(params, direction, eps), raw_batch)
                - full_loss(shifted(params, direction, -eps), raw_batch)
            ) / (2 * eps)
            analytic = float(bundle.flatten() @ direction.flatten())
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_every_parameter_matches_central_differences(self, seed):
        arch = ArchSpec(
            num_numeric_features=2,
            vocab1=2,
            vocab2=2,
            embed_dim1=2,
            embed_dim2=2,
            wide_out_dim=2,
            client_hidden=(4, 4),
            server_hidden=(3,),
        )
        params = init_params(arch, seed)
        assert params.num_parameters() == 81
        dataset = generate_synthetic(seed, 4, SyntheticSpec(num_numeric=2, vocab1=2, vocab2=2))
        batch = Batch(dataset.features(), dataset.targets())

        n = arch.total_layers
        out, cache = forward_with_cache(params, 1, n, batch.features)
        _, grad = mse_loss_and_grad(out.values, batch.target)
        bundle = backward_range(params, 1, n, cache, grad)

        eps = 1e-7
        for index, layer in enumerate(params.layers):
            analytic = layer_tensors(bundle.layer_grads[index])
            for name, tensor in layer_tensors(layer).items():
                for flat in range(tensor.size):
                    step = unit_direction(params, index, name, flat)
                    numeric = (
                        full_loss(shifted(params, step, eps), batch)
                        - full_loss(shifted(params, step, -eps), batch)
                    ) / (2 * eps)
                    assert numeric == pytest.approx(analytic[name].flat[flat], rel=1e-4, abs=1e-7)

    def test_chained_ranges_match_single_pass(self, small_arch, raw_batch):
        params = init_params(small_arch, 2)
        out, cache = forward_with_cache(params, 1, 6, raw_batch.features)
        _, grad = mse_loss_and_grad(out.values, raw_batch.target)
        whole = backward_range(params, 1, 6, cache, grad)

        head, head_cache = forward_with_cache(params, 1, 3, raw_batch.features)
        _, tail_cache = forward_with_cache(params, 4, 6, head)
        tail = backward_range(params, 4, 6, tail_cache, grad)
        front = backward_range(params, 1, 3, head_cache, tail.input_gradient)

        assert np.allclose(whole.flatten(), np.concatenate([front.flatten(), tail.flatten()]))

    def test_cache_range_must_match(self, small_arch, raw_batch):
        params = init_params(small_arch, 0)
        _, cache = forward_with_cache(params, 1, 4, raw_batch.features)
        with pytest.raises(ContractError, match="Cache covers 1..4"):
            backward_range(params, 1, 6, cache, np.zeros((5, 1)))

    def test_upstream_shape(self, small_arch, raw_batch):
        params = init_params(small_arch, 0)
        _, cache = forward_with_cache(params, 1, 4, raw_batch.features)
        with pytest.raises(DimensionError):
            backward_range(params, 1, 4, cache, np.zeros((5, 3)))


class TestLossAndStep:
    def test_mse(self):
        loss, grad = mse_loss_and_grad(np.array([[1.0], [3.0]]), np.zeros((2, 1)))
        assert loss == 5.0
        assert np.array_equal(grad, np.array([[1.0], [3.0]]))

    def test_mae(self):
        assert mae(np.array([[1.0], [-3.0]]), np.zeros((2, 1))) == 2.0
        with pytest.raises(DimensionError):
            mae(np.zeros((2, 1)), np.zeros(2))

    def test_sgd_step_on_sub_range(self, small_arch, raw_batch):
        params = init_params(small_arch, 0)
        _, cache = forward_with_cache(params, 3, 4, forward_range(params, 1, 2, raw_batch.features))
        bundle = backward_range(params, 3, 4, cache, np.ones((5, 8)))
        updated = sgd_step(params, bundle, 0.1)

        for index in (1, 2, 5, 6):
            assert updated.layer(index) is params.layer(index)
        expected = params.layer(3).weights - 0.1 * bundle.layer_grads[0].weights
        assert np.array_equal(updated.layer(3).weights, expected)

    def test_sgd_step_rejects_bad_input(self, small_arch):
        params = init_params(small_arch, 0)
        server = params.slice(5, 6)
        with pytest.raises(ConfigError):
            sgd_step(server, GradientBundle(server.layers, 5), 0.0)
        with pytest.raises(ContractError):
            sgd_step(server, GradientBundle(params.layers[:2], 1), 0.1)
