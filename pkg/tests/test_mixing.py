import math

import numpy as np
import pytest
import torch
from scipy import stats

from tpnica.exceptions import ConfigError
from tpnica.lattice import KernelSpec, Lattice
from tpnica.mixing import (
    LeakyTanh,
    MixingNetwork,
    ObservationNoise,
    generate_dataset,
    mix,
    observation_loglik,
)
from tpnica.processes import TpPrior


@pytest.fixture
def priors():
    return [TpPrior(4.0, KernelSpec(1.0, 1.0)), TpPrior(4.0, KernelSpec(2.0, 1.0))]


class TestMix:
    def test_identity_network(self):
        net = MixingNetwork(3, 3, n_layers=1)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.eye(3))
            net.layers[0].bias.zero_()
        s = torch.tensor([0.3, -2.0, 7.5], dtype=torch.float64)
        assert torch.equal(mix(net, s), s)

    def test_zero_last_layer_collapses_to_bias(self):
        net = MixingNetwork.random(2, 3, n_layers=2, seed=0)
        bias = torch.tensor([1.0, -1.0, 0.5], dtype=torch.float64)
        with torch.no_grad():
            net.layers[1].weight.zero_()
            net.layers[1].bias.copy_(bias)
        for s in ([0.0, 0.0], [3.0, -4.0], [100.0, 1e-3]):
            assert torch.equal(mix(net, s), bias)

    def test_matches_a_naive_layer_loop(self):
        net = MixingNetwork.random(2, 4, n_layers=3, seed=1, slope=0.2)
        s = np.random.default_rng(0).standard_normal(2)

        h = s
        for k, layer in enumerate(net.layers):
            if k:
                h = 0.2 * h + 0.8 * np.tanh(h)
            h = layer.weight.detach().numpy() @ h + layer.bias.detach().numpy()

        assert np.allclose(mix(net, s).detach().numpy(), h, rtol=1e-12, atol=1e-12)

    def test_applies_pointwise_over_locations(self):
        net = MixingNetwork.random(2, 3, n_layers=2, seed=2)
        s = np.random.default_rng(1).standard_normal((5, 2))
        batched = mix(net, s)
        assert batched.shape == (5, 3)
        for row in range(5):
            assert torch.allclose(batched[row], mix(net, s[row]), rtol=0, atol=1e-12)

    def test_deterministic(self):
        net = MixingNetwork.random(3, 5, n_layers=4, seed=3)
        s = np.random.default_rng(2).standard_normal((10, 3))
        assert torch.equal(mix(net, s), mix(net, s))

    def test_leaky_tanh_is_strictly_monotone(self):
        x = torch.linspace(-50.0, 50.0, 1001, dtype=torch.float64)
        assert bool((torch.diff(LeakyTanh(0.1)(x)) > 0).all())


class TestMixingNetwork:
    def test_rejects_dimension_reduction(self):
        with pytest.raises(ConfigError):
            MixingNetwork(4, 3)

    def test_rejects_zero_layers(self):
        with pytest.raises(ConfigError):
            MixingNetwork(2, 2, n_layers=0)

    def test_layer_widths(self):
        net = MixingNetwork(2, 5, n_layers=3)
        assert net.n_layers == 3
        assert [tuple(layer.weight.shape) for layer in net.layers] == [(5, 2), (5, 5), (5, 5)]

    @pytest.mark.parametrize("n_layers", [1, 2, 3, 4])
    def test_random_layers_are_well_conditioned(self, n_layers):
        net = MixingNetwork.random(3, 6, n_layers=n_layers, seed=n_layers, max_condition=10.0)
        for layer in net.layers:
            singular = np.linalg.svd(layer.weight.detach().numpy(), compute_uv=False)
            assert singular.min() > 0
            assert singular.max() / singular.min() < 10.0

    def test_random_is_reproducible(self):
        first = MixingNetwork.random(2, 4, n_layers=2, seed=9)
        second = MixingNetwork.random(2, 4, n_layers=2, seed=9)
        for a, b in zip(first.parameters(), second.parameters()):
            assert torch.equal(a, b)


class TestObservationLoglik:
    def test_zero_residual_at_unit_height(self):
        net = MixingNetwork.random(2, 3, n_layers=2, seed=0)
        s = [0.4, -0.1]
        x = mix(net, s).detach()
        noise = ObservationNoise(torch.full((3,), 1.0 / (2.0 * math.pi), dtype=torch.float64))
        assert float(observation_loglik(net, noise, x, s)) == pytest.approx(0.0, abs=1e-12)

    def test_standard_gaussian_arithmetic(self):
        net = MixingNetwork(2, 2)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.eye(2))
            net.layers[0].bias.zero_()
        noise = ObservationNoise([1.0, 1.0])
        value = observation_loglik(net, noise, [1.0, 0.0], [0.0, 0.0])
        assert float(value) == pytest.approx(-math.log(2.0 * math.pi) - 0.5, abs=1e-14)

    def test_sums_over_locations(self):
        net = MixingNetwork.random(2, 3, n_layers=2, seed=4)
        rng = np.random.default_rng(5)
        s = rng.standard_normal((6, 2))
        x = rng.standard_normal((6, 3))
        variances = np.array([0.5, 1.0, 2.0])

        clean = mix(net, s).detach().numpy()
        expected = sum(
            stats.multivariate_normal(mean=clean[l], cov=np.diag(variances)).logpdf(x[l])
            for l in range(6)
        )
        value = observation_loglik(net, ObservationNoise(variances), x, s)
        assert float(value) == pytest.approx(expected, abs=1e-10)

    def test_maximized_at_the_noiseless_observation(self):
        net = MixingNetwork.random(2, 3, n_layers=3, seed=6)
        noise = ObservationNoise([0.5, 1.0, 2.0])
        rng = np.random.default_rng(8)
        with torch.no_grad():
            for _ in range(1000):
                s = rng.standard_normal(2)
                clean = mix(net, s)
                peak = float(observation_loglik(net, noise, clean, s))
                delta = torch.as_tensor(rng.normal(scale=1e-3, size=3))
                assert float(observation_loglik(net, noise, clean + delta, s)) < peak

    def test_noise_variances_must_be_positive(self):
        with pytest.raises(ConfigError):
            ObservationNoise([1.0, 0.0])


class TestGenerateDataset:
    def test_shapes(self, priors):
        lattice = Lattice.grid((3, 4))
        net = MixingNetwork.random(2, 3, n_layers=2, seed=0)
        dataset = generate_dataset(lattice, priors, net, 0.1, sample_count=5, seed=0)
        assert dataset.observations.shape == (5, 3, 12)
        assert dataset.components.shape == (5, 2, 12)
        assert dataset.taus.shape == (5, 2)
        assert dataset.noise_variances.shape == (3,)

    def test_noiseless_limit(self, priors):
        lattice = Lattice.grid((3, 3))
        net = MixingNetwork.random(2, 4, n_layers=3, seed=1)
        dataset = generate_dataset(lattice, priors, net, 1e-24, sample_count=4, seed=2)

        clean = mix(net, dataset.components.transpose(0, 2, 1)).detach().numpy()
        assert np.abs(dataset.observations - clean.transpose(0, 2, 1)).max() < 1e-10

    def test_noise_fraction_of_channel_variance(self, priors):
        lattice = Lattice.grid((5, 5))
        net = MixingNetwork.random(2, 3, n_layers=2, seed=3)
        dataset = generate_dataset(lattice, priors, net, 0.1, sample_count=100, seed=4)

        clean = mix(net, dataset.components.transpose(0, 2, 1)).detach().numpy()
        clean = clean.transpose(0, 2, 1)
        noise = dataset.observations - clean
        for channel in range(3):
            ratio = noise[:, channel].var() / clean[:, channel].var()
            assert 0.08 <= ratio <= 0.12

    def test_common_random_numbers_across_noise_levels(self, priors):
        lattice = Lattice.grid((3, 3))
        net = MixingNetwork.random(2, 2, n_layers=1, seed=5)
        low = generate_dataset(lattice, priors, net, 0.01, sample_count=3, seed=6)
        high = generate_dataset(lattice, priors, net, 0.2, sample_count=3, seed=6)
        assert np.array_equal(low.components, high.components)
        assert np.array_equal(low.taus, high.taus)

    def test_same_seed_is_bitwise_identical(self, priors):
        lattice = Lattice.grid((3, 3))
        net = MixingNetwork.random(2, 3, n_layers=2, seed=7)
        first = generate_dataset(lattice, priors, net, 0.1, sample_count=3, seed=8)
        second = generate_dataset(lattice, priors, net, 0.1, sample_count=3, seed=8)
        assert np.array_equal(first.observations, second.observations)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_rejects_noise_fraction_outside_unit_interval(self, priors, fraction):
        net = MixingNetwork.random(2, 2, n_layers=1, seed=0)
        with pytest.raises(ConfigError):
            generate_dataset(Lattice.grid((2, 2)), priors, net, fraction, 1, seed=0)

    def test_rejects_source_count_mismatch(self, priors):
        net = MixingNetwork.random(3, 3, n_layers=1, seed=0)
        with pytest.raises(ConfigError):
            generate_dataset(Lattice.grid((2, 2)), priors, net, 0.1, 1, seed=0)
