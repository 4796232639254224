import numpy as np
import pytest

from rgno.data import gen_heat_dirichlet
from rgno.errors import ConfigError
from rgno.stepping import (
    DERIVATIVE,
    OUTPUT,
    RESIDUAL,
    NormStats,
    compute_norm_stats,
    normalize_input,
    normalized_target,
    step,
    strategy_by_name,
    time_channels,
)
from rgno.training import all2all_pairs


def synthetic_stats(s=1, tgt_mean=0.0, tgt_std=1.0):
    return NormStats(
        in_mean=np.zeros(s),
        in_std=np.ones(s),
        tgt_mean=np.full(s, float(tgt_mean)),
        tgt_std=np.full(s, float(tgt_std)),
        t_min=0.0,
        t_max=1.0,
        glob_mean=np.zeros(s),
        glob_std=np.ones(s),
    )


class TestStrategies:
    def test_by_name(self):
        assert strategy_by_name("output") is OUTPUT
        assert strategy_by_name("derivative") is DERIVATIVE
        with pytest.raises(ConfigError):
            strategy_by_name("implicit")

    def test_coefficients(self):
        assert OUTPUT.coefficients(0.7) == (0.0, 1.0)
        assert RESIDUAL.coefficients(0.7) == (1.0, 1.0)
        assert DERIVATIVE.coefficients(0.7) == (1.0, 0.7)


class TestComputeNormStats:
    def test_constant_dataset_residual_floors_std(self, rng, unit_square):
        from rgno.data import TrajectoryDataset
        from rgno.geometry import PointCloud

        cloud = PointCloud(rng.random((16, 2)), unit_square)
        fields = np.ones((3, 5, 16, 1), dtype=np.float32) * 0.37
        ds = TrajectoryDataset(cloud=cloud, times=np.linspace(0, 1, 5), fields=fields)
        stats = compute_norm_stats(ds, all2all_pairs(4), RESIDUAL)
        assert np.allclose(stats.tgt_mean, 0.0)
        assert np.allclose(stats.tgt_std, 1e-8)

    def test_plus_minus_one_residuals(self, rng, unit_square):
        from rgno.data import TrajectoryDataset
        from rgno.geometry import PointCloud

        cloud = PointCloud(rng.random((4, 2)), unit_square)
        fields = np.zeros((1, 3, 4, 1), dtype=np.float32)
        fields[0, 1] = 1.0  # residual pair (0,1): +1; pair (1,2): -1
        ds = TrajectoryDataset(cloud=cloud, times=np.array([0.0, 0.5, 1.0]), fields=fields)
        stats = compute_norm_stats(ds, [(0, 1), (1, 2)], RESIDUAL)
        assert np.allclose(stats.tgt_mean, 0.0)
        assert np.allclose(stats.tgt_std, 1.0)
        # derivative strategy on the same pairs: residuals / tau = +-2 -> std 2
        stats_d = compute_norm_stats(ds, [(0, 1), (1, 2)], DERIVATIVE)
        assert np.allclose(stats_d.tgt_std, 2.0)

    def test_derivative_skips_zero_lead_pairs(self, rng):
        ds = gen_heat_dirichlet(2, 64, seed=0)
        stats = compute_norm_stats(ds, [(0, 0), (0, 2)], DERIVATIVE, np.arange(0, 5, 2))
        assert np.all(stats.tgt_std > 1e-8)

    def test_empty_pairs_rejected(self):
        ds = gen_heat_dirichlet(1, 64, seed=0)
        with pytest.raises(ValueError):
            compute_norm_stats(ds, [], OUTPUT)

    def test_time_window(self):
        ds = gen_heat_dirichlet(1, 64, seed=0)
        idx = np.arange(0, 15, 2)
        stats = compute_norm_stats(ds, all2all_pairs(7), DERIVATIVE, idx)
        assert stats.t_min == 0.0
        assert abs(stats.t_max - ds.times[14]) < 1e-15

    def test_round_trip_through_named_tensors(self):
        ds = gen_heat_dirichlet(2, 64, seed=0)
        stats = compute_norm_stats(ds, all2all_pairs(4), DERIVATIVE, np.arange(0, 9, 2))
        back = NormStats.from_named(
            {k: v.astype(np.float64) for k, v in stats.to_named().items()}
        )
        for field in ("in_mean", "in_std", "tgt_mean", "tgt_std", "glob_mean", "glob_std"):
            assert np.allclose(getattr(back, field), getattr(stats, field))


class TestStep:
    def test_tau_zero_derivative_identity_bitwise(self, rng):
        stats = synthetic_stats()
        u = rng.standard_normal((2, 10, 1))

        def explode(*a, **k):
            raise AssertionError("network must not run at tau = 0")

        out = step(explode, stats, DERIVATIVE, u, None, 0.2, 0.0)
        assert np.array_equal(out, u)

    def test_negative_lead_rejected(self, rng):
        with pytest.raises(ValueError):
            step(lambda *a, **k: None, synthetic_stats(), OUTPUT,
                 rng.standard_normal((1, 4, 1)), None, 0.0, -0.1)

    def test_output_strategy_round_trip(self, rng):
        # a network that emits the normalized true next state reproduces it
        stats = synthetic_stats(tgt_mean=0.3, tgt_std=2.0)
        u_next = rng.standard_normal((1, 8, 1))

        def oracle(u_norm, c, t_norm, tau_norm, tau_raw, mask_rng=None):
            return (u_next - stats.tgt_mean) / stats.tgt_std

        out = step(oracle, stats, OUTPUT, rng.standard_normal((1, 8, 1)), None, 0.1, 0.2)
        assert np.allclose(out, u_next, atol=1e-12)

    def test_all_strategies_exact_with_oracle_network(self, rng):
        # with the exact normalized target as network output, every strategy
        # reproduces u(t + tau) exactly
        u_t = rng.standard_normal((1, 8, 1))
        u_next = rng.standard_normal((1, 8, 1))
        tau = 0.25
        for strategy in (OUTPUT, RESIDUAL, DERIVATIVE):
            stats = synthetic_stats(tgt_mean=0.1, tgt_std=1.7)

            def oracle(u_norm, c, t_norm, tau_norm, tau_raw, mask_rng=None):
                return normalized_target(u_t, u_next, tau, strategy, stats)

            out = step(oracle, stats, strategy, u_t, None, 0.0, tau)
            assert np.allclose(out, u_next, atol=1e-10), strategy.kind

    def test_residual_vs_derivative_scaling_identity(self, rng):
        # same raw network output r: residual adds r, derivative adds tau * r
        stats = synthetic_stats()
        r = rng.standard_normal((1, 6, 1))
        u = rng.standard_normal((1, 6, 1))
        net = lambda *a, **k: r
        tau = 0.5
        out_res = step(net, stats, RESIDUAL, u, None, 0.0, tau)
        out_der = step(net, stats, DERIVATIVE, u, None, 0.0, tau)
        assert np.allclose(out_der - u, tau * (out_res - u), atol=1e-12)

    def test_normalization_round_trip(self, rng):
        ds = gen_heat_dirichlet(2, 64, seed=3)
        idx = np.arange(0, 15, 2)
        for strategy in (OUTPUT, RESIDUAL, DERIVATIVE):
            stats = compute_norm_stats(ds, all2all_pairs(7), strategy, idx)
            x = rng.standard_normal((4, 64, 1))
            back = stats.in_mean + stats.in_std * normalize_input(x, stats)
            assert np.max(np.abs(back - x)) < 1e-6
            z = normalized_target(x, x + 0.5, 0.25, strategy, stats)
            target = stats.tgt_mean + stats.tgt_std * z
            assert np.allclose(target, strategy.target(x, x + 0.5, 0.25), atol=1e-6)

    def test_time_channels(self):
        stats = synthetic_stats()
        t_norm, tau_norm = time_channels(0.5, 0.25, stats)
        assert t_norm == 0.5 and tau_norm == 0.25
        stats.t_min, stats.t_max = 1.0, 3.0
        t_norm, tau_norm = time_channels(2.0, 1.0, stats)
        assert t_norm == 0.5 and tau_norm == 0.5
