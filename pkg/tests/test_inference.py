import numpy as np
import pytest

from rgno.data import eval_heat_dirichlet, gen_heat_dirichlet
from rgno.errors import ConfigError
from rgno.graphs import GraphConfig
from rgno.inference import (
    ModelBundle,
    RolloutScheme,
    ensemble_rollout,
    evaluate_dataset,
    evaluate_resolution,
    make_scheme,
    noise_eval,
    relative_l1,
    rollout,
)
from rgno.stepping import DERIVATIVE, step
from rgno.training import TrainConfig, train


@pytest.fixture(scope="module")
def tiny_bundle():
    ds = gen_heat_dirichlet(6, 96, seed=0)
    cfg = TrainConfig(epochs=6, batch_size=3, latent_width=8, processor_blocks=1,
                      validate_every=3, time_stride=2, time_max_index=8, seed=0,
                      precision="float64")
    gcfg = GraphConfig(subsample_factor=3.0, edge_levels=2)
    res = train(ds, ds, cfg, gcfg)
    return res.bundle, ds


class TestSchemes:
    def test_ar2_to_t14(self):
        scheme = make_scheme("ar2", 0.1, 14)
        assert len(scheme.leads) == 7
        assert np.allclose(scheme.leads, 0.2)

    def test_ar4_has_remainder_step(self):
        scheme = make_scheme("ar4", 0.1, 14)
        assert np.allclose(scheme.leads, [0.4, 0.4, 0.4, 0.2])

    def test_dr_single_jump(self):
        scheme = make_scheme("dr", 0.1, 14)
        assert np.allclose(scheme.leads, [1.4])

    def test_leads_sum_to_target(self):
        for kind in ("ar2", "ar4", "dr"):
            scheme = make_scheme(kind, 0.25, 14)
            assert abs(sum(scheme.leads) - 14 * 0.25) < 1e-12

    def test_custom_scheme_positive_leads(self):
        RolloutScheme("custom", (0.1, 0.2))
        with pytest.raises(ConfigError):
            RolloutScheme("custom", (0.1, -0.2))

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            make_scheme("xr3", 0.1)


class TestRollout:
    def test_dr_equals_single_step_bitwise(self, tiny_bundle):
        bundle, ds = tiny_bundle
        graph = bundle.build_graph_for(ds)
        network = bundle.network_for(graph)
        u0 = ds.fields[:2, 0].astype(np.float64)
        scheme = make_scheme("dr", ds.dt, 8)
        via_rollout = rollout(network, bundle.stats, bundle.strategy, u0, None, scheme)
        direct = step(network, bundle.stats, bundle.strategy, u0, None, 0.0, 8 * ds.dt)
        assert len(via_rollout) == 1
        assert np.array_equal(via_rollout[-1][1], direct)

    def test_times_accumulate(self, tiny_bundle):
        bundle, ds = tiny_bundle
        network = bundle.network_for(bundle.build_graph_for(ds))
        scheme = make_scheme("ar2", ds.dt, 8)
        traj = rollout(network, bundle.stats, bundle.strategy,
                       ds.fields[:1, 0].astype(np.float64), None, scheme)
        times = [t for t, _ in traj]
        assert np.allclose(times, np.cumsum(scheme.leads))

    def test_perfect_oracle_network_reproduces_analytic_trajectory(self):
        # stub the network with the exact normalized derivative target
        ds = gen_heat_dirichlet(1, 64, seed=7)
        from rgno.stepping import compute_norm_stats, normalized_target
        from rgno.training import all2all_pairs

        idx = np.arange(0, 15, 2)
        stats = compute_norm_stats(ds, all2all_pairs(7), DERIVATIVE, idx)
        coef_rng = np.random.default_rng(np.random.SeedSequence(7).spawn(2)[0])
        mu = coef_rng.uniform(-1, 1, (1, 10))[0]
        state = {"t": 0.0}

        def oracle(u_norm, c, t_norm, tau_norm, tau_raw, mask_rng=None):
            t = state["t"]
            u_t = eval_heat_dirichlet(mu, 1.0, ds.cloud.coords, np.array([t]))[0][None, :, None]
            u_n = eval_heat_dirichlet(mu, 1.0, ds.cloud.coords, np.array([t + tau_raw]))[0][
                None, :, None
            ]
            state["t"] = t + tau_raw
            return normalized_target(u_t, u_n, tau_raw, DERIVATIVE, stats)

        for kind in ("ar2", "ar4", "dr"):
            state["t"] = 0.0
            scheme = make_scheme(kind, ds.dt, 14)
            u0 = ds.fields[:1, 0].astype(np.float64)
            final = rollout(oracle, stats, DERIVATIVE, u0, None, scheme)[-1][1]
            truth = ds.fields[0, 14].astype(np.float64)
            # float32 dataset storage bounds the achievable agreement
            assert np.max(np.abs(final[0] - truth)) < 1e-5, kind


class TestEnsemble:
    def test_std_zero_when_masking_off(self, tiny_bundle):
        bundle, ds = tiny_bundle
        old_p = bundle.model_cfg.mask_prob
        bundle.model_cfg.mask_prob = 0.0
        try:
            network = bundle.network_for(bundle.build_graph_for(ds))
            result = ensemble_rollout(network, bundle.stats, bundle.strategy,
                                      ds.fields[:1, 0].astype(np.float64), None,
                                      make_scheme("ar2", ds.dt, 4), members=4, seed=0)
            assert np.max(result.std) == 0.0
        finally:
            bundle.model_cfg.mask_prob = old_p

    def test_masked_ensemble_has_positive_std(self, tiny_bundle):
        bundle, ds = tiny_bundle
        network = bundle.network_for(bundle.build_graph_for(ds))
        result = ensemble_rollout(network, bundle.stats, bundle.strategy,
                                  ds.fields[:1, 0].astype(np.float64), None,
                                  make_scheme("ar2", ds.dt, 4), members=5, seed=0)
        assert result.members == 5
        assert np.max(result.std) > 0.0

    def test_mean_concentrates_with_members(self, tiny_bundle):
        # std of the ensemble MEAN shrinks roughly like 1/sqrt(K)
        bundle, ds = tiny_bundle
        network = bundle.network_for(bundle.build_graph_for(ds))
        u0 = ds.fields[:1, 0].astype(np.float64)
        scheme = make_scheme("ar2", ds.dt, 4)

        def mean_of(k, seed):
            return ensemble_rollout(network, bundle.stats, bundle.strategy, u0, None,
                                    scheme, members=k, seed=seed).mean

        spread = {}
        for k in (5, 20, 80):
            means = np.stack([mean_of(k, s) for s in range(6)])
            spread[k] = means.std(axis=0).mean()
        assert spread[20] < spread[5]
        assert spread[80] < spread[20]

    def test_needs_two_members(self, tiny_bundle):
        bundle, ds = tiny_bundle
        network = bundle.network_for(bundle.build_graph_for(ds))
        with pytest.raises(ValueError):
            ensemble_rollout(network, bundle.stats, bundle.strategy,
                             ds.fields[:1, 0].astype(np.float64), None,
                             make_scheme("dr", ds.dt, 4), members=1, seed=0)


class TestRelativeL1:
    def test_exact_prediction_is_zero(self, rng):
        truth = rng.standard_normal((32, 2))
        assert relative_l1(truth, truth, np.zeros(2), np.ones(2)) == 0.0

    def test_zero_prediction_is_one(self, rng):
        truth = rng.standard_normal((32, 1))
        assert abs(relative_l1(np.zeros_like(truth), truth, np.zeros(1), np.ones(1)) - 1.0) < 1e-12

    def test_group_average(self, rng):
        truth = np.ones((10, 2))
        pred = truth.copy()
        pred[:, 0] *= 1.1  # 10% error in channel 0
        pred[:, 1] *= 1.3  # 30% error in channel 1
        err = relative_l1(pred, truth, np.zeros(2), np.ones(2))
        assert abs(err - 0.2) < 1e-12

    def test_zero_denominator_cases(self):
        zero = np.zeros((4, 1))
        assert relative_l1(zero, zero, np.zeros(1), np.ones(1)) == 0.0
        assert relative_l1(np.ones((4, 1)), zero, np.zeros(1), np.ones(1)) == 1.0

    def test_idempotent_under_fixed_stats(self, rng):
        pred = rng.standard_normal((16, 1))
        truth = rng.standard_normal((16, 1))
        mean, std = np.array([0.3]), np.array([1.7])
        a = relative_l1(pred, truth, mean, std)
        b = relative_l1(pred, truth, mean, std)
        assert a == b


class TestBundleRoundTrip:
    def test_save_load_preserves_everything(self, tiny_bundle, tmp_path):
        bundle, ds = tiny_bundle
        path = tmp_path / "model.rgnc"
        bundle.save(str(path))
        back = ModelBundle.load(str(path), dtype=np.float64)
        assert back.model_cfg == bundle.model_cfg
        assert back.strategy.kind == bundle.strategy.kind
        assert back.graph_cfg == bundle.graph_cfg
        for k, p in bundle.params.items():
            assert np.allclose(back.params[k].data, p.data, atol=1e-7)
        assert np.allclose(back.stats.in_mean, bundle.stats.in_mean, atol=1e-7)

    def test_loaded_bundle_evaluates(self, tiny_bundle, tmp_path):
        bundle, ds = tiny_bundle
        path = tmp_path / "model.rgnc"
        bundle.save(str(path))
        back = ModelBundle.load(str(path))
        errs = evaluate_dataset(back, ds, make_scheme("dr", ds.dt, 8), target_index=8)
        assert errs.shape == (6,)
        assert np.all(np.isfinite(errs))


class TestEvaluationProtocols:
    def test_resolution_correction_holds_regional_count(self, tiny_bundle):
        bundle, ds = tiny_bundle
        train_r = 96 // 3
        for n_points in (64, 96, 200):
            ds_r = gen_heat_dirichlet(2, n_points, seed=0)
            graph = bundle.build_graph_for(ds_r, train_regional_count=train_r)
            assert abs(graph.n_regional - train_r) <= 1

    def test_subresolution_uses_refined_regional_coords(self, tiny_bundle):
        bundle, ds = tiny_bundle
        ds_small = gen_heat_dirichlet(1, 24, seed=0)
        graph = bundle.build_graph_for(ds_small, train_regional_count=32)
        assert graph.n_regional == 32
        assert graph.regional_indices is None

    def test_evaluate_resolution_rows(self, tiny_bundle):
        bundle, ds = tiny_bundle
        datasets = [gen_heat_dirichlet(2, n, seed=0, n_times=21) for n in (64, 96)]
        rows = evaluate_resolution(bundle, datasets, 32, scheme_kind="dr", target_index=8)
        assert [r[0] for r in rows] == [64, 96]
        assert all(np.isfinite(err) for _, err in rows)

    def test_noise_eval_zero_level_is_zero(self, tiny_bundle):
        bundle, ds = tiny_bundle
        scheme = make_scheme("dr", ds.dt, 8)
        out = noise_eval(bundle, ds, [0.0, 0.02], scheme, seed=1, target_index=8)
        assert np.allclose(out[0.0], 0.0)
        assert np.all(np.isfinite(out[0.02]))
        assert np.all(out[0.02] >= 0.0)
