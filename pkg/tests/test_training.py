import numpy as np
import pytest

from moica.manifold import LbfgsConfig
from moica.model import component_posteriors, objective_and_gradient
from moica.synth import amari_distance, gen_moica_samples, match_labels, random_spec
from moica.training import (
    TrainConfig,
    _pack_euclidean,
    _unpack_euclidean,
    init_model,
    train,
)


def small_config(**overrides):
    base = dict(
        n_components=1,
        n_gaussians=3,
        batch_size=2000,
        epochs=1,
        refine_rounds=15,
        block_iters=5,
        seed=0,
        lbfgs=LbfgsConfig(grad_tol=1e-5),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestInitModel:
    def test_deterministic(self):
        cfg = small_config(n_components=2)
        a = init_model(4, cfg)
        b = init_model(4, cfg)
        for ca, cb in zip(a.components, b.components):
            np.testing.assert_array_equal(ca.mixing.data, cb.mixing.data)

    def test_components_get_distinct_mixings(self):
        model = init_model(4, small_config(n_components=2))
        assert not np.allclose(model.components[0].mixing.data,
                               model.components[1].mixing.data)

    def test_source_means_at_normal_quantiles(self):
        from scipy.special import ndtri
        model = init_model(3, small_config(n_gaussians=3))
        src = model.components[0].sources[0]
        np.testing.assert_allclose(src.means, ndtri([1 / 6, 3 / 6, 5 / 6]), atol=1e-12)
        np.testing.assert_allclose(src.weights, 1 / 3)
        np.testing.assert_allclose(src.stdevs, 1.0)

    def test_uniform_priors(self):
        model = init_model(3, small_config(n_components=3))
        np.testing.assert_allclose(model.priors, 1 / 3)


class TestEuclideanPacking:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        model = init_model(3, small_config(n_components=2))
        vec, bounds = _pack_euclidean(model)
        back = _unpack_euclidean(model, vec)
        for ca, cb in zip(model.components, back.components):
            for sa, sb in zip(ca.sources, cb.sources):
                np.testing.assert_allclose(sb.weights, sa.weights, atol=1e-14)
                np.testing.assert_allclose(sb.means, sa.means, atol=1e-14)
                np.testing.assert_allclose(sb.stdevs, sa.stdevs, rtol=1e-14)
        np.testing.assert_allclose(back.priors, model.priors, atol=1e-14)
        assert len(bounds) == len(vec)

    def test_stdev_bounds_hold_floor(self):
        from moica.model import SIGMA_FLOOR
        model = init_model(2, small_config())
        vec, bounds = _pack_euclidean(model)
        lows = [lo for lo, _ in bounds if np.isfinite(lo)]
        assert lows and all(lo == pytest.approx(np.log(SIGMA_FLOOR)) for lo in lows)


class TestTrain:
    def test_single_component_recovery(self):
        spec = random_spec(4, ["sparse"], seed=11)
        X, _ = gen_moica_samples(spec, 6000)
        model = train(X, small_config(refine_rounds=25))
        d = amari_distance(spec.model.components[0].mixing.data,
                           model.components[0].mixing.data)
        assert d < 0.2

    def test_mixture_separation(self):
        spec = random_spec(4, ["sparse", "shifted_bimodal"], seed=12)
        X, labels = gen_moica_samples(spec, 6000)
        model = train(X, small_config(n_components=2, refine_rounds=25, seed=2))
        post = component_posteriors(model, X)
        acc, _ = match_labels(labels, post.argmax(axis=1), 2)
        assert acc > 0.95

    def test_refine_trace_non_increasing(self):
        spec = random_spec(3, ["sparse"], seed=13)
        X, _ = gen_moica_samples(spec, 3000)
        model = train(X, small_config(refine_rounds=10))
        vals = model.trace.refine_values
        assert len(vals) > 0
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))

    def test_column_norms_hold_through_training(self):
        spec = random_spec(3, ["sparse"], seed=14)
        X, _ = gen_moica_samples(spec, 3000)
        model = train(X, small_config(refine_rounds=8))
        assert model.trace.max_column_norm_error < 1e-12
        for comp in model.components:
            norms = np.linalg.norm(comp.mixing.data, axis=0)
            assert np.abs(norms - 1).max() < 1e-12

    def test_objective_improves_and_gradient_shrinks(self):
        spec = random_spec(3, ["sparse"], seed=15)
        X, _ = gen_moica_samples(spec, 4000)
        model = train(X, small_config(refine_rounds=20))
        tr = model.trace
        assert tr.final_value < tr.initial_value
        assert tr.final_grad_norm < tr.initial_grad_norm

    def test_insufficient_data_warns_but_runs(self):
        spec = random_spec(3, ["sparse"], seed=16)
        X, _ = gen_moica_samples(spec, 25)  # below 10*K*M = 30
        with pytest.warns(UserWarning, match="samples"):
            model = train(X, small_config(epochs=0, refine_rounds=2, batch_size=25))
        assert model.k == 1

    def test_training_is_deterministic(self):
        spec = random_spec(3, ["sparse"], seed=17)
        X, _ = gen_moica_samples(spec, 2000)
        cfg = small_config(refine_rounds=5)
        a = train(X, cfg)
        b = train(X, cfg)
        for ca, cb in zip(a.components, b.components):
            np.testing.assert_array_equal(ca.mixing.data, cb.mixing.data)
            for sa, sb in zip(ca.sources, cb.sources):
                np.testing.assert_array_equal(sa.means, sb.means)
        np.testing.assert_array_equal(a.priors, b.priors)

    def test_fitted_model_beats_init(self):
        spec = random_spec(3, ["sparse"], seed=18)
        X, _ = gen_moica_samples(spec, 3000)
        cfg = small_config(refine_rounds=10)
        fitted = train(X, cfg)
        v_init, _ = objective_and_gradient(init_model(3, cfg), X)
        v_fit, _ = objective_and_gradient(fitted, X)
        assert v_fit < v_init
