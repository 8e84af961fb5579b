import math

import numpy as np
import pytest

from fewbayes import autodiff as ad
from fewbayes.autodiff import Tensor
from fewbayes.errors import ContractError, FormatError, ShapeError
from fewbayes.model import (
    SIGMA_MIN_SQ,
    aggregate_context,
    amortize,
    decode_logits,
    encode,
    init_model,
    load_checkpoint,
    pool_prototype,
    sample_weights,
    save_checkpoint,
)


def tiny_model(seed=0, **overrides):
    kwargs = dict(
        input_dim=3,
        feature_dim=3,
        num_ways=2,
        encoder_widths=(4,),
        activation="tanh",
        aggregation="prototype",
        pooling="mean",
        decoder="linear",
    )
    kwargs.update(overrides)
    return init_model(np.random.default_rng(seed), **kwargs)


def zero_params(params):
    for t in params.parameters():
        t.data[...] = 0.0
    return params


class TestEncode:
    def test_zero_weights_give_zero_features(self):
        params = zero_params(tiny_model())
        out = encode(params, np.random.default_rng(0).normal(size=(4, 3)))
        assert np.array_equal(out.numpy(), np.zeros((4, 3)))

    def test_single_layer_identity_weights(self):
        params = tiny_model(input_dim=2, feature_dim=2, encoder_widths=())
        params.encoder.weights[0].data[...] = np.eye(2)
        params.encoder.biases[0].data[...] = 0.0
        out = encode(params, [[1.0, 2.0]])
        assert np.allclose(out.numpy(), [[math.tanh(1.0), math.tanh(2.0)]], atol=1e-15)

    def test_batch_rows_independent(self):
        # BLAS may sum in a different order for different batch sizes, so
        # rows agree to rounding, not bitwise.
        params = tiny_model(seed=3)
        x = np.random.default_rng(1).normal(size=(5, 3))
        batch = encode(params, x).numpy()
        for i in range(5):
            single = encode(params, x[i : i + 1]).numpy()
            assert np.allclose(batch[i : i + 1], single, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="encode"):
            encode(tiny_model(), np.zeros((2, 5)))


class TestPooling:
    def test_mean(self):
        out = pool_prototype([[1.0, 3.0], [3.0, 1.0]], mode="mean")
        assert np.array_equal(out.numpy(), [[2.0, 2.0]])

    def test_sum(self):
        out = pool_prototype([[1.0, 3.0], [3.0, 1.0]], mode="sum")
        assert np.array_equal(out.numpy(), [[4.0, 4.0]])

    def test_single_shot_identity_in_both_modes(self):
        feat = [[0.5, -1.5, 2.0]]
        assert np.array_equal(pool_prototype(feat, "mean").numpy(), feat)
        assert np.array_equal(pool_prototype(feat, "sum").numpy(), feat)

    def test_empty_class_rejected(self):
        with pytest.raises(ContractError):
            pool_prototype(np.zeros((0, 3)))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            pool_prototype([[1.0]], mode="max")


class TestAggregation:
    def support(self, seed=0, n_per_class=2):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2 * n_per_class, 3))
        y = np.repeat([0, 1], n_per_class)
        return x, y

    def test_prototype_matches_per_class_pooling(self):
        params = tiny_model(seed=5)
        x, y = self.support()
        rep = aggregate_context(params, x, y).numpy()
        feats = encode(params, x).numpy()
        for c in (0, 1):
            expected = pool_prototype(feats[y == c], "mean").numpy()[0]
            assert np.allclose(rep[c], expected, atol=1e-12)

    def test_sum_pooling_scales_with_shots(self):
        params = tiny_model(seed=5, pooling="sum")
        x, y = self.support()
        rep = aggregate_context(params, x, y).numpy()
        feats = encode(params, x).numpy()
        assert np.allclose(rep[0], feats[y == 0].sum(axis=0), atol=1e-12)

    def test_labelled_r_zero_weights_identical_rows(self):
        params = zero_params(tiny_model(aggregation="labelled_r"))
        x, y = self.support()
        rep = aggregate_context(params, x, y).numpy()
        assert np.array_equal(rep[0], rep[1])
        assert np.array_equal(rep, np.zeros_like(rep))

    def test_labelled_r_identity_feature_slice_equals_prototype(self):
        # r takes concat(feature, onehot); identity on the feature block and
        # zeros on the label block reproduces plain prototype pooling.
        params = tiny_model(seed=7, aggregation="labelled_r")
        d, c = params.feature_dim, params.num_ways
        params.r_net.weights[0].data[...] = np.vstack([np.eye(d), np.zeros((c, d))])
        params.r_net.biases[0].data[...] = 0.0
        plain = tiny_model(seed=7, aggregation="prototype")
        for src, dst in zip(params.encoder.weights, plain.encoder.weights):
            dst.data[...] = src.data
        for src, dst in zip(params.encoder.biases, plain.encoder.biases):
            dst.data[...] = src.data
        x, y = self.support(seed=2)
        assert np.allclose(
            aggregate_context(params, x, y).numpy(),
            aggregate_context(plain, x, y).numpy(),
            atol=1e-12,
        )

    def test_missing_class_listed(self):
        params = tiny_model()
        x = np.zeros((2, 3))
        with pytest.raises(ContractError, match=r"class\(es\) \[1\]"):
            aggregate_context(params, x, [0, 0])

    def test_within_class_permutation_invariance(self):
        for aggregation in ("prototype", "labelled_r"):
            params = tiny_model(seed=9, aggregation=aggregation)
            x, y = self.support(seed=4, n_per_class=3)
            base = aggregate_context(params, x, y).numpy()
            perm = np.array([2, 0, 1, 5, 3, 4])  # shuffle within each class
            swapped = aggregate_context(params, x[perm], y[perm]).numpy()
            assert np.allclose(base, swapped, atol=1e-12)

    def test_class_relabeling_permutes_rows_prototype(self):
        params = tiny_model(seed=11, num_ways=3)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 3))
        y = np.repeat([0, 1, 2], 2)
        base = aggregate_context(params, x, y).numpy()
        perm = np.array([2, 0, 1])
        swapped = aggregate_context(params, x, perm[y]).numpy()
        assert np.allclose(swapped[perm], base, atol=1e-12)


class TestAmortize:
    def test_zero_weight_heads(self):
        params = zero_params(tiny_model())
        post = amortize(params, np.random.default_rng(0).normal(size=(2, 3)))
        assert np.array_equal(post.mu.numpy(), np.zeros((2, 3)))
        expected = math.log(2.0) + SIGMA_MIN_SQ
        assert np.allclose(post.sigma2.numpy(), expected, atol=1e-12)

    def test_identical_representations_identical_posteriors(self):
        params = tiny_model(seed=13)
        rep = np.tile(np.random.default_rng(1).normal(size=(1, 3)), (2, 1))
        post = amortize(params, rep)
        assert np.array_equal(post.mu.numpy()[0], post.mu.numpy()[1])
        assert np.array_equal(post.sigma2.numpy()[0], post.sigma2.numpy()[1])

    def test_variance_floor(self):
        params = zero_params(tiny_model())
        params.var_head.biases[-1].data[...] = -40.0
        post = amortize(params, np.zeros((2, 3)))
        assert np.allclose(post.sigma2.numpy(), SIGMA_MIN_SQ, atol=1e-12)
        assert (post.sigma2.numpy() >= SIGMA_MIN_SQ).all()

    def test_deterministic_pipeline(self):
        params = tiny_model(seed=17)
        x = np.random.default_rng(2).normal(size=(4, 3))
        y = np.array([0, 0, 1, 1])
        a = amortize(params, aggregate_context(params, x, y))
        b = amortize(params, aggregate_context(params, x, y))
        assert np.array_equal(a.mu.numpy(), b.mu.numpy())
        assert np.array_equal(a.sigma2.numpy(), b.sigma2.numpy())


class TestSampleWeights:
    def posterior(self, mu, sigma2, params=None):
        params = params or tiny_model()
        post = amortize(params, np.zeros((2, 3)))
        post.mu.data[...] = mu
        post.sigma2.data[...] = sigma2
        return post

    def test_degenerate_variance_returns_mean(self):
        post = self.posterior(1.5, SIGMA_MIN_SQ)
        phi = sample_weights(post, 1, np.random.default_rng(0))[0]
        assert np.allclose(phi.numpy(), 1.5, atol=1e-2)

    def test_fixed_seed_bitwise_identical(self):
        post = self.posterior(0.0, 1.0)
        a = sample_weights(post, 3, np.random.default_rng(42))
        b = sample_weights(post, 3, np.random.default_rng(42))
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.numpy(), tb.numpy())

    def test_law_of_large_numbers(self):
        post = self.posterior(0.0, 1.0)
        draws = sample_weights(post, 10_000, np.random.default_rng(7))
        stacked = np.stack([t.numpy() for t in draws])
        assert np.abs(stacked.mean(axis=0)).max() < 0.05
        assert np.abs(stacked.var(axis=0) - 1.0).max() < 0.05

    def test_zero_samples_rejected(self):
        with pytest.raises(ContractError):
            sample_weights(self.posterior(0.0, 1.0), 0, np.random.default_rng(0))

    def test_gradient_flows_to_posterior_parameters(self):
        params = tiny_model(seed=19)
        rep = Tensor(np.random.default_rng(3).normal(size=(2, 3)))
        post = amortize(params, rep)
        phi = sample_weights(post, 1, np.random.default_rng(5))[0]
        grads = ad.backward(ad.sum_reduce(ad.mul(phi, phi)))
        assert params.mean_head.weights[0] in grads
        assert params.var_head.weights[0] in grads


class TestDecodeLogits:
    def test_linear_basis_projection(self):
        params = tiny_model(feature_dim=3, num_ways=3)
        logits = decode_logits(params, np.eye(3), [0.5, -1.0, 2.0])
        assert np.allclose(logits.numpy(), [[0.5, -1.0, 2.0]], atol=1e-15)

    def test_linear_zero_query_uniform(self):
        params = tiny_model()
        phi = np.random.default_rng(0).normal(size=(2, 3))
        logits = decode_logits(params, phi, np.zeros((1, 3)))
        assert np.array_equal(logits.numpy(), np.zeros((1, 2)))
        probs = ad.softmax(logits).numpy()
        assert np.allclose(probs, 0.5, atol=1e-15)

    def test_mlp_zero_weights_uniform(self):
        params = zero_params(tiny_model(decoder="mlp", decoder_widths=(4,)))
        phi = np.random.default_rng(1).normal(size=(2, 3))
        h = np.random.default_rng(2).normal(size=(3, 3))
        logits = decode_logits(params, phi, h).numpy()
        assert np.allclose(logits, logits[:, :1], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            decode_logits(tiny_model(), np.zeros((2, 4)), np.zeros((1, 3)))


class TestPredictiveGradient:
    def test_mean_predictive_log_prob_matches_finite_differences(self):
        # 2-way 1-shot fixed-seed episode through the full encode ->
        # aggregate -> amortize -> sample -> decode pipeline.
        from fewbayes.objectives import batch_predictive_log_probs

        params = tiny_model(seed=23)
        rng = np.random.default_rng(8)
        sx, sy = rng.normal(size=(2, 3)), np.array([0, 1])
        qx, qy = rng.normal(size=(4, 3)), np.array([0, 1, 0, 1])

        def f(_):
            post = amortize(params, aggregate_context(params, sx, sy))
            phis = sample_weights(post, 2, np.random.default_rng(99))
            lp = batch_predictive_log_probs(params, phis, encode(params, qx), qy)
            return ad.mean_reduce(lp)

        assert ad.finite_diff_check(f, params.parameters()) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = tiny_model(seed=29, aggregation="labelled_r", decoder="mlp")
        path = tmp_path / "checkpoint.json"
        config = {"seed": 3, "note": {"nested": [1, 2]}}
        save_checkpoint(str(path), params, config, seed=3, step=17)
        loaded, config2, seed, step = load_checkpoint(str(path))
        assert (config2, seed, step) == (config, 3, 17)
        assert loaded.aggregation == "labelled_r"
        assert loaded.decoder == "mlp"
        left = dict(params.named_parameters())
        right = dict(loaded.named_parameters())
        assert left.keys() == right.keys()
        for name in left:
            assert np.array_equal(left[name].data, right[name].data), name
            assert right[name].requires_grad

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(FormatError, match="JSON"):
            load_checkpoint(str(path))
        path.write_text('{"format": "something-else"}')
        with pytest.raises(FormatError, match="format"):
            load_checkpoint(str(path))
        with pytest.raises(FormatError, match="not found"):
            load_checkpoint(str(tmp_path / "missing.json"))
