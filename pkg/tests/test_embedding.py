import numpy as np
import pytest

import _oracles
from saveri.embedding import (EmbeddingConfig, EmbeddingError, MappingNetwork,
                              NetworkConfig, conditional_probabilities,
                              loss_and_gradients, map_input, train_mapping,
                              tsne_embed)


def two_cluster_distances(n_per=50, within=0.1, across=10.0, seed=0):
    """Synthetic distance matrix with two tight clusters."""
    n = 2 * n_per
    rng = np.random.default_rng(seed)
    D = np.full((n, n), across)
    D[:n_per, :n_per] = within
    D[n_per:, n_per:] = within
    D += rng.uniform(0, 0.01, (n, n))  # break exact ties
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    labels = np.array([0] * n_per + [1] * n_per)
    return D, labels


def small_config(**kw):
    d = dict(n_y=2, perplexity=10.0, iterations=300, learning_rate=100.0,
             exaggeration=12.0, exaggeration_iters=80, momentum_switch=80,
             seed=0)
    d.update(kw)
    return EmbeddingConfig(**d)


class TestConditionalProbabilities:
    def test_rows_sum_to_one_and_nonnegative(self):
        D, _ = two_cluster_distances(30)
        P, betas = conditional_probabilities(D, perplexity=15.0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P >= 0.0)
        assert np.all(np.diag(P) == 0.0)

    def test_perplexity_calibration(self):
        D, _ = two_cluster_distances(40)
        P, _ = conditional_probabilities(D, perplexity=20.0)
        for i in range(len(D)):
            row = P[i][P[i] > 0]
            perp = np.exp(-(row * np.log(row)).sum())
            assert perp == pytest.approx(20.0, abs=1e-3)


class TestTsne:
    def test_two_clusters_separate(self):
        D, labels = two_cluster_distances(50)
        emb = tsne_embed(D, small_config())
        Y = emb.coordinates
        # 1-nearest-neighbor label agreement
        agree = 0
        for i in range(len(Y)):
            d = np.linalg.norm(Y - Y[i], axis=1)
            d[i] = np.inf
            agree += labels[np.argmin(d)] == labels[i]
        assert agree / len(Y) >= 0.95

    def test_symmetrized_p_sums_to_one(self):
        D, _ = two_cluster_distances(30)
        P, _ = conditional_probabilities(D, 10.0)
        P = (P + P.T) / (2 * len(D))
        assert abs(P.sum() - 1.0) <= 1e-9

    def test_deterministic_given_seed(self):
        D, _ = two_cluster_distances(30)
        a = tsne_embed(D, small_config(seed=7))
        b = tsne_embed(D, small_config(seed=7))
        np.testing.assert_array_equal(a.coordinates, b.coordinates)
        c = tsne_embed(D, small_config(seed=8))
        assert not np.array_equal(a.coordinates, c.coordinates)

    def test_degenerate_identical_rows(self):
        n = 100
        D = np.ones((n, n)) - np.eye(n)
        emb = tsne_embed(D, small_config(perplexity=30.0, iterations=120,
                                         exaggeration_iters=40,
                                         momentum_switch=40))
        assert np.all(np.isfinite(emb.coordinates))
        assert np.isfinite(emb.kl) and emb.kl >= 0.0

    def test_final_kl_not_above_exaggeration_end(self):
        D, _ = two_cluster_distances(40)
        emb = tsne_embed(D, small_config(iterations=400, exaggeration_iters=100,
                                         momentum_switch=100))
        assert emb.kl <= emb.kl_exaggeration_end + 1e-6

    def test_preconditions(self):
        D, _ = two_cluster_distances(10)  # n = 20
        with pytest.raises(ValueError):
            tsne_embed(D, small_config(perplexity=7.0))  # 20 < 21
        with pytest.raises(ValueError):
            tsne_embed(D, small_config(perplexity=2.0))


class TestMappingNetwork:
    def test_constant_targets_fit(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 6))
        Y = np.zeros((200, 2))
        net = train_mapping(X, Y, NetworkConfig(hidden=(16,), epochs=150, seed=1))
        assert net.final_rmse <= 1e-3

    def test_duplicate_inputs_rmse_floor(self):
        # one input with two targets 2 apart: best fit is the midpoint,
        # so per-sample RMSE is bounded below by half the gap
        X = np.zeros((2, 3))
        Y = np.array([[1.0, 0.0], [-1.0, 0.0]])
        net = train_mapping(X, Y, NetworkConfig(hidden=(8,), epochs=200, seed=0))
        assert net.final_rmse >= 1.0 - 1e-9

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(5, 4))
        Y = rng.normal(size=(5, 2))
        sizes = [4, 6, 5, 2]
        weights = [rng.normal(scale=0.5, size=(a, b))
                   for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [rng.normal(scale=0.1, size=b) for b in sizes[1:]]
        loss, gW, gb = loss_and_gradients(weights, biases, "tanh", X, Y)

        for layer in range(len(weights)):
            def f_w(w, layer=layer):
                ws = [x.copy() for x in weights]
                ws[layer] = w
                return loss_and_gradients(ws, biases, "tanh", X, Y)[0]

            fd = _oracles.finite_difference(f_w, weights[layer].copy())
            denom = np.maximum(np.abs(fd), 1e-8)
            assert np.max(np.abs(fd - gW[layer]) / denom) <= 1e-4

            def f_b(b, layer=layer):
                bs = [x.copy() for x in biases]
                bs[layer] = b
                return loss_and_gradients(weights, bs, "tanh", X, Y)[0]

            fd_b = _oracles.finite_difference(f_b, biases[layer].copy())
            denom = np.maximum(np.abs(fd_b), 1e-8)
            assert np.max(np.abs(fd_b - gb[layer]) / denom) <= 1e-4

    def test_input_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 5))
        Y = rng.normal(size=(30, 2))
        net = train_mapping(X, Y, NetworkConfig(hidden=(8, 8), epochs=30, seed=2))
        x0 = rng.normal(size=5)
        J = net.jacobian(x0)
        for out_dim in range(2):
            def f(x, out_dim=out_dim):
                return float(net.forward(x)[0, out_dim])

            fd = _oracles.finite_difference(f, x0.copy())
            denom = np.maximum(np.abs(fd), 1e-4)
            assert np.max(np.abs(fd - J[out_dim]) / denom) <= 1e-4

    def test_map_input_consistency(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(50, 4))
        Y = rng.normal(size=(50, 2))
        net = train_mapping(X, Y, NetworkConfig(hidden=(8,), epochs=50, seed=0))
        a = map_input(net, X[3])
        b = map_input(net, X[3])
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, net.forward(X)[3], atol=1e-12)

    def test_map_input_validation(self):
        net = train_mapping(np.zeros((10, 3)), np.zeros((10, 2)),
                            NetworkConfig(hidden=(4,), epochs=1, seed=0))
        with pytest.raises(ValueError):
            map_input(net, np.array([np.nan, 0.0, 1.0]))
        with pytest.raises(ValueError):
            map_input(net, np.zeros(4))

    def test_training_fits_tsne_output(self):
        # the distance matrix is derived from the inputs themselves, so the
        # embedding is a learnable function of the inputs
        rng = np.random.default_rng(0)
        pts = np.vstack([rng.normal(-1.0, 0.3, size=(60, 2)),
                         rng.normal(1.0, 0.3, size=(60, 2))])
        D = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        emb = tsne_embed(D, small_config(iterations=400, perplexity=15.0))
        net = train_mapping(pts, emb, NetworkConfig(epochs=400, seed=0))
        span = emb.coordinates.max(axis=0) - emb.coordinates.min(axis=0)
        diagonal = float(np.linalg.norm(span))
        assert net.final_rmse <= 0.05 * diagonal

    def test_deterministic_training(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(40, 4))
        Y = rng.normal(size=(40, 2))
        cfg = NetworkConfig(hidden=(8,), epochs=20, seed=9)
        n1 = train_mapping(X, Y, cfg)
        n2 = train_mapping(X, Y, cfg)
        for a, b in zip(n1.weights, n2.weights):
            np.testing.assert_array_equal(a, b)

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(30, 4))
        Y = rng.normal(size=(30, 2))
        net = train_mapping(X, Y, NetworkConfig(hidden=(8, 4), epochs=10, seed=0))
        back = MappingNetwork.from_dict(net.to_dict())
        np.testing.assert_array_equal(net.forward(X), back.forward(X))

    def test_mismatched_counts_rejected(self):
        with pytest.raises(ValueError):
            train_mapping(np.zeros((5, 2)), np.zeros((4, 2)))
