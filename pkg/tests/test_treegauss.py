import numpy as np
import pytest

from phyloprobit import (CovarianceMode, RootPrior, StarGaussian, TreeGaussian,
                         TreeError, TreePrecision, dense_precision, parse_newick,
                         post_order_pass, pre_order_pass, precision_column,
                         precision_vector_product, random_tree,
                         tree_covariance_dense)
from phyloprobit.treegauss import build_gaussian


def random_spd(p, rng):
    a = rng.standard_normal((p, p))
    return a @ a.T + p * np.eye(p)


def dense_kron_precision(tree, sigma_inv, kappa):
    gamma = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, kappa)
    return np.kron(np.linalg.inv(gamma), sigma_inv)


class TestPostOrderPass:
    def test_equal_weight_average(self):
        tree = parse_newick("(A:1.0,B:1.0);")
        post = post_order_pass(tree, np.array([[1.0], [3.0]]))
        assert post.variance[:2] == pytest.approx([0.0, 0.0])
        assert post.variance[2] == pytest.approx(0.5)
        assert post.mean[2, 0] == pytest.approx(2.0)

    def test_precision_weighted_average(self):
        tree = parse_newick("(A:1.0,B:3.0);")
        post = post_order_pass(tree, np.array([[1.0], [3.0]]))
        assert post.variance[2] == pytest.approx(0.75)
        assert post.mean[2, 0] == pytest.approx(1.5)

    def test_root_matches_gls_oracle(self):
        # generalized-least-squares marginalization through the dense covariance
        tree = parse_newick("((A:1.0,B:1.0):1.0,C:2.0);")
        rng = np.random.default_rng(0)
        values = rng.standard_normal((3, 2))
        post = post_order_pass(tree, values)
        psi = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, np.inf)
        ones = np.ones(3)
        w = np.linalg.solve(psi, ones)
        var_root = 1.0 / (ones @ w)
        mean_root = var_root * (w @ values)
        assert post.variance[tree.root] == pytest.approx(var_root)
        assert post.mean[tree.root] == pytest.approx(mean_root)

    def test_degenerate_cherry_rejected(self):
        tree = parse_newick("((A:0.0,B:0.0):1.0,C:2.0);")
        with pytest.raises(TreeError, match="cherry"):
            post_order_pass(tree, np.zeros((3, 1)))

    def test_single_zero_branch_passes_through(self):
        tree = parse_newick("((A:0.0,B:1.0):1.0,C:2.0);")
        post = post_order_pass(tree, np.array([[1.0], [5.0], [0.0]]))
        v = tree.parent[0]
        assert post.variance[v] == 0.0
        assert post.mean[v, 0] == 1.0


class TestPreOrderPass:
    def test_root_child_formula(self):
        # sibling tip with unit branch and value 3, root prior kappa=1, mean 0
        tree = parse_newick("(U:1.0,W:1.0);")
        prior = RootPrior(mean=np.zeros(1), sample_size=1.0)
        post = post_order_pass(tree, np.array([[0.0], [3.0]]), kappa=1.0)
        pre = pre_order_pass(tree, post, prior)
        u = 0  # tip "U" sorted first
        assert pre.half_variance[u] == pytest.approx(0.5)
        assert pre.mean[u, 0] == pytest.approx(1.5)
        assert pre.variance[u] == pytest.approx(1.5)

    def test_two_tip_matches_dense_conditioning(self):
        tree = parse_newick("(A:1.0,B:2.0);")
        kappa = 2.0
        prior = RootPrior(mean=np.array([0.7]), sample_size=kappa)
        rng = np.random.default_rng(1)
        values = rng.standard_normal((2, 1))
        gamma = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, kappa)
        post = post_order_pass(tree, values, kappa=kappa)
        pre = pre_order_pass(tree, post, prior)
        # conditional of A given B under N(mean, gamma * sigma), sigma = 1
        cond_mean = 0.7 + gamma[0, 1] / gamma[1, 1] * (values[1, 0] - 0.7)
        cond_var = gamma[0, 0] - gamma[0, 1] ** 2 / gamma[1, 1]
        assert pre.mean[0, 0] == pytest.approx(cond_mean)
        assert pre.variance[0] == pytest.approx(cond_var)

    def test_star_engine_independent_tips(self):
        # independent taxa: the conditional is the root prior padded by kappa
        kappa = 4.0
        star = StarGaussian(np.ones(5), kappa)
        values = np.arange(10.0).reshape(5, 2)
        mean, variance = star.tip_conditionals(values, np.array([0.25, -0.5]))
        assert mean == pytest.approx(np.tile([0.25, -0.5], (5, 1)))
        assert variance == pytest.approx(np.full(5, 1.0 + 1.0 / kappa))

    def test_matches_generic_gaussian_conditional_identity(self):
        # per-tip conditionals agree with the x_i - H_i / (G^-1)_ii identity
        rng = np.random.default_rng(2)
        tree = random_tree(12, rng)
        kappa = 3.0
        engine = TreeGaussian(tree, kappa)
        values = rng.standard_normal((12, 2))
        mu = np.array([0.3, -0.2])
        cond_mean, cond_var = engine.tip_conditionals(values, mu)
        gamma = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, kappa)
        gamma_inv = np.linalg.inv(gamma)
        h = gamma_inv @ (values - mu)
        want_var = 1.0 / np.diag(gamma_inv)
        want_mean = values - h * want_var[:, None]
        assert cond_var == pytest.approx(want_var)
        assert cond_mean == pytest.approx(want_mean)


class TestPrecisionProducts:
    def test_zero_maps_to_zero(self):
        rng = np.random.default_rng(3)
        tree = random_tree(8, rng)
        prior = RootPrior(mean=np.zeros(2), sample_size=1.5)
        out = precision_vector_product(tree, np.eye(2), prior, np.zeros(16))
        assert out == pytest.approx(np.zeros(16))

    def test_identity_covariance_is_identity_operator(self):
        star = StarGaussian(np.ones(6), np.inf)
        op = TreePrecision(star, np.eye(2))
        rng = np.random.default_rng(4)
        w = rng.standard_normal(12)
        assert op.matvec(w) == pytest.approx(w)
        assert op.column(5) == pytest.approx(np.eye(12)[:, 5])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        tree = random_tree(20, rng)
        kappa = 2.0
        sigma_inv = np.linalg.inv(random_spd(3, rng))
        prior = RootPrior(mean=np.zeros(3), sample_size=kappa)
        phi = dense_kron_precision(tree, sigma_inv, kappa)
        w = rng.standard_normal(60)
        got = precision_vector_product(tree, sigma_inv, prior, w)
        want = phi @ w
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-8

    def test_column_matches_dense_and_symmetry(self):
        rng = np.random.default_rng(6)
        tree = random_tree(7, rng)
        kappa = 1.3
        sigma_inv = np.linalg.inv(random_spd(2, rng))
        prior = RootPrior(mean=np.zeros(2), sample_size=kappa)
        phi = dense_kron_precision(tree, sigma_inv, kappa)
        op = TreePrecision(TreeGaussian(tree, kappa), sigma_inv)
        for i in (0, 5, 13):
            assert op.column(i) == pytest.approx(phi[:, i])
        # symmetry of the operator through its columns
        assert op.column(3)[9] == pytest.approx(op.column(9)[3])

    def test_column_index_validation(self):
        op = TreePrecision(StarGaussian(np.ones(3), 1.0), np.eye(2))
        with pytest.raises(IndexError):
            op.column(6)

    def test_dense_precision_assembly(self):
        rng = np.random.default_rng(7)
        tree = random_tree(5, rng)
        sigma = random_spd(2, rng)
        sigma_inv = np.linalg.inv(sigma)
        prior = RootPrior(mean=np.zeros(2), sample_size=3.0)
        got = dense_precision(tree, sigma_inv, prior)
        want = dense_kron_precision(tree, sigma_inv, 3.0)
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-8
        assert got == pytest.approx(got.T)
        np.linalg.cholesky(got)

    def test_dense_precision_two_tip_hand_inverse(self):
        tree = parse_newick("(A:1.0,B:2.0);")
        prior = RootPrior(mean=np.zeros(1), sample_size=1.0)
        got = dense_precision(tree, np.eye(1), prior)
        # gamma = [[2,1],[1,3]], det 5
        want = np.array([[3.0, -1.0], [-1.0, 2.0]]) / 5.0
        assert got == pytest.approx(want)

    def test_dense_precision_size_guard(self):
        rng = np.random.default_rng(8)
        tree = random_tree(60, rng)
        prior = RootPrior(mean=np.zeros(2), sample_size=1.0)
        with pytest.raises(ValueError, match="guard"):
            dense_precision(tree, np.eye(2), prior, max_dim=100)

    def test_gradient_identity_vs_finite_differences(self):
        # the product of (x - mean) equals minus the log-density gradient
        rng = np.random.default_rng(9)
        n, p = 6, 2
        tree = random_tree(n, rng)
        kappa = 2.0
        sigma = random_spd(p, rng)
        sigma_inv = np.linalg.inv(sigma)
        prior = RootPrior(mean=rng.standard_normal(p), sample_size=kappa)
        gamma = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, kappa)
        cov = np.kron(gamma, sigma)
        cov_inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        mean = np.tile(prior.mean, n)

        def logpdf(x):
            d = x - mean
            return -0.5 * (d @ cov_inv @ d) - 0.5 * logdet - 0.5 * n * p * np.log(2 * np.pi)

        x = rng.standard_normal(n * p)
        grad_from_product = -precision_vector_product(tree, sigma_inv, prior, x - mean)
        h = 1e-6
        for k in range(0, n * p, 3):
            e = np.zeros(n * p)
            e[k] = h
            fd = (logpdf(x + e) - logpdf(x - e)) / (2 * h)
            assert abs(grad_from_product[k] - fd) < 1e-5 * max(1.0, abs(fd))

    def test_deterministic_products(self):
        rng = np.random.default_rng(10)
        tree = random_tree(15, rng)
        engine = TreeGaussian(tree, 5.0)
        w = rng.standard_normal((15, 3))
        a = engine.solve(w)
        b = engine.solve(w)
        assert np.array_equal(a, b)


class TestSuffstats:
    def test_quadratic_form_and_logdet_match_dense(self):
        rng = np.random.default_rng(11)
        for kappa in (1.0, 7.0, np.inf):
            tree = random_tree(9, rng)
            engine = TreeGaussian(tree, kappa)
            values = rng.standard_normal((9, 3))
            mu = rng.standard_normal(3)
            logdet, quad = engine.suffstats(values, mu)
            gamma = tree_covariance_dense(tree, CovarianceMode.FULL_TREE, kappa)
            _, want_logdet = np.linalg.slogdet(gamma)
            centered = values - mu
            want_quad = centered.T @ np.linalg.solve(gamma, centered)
            assert logdet == pytest.approx(want_logdet)
            assert quad == pytest.approx(want_quad, abs=1e-9)

    def test_star_suffstats(self):
        rng = np.random.default_rng(12)
        psi = rng.uniform(0.5, 2.0, size=6)
        star = StarGaussian(psi, 4.0)
        values = rng.standard_normal((6, 2))
        logdet, quad = star.suffstats(values, 0.0)
        gamma = np.diag(psi + 0.25)
        assert logdet == pytest.approx(np.linalg.slogdet(gamma)[1])
        assert quad == pytest.approx(values.T @ np.linalg.solve(gamma, values))


class TestStatsDump:
    def test_traversal_stats_serialize_to_json(self):
        import json

        tree = parse_newick("(A:1.0,B:2.0);")
        prior = RootPrior(mean=np.zeros(1), sample_size=2.0)
        post = post_order_pass(tree, np.array([[1.0], [2.0]]), kappa=2.0)
        pre = pre_order_pass(tree, post, prior)
        blob = json.dumps({"post": post.to_dict(), "pre": pre.to_dict()})
        back = json.loads(blob)
        assert back["post"]["variance"] == post.variance.tolist()
        assert back["pre"]["mean"] == pre.mean.tolist()


class TestBuildGaussian:
    def test_modes_dispatch(self):
        rng = np.random.default_rng(13)
        tree = random_tree(6, rng)
        assert isinstance(build_gaussian(tree, CovarianceMode.FULL_TREE, 1.0), TreeGaussian)
        star = build_gaussian(tree, CovarianceMode.ULTRAMETRIC_STAR, 1.0)
        assert isinstance(star, StarGaussian)
        dated = build_gaussian(tree, CovarianceMode.DATED_STAR, 1.0)
        assert dated.logdet_gamma == pytest.approx(
            np.sum(np.log(tree.tip_depths() + 1.0)))

    def test_star_solve_matches_dense(self):
        rng = np.random.default_rng(14)
        tree = random_tree(5, rng)
        star = build_gaussian(tree, CovarianceMode.DATED_STAR, 2.0)
        gamma = tree_covariance_dense(tree, CovarianceMode.DATED_STAR, 2.0)
        w = rng.standard_normal((5, 2))
        assert star.solve(w) == pytest.approx(np.linalg.solve(gamma, w))
