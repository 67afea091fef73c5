"""Dynamic-programming engine for the matrix-normal tip distribution.

Computes per-tip conditional means and variance scalars by one post-order and
one pre-order traversal, and uses them to apply the NP x NP precision of the
tip distribution to arbitrary vectors in O(N P^2), without ever inverting the
N x N across-taxa covariance.

Variance scalars depend only on (tree, kappa), so they are computed once at
construction; per-product work is the two mean recursions plus one P x P
multiply. The mean recursions run level-by-level over precomputed node
groupings (iterative, no recursion), which keeps the cost linear in N while
letting numpy batch the per-level updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import CovarianceMode, RootPrior, Tree, TreeError, star_variances


@dataclass
class PostOrderStats:
    """Partial-data means and variance scalars from the tip-to-root pass."""

    mean: np.ndarray      # (2N-1, P)
    variance: np.ndarray  # (2N-1,)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "variance": self.variance.tolist()}


@dataclass
class PreOrderStats:
    """Conditional means and variance scalars from the root-to-tip pass."""

    mean: np.ndarray           # (2N-1, P)
    variance: np.ndarray       # (2N-1,) tip entries give the conditional variance scalar
    half_variance: np.ndarray  # (2N-1,) intermediate, before adding the own branch

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "half_variance": self.half_variance.tolist(),
        }


def _tip_matrix(values, n: int) -> np.ndarray:
    """Coerce tip data to an N x P float matrix (1-D input is one trait)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ValueError(f"expected tip data with {n} rows, got shape {arr.shape}")
    return arr


def _combine(q_a: float, q_b: float):
    """Precision-weighted combination of two variance scalars.

    Returns (pooled variance, weight on a, weight on b). A zero scalar means
    an exactly known value and takes all the weight; both zero is degenerate.
    """
    if q_a == 0.0 and q_b == 0.0:
        return None
    if q_a == 0.0:
        return 0.0, 1.0, 0.0
    if q_b == 0.0:
        return 0.0, 0.0, 1.0
    ia, ib = 1.0 / q_a, 1.0 / q_b
    pooled = 1.0 / (ia + ib)
    return pooled, pooled * ia, pooled * ib


class TreeGaussian:
    """Traversal engine bound to one (tree, kappa) configuration.

    kappa may be +inf, meaning the root is pinned at the prior mean and the
    across-taxa covariance is the bare tree diffusion matrix (test use).
    """

    def __init__(self, tree: Tree, kappa: float):
        if not kappa > 0:
            raise ValueError("kappa must be > 0")
        self.tree = tree
        self.kappa = float(kappa)
        self._inv_kappa = 0.0 if np.isinf(kappa) else 1.0 / kappa
        n = tree.n_tips
        self.n = n
        n_nodes = tree.n_nodes
        branch = tree.branch
        children = tree.children

        # post-order variance scalars and child weights
        post_var = np.zeros(n_nodes)
        post_cu = np.zeros(n - 1)
        post_cw = np.zeros(n - 1)
        comb_s = np.zeros(n - 1)
        for k in range(n - 1):
            u, w = children[k]
            q_u = post_var[u] + branch[u]
            q_w = post_var[w] + branch[w]
            res = _combine(q_u, q_w)
            if res is None:
                raise TreeError(
                    f"degenerate zero-branch cherry at internal node {n + k}: "
                    "both children contribute zero variance"
                )
            post_var[n + k], post_cu[k], post_cw[k] = res
            comb_s[k] = q_u + q_w

        # pre-order variance scalars and (sibling, parent) weights
        pre_var = np.zeros(n_nodes)
        pre_half = np.zeros(n_nodes)
        pre_cs = np.zeros(n_nodes)
        pre_cp = np.zeros(n_nodes)
        pre_var[tree.root] = self._inv_kappa
        sibling = np.full(n_nodes, -1, dtype=np.int64)
        for k in range(n - 2, -1, -1):
            v = n + k
            u, w = children[k]
            sibling[u], sibling[w] = w, u
            for child, sib in ((u, w), (w, u)):
                q_sib = post_var[sib] + branch[sib]
                res = _combine(q_sib, pre_var[v])
                if res is None:
                    raise TreeError(
                        f"degenerate configuration at node {child}: zero variance "
                        "from both the sibling and the root side"
                    )
                pre_half[child], pre_cs[child], pre_cp[child] = res
                pre_var[child] = pre_half[child] + branch[child]
        if np.any(pre_var[:n] <= 0):
            bad = int(np.nonzero(pre_var[:n] <= 0)[0][0])
            raise TreeError(
                f"tip {bad} has zero conditional variance; the across-taxa "
                "covariance is singular"
            )

        self._post_var = post_var
        self._pre_var = pre_var
        self._pre_half = pre_half
        self._comb_s = comb_s
        root_s = post_var[tree.root] + self._inv_kappa
        if root_s <= 0:
            raise TreeError("root combination has zero variance; covariance is singular")
        self._root_s = root_s
        self.logdet_gamma = float(np.sum(np.log(comb_s)) + np.log(root_s))
        self._inv_pre_tip = 1.0 / pre_var[:n]

        # level schedules for the batched mean recursions
        internal = np.arange(n, n_nodes)
        level = np.zeros(n_nodes, dtype=np.int64)
        for k in range(n - 1):
            u, w = children[k]
            level[n + k] = max(level[u], level[w]) + 1
        self._post_levels = []
        for lev in range(1, int(level.max()) + 1):
            vs = internal[level[internal] == lev]
            ks = vs - n
            self._post_levels.append(
                (vs, children[ks, 0], children[ks, 1], post_cu[ks, None], post_cw[ks, None])
            )
        depth = np.zeros(n_nodes, dtype=np.int64)
        for v in tree.preorder[1:]:
            depth[v] = depth[tree.parent[v]] + 1
        self._pre_levels = []
        nodes = np.arange(n_nodes - 1)  # all but the root
        for lev in range(1, depth.max() + 1):
            us = nodes[depth[nodes] == lev]
            self._pre_levels.append(
                (us, sibling[us], tree.parent[us], pre_cs[us, None], pre_cp[us, None])
            )
        self._columns = {}

    # -- traversals ---------------------------------------------------------

    def post_order_means(self, tip_values: np.ndarray) -> np.ndarray:
        tip_values = _tip_matrix(tip_values, self.n)
        means = np.empty((self.tree.n_nodes, tip_values.shape[1]))
        means[: self.n] = tip_values
        for vs, us, ws, cu, cw in self._post_levels:
            means[vs] = cu * means[us] + cw * means[ws]
        return means

    def pre_order_means(self, post_means: np.ndarray, root_mean) -> np.ndarray:
        out = np.empty_like(post_means)
        out[self.tree.root] = root_mean
        for us, sibs, pars, cs, cp in self._pre_levels:
            out[us] = cs * post_means[sibs] + cp * out[pars]
        return out

    # -- products -----------------------------------------------------------

    def solve(self, tip_values: np.ndarray) -> np.ndarray:
        """Apply the inverse across-taxa covariance to an N x P matrix."""
        tip_values = _tip_matrix(tip_values, self.n)
        post = self.post_order_means(tip_values)
        cond = self.pre_order_means(post, 0.0)
        return self._inv_pre_tip[:, None] * (tip_values - cond[: self.n])

    def column(self, taxon: int) -> np.ndarray:
        """One column of the inverse across-taxa covariance, cached per taxon."""
        col = self._columns.get(taxon)
        if col is None:
            if not 0 <= taxon < self.n:
                raise IndexError("taxon index out of range")
            unit = np.zeros((self.n, 1))
            unit[taxon, 0] = 1.0
            col = self.solve(unit)[:, 0]
            col.flags.writeable = False
            self._columns[taxon] = col
        return col

    # -- likelihood pieces ----------------------------------------------------

    def suffstats(self, tip_values: np.ndarray, root_mean) -> tuple[float, np.ndarray]:
        """Log-determinant of the across-taxa covariance and the P x P
        quadratic-form matrix of the matrix-normal likelihood."""
        post = self.post_order_means(tip_values)
        n = self.n
        u = self.tree.children[:, 0]
        w = self.tree.children[:, 1]
        rows = np.empty((n, post.shape[1]))
        rows[: n - 1] = post[u] - post[w]
        rows[n - 1] = post[self.tree.root] - root_mean
        scales = np.concatenate([self._comb_s, [self._root_s]])
        quad = rows.T @ (rows / scales[:, None])
        return self.logdet_gamma, quad

    def tip_conditionals(self, tip_values: np.ndarray, root_mean) -> tuple[np.ndarray, np.ndarray]:
        """Per-tip conditional means and variance scalars given all other tips."""
        post = self.post_order_means(tip_values)
        cond = self.pre_order_means(post, root_mean)
        return cond[: self.n], self._pre_var[: self.n].copy()


class StarGaussian:
    """Independent-taxa analogue of TreeGaussian: diagonal across-taxa
    covariance psi_i + kappa^-1 (the root prior pads each taxon separately)."""

    def __init__(self, variances: np.ndarray, kappa: float):
        if not kappa > 0:
            raise ValueError("kappa must be > 0")
        self.kappa = float(kappa)
        inv_kappa = 0.0 if np.isinf(kappa) else 1.0 / kappa
        diag = np.asarray(variances, dtype=float) + inv_kappa
        if diag.ndim != 1 or np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise TreeError("star covariance diagonal must be positive and finite")
        self.n = diag.shape[0]
        self._diag = diag
        self._inv_diag = 1.0 / diag
        self.logdet_gamma = float(np.sum(np.log(diag)))

    def solve(self, tip_values: np.ndarray) -> np.ndarray:
        return _tip_matrix(tip_values, self.n) * self._inv_diag[:, None]

    def column(self, taxon: int) -> np.ndarray:
        if not 0 <= taxon < self.n:
            raise IndexError("taxon index out of range")
        col = np.zeros(self.n)
        col[taxon] = self._inv_diag[taxon]
        return col

    def suffstats(self, tip_values: np.ndarray, root_mean) -> tuple[float, np.ndarray]:
        centered = _tip_matrix(tip_values, self.n) - root_mean
        quad = centered.T @ (centered * self._inv_diag[:, None])
        return self.logdet_gamma, quad

    def tip_conditionals(self, tip_values: np.ndarray, root_mean) -> tuple[np.ndarray, np.ndarray]:
        tip_values = _tip_matrix(tip_values, self.n)
        cond = np.broadcast_to(np.asarray(root_mean, dtype=float),
                               tip_values.shape).copy()
        return cond, self._diag.copy()


def build_gaussian(tree: Tree, mode: CovarianceMode, kappa: float,
                   dates: np.ndarray | None = None):
    """Across-taxa engine for the configured covariance mode."""
    if mode is CovarianceMode.FULL_TREE:
        return TreeGaussian(tree, kappa)
    return StarGaussian(star_variances(tree, mode, dates), kappa)


class TreePrecision:
    """Matrix-free NP x NP precision operator of the tip distribution.

    Supplies products and single columns; columns factor into a cached
    across-taxa column times a row of the trait precision, so boundary
    bounces in the sampler avoid the full product.
    """

    def __init__(self, gaussian, sigma_inv: np.ndarray):
        sigma_inv = np.asarray(sigma_inv, dtype=float)
        self.gaussian = gaussian
        self.sigma_inv = sigma_inv
        self.n_traits = sigma_inv.shape[0]
        self.dim = gaussian.n * self.n_traits

    def matvec(self, vector: np.ndarray) -> np.ndarray:
        mat = np.asarray(vector, dtype=float).reshape(self.gaussian.n, self.n_traits)
        return (self.gaussian.solve(mat) @ self.sigma_inv).ravel()

    def column(self, index: int) -> np.ndarray:
        if not 0 <= index < self.dim:
            raise IndexError("dimension index out of range")
        taxon, trait = divmod(index, self.n_traits)
        return np.outer(self.gaussian.column(taxon), self.sigma_inv[trait]).ravel()


# -- spec-level convenience wrappers (tests, small problems) -----------------


def post_order_pass(tree: Tree, tip_values: np.ndarray, kappa: float = np.inf) -> PostOrderStats:
    engine = TreeGaussian(tree, kappa)
    means = engine.post_order_means(tip_values)
    return PostOrderStats(mean=means, variance=engine._post_var.copy())


def pre_order_pass(tree: Tree, post: PostOrderStats, root_prior: RootPrior) -> PreOrderStats:
    engine = TreeGaussian(tree, root_prior.sample_size)
    means = engine.pre_order_means(post.mean, root_prior.mean)
    return PreOrderStats(
        mean=means,
        variance=engine._pre_var.copy(),
        half_variance=engine._pre_half.copy(),
    )


def precision_vector_product(tree: Tree, sigma_inv: np.ndarray, root_prior: RootPrior,
                             vector: np.ndarray) -> np.ndarray:
    """Apply the NP x NP tip-distribution precision to a length-NP vector."""
    return TreePrecision(TreeGaussian(tree, root_prior.sample_size), sigma_inv).matvec(vector)


def precision_column(tree: Tree, sigma_inv: np.ndarray, root_prior: RootPrior,
                     index: int) -> np.ndarray:
    return TreePrecision(TreeGaussian(tree, root_prior.sample_size), sigma_inv).column(index)


def dense_precision(tree: Tree, sigma_inv: np.ndarray, root_prior: RootPrior,
                    max_dim: int = 5000) -> np.ndarray:
    """Materialize the full precision column by column. Test and debug only."""
    op = TreePrecision(TreeGaussian(tree, root_prior.sample_size), sigma_inv)
    if op.dim > max_dim:
        raise ValueError(f"dense precision guard: NP = {op.dim} exceeds {max_dim}")
    out = np.empty((op.dim, op.dim))
    for i in range(op.dim):
        out[:, i] = op.column(i)
    return out
