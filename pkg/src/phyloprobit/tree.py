"""Rooted bifurcating trees: Newick parsing, validation, and covariance structure.

Trees index their nodes as: tips 0..N-1 (rows in sorted tip-label order),
internal nodes N..2N-2 assigned children-before-parent, root = 2N-2. With that
invariant, ascending node id is a valid post-order and descending id a valid
pre-order, which the traversal engine relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class NewickError(ValueError):
    """Malformed Newick input; the message carries the character position."""


class TreeError(ValueError):
    """Structurally invalid tree."""


@dataclass(frozen=True)
class RootPrior:
    """Conjugate prior on the tree root: mean vector and pseudo-sample-size."""

    mean: np.ndarray
    sample_size: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        if not np.all(np.isfinite(mean)):
            raise ValueError("root prior mean must be finite")
        if not (np.isfinite(self.sample_size) and self.sample_size > 0):
            raise ValueError("root prior sample size must be finite and > 0")


class CovarianceMode(Enum):
    """How the across-taxa covariance is built from the tree."""

    FULL_TREE = "full_tree"
    DATED_STAR = "dated_star"
    ULTRAMETRIC_STAR = "ultrametric_star"

    @classmethod
    def from_string(cls, name: str) -> "CovarianceMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown covariance mode {name!r} (expected one of: {valid})")


@dataclass(frozen=True)
class Tree:
    """Rooted bifurcating tree with branch lengths.

    Attributes
    ----------
    labels : tuple of str
        Tip labels in sorted order; tip i carries labels[i].
    parent : int array, shape (2N-1,)
        Parent node id; -1 for the root.
    branch : float array, shape (2N-1,)
        Branch length to the parent; 0.0 for the root.
    children : int array, shape (N-1, 2)
        Children of internal node N+k in row k.
    """

    labels: tuple
    parent: np.ndarray
    branch: np.ndarray
    children: np.ndarray
    postorder: np.ndarray = field(repr=False, default=None)
    preorder: np.ndarray = field(repr=False, default=None)
    depths: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n_nodes = self.parent.shape[0]
        object.__setattr__(self, "postorder", np.arange(n_nodes, dtype=np.int64))
        object.__setattr__(self, "preorder", np.arange(n_nodes - 1, -1, -1, dtype=np.int64))
        depths = np.zeros(n_nodes)
        for v in self.preorder[1:]:
            depths[v] = depths[self.parent[v]] + self.branch[v]
        object.__setattr__(self, "depths", depths)
        self._validate()

    @property
    def n_tips(self) -> int:
        return len(self.labels)

    @property
    def n_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def tip_order(self) -> dict:
        """Tip label -> row index map (emitted as run metadata)."""
        return {lab: i for i, lab in enumerate(self.labels)}

    def tip_depths(self) -> np.ndarray:
        """Root-to-tip path lengths (sample date minus root date on dated trees)."""
        return self.depths[: self.n_tips].copy()

    def _validate(self):
        n = self.n_tips
        if n < 2:
            raise TreeError("a tree needs at least 2 tips")
        if len(set(self.labels)) != n:
            raise TreeError("duplicate tip label")
        if self.parent.shape != (2 * n - 1,):
            raise TreeError("node count must be 2N-1")
        if self.children.shape != (n - 1, 2):
            raise TreeError("internal node count must be N-1")
        if not np.all(np.isfinite(self.branch)):
            raise TreeError("branch lengths must be finite")
        if np.any(self.branch < 0):
            raise TreeError("negative branch length")
        if self.parent[self.root] != -1:
            raise TreeError("root must have no parent")
        degree = np.zeros(self.n_nodes, dtype=int)
        for k in range(n - 1):
            v = n + k
            for c in self.children[k]:
                if not (0 <= c < v):
                    raise TreeError("children must precede their parent")
                if self.parent[c] != v:
                    raise TreeError("parent/child arrays disagree")
                degree[c] += 1
                degree[v] += 1
        if np.any(degree[:n] != 1):
            raise TreeError("every tip must have degree 1")
        if self.n_nodes > 3 and np.any(degree[n : self.root] != 3):
            raise TreeError("internal nodes must have degree 3")
        if degree[self.root] != 2:
            raise TreeError("root must have degree 2")


class _ParseNode:
    __slots__ = ("label", "length", "kids", "pos")

    def __init__(self, label=None, length=None, kids=None, pos=0):
        self.label = label
        self.length = length
        self.kids = kids
        self.pos = pos


_LABEL_STOP = set("(),:;")


def _read_label(s: str, i: int):
    j = i
    while j < len(s) and s[j] not in _LABEL_STOP and not s[j].isspace():
        j += 1
    return s[i:j], j


def _skip_ws(s: str, i: int) -> int:
    while i < len(s) and s[i].isspace():
        i += 1
    return i


def _read_length(s: str, i: int):
    """Read an optional ':<float>' suffix; returns (length or None, new index)."""
    i = _skip_ws(s, i)
    if i >= len(s) or s[i] != ":":
        return None, i
    j = _skip_ws(s, i + 1)
    k = j
    while k < len(s) and s[k] not in _LABEL_STOP and not s[k].isspace():
        k += 1
    token = s[j:k]
    try:
        value = float(token)
    except ValueError:
        raise NewickError(f"invalid branch length {token!r} at position {j}")
    if not np.isfinite(value):
        raise NewickError(f"non-finite branch length at position {j}")
    return value, k


def parse_newick(text: str) -> Tree:
    """Parse one Newick string into a validated bifurcating tree.

    Requirements: branch lengths on all non-root edges, every internal node
    bifurcating, unique tip labels. Internal node labels and a root branch
    length are accepted and ignored. Errors report the character position.
    """
    s = text.strip()
    if not s:
        raise NewickError("empty input at position 0")
    stack = []
    top = []
    expect_node = True
    i = 0
    done_at = None
    while i < len(s):
        c = s[i]
        if c.isspace():
            i += 1
            continue
        if expect_node:
            if c == "(":
                stack.append(top)
                top = []
                i += 1
            elif c in "),:;":
                raise NewickError(f"expected a node at position {i}")
            else:
                pos = i
                label, i = _read_label(s, i)
                if not label:
                    raise NewickError(f"empty tip label at position {i}")
                length, i = _read_length(s, i)
                top.append(_ParseNode(label=label, length=length, pos=pos))
                expect_node = False
        else:
            if c == ",":
                i += 1
                expect_node = True
            elif c == ")":
                if not stack:
                    raise NewickError(f"unbalanced ')' at position {i}")
                pos = i
                kids = top
                top = stack.pop()
                i += 1
                _, i = _read_label(s, i)  # internal label, ignored
                length, i = _read_length(s, i)
                top.append(_ParseNode(length=length, kids=kids, pos=pos))
            elif c == ";":
                done_at = i
                i += 1
                break
            else:
                raise NewickError(f"expected ',', ')' or ';' at position {i}")
    if done_at is None:
        raise NewickError(f"missing ';' at position {len(s)}")
    if s[done_at + 1 :].strip():
        raise NewickError(f"trailing content at position {done_at + 1}")
    if stack:
        raise NewickError(f"unbalanced '(' at position {done_at}")
    if len(top) != 1:
        raise NewickError(f"expected a single tree at position {done_at}")
    return _assemble(top[0])


def _assemble(root: _ParseNode) -> Tree:
    tips = []
    internals = []
    # iterative post-order over the parse structure, children before parents
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node.kids is None:
            tips.append(node)
            continue
        if len(node.kids) != 2:
            raise NewickError(f"non-bifurcating node at position {node.pos}")
        if expanded:
            internals.append(node)
        else:
            stack.append((node, True))
            for kid in node.kids:
                stack.append((kid, False))
    labels = sorted(t.label for t in tips)
    if len(set(labels)) != len(labels):
        dup = next(l for i, l in enumerate(labels[1:]) if l == labels[i])
        raise NewickError(f"duplicate tip label {dup!r}")
    n = len(tips)
    tip_id = {lab: i for i, lab in enumerate(labels)}
    ids = {id(t): tip_id[t.label] for t in tips}
    for k, node in enumerate(internals):
        ids[id(node)] = n + k
    n_nodes = 2 * n - 1
    parent = np.full(n_nodes, -1, dtype=np.int64)
    branch = np.zeros(n_nodes)
    children = np.zeros((n - 1, 2), dtype=np.int64)
    for node in tips + internals:
        v = ids[id(node)]
        if node is not root:
            if node.length is None:
                raise NewickError(f"missing branch length at position {node.pos}")
            if node.length < 0:
                raise NewickError(f"negative branch length at position {node.pos}")
            branch[v] = node.length
        if node.kids is not None:
            for kid in node.kids:
                parent[ids[id(kid)]] = v
            children[v - n] = [ids[id(k)] for k in node.kids]
    return Tree(labels=tuple(labels), parent=parent, branch=branch, children=children)


def read_trees(path) -> list:
    """Read one tree per non-empty line (single- or multi-tree Newick file)."""
    trees = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                trees.append(parse_newick(line))
            except NewickError as exc:
                raise NewickError(f"{path} line {lineno}: {exc}")
    if not trees:
        raise NewickError(f"{path}: no trees found")
    first = set(trees[0].labels)
    for k, tree in enumerate(trees[1:], start=2):
        if set(tree.labels) != first:
            raise TreeError(f"{path}: tree {k} has a different tip label set")
    return trees


def random_tree(n_tips: int, rng: np.random.Generator, height: float = 1.0,
                min_branch: float = 0.0) -> Tree:
    """Simulate a random coalescent tree with N tips, rescaled to given height.

    min_branch (in post-scaling units) is added to every branch; raw
    coalescent trees carry near-zero cherry branches, and the floor keeps the
    induced covariance well conditioned for synthetic studies.
    """
    if n_tips < 2:
        raise ValueError("need at least 2 tips")
    width = len(str(n_tips - 1))
    labels = tuple(f"t{i:0{width}d}" for i in range(n_tips))
    n_nodes = 2 * n_tips - 1
    parent = np.full(n_nodes, -1, dtype=np.int64)
    branch = np.zeros(n_nodes)
    children = np.zeros((n_tips - 1, 2), dtype=np.int64)
    node_height = np.zeros(n_nodes)
    active = list(range(n_tips))
    t = 0.0
    for k in range(n_tips - 1):
        m = len(active)
        t += rng.exponential(2.0 / (m * (m - 1)))
        i, j = rng.choice(m, size=2, replace=False)
        a, b = active[i], active[j]
        v = n_tips + k
        node_height[v] = t
        parent[a] = parent[b] = v
        branch[a] = t - node_height[a]
        branch[b] = t - node_height[b]
        children[k] = [a, b]
        active = [x for x in active if x not in (a, b)] + [v]
    scale = height / t
    branch *= scale
    if min_branch > 0.0:
        branch[:-1] += min_branch  # every non-root edge
    return Tree(labels=labels, parent=parent, branch=branch, children=children)


def shared_path_matrix(tree: Tree) -> np.ndarray:
    """Dense N x N tree diffusion matrix: diagonals are tip-to-root path
    lengths, off-diagonals the root-to-MRCA path length of the two tips."""
    n = tree.n_tips
    psi = np.zeros((n, n))
    below = [None] * tree.n_nodes
    for v in range(n):
        below[v] = [v]
    for k in range(n - 1):
        v = n + k
        a, b = tree.children[k]
        for i in below[a]:
            for j in below[b]:
                psi[i, j] = psi[j, i] = tree.depths[v]
        below[v] = below[a] + below[b]
    np.fill_diagonal(psi, tree.depths[:n])
    return psi


def tree_covariance_dense(tree: Tree, mode: CovarianceMode, kappa: float,
                          dates: np.ndarray | None = None) -> np.ndarray:
    """Dense across-taxa covariance for testing and small-N work.

    Full-tree mode augments the shared-path matrix with the integrated root
    prior, kappa^-1 * ones; the star modes keep taxa independent, so the root
    prior pads each diagonal entry instead. kappa = +inf drops the root term
    entirely (test use only). The inference path never materializes this.
    """
    if not kappa > 0:
        raise ValueError("kappa must be > 0")
    n = tree.n_tips
    inv_kappa = 0.0 if np.isinf(kappa) else 1.0 / kappa
    if mode is CovarianceMode.FULL_TREE:
        gamma = shared_path_matrix(tree) + inv_kappa
    else:
        psi = star_variances(tree, mode, dates)
        gamma = np.diag(psi + inv_kappa)
        if np.any(psi + inv_kappa <= 0):
            raise TreeError("star covariance has a non-positive diagonal entry")
    return gamma


def star_variances(tree: Tree, mode: CovarianceMode, dates: np.ndarray | None = None) -> np.ndarray:
    """Diagonal tree-diffusion entries for the star covariance modes."""
    n = tree.n_tips
    if mode is CovarianceMode.ULTRAMETRIC_STAR:
        return np.ones(n)
    if mode is CovarianceMode.DATED_STAR:
        psi = tree.tip_depths() if dates is None else np.asarray(dates, dtype=float)
        if psi.shape != (n,):
            raise ValueError("dates must have one entry per tip")
        if np.any(psi < 0) or not np.all(np.isfinite(psi)):
            raise ValueError("dated-star dates must be finite and not precede the root date")
        return psi
    raise ValueError("full-tree mode has no star variances")
