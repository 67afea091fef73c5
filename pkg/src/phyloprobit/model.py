"""Phylogenetic multivariate probit model assembly.

Trait ingestion maps observed binary cells to -1/+1, keeps continuous cells
as-is, and marks "NA" cells missing. Internally columns are reordered so the
binary block comes first, and rows are aligned to the sorted tip order of the
tree. The latent matrix relates to the observations by sign-thresholding on
binary columns and identity on continuous columns; observed continuous cells
clamp their latent dimension, observed binary cells constrain its sign, and
missing cells leave it free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bps import TruncatedNormalTarget
from .tree import CovarianceMode, RootPrior, Tree, tree_covariance_dense
from .treegauss import TreePrecision


class DataError(ValueError):
    """Trait data inconsistent with its declaration or the tree."""


BINARY = "binary"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ColumnSpec:
    """Declared kind of one trait column, with the binary coding."""

    kind: str
    negative: str = "0"
    positive: str = "1"

    def __post_init__(self):
        if self.kind not in (BINARY, CONTINUOUS):
            raise DataError(f"unknown column kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "ColumnSpec":
        """Parse 'continuous', 'binary', or 'binary(neg,pos)'."""
        text = text.strip()
        if text == CONTINUOUS:
            return cls(CONTINUOUS)
        if text == BINARY:
            return cls(BINARY)
        if text.startswith("binary(") and text.endswith(")"):
            inner = text[len("binary(") : -1]
            parts = [p.strip() for p in inner.split(",")]
            if len(parts) != 2 or not all(parts):
                raise DataError(f"binary coding must name two values: {text!r}")
            return cls(BINARY, parts[0], parts[1])
        raise DataError(f"cannot parse column spec {text!r}")


@dataclass
class TraitData:
    """Observation matrix in canonical layout: binary columns first.

    values holds -1/+1 in binary cells and raw measurements in continuous
    cells; missing cells are NaN with observed False.
    """

    values: np.ndarray
    observed: np.ndarray
    n_binary: int
    names: tuple
    taxa: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise DataError("values and observed must have the same shape")
        n, p = self.values.shape
        if len(self.names) != p or len(self.taxa) != n:
            raise DataError("names/taxa lengths disagree with the matrix")
        binary_block = self.values[:, : self.n_binary]
        obs_binary = self.observed[:, : self.n_binary]
        if not np.all(np.isin(binary_block[obs_binary], (-1.0, 1.0))):
            raise DataError("observed binary cells must be -1 or +1")
        cont_block = self.values[:, self.n_binary :]
        if not np.all(np.isfinite(cont_block[self.observed[:, self.n_binary :]])):
            raise DataError("observed continuous cells must be finite")

    @property
    def n_taxa(self) -> int:
        return self.values.shape[0]

    @property
    def n_traits(self) -> int:
        return self.values.shape[1]

    @property
    def n_continuous(self) -> int:
        return self.n_traits - self.n_binary


def load_traits(source, column_spec: dict, tip_labels) -> TraitData:
    """Read a trait CSV (header of trait names, first column taxon label) and
    align rows with the tree's sorted tip order.

    column_spec maps every trait name to a ColumnSpec (or its string form).
    Binary cells must match the declared coding; "NA" marks a missing cell.
    """
    spec = {
        name: s if isinstance(s, ColumnSpec) else ColumnSpec.parse(s)
        for name, s in column_spec.items()
    }
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        fh = open(source, newline="")
        close = True
    else:
        fh = source
        close = False
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("trait file is empty")
        if len(header) < 2:
            raise DataError("trait file needs a taxon column and at least one trait")
        trait_names = [h.strip() for h in header[1:]]
        unknown = [t for t in trait_names if t not in spec]
        if unknown:
            raise DataError(f"traits without a column spec: {', '.join(unknown)}")
        missing_spec = [t for t in spec if t not in trait_names]
        if missing_spec:
            raise DataError(f"column spec names absent from the file: {', '.join(missing_spec)}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            taxon = row[0].strip()
            if taxon in rows:
                raise DataError(f"line {lineno}: duplicate taxon {taxon!r}")
            rows[taxon] = [c.strip() for c in row[1:]]
    finally:
        if close:
            fh.close()

    tip_labels = list(tip_labels)
    unknown_taxa = sorted(set(rows) - set(tip_labels))
    if unknown_taxa:
        raise DataError(f"taxa absent from the tree: {', '.join(unknown_taxa)}")
    absent = sorted(set(tip_labels) - set(rows))
    if absent:
        raise DataError(f"tree tips absent from the trait file: {', '.join(absent)}")

    binary_names = [t for t in trait_names if spec[t].kind == BINARY]
    cont_names = [t for t in trait_names if spec[t].kind == CONTINUOUS]
    ordered = binary_names + cont_names
    col_of = {t: k for k, t in enumerate(trait_names)}

    n, p = len(tip_labels), len(ordered)
    values = np.full((n, p), np.nan)
    observed = np.zeros((n, p), dtype=bool)
    for i, taxon in enumerate(tip_labels):
        cells = rows[taxon]
        for k, name in enumerate(ordered):
            cell = cells[col_of[name]]
            if cell == "NA":
                continue
            s = spec[name]
            if s.kind == BINARY:
                if cell == s.negative:
                    values[i, k] = -1.0
                elif cell == s.positive:
                    values[i, k] = 1.0
                else:
                    raise DataError(
                        f"taxon {taxon!r}, trait {name!r}: value {cell!r} outside "
                        f"the declared coding ({s.negative}, {s.positive})"
                    )
            else:
                try:
                    values[i, k] = float(cell)
                except ValueError:
                    raise DataError(
                        f"taxon {taxon!r}, trait {name!r}: non-numeric value {cell!r}"
                    )
            observed[i, k] = True
    return TraitData(
        values=values,
        observed=observed,
        n_binary=len(binary_names),
        names=tuple(ordered),
        taxa=tuple(tip_labels),
    )


def build_target(traits: TraitData, gaussian, sigma_inv: np.ndarray,
                 root_mean: np.ndarray) -> TruncatedNormalTarget:
    """Truncated-normal target over the vectorized latent matrix.

    Observed binary cells become sign constraints, observed continuous cells
    are clamped, missing cells are unconstrained.
    """
    n, p = traits.values.shape
    root_mean = np.broadcast_to(np.asarray(root_mean, dtype=float), (p,))
    signs = np.zeros((n, p), dtype=np.int8)
    binary = np.zeros((n, p), dtype=bool)
    binary[:, : traits.n_binary] = True
    obs_binary = binary & traits.observed
    signs[obs_binary] = traits.values[obs_binary].astype(np.int8)
    fixed = traits.observed & ~binary
    return TruncatedNormalTarget(
        mean=np.tile(root_mean, n),
        precision=TreePrecision(gaussian, sigma_inv),
        signs=signs.ravel(),
        fixed=fixed.ravel(),
    )


def latent_is_consistent(latent: np.ndarray, traits: TraitData) -> bool:
    """Whether the latent matrix reproduces every observed cell exactly."""
    latent = np.asarray(latent, dtype=float)
    nb = traits.n_binary
    obs_b = traits.observed[:, :nb]
    if np.any(np.sign(latent[:, :nb][obs_b]) != traits.values[:, :nb][obs_b]):
        return False
    obs_c = traits.observed[:, nb:]
    return bool(np.all(latent[:, nb:][obs_c] == traits.values[:, nb:][obs_c]))


def augmented_log_likelihood(latent: np.ndarray, traits: TraitData, sigma: np.ndarray,
                             gaussian, root_mean) -> float:
    """Joint log-density of (observations, latent traits): -inf when any
    observed cell is inconsistent, else the matrix-normal log-density."""
    if not latent_is_consistent(latent, traits):
        return -np.inf
    sigma = np.asarray(sigma, dtype=float)
    n, p = latent.shape
    chol = np.linalg.cholesky(sigma)
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(chol))))
    sigma_inv = np.linalg.inv(sigma)
    logdet_gamma, quad = gaussian.suffstats(latent, root_mean)
    return float(
        -0.5 * n * p * np.log(2.0 * np.pi)
        - 0.5 * p * logdet_gamma
        - 0.5 * n * logdet_sigma
        - 0.5 * np.sum(sigma_inv * quad)
    )


def initial_latent(traits: TraitData, rng: np.random.Generator) -> np.ndarray:
    """Interior, unit-scale starting latent matrix: observed continuous cells
    exactly, observed binary cells a signed half-normal draw, missing cells a
    standard normal draw."""
    n, p = traits.values.shape
    latent = rng.standard_normal((n, p))
    nb = traits.n_binary
    obs_b = traits.observed[:, :nb]
    latent[:, :nb][obs_b] = traits.values[:, :nb][obs_b] * np.abs(latent[:, :nb][obs_b])
    obs_c = traits.observed[:, nb:]
    latent[:, nb:][obs_c] = traits.values[:, nb:][obs_c]
    return latent


def simulate_latent(tree: Tree, mode: CovarianceMode, sigma: np.ndarray,
                    root_prior: RootPrior, rng: np.random.Generator) -> np.ndarray:
    """Draw one latent tip matrix from the matrix-normal model (dense; meant
    for synthetic studies at desk scale)."""
    gamma = tree_covariance_dense(tree, mode, root_prior.sample_size)
    chol_gamma = np.linalg.cholesky(gamma)
    chol_sigma = np.linalg.cholesky(np.asarray(sigma, dtype=float))
    n = tree.n_tips
    p = sigma.shape[0]
    noise = rng.standard_normal((n, p))
    return root_prior.mean[None, :] + chol_gamma @ noise @ chol_sigma.T


def threshold_traits(latent: np.ndarray, n_binary: int, names=None, taxa=None,
                     missing_rate: float = 0.0,
                     rng: np.random.Generator | None = None) -> TraitData:
    """Observe a latent matrix: sign-threshold the binary block, pass the
    continuous block through, optionally knock cells out at random."""
    latent = np.asarray(latent, dtype=float)
    n, p = latent.shape
    values = latent.copy()
    values[:, :n_binary] = np.where(latent[:, :n_binary] > 0, 1.0, -1.0)
    observed = np.ones((n, p), dtype=bool)
    if missing_rate > 0.0:
        if rng is None:
            raise ValueError("missing_rate > 0 needs an rng")
        observed = rng.random((n, p)) >= missing_rate
        values = np.where(observed, values, np.nan)
    if names is None:
        names = tuple(f"b{j}" for j in range(n_binary)) + tuple(
            f"c{j}" for j in range(p - n_binary)
        )
    if taxa is None:
        taxa = tuple(f"t{i}" for i in range(n))
    return TraitData(values=values, observed=observed, n_binary=n_binary,
                     names=tuple(names), taxa=tuple(taxa))


def traits_to_csv(traits: TraitData, path, binary_as: tuple = ("0", "1")):
    """Write a TraitData back to the CSV interchange format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["taxon"] + list(traits.names))
        neg, pos = binary_as
        for i, taxon in enumerate(traits.taxa):
            row = [taxon]
            for j in range(traits.n_traits):
                if not traits.observed[i, j]:
                    row.append("NA")
                elif j < traits.n_binary:
                    row.append(pos if traits.values[i, j] > 0 else neg)
                else:
                    row.append(repr(float(traits.values[i, j])))
            writer.writerow(row)
