"""Random-scan Gibbs sampler over latent tip traits and the trait covariance.

Each iteration draws one kernel by weight: the latent block moves by a bouncy
particle transition over the whole NP-dimensional truncated normal, the
covariance block by an HMC update in unconstrained coordinates. Multiple
supplied trees are cycled round-robin, one per sweep. Chains draw from
disjoint streams of a counter-based generator spawned off one root seed, so
runs are reproducible regardless of how chains are scheduled.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as dense_cholesky
from scipy.linalg import solve as dense_solve

from .bps import TruncatedNormalTarget, bps_transition, estimate_covariance_lambda_max
from .covariance import CovarianceDecomposition, CovarianceTarget
from .diagnostics import ess
from .hmc import (DualAveragingStepSize, find_reasonable_step, hmc_transition,
                  jittered_steps)
from .model import TraitData, build_target, initial_latent
from .tree import RootPrior
from .treegauss import StarGaussian, TreePrecision


@dataclass
class GibbsSchedule:
    """Kernel weights, sweep counts, thinning, and the root seed."""

    iterations: int
    warmup: int = 1000
    thin: int = 1
    latent_weight: float = 0.8
    covariance_weight: float = 0.2
    seed: int = 0
    save_latent: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thinning interval must be >= 1")
        if self.latent_weight < 0 or self.covariance_weight < 0:
            raise ValueError("kernel weights must be nonnegative")
        total = self.latent_weight + self.covariance_weight
        if total <= 0:
            raise ValueError("at least one kernel weight must be positive")
        self.latent_weight = self.latent_weight / total
        self.covariance_weight = self.covariance_weight / total


@dataclass
class GibbsModel:
    """Fixed ingredients of a run: data, across-taxa engines, priors, tuning."""

    traits: TraitData
    gaussians: list
    root_prior: RootPrior
    eta: float = 1.0
    travel_multiplier: float = 0.01
    target_accept: float = 0.8
    path_length: float = 1.0
    initial_step: float | None = None
    max_leapfrog: int = 128
    include_likelihood: bool = True
    debug_checks: bool = False
    _lambda_gamma: list = field(default=None, repr=False, init=False)

    def __post_init__(self):
        if self.root_prior.mean.shape != (self.traits.n_traits,):
            raise ValueError("root prior mean length must match the trait count")
        if not self.gaussians:
            raise ValueError("need at least one across-taxa engine")
        for g in self.gaussians:
            if g.n != self.traits.n_taxa:
                raise ValueError("across-taxa engine size disagrees with the traits")

    def gamma_lambda_max(self, index: int) -> float:
        """Largest across-taxa covariance eigenvalue, cached per engine."""
        if self._lambda_gamma is None:
            self._lambda_gamma = [None] * len(self.gaussians)
        if self._lambda_gamma[index] is None:
            gaussian = self.gaussians[index]
            if isinstance(gaussian, StarGaussian):
                self._lambda_gamma[index] = float(gaussian._diag.max())
            else:
                op = TreePrecision(gaussian, np.eye(1))
                self._lambda_gamma[index] = estimate_covariance_lambda_max(op)
        return self._lambda_gamma[index]


@dataclass
class SampleRecord:
    """One thinned draw: correlation entries, continuous scales, optional
    latent snapshot, and a snapshot of the per-kernel counters."""

    iteration: int
    correlation: np.ndarray
    scales: np.ndarray
    latent: np.ndarray | None
    stats: dict


@dataclass
class ChainResult:
    """Collected output of one chain."""

    correlation: np.ndarray           # (records, P(P-1)/2)
    scales: np.ndarray                # (records, n_continuous)
    iterations: np.ndarray
    latent: np.ndarray | None         # (records, N, P) when saved
    counters: dict
    correlation_names: list
    scale_names: list

    @property
    def column_names(self) -> list:
        return self.correlation_names + self.scale_names

    def samples_matrix(self) -> np.ndarray:
        if self.scales.size:
            return np.concatenate([self.correlation, self.scales], axis=1)
        return self.correlation


def correlation_names(n_traits: int) -> list:
    iu = np.triu_indices(n_traits, k=1)
    return [f"R[{i + 1},{j + 1}]" for i, j in zip(*iu)]


def scale_names(n_binary: int, n_traits: int) -> list:
    return [f"delta[{k + 1}]" for k in range(n_traits - n_binary)]


def iter_chain(model: GibbsModel, schedule: GibbsSchedule, seed_seq):
    """Generator over thinned SampleRecords for one chain.

    seed_seq is a numpy SeedSequence (or an int root seed); the schedule,
    latent kernel, and covariance kernel each get their own Philox stream.
    """
    if not isinstance(seed_seq, np.random.SeedSequence):
        seed_seq = np.random.SeedSequence(seed_seq)
    ss_sched, ss_latent, ss_cov = seed_seq.spawn(3)
    rng_sched = np.random.Generator(np.random.Philox(ss_sched))
    rng_latent = np.random.Generator(np.random.Philox(ss_latent))
    rng_cov = np.random.Generator(np.random.Philox(ss_cov))

    traits = model.traits
    nb, nc = traits.n_binary, traits.n_continuous
    latent = initial_latent(traits, rng_latent)
    theta = np.zeros(traits.n_traits * (traits.n_traits - 1) // 2 + nc)
    decomp = CovarianceDecomposition.from_unconstrained(theta, nb, nc)
    lam_sigma = float(np.linalg.eigvalsh(decomp.sigma).max())
    step = model.initial_step
    if step is None:
        probe = _covariance_target(model, model.gaussians[0], latent)
        step = find_reasonable_step(theta, probe.logpdf_and_grad, rng_cov)
    adapter = DualAveragingStepSize(step, target_accept=model.target_accept)
    step_frozen = schedule.warmup == 0
    if step_frozen:
        step = adapter.finalize()
    counters = {
        "latent_updates": 0,
        "covariance_updates": 0,
        "covariance_accepts": 0,
        "divergences": 0,
        "gradient_events": 0,
        "boundary_events": 0,
    }
    n_engines = len(model.gaussians)

    # the constraint pattern is data-fixed; only the precision block changes
    proto = build_target(traits, model.gaussians[0], decomp.sigma_inv, model.root_prior.mean)
    sigma_version = 0
    target_cache = {}

    for iteration in range(schedule.iterations):
        engine_idx = iteration % n_engines
        gaussian = model.gaussians[engine_idx]
        # warmup balances the kernels so step-size adaptation sees enough
        # covariance updates; the configured weights apply after warmup
        latent_prob = 0.5 if iteration < schedule.warmup else schedule.latent_weight
        if schedule.latent_weight in (0.0, 1.0):
            latent_prob = schedule.latent_weight
        if rng_sched.random() < latent_prob:
            cached = target_cache.get(engine_idx)
            if cached is None or cached[0] != sigma_version:
                target = TruncatedNormalTarget(
                    mean=proto.mean,
                    precision=TreePrecision(gaussian, decomp.sigma_inv),
                    signs=proto.signs,
                    fixed=proto.fixed,
                )
                target_cache[engine_idx] = (sigma_version, target)
            else:
                target = cached[1]
            travel = model.travel_multiplier * np.sqrt(
                model.gamma_lambda_max(engine_idx) * lam_sigma
            )
            events = {"gradient": 0, "boundary": 0}
            x = bps_transition(target, latent.ravel(), travel, rng_latent, events=events)
            latent = x.reshape(traits.n_taxa, traits.n_traits)
            counters["latent_updates"] += 1
            counters["gradient_events"] += events["gradient"]
            counters["boundary_events"] += events["boundary"]
        else:
            cov_target = _covariance_target(model, gaussian, latent)
            if iteration >= schedule.warmup and not step_frozen:
                step = adapter.finalize()
                step_frozen = True
            n_steps = jittered_steps(model.path_length, step, rng_cov,
                                     max_steps=model.max_leapfrog)
            theta_new, info = hmc_transition(theta, cov_target.logpdf_and_grad, step,
                                             n_steps, rng_cov)
            counters["covariance_updates"] += 1
            counters["covariance_accepts"] += int(info["accepted"])
            counters["divergences"] += int(info["divergent"])
            if iteration < schedule.warmup:
                step = adapter.update(info["accept_prob"])
            if info["accepted"]:
                theta = theta_new
                decomp = CovarianceDecomposition.from_unconstrained(theta, nb, nc)
                lam_sigma = float(np.linalg.eigvalsh(decomp.sigma).max())
                sigma_version += 1
                if model.debug_checks and gaussian.n * traits.n_traits <= 200:
                    _check_precision_cache(gaussian, decomp, traits)
        if iteration >= schedule.warmup and (iteration - schedule.warmup) % schedule.thin == 0:
            yield SampleRecord(
                iteration=iteration,
                correlation=decomp.upper_triangle(),
                scales=decomp.scales[nb:].copy(),
                latent=latent.copy() if schedule.save_latent else None,
                stats=dict(counters),
            )


def _covariance_target(model: GibbsModel, gaussian, latent: np.ndarray) -> CovarianceTarget:
    traits = model.traits
    if model.include_likelihood:
        return CovarianceTarget.from_latent(
            gaussian, latent, model.root_prior.mean, model.eta, traits.n_binary
        )
    return CovarianceTarget(traits.n_binary, traits.n_continuous, eta=model.eta)


def _check_precision_cache(gaussian, decomp, traits):
    """Debug assertion: the operator product must match a fresh dense route."""
    rng = np.random.default_rng(0)
    w = rng.standard_normal(gaussian.n * traits.n_traits)
    op = TreePrecision(gaussian, decomp.sigma_inv)
    got = op.matvec(w)
    fresh_sigma_inv = np.linalg.inv(decomp.sigma)
    want = (gaussian.solve(w.reshape(gaussian.n, traits.n_traits)) @ fresh_sigma_inv).ravel()
    err = np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300)
    if err > 1e-8:
        raise RuntimeError(f"precision cache incoherent after covariance update: {err:.3e}")


def run_chain(model: GibbsModel, schedule: GibbsSchedule, seed_seq=None) -> ChainResult:
    """Run one chain to completion and collect its records."""
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(schedule.seed)
    records = list(iter_chain(model, schedule, seed_seq))
    p = model.traits.n_traits
    nb = model.traits.n_binary
    corr = np.array([r.correlation for r in records])
    scales = np.array([r.scales for r in records])
    if scales.size == 0:
        scales = scales.reshape(len(records), 0)
    latent = None
    if schedule.save_latent:
        latent = np.array([r.latent for r in records])
    return ChainResult(
        correlation=corr,
        scales=scales,
        iterations=np.array([r.iteration for r in records]),
        latent=latent,
        counters=records[-1].stats if records else {},
        correlation_names=correlation_names(p),
        scale_names=scale_names(nb, p),
    )


def run_chains(model: GibbsModel, schedule: GibbsSchedule, n_chains: int,
               workers: int = 1) -> list:
    """Run independent chains off disjoint streams of the schedule seed."""
    root = np.random.SeedSequence(schedule.seed)
    seeds = root.spawn(n_chains)
    if workers > 1 and n_chains > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_chain, model, schedule, s) for s in seeds]
            return [f.result() for f in futures]
    return [run_chain(model, schedule, s) for s in seeds]


# -- per-taxon baseline sampler (efficiency comparator) ----------------------


def baseline_taxon_transition(latent: np.ndarray, taxon: int, traits: TraitData,
                              cond_mean: np.ndarray, cond_scale: float,
                              sigma: np.ndarray, rng: np.random.Generator,
                              max_tries: int = 1000) -> bool:
    """Resample one taxon row from its conditional given all other rows.

    The row conditional N(cond_mean, cond_scale * sigma) is further
    conditioned on the row's observed continuous cells, then proposals are
    drawn until the observed binary signs hold (or the retry cap is reached,
    leaving the row unchanged). Returns whether the row was updated.
    """
    nb = traits.n_binary
    row_obs = traits.observed[taxon]
    clamped = row_obs.copy()
    clamped[:nb] = False
    free = ~clamped
    if not free.any():
        return False
    cov = cond_scale * np.asarray(sigma, dtype=float)
    mean = np.asarray(cond_mean, dtype=float)
    if clamped.any():
        cov_cc = cov[np.ix_(clamped, clamped)]
        cov_fc = cov[np.ix_(free, clamped)]
        shift = dense_solve(cov_cc, latent[taxon, clamped] - mean[clamped],
                            assume_a="pos")
        mean_free = mean[free] + cov_fc @ shift
        cov_free = cov[np.ix_(free, free)] - cov_fc @ dense_solve(
            cov_cc, cov[np.ix_(clamped, free)], assume_a="pos"
        )
        cov_free = 0.5 * (cov_free + cov_free.T)
    else:
        mean_free = mean
        cov_free = cov
    chol = dense_cholesky(cov_free, lower=True)
    free_idx = np.nonzero(free)[0]
    binary_pos = np.nonzero((free_idx < nb) & row_obs[free_idx])[0]
    want_signs = traits.values[taxon, free_idx[binary_pos]]
    for _ in range(max_tries):
        proposal = mean_free + chol @ rng.standard_normal(free_idx.shape[0])
        if np.all(np.sign(proposal[binary_pos]) == want_signs):
            latent[taxon, free] = proposal
            return True
    return False


def baseline_sweep(latent: np.ndarray, traits: TraitData, gaussian, sigma: np.ndarray,
                   root_mean, rng: np.random.Generator, max_tries: int = 1000) -> int:
    """One pass of per-taxon updates; conditionals are refreshed from the
    current latent matrix before each row. Returns the number of accepted rows."""
    accepted = 0
    for taxon in range(traits.n_taxa):
        cond_means, cond_scales = gaussian.tip_conditionals(latent, root_mean)
        accepted += baseline_taxon_transition(
            latent, taxon, traits, cond_means[taxon], cond_scales[taxon], sigma, rng,
            max_tries=max_tries,
        )
    return accepted


# -- wall-clock latent-sampler benchmark --------------------------------------


def benchmark_latent_sampler(traits: TraitData, gaussian, decomp: CovarianceDecomposition,
                             root_prior: RootPrior, sampler: str, budget_seconds: float,
                             rng: np.random.Generator, travel_multiplier: float = 0.01,
                             max_snapshots: int = 2000) -> dict:
    """Run one latent-only sampler at fixed covariance under a wall-clock
    budget and report per-dimension effective sample sizes per hour."""
    if sampler not in ("bps", "baseline"):
        raise ValueError("sampler must be 'bps' or 'baseline'")
    latent = initial_latent(traits, rng)
    free_cells = ~(traits.observed & np.concatenate(
        [np.zeros((traits.n_taxa, traits.n_binary), dtype=bool),
         np.ones((traits.n_taxa, traits.n_continuous), dtype=bool)], axis=1))
    free_flat = free_cells.ravel()
    if sampler == "bps":
        target = build_target(traits, gaussian, decomp.sigma_inv, root_prior.mean)
        if isinstance(gaussian, StarGaussian):
            lam_gamma = float(gaussian._diag.max())
        else:
            lam_gamma = estimate_covariance_lambda_max(TreePrecision(gaussian, np.eye(1)))
        lam_sigma = float(np.linalg.eigvalsh(decomp.sigma).max())
        travel = travel_multiplier * np.sqrt(lam_gamma * lam_sigma)
    snapshots = []
    thin = 1
    count = 0
    start = time.perf_counter()
    while time.perf_counter() - start < budget_seconds:
        if sampler == "bps":
            x = bps_transition(target, latent.ravel(), travel, rng)
            latent = x.reshape(traits.n_taxa, traits.n_traits)
        else:
            baseline_sweep(latent, traits, gaussian, decomp.sigma, root_prior.mean, rng)
        count += 1
        if count % thin == 0:
            snapshots.append(latent.ravel()[free_flat].copy())
            if len(snapshots) > max_snapshots:
                snapshots = snapshots[::2]
                thin *= 2
    elapsed = time.perf_counter() - start
    matrix = np.asarray(snapshots)
    result = {
        "sampler": sampler,
        "iterations": count,
        "elapsed_seconds": elapsed,
        "retained_samples": matrix.shape[0],
        "free_dimensions": int(free_flat.sum()),
    }
    if matrix.shape[0] < 10:
        result["ess_per_hour"] = None
        result["warning"] = "budget too small to retain enough samples"
        return result
    per_dim = np.array([ess(matrix[:, j]) for j in range(matrix.shape[1])])
    per_hour = per_dim * (3600.0 / elapsed)
    result["ess_per_hour"] = {
        "min": float(per_hour.min()),
        "median": float(np.median(per_hour)),
        "values": per_hour.tolist(),
    }
    if matrix.shape[0] < 100:
        result["warning"] = "fewer than 100 retained samples; report is partial"
    return result
