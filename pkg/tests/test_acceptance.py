"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The two sampling studies and the wall-clock benchmarks are marked
`slow`; everything else completes in a few minutes.
"""

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy.stats import kstest, norm

import phyloprobit as pp
from phyloprobit.covariance import CovarianceTarget
from phyloprobit.hmc import (DualAveragingStepSize, find_reasonable_step,
                             hmc_transition, jittered_steps)


def report(criterion, passed, detail):
    flag = "PASS" if passed else "FAIL"
    print(f"\n[{flag}] criterion {criterion}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def random_spd(p, rng):
    a = rng.standard_normal((p, p))
    return a @ a.T + p * np.eye(p)


# -- 1: oracle equivalence ----------------------------------------------------


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(101)
    sizes = [5, 20, 50]
    trait_dims = [1, 3, 5]
    worst = 0.0
    start = time.perf_counter()
    for trial in range(50):
        n = sizes[trial % 3]
        p = trait_dims[(trial // 3) % 3]
        tree = pp.random_tree(n, rng)
        kappa = float(rng.uniform(0.5, 20.0))
        sigma_inv = np.linalg.inv(random_spd(p, rng))
        prior = pp.RootPrior(mean=np.zeros(p), sample_size=kappa)
        gamma = pp.tree_covariance_dense(tree, pp.CovarianceMode.FULL_TREE, kappa)
        phi = np.kron(np.linalg.inv(gamma), sigma_inv)
        w = rng.standard_normal(n * p)
        got = pp.precision_vector_product(tree, sigma_inv, prior, w)
        want = phi @ w
        worst = max(worst, np.max(np.abs(got - want)) / np.max(np.abs(want)))
        op = pp.TreePrecision(pp.TreeGaussian(tree, kappa), sigma_inv)
        for idx in rng.integers(0, n * p, size=3):
            col = op.column(int(idx))
            scale = max(np.max(np.abs(phi[:, idx])), 1e-300)
            worst = max(worst, np.max(np.abs(col - phi[:, idx])) / scale)
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-8 and elapsed < 60.0,
           f"max relative error {worst:.2e} over 50 random trees "
           f"(limit 1e-8), {elapsed:.1f}s")


# -- 2: linear cost scaling ---------------------------------------------------


def test_criterion_2_linear_scaling():
    rng = np.random.default_rng(102)
    p = 4
    start = time.perf_counter()
    timings = {}
    for n in (250, 500, 1000):
        tree = pp.random_tree(n, rng)
        op = pp.TreePrecision(pp.TreeGaussian(tree, 5.0), np.eye(p))
        w = rng.standard_normal(n * p)
        op.matvec(w)  # warm up
        reps = 40
        best = np.inf
        for _ in range(6):
            t0 = time.perf_counter()
            for _ in range(reps):
                op.matvec(w)
            best = min(best, (time.perf_counter() - t0) / reps)
        timings[n] = best
    r1 = timings[500] / timings[250]
    r2 = timings[1000] / timings[500]
    elapsed = time.perf_counter() - start
    report(2, r1 < 2.6 and r2 < 2.6 and elapsed < 120.0,
           f"product time ratios {r1:.2f} (500/250) and {r2:.2f} (1000/500), "
           f"limit 2.6; {elapsed:.1f}s")


# -- 3: BPS distributional correctness ---------------------------------------


def test_criterion_3_bps_distribution():
    start = time.perf_counter()
    rho = 0.5
    cov = np.array([[1.0, rho], [rho, 1.0]])
    prec = np.linalg.inv(cov)

    # orthant case vs a large rejection-sampling oracle
    target = pp.TruncatedNormalTarget(
        mean=np.zeros(2), precision=pp.DensePrecision(prec),
        signs=np.ones(2, dtype=np.int8), fixed=np.zeros(2, dtype=bool),
    )
    rng = np.random.default_rng(103)
    travel = pp.tune_travel_time(target, multiplier=1.0)
    n = 100_000
    draws = np.empty((n, 2))
    x = np.array([0.5, 0.5])
    for k in range(n):
        x = pp.bps_transition(target, x, travel, rng)
        draws[k] = x
    oracle_rng = np.random.default_rng(104)
    z = oracle_rng.multivariate_normal(np.zeros(2), cov, size=1_000_000)
    kept = z[(z[:, 0] > 0) & (z[:, 1] > 0)]
    failures = []
    for name, fn in [("E[x1]", lambda a: a[:, 0]), ("E[x2]", lambda a: a[:, 1]),
                     ("E[x1^2]", lambda a: a[:, 0] ** 2),
                     ("E[x2^2]", lambda a: a[:, 1] ** 2),
                     ("E[x1 x2]", lambda a: a[:, 0] * a[:, 1])]:
        series, oracle = fn(draws), fn(kept)
        se = np.hypot(series.std() / np.sqrt(pp.ess(series)),
                      oracle.std() / np.sqrt(oracle.shape[0]))
        gap = abs(series.mean() - oracle.mean())
        if gap >= 3 * se:
            failures.append(f"{name} off by {gap / se:.1f} SE")

    # one masked dimension: the free coordinate follows the analytic
    # sign-truncated conditional
    clamp = 0.8
    masked = pp.TruncatedNormalTarget(
        mean=np.zeros(2), precision=pp.DensePrecision(prec),
        signs=np.array([1, 0], dtype=np.int8),
        fixed=np.array([False, True]),
    )
    rng2 = np.random.default_rng(105)
    x = np.array([0.5, clamp])
    m = 100_000
    free = np.empty(m)
    for k in range(m):
        x = pp.bps_transition(masked, x, travel, rng2)
        free[k] = x[0]
    mu = rho * clamp
    s2 = 1 - rho**2
    s = np.sqrt(s2)
    alpha = -mu / s
    zconst = 1.0 - norm.cdf(alpha)
    lam = norm.pdf(alpha) / zconst
    want_mean = mu + s * lam
    want_var = s2 * (1 + alpha * lam - lam**2)
    se_mean = free.std() / np.sqrt(pp.ess(free))
    if abs(free.mean() - want_mean) >= 3 * se_mean:
        failures.append("conditional mean off")
    centered = (free - want_mean) ** 2
    se_var = centered.std() / np.sqrt(pp.ess(centered))
    if abs(centered.mean() - want_var) >= 3 * se_var:
        failures.append("conditional variance off")

    elapsed = time.perf_counter() - start
    report(3, not failures and elapsed < 180.0,
           f"orthant + masked-conditional moments within 3 MC standard errors"
           f"{'' if not failures else ' EXCEPT ' + '; '.join(failures)}; "
           f"{elapsed:.1f}s")


# -- 4: gradient-event exactness ----------------------------------------------


def test_criterion_4_gradient_event_exactness():
    rng = np.random.default_rng(106)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 7))
        phi = random_spd(d, rng)
        x = rng.standard_normal(d)
        v = rng.standard_normal(d)
        draw = rng.exponential()
        phi_x, phi_v = phi @ x, phi @ v
        tau = pp.gradient_event_time(v @ phi_x, v @ phi_v, draw)

        def energy(t):
            y = x + t * v
            return 0.5 * y @ phi @ y

        tau_min = max(0.0, -(v @ phi_x) / (v @ phi_v))
        worst = max(worst, abs(energy(tau) - energy(tau_min) - draw))
    report(4, worst < 1e-10,
           f"max |U(x + tau v) - U_min - T| = {worst:.2e} over 1000 states "
           "(limit 1e-10)")


# -- 5: HMC correctness --------------------------------------------------------


def test_criterion_5_hmc_correctness():
    start = time.perf_counter()
    # (a) prior-only chain, eta = 1, P = 2: uniform correlation marginal
    target = CovarianceTarget(2, 0, eta=1.0)
    rng = np.random.default_rng(107)
    theta = np.zeros(1)
    step = find_reasonable_step(theta, target.logpdf_and_grad, rng)
    adapter = DualAveragingStepSize(step)
    for _ in range(500):
        steps = jittered_steps(1.0, step, rng)
        theta, info = hmc_transition(theta, target.logpdf_and_grad, step, steps, rng)
        step = adapter.update(info["accept_prob"])
    step = adapter.finalize()
    thin = 4
    n_keep = 10_000
    draws = np.empty(n_keep)
    for k in range(n_keep * thin):
        steps = jittered_steps(1.0, step, rng)
        theta, _ = hmc_transition(theta, target.logpdf_and_grad, step, steps, rng)
        if k % thin == thin - 1:
            draws[k // thin] = np.tanh(theta[0])
    ks = kstest(draws, "uniform", args=(-1.0, 2.0)).statistic
    ks_crit = 1.6276 / np.sqrt(n_keep)  # 1% critical value
    uniform_ok = ks < ks_crit

    # (b) log-density gradients vs central finite differences, 100 configs
    rng2 = np.random.default_rng(108)
    h = 1e-6
    worst = 0.0
    for trial in range(100):
        nb = int(rng2.integers(0, 4))
        nc = int(rng2.integers(0, 4))
        if nb + nc < 2:
            nc += 2
        with_data = trial % 2 == 0
        if with_data:
            n = int(rng2.integers(4, 12))
            tree = pp.random_tree(n, rng2, min_branch=0.02)
            engine = pp.TreeGaussian(tree, float(rng2.uniform(1.0, 10.0)))
            latent = rng2.standard_normal((n, nb + nc))
            tgt = CovarianceTarget.from_latent(
                engine, latent, rng2.standard_normal(nb + nc),
                eta=float(rng2.uniform(0.5, 3.0)), n_binary=nb)
        else:
            tgt = CovarianceTarget(nb, nc, eta=float(rng2.uniform(0.5, 3.0)))
        th = 0.6 * rng2.standard_normal(tgt.dim)
        _, grad = tgt.logpdf_and_grad(th)
        for k in range(tgt.dim):
            e = np.zeros(tgt.dim)
            e[k] = h
            fd = (tgt.logpdf(th + e) - tgt.logpdf(th - e)) / (2 * h)
            denom = max(abs(fd), 1e-3)
            worst = max(worst, abs(grad[k] - fd) / denom)
    grads_ok = worst < 1e-5
    elapsed = time.perf_counter() - start
    report(5, uniform_ok and grads_ok and elapsed < 180.0,
           f"KS statistic {ks:.4f} (1% critical {ks_crit:.4f}); "
           f"max gradient relative error {worst:.2e} over 100 configs "
           f"(limit 1e-5); {elapsed:.1f}s")


# -- 6: simulation-based recovery ----------------------------------------------

N_REPLICATES = 10
N_CHAINS = 4
RECOVERY_ESS_TARGET = 200.0
PER_CHAIN_ESS_TARGET = 55.0


def _recovery_replicate_data(rep):
    rng = np.random.default_rng(2000 + rep)
    n, nb, nc = 100, 3, 2
    p = nb + nc
    tree = pp.random_tree(n, rng, min_branch=0.05)
    true_corr = pp.sample_correlation(p, 2.0, rng)
    true_scales = np.concatenate([np.ones(nb), np.exp(0.5 * rng.standard_normal(nc))])
    decomp = pp.CovarianceDecomposition(true_corr, true_scales, nb)
    prior = pp.RootPrior(mean=np.zeros(p), sample_size=10.0)
    latent = pp.simulate_latent(tree, pp.CovarianceMode.FULL_TREE, decomp.sigma,
                                prior, rng)
    traits = pp.threshold_traits(latent, nb, taxa=tree.labels)
    return tree, traits, prior, true_corr


def _recovery_worker(job):
    rep, chain = job
    tree, traits, prior, _ = _recovery_replicate_data(rep)
    model = pp.GibbsModel(
        traits=traits,
        gaussians=[pp.TreeGaussian(tree, prior.sample_size)],
        root_prior=prior,
        travel_multiplier=0.05,
    )
    schedule = pp.GibbsSchedule(iterations=10_000_000, warmup=500, thin=2,
                                seed=0)
    seed_seq = np.random.SeedSequence(3000 + rep).spawn(N_CHAINS)[chain]
    records = []
    stream = pp.iter_chain(model, schedule, seed_seq)
    block = 600
    cap = 9000
    while True:
        for _ in range(block):
            rec = next(stream)
            records.append(rec.correlation)
        matrix = np.asarray(records)
        min_ess = min(pp.ess(matrix[:, j]) for j in range(matrix.shape[1]))
        if min_ess >= PER_CHAIN_ESS_TARGET or matrix.shape[0] >= cap:
            return rep, chain, matrix


@pytest.mark.slow
def test_criterion_6_simulation_recovery():
    start = time.perf_counter()
    jobs = [(rep, chain) for rep in range(N_REPLICATES) for chain in range(N_CHAINS)]
    results = {}
    with ProcessPoolExecutor(max_workers=2) as pool:
        for rep, chain, matrix in pool.map(_recovery_worker, jobs):
            results[(rep, chain)] = matrix

    n_entries = results[(0, 0)].shape[1]
    iu = np.triu_indices(5, k=1)
    coverage = np.zeros(n_entries, dtype=int)
    all_ess_ok = True
    all_rhat_ok = True
    worst_rhat = 1.0
    worst_ess = np.inf
    for rep in range(N_REPLICATES):
        chains = [results[(rep, c)] for c in range(N_CHAINS)]
        pooled_ess = np.array([
            sum(pp.ess(chain[:, j]) for chain in chains) for j in range(n_entries)
        ])
        worst_ess = min(worst_ess, pooled_ess.min())
        if pooled_ess.min() < RECOVERY_ESS_TARGET:
            all_ess_ok = False
        shortest = min(chain.shape[0] for chain in chains)
        stacked = np.stack([chain[-shortest:] for chain in chains])
        for j in range(n_entries):
            value = pp.rhat(stacked[:, :, j])
            worst_rhat = max(worst_rhat, value)
            if value >= 1.1:
                all_rhat_ok = False
        _, _, _, true_corr = _recovery_replicate_data(rep)
        pooled = np.concatenate(chains, axis=0)
        for j in range(n_entries):
            lo, hi = pp.hpd_interval(pooled[:, j], 0.9)
            truth = true_corr[iu[0][j], iu[1][j]]
            coverage[j] += int(lo <= truth <= hi)

    coverage_ok = bool(np.all(coverage >= 8))
    elapsed = time.perf_counter() - start
    report(6, all_ess_ok and all_rhat_ok and coverage_ok and elapsed < 1800.0,
           f"min pooled ESS {worst_ess:.0f} (target {RECOVERY_ESS_TARGET:.0f}), "
           f"max split-Rhat {worst_rhat:.3f} (bar 1.1), per-entry HPD coverage "
           f"{coverage.tolist()} of {N_REPLICATES} (need >= 8); "
           f"{elapsed / 60:.1f} min")


# -- 7 & 8: wall-clock efficiency ----------------------------------------------


def _equicorrelated_benchmark(n, nb, nc, kappa, rho, cont_scale, seed):
    rng = np.random.default_rng(seed)
    p = nb + nc
    tree = pp.random_tree(n, rng, min_branch=0.05)
    corr = np.full((p, p), rho)
    np.fill_diagonal(corr, 1.0)
    scales = np.concatenate([np.ones(nb), np.full(nc, cont_scale)])
    decomp = pp.CovarianceDecomposition(corr, scales, nb)
    prior = pp.RootPrior(mean=np.zeros(p), sample_size=kappa)
    latent = pp.simulate_latent(tree, pp.CovarianceMode.FULL_TREE, decomp.sigma,
                                prior, rng)
    traits = pp.threshold_traits(latent, nb, taxa=tree.labels)
    return traits, pp.TreeGaussian(tree, kappa), decomp, prior


@pytest.mark.slow
def test_criterion_7_efficiency_direction():
    start = time.perf_counter()
    traits, engine, decomp, prior = _equicorrelated_benchmark(
        100, 5, 3, kappa=1.0 / 3.0, rho=0.85, cont_scale=2.0, seed=2)
    budget = 75.0
    mins = {}
    for sampler in ("bps", "baseline"):
        rng = np.random.default_rng(7)
        rep = pp.benchmark_latent_sampler(traits, engine, decomp, prior, sampler,
                                          budget, rng, travel_multiplier=0.03)
        mins[sampler] = rep["ess_per_hour"]["min"]
    ratio = np.inf if mins["baseline"] == 0 else mins["bps"] / mins["baseline"]
    elapsed = time.perf_counter() - start
    report(7, mins["bps"] > mins["baseline"] and elapsed < 600.0,
           f"min latent ESS/hr: joint BPS {mins['bps']:.0f} vs per-taxon "
           f"baseline {mins['baseline']:.1f}; ratio {ratio:.1f}x "
           f"(direction only); {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_travel_time_direction():
    start = time.perf_counter()
    traits, engine, decomp, prior = _equicorrelated_benchmark(
        300, 5, 3, kappa=1.0 / 3.0, rho=0.8, cont_scale=4.0, seed=1)
    budget = 90.0
    medians = {}
    for multiplier in (0.005, 0.01, 0.1):
        rng = np.random.default_rng(7)
        rep = pp.benchmark_latent_sampler(traits, engine, decomp, prior, "bps",
                                          budget, rng, travel_multiplier=multiplier)
        medians[multiplier] = rep["ess_per_hour"]["median"]
    best = max(medians.values())
    elapsed = time.perf_counter() - start
    report(8, medians[0.01] >= 0.5 * best and elapsed < 900.0,
           "median ESS/hr by multiplier "
           + ", ".join(f"{m}: {v:.0f}" for m, v in medians.items())
           + f"; 0.01 at {medians[0.01] / best:.2f} of best (need >= 0.5); "
           f"{elapsed:.0f}s")


# -- 9: cross-sampler agreement -------------------------------------------------


def test_criterion_9_cross_sampler_agreement():
    start = time.perf_counter()
    rng = np.random.default_rng(109)
    n, nb, nc = 4, 2, 1
    p = nb + nc
    tree = pp.random_tree(n, rng, min_branch=0.1)
    prior = pp.RootPrior(mean=np.zeros(p), sample_size=5.0)
    corr = pp.sample_correlation(p, 2.0, rng)
    decomp = pp.CovarianceDecomposition(corr, np.ones(p), nb)
    latent0 = pp.simulate_latent(tree, pp.CovarianceMode.FULL_TREE, decomp.sigma,
                                 prior, rng)
    traits = pp.threshold_traits(latent0, nb, taxa=tree.labels)
    engine = pp.TreeGaussian(tree, 5.0)
    free = np.ones((n, p), dtype=bool)
    free[:, nb:] = ~traits.observed[:, nb:]
    free_flat = free.ravel()

    target = pp.build_target(traits, engine, decomp.sigma_inv, prior.mean)
    n_draws = 8000
    bps_draws = np.empty((n_draws, free_flat.sum()))
    x = latent0.ravel().copy()
    rng_a = np.random.default_rng(110)
    for k in range(n_draws):
        x = pp.bps_transition(target, x, 1.0, rng_a)
        bps_draws[k] = x[free_flat]

    base_draws = np.empty_like(bps_draws)
    y = latent0.copy()
    rng_b = np.random.default_rng(111)
    for k in range(n_draws):
        pp.baseline_sweep(y, traits, engine, decomp.sigma, prior.mean, rng_b)
        base_draws[k] = y.ravel()[free_flat]

    worst_z = 0.0
    for j in range(free_flat.sum()):
        for fn in (lambda s: s, lambda s: s**2):
            a, b = fn(bps_draws[:, j]), fn(base_draws[:, j])
            se = np.hypot(a.std() / np.sqrt(pp.ess(a)), b.std() / np.sqrt(pp.ess(b)))
            worst_z = max(worst_z, abs(a.mean() - b.mean()) / se)
    elapsed = time.perf_counter() - start
    report(9, worst_z < 3.0 and elapsed < 300.0,
           f"first/second latent moments agree between samplers; worst gap "
           f"{worst_z:.2f} MC standard errors (limit 3); {elapsed:.0f}s")


# -- 10: determinism -------------------------------------------------------------


def test_criterion_10_determinism():
    start = time.perf_counter()
    rng = np.random.default_rng(112)
    n, nb, nc = 10, 1, 1
    p = nb + nc
    tree = pp.random_tree(n, rng, min_branch=0.05)
    prior = pp.RootPrior(mean=np.zeros(p), sample_size=10.0)
    corr = pp.sample_correlation(p, 2.0, rng)
    decomp = pp.CovarianceDecomposition(corr, np.ones(p), nb)
    latent = pp.simulate_latent(tree, pp.CovarianceMode.FULL_TREE, decomp.sigma,
                                prior, rng)
    traits = pp.threshold_traits(latent, nb, taxa=tree.labels)
    model = pp.GibbsModel(traits=traits, gaussians=[pp.TreeGaussian(tree, 10.0)],
                          root_prior=prior, travel_multiplier=0.05)
    schedule = pp.GibbsSchedule(iterations=400, warmup=100, thin=1, seed=99,
                                save_latent=True)
    single_ok = True
    a = pp.run_chain(model, schedule)
    b = pp.run_chain(model, schedule)
    single_ok = (np.array_equal(a.correlation, b.correlation)
                 and np.array_equal(a.scales, b.scales)
                 and np.array_equal(a.latent, b.latent))
    multi_a = pp.run_chains(model, schedule, n_chains=3)
    multi_b = pp.run_chains(model, schedule, n_chains=3, workers=2)
    multi_ok = all(
        np.array_equal(x.correlation, y.correlation)
        and np.array_equal(x.latent, y.latent)
        for x, y in zip(multi_a, multi_b)
    )
    distinct = not np.array_equal(multi_a[0].correlation, multi_a[1].correlation)
    elapsed = time.perf_counter() - start
    report(10, single_ok and multi_ok and distinct and elapsed < 60.0,
           f"bit-identical repeat runs (single and 3-chain, threaded and "
           f"sequential), chains mutually distinct; {elapsed:.0f}s")
