"""Hamiltonian Monte Carlo with identity mass matrix and dual-averaged step size."""

from __future__ import annotations

import numpy as np


def leapfrog(theta: np.ndarray, momentum: np.ndarray, step_size: float, n_steps: int,
             logpdf_and_grad):
    """Integrate the Hamiltonian dynamics with the half-kick / drift /
    half-kick splitting. Returns (theta, momentum, value, ok); ok is False if
    the trajectory hit a non-finite state."""
    value, grad = logpdf_and_grad(theta)
    if not np.isfinite(value):
        return theta, momentum, value, False
    theta = np.array(theta, dtype=float)
    momentum = np.array(momentum, dtype=float)
    for _ in range(n_steps):
        momentum += 0.5 * step_size * grad
        theta += step_size * momentum
        value, grad = logpdf_and_grad(theta)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return theta, momentum, -np.inf, False
        momentum += 0.5 * step_size * grad
    return theta, momentum, value, True


def hmc_transition(theta: np.ndarray, logpdf_and_grad, step_size: float, n_steps: int,
                   rng: np.random.Generator):
    """One Metropolis-corrected HMC update. Returns (theta, info) where info
    carries the acceptance probability and divergence flag used by step-size
    adaptation."""
    if not step_size > 0:
        raise ValueError("step size must be > 0")
    if n_steps < 1:
        raise ValueError("need at least one leapfrog step")
    theta = np.asarray(theta, dtype=float)
    value0, _ = logpdf_and_grad(theta)
    momentum = rng.standard_normal(theta.shape[0])
    energy0 = -value0 + 0.5 * momentum @ momentum
    theta1, momentum1, value1, ok = leapfrog(theta, momentum, step_size, n_steps,
                                             logpdf_and_grad)
    if not ok or not np.isfinite(value1):
        return theta.copy(), {"accept_prob": 0.0, "accepted": False, "divergent": True,
                              "value": value0}
    energy1 = -value1 + 0.5 * momentum1 @ momentum1
    accept_prob = min(1.0, np.exp(min(energy0 - energy1, 0.0)))
    if rng.random() < accept_prob:
        return theta1, {"accept_prob": accept_prob, "accepted": True, "divergent": False,
                        "value": value1}
    return theta.copy(), {"accept_prob": accept_prob, "accepted": False, "divergent": False,
                          "value": value0}


class DualAveragingStepSize:
    """Stochastic step-size optimization toward a target acceptance rate.

    Standard schedule: shrink toward mu = log(10 eps0), with the averaged
    iterate frozen when adaptation ends.
    """

    def __init__(self, initial_step: float, target_accept: float = 0.8,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        if not 0 < target_accept < 1:
            raise ValueError("target acceptance must be in (0, 1)")
        self.mu = np.log(10.0 * initial_step)
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.count = 0
        self.h_bar = 0.0
        self.log_step = np.log(initial_step)
        self.log_step_bar = np.log(initial_step)

    def update(self, accept_prob: float) -> float:
        """Feed one acceptance probability; returns the step size to use next."""
        self.count += 1
        t = self.count
        frac = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target_accept - accept_prob)
        self.log_step = self.mu - np.sqrt(t) / self.gamma * self.h_bar
        weight = t ** -self.kappa
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return float(np.exp(self.log_step))

    @property
    def current(self) -> float:
        return float(np.exp(self.log_step))

    def finalize(self) -> float:
        """Frozen (averaged) step size to use after warmup."""
        return float(np.exp(self.log_step_bar))


def find_reasonable_step(theta: np.ndarray, logpdf_and_grad, rng: np.random.Generator,
                         initial_step: float = 1.0, max_doublings: int = 30) -> float:
    """Double or halve the step size until one leapfrog step's acceptance
    probability crosses 1/2; a cheap starting point for dual averaging."""
    theta = np.asarray(theta, dtype=float)
    value0, _ = logpdf_and_grad(theta)
    if not np.isfinite(value0):
        return initial_step
    momentum = rng.standard_normal(theta.shape[0])
    energy0 = -value0 + 0.5 * momentum @ momentum
    step = initial_step

    def log_ratio(step_size):
        t1, m1, v1, ok = leapfrog(theta, momentum, step_size, 1, logpdf_and_grad)
        if not ok:
            return -np.inf
        return energy0 - (-v1 + 0.5 * m1 @ m1)

    direction = 1.0 if log_ratio(step) > np.log(0.5) else -1.0
    for _ in range(max_doublings):
        step_next = step * 2.0**direction
        if direction * log_ratio(step_next) <= direction * np.log(0.5):
            return step_next
        step = step_next
    return step


def adapt_stepsize(accept_history, initial_step: float = 0.1,
                   target_accept: float = 0.8) -> float:
    """Replay an acceptance-probability history through dual averaging and
    return the step size it lands on."""
    adapter = DualAveragingStepSize(initial_step, target_accept=target_accept)
    step = initial_step
    for accept_prob in accept_history:
        step = adapter.update(accept_prob)
    return step


def jittered_steps(path_length: float, step_size: float, rng: np.random.Generator,
                   max_steps: int = 1024) -> int:
    """Leapfrog count for a fixed path length, with +-10% uniform jitter to
    avoid resonance on near-quadratic targets. max_steps bounds the cost when
    adaptation drives the step size very small."""
    base = max(int(np.ceil(path_length / step_size)), 1)
    base = min(base, max_steps)
    low = max(int(np.ceil(0.9 * base - 1e-9)), 1)
    high = max(int(np.floor(1.1 * base + 1e-9)), low)
    return int(rng.integers(low, high + 1))
