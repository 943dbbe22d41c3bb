"""Executable certificates: gradient checks, stationarity, local minimality,
suboptimality gaps, and equilibrium statistics for random games."""

from __future__ import annotations

import numpy as np

from .core import brute_force_optimal, evaluate_policy, pure_nash_enumerate
from .constructions import random_matrix_game


def grad_check(loss_and_grad, theta, h=1e-6):
    """Max per-coordinate relative error of the analytic gradient against
    central finite differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float).ravel()
    _, grad = loss_and_grad(theta)
    grad = np.asarray(grad, dtype=float).ravel()
    fd = np.empty_like(grad)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = h
        up, _ = loss_and_grad(theta + bump)
        dn, _ = loss_and_grad(theta - bump)
        fd[i] = (up - dn) / (2.0 * h)
    scale = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(fd)))
    return float(np.max(np.abs(grad - fd) / scale))


def stationarity_certificate(loss_and_grad, theta, tol):
    """(gradient norm below tol?, the norm itself)."""
    _, grad = loss_and_grad(np.asarray(theta, dtype=float).ravel())
    norm = float(np.linalg.norm(np.asarray(grad, dtype=float).ravel()))
    return norm < tol, norm


def local_min_certificate(loss_and_grad, theta, radius, samples, rng, slack=1e-9):
    """Probabilistic local-minimality check by uniform ball sampling.

    True when no sampled perturbation within `radius` (in raw parameter
    coordinates, where gradient descent moves) drops the loss by more than
    `slack`. A False is a certified escape direction; a True is evidence at
    the stated sample count, not a proof.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(rng)
    theta = np.asarray(theta, dtype=float).ravel()
    base, _ = loss_and_grad(theta)
    d = theta.size
    for _ in range(samples):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        r = radius * rng.random() ** (1.0 / d)
        loss, _ = loss_and_grad(theta + r * direction)
        if loss < base - slack:
            return False
    return True


def suboptimality_gap(model, policy, tol=1e-10):
    """Optimal return minus the policy's return, via the brute-force oracle."""
    best, _ = brute_force_optimal(model, tol=tol)
    return best - evaluate_policy(model, policy)


def ne_count_expectation(k, trials, rng, batch=20000):
    """Monte-Carlo (mean, stderr) of the pure-equilibrium count in iid
    continuous k x k common-payoff games.

    A cell is an equilibrium exactly when it is the maximum of its row and
    column, so the exact expectation is k**2 / (2k - 1).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    counts = np.empty(trials)
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        x = rng.random((b, k, k))
        row_max = x.max(axis=2, keepdims=True)
        col_max = x.max(axis=1, keepdims=True)
        counts[done : done + b] = ((x >= row_max) & (x >= col_max)).sum(axis=(1, 2))
        done += b
    mean = float(counts.mean())
    stderr = float(counts.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return mean, stderr


def ne_count_exact(k):
    """Closed-form expected pure-equilibrium count for iid continuous games."""
    return k * k / (2.0 * k - 1.0)


def ne_count_bruteforce(k, trials, rng):
    """Slow oracle for the Monte-Carlo estimate: enumerate equilibria per game."""
    rng = np.random.default_rng(rng)
    total = 0
    for _ in range(trials):
        game = random_matrix_game(k, 2, rng)
        total += len(pure_nash_enumerate(game))
    return total / trials
