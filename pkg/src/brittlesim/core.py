"""Iterating brittle simulators as rejection samplers.

Perturbations come from an interchangeable proposal; the simulator's own
accept/reject behaviour is kept as is. The only thing that differs between
the hand-specified Gaussian and a learned flow is which ``sample`` is called.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Protocol, Union

import numpy as np

from .simulators import BOTTOM, Simulator

DEFAULT_MAX_ATTEMPTS = 10_000


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent counter-based stream for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


class PerturbationProposal(Protocol):
    dim: int

    def sample(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def log_density(self, z: np.ndarray, x_prev: np.ndarray) -> np.ndarray: ...


class BaselineGaussian:
    """State-independent diagonal Gaussian over perturbations."""

    def __init__(self, scales):
        self.scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
        if np.any(self.scales <= 0):
            raise ValueError("baseline scales must be strictly positive")
        self.dim = self.scales.size

    def sample(self, x_prev, rng):
        n = np.atleast_2d(x_prev).shape[0]
        return self.scales * rng.standard_normal((n, self.dim))

    def log_density(self, z, x_prev=None):
        u = np.atleast_2d(z) / self.scales
        return (
            -0.5 * np.sum(u * u, axis=1)
            - np.sum(np.log(self.scales))
            - 0.5 * self.dim * math.log(2 * math.pi)
        )


class LearnedFlow:
    """Adapter exposing a trained flow as a perturbation proposal."""

    def __init__(self, flow):
        self.flow = flow
        self.dim = flow.dim_z

    def sample(self, x_prev, rng):
        return self.flow.sample(np.atleast_2d(x_prev), rng)

    def log_density(self, z, x_prev):
        return self.flow.log_density(np.atleast_2d(z), np.atleast_2d(x_prev))


Proposal = Union[BaselineGaussian, LearnedFlow]


class MaxAttemptsExceeded(RuntimeError):
    def __init__(self, attempts: int, n_stuck: int = 1):
        self.attempts = attempts
        self.n_stuck = n_stuck
        super().__init__(f"simulator did not accept within {attempts} attempts ({n_stuck} state(s) stuck)")


@dataclass
class AttemptRecord:
    z: np.ndarray
    accepted: bool
    calls: int


def iterate_simulator(
    sim: Simulator,
    x_prev,
    proposal,
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
):
    """Propose, simulate, repeat until the simulator returns a state."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    x_prev = np.asarray(x_prev, dtype=np.float64).reshape(1, -1)
    for calls in range(1, max_attempts + 1):
        z = proposal.sample(x_prev, rng)
        nxt, ok = sim.step_batch(x_prev + sim.embed(z))
        if ok[0]:
            return nxt[0], AttemptRecord(z[0], True, calls)
    raise MaxAttemptsExceeded(max_attempts)


def iterate_batch(
    sim: Simulator,
    X_prev: np.ndarray,
    proposal,
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
):
    """Vectorised accept-until-success for every row of ``X_prev``.

    Returns (successors, accepted perturbations, per-row call counts).
    """
    X_prev = np.atleast_2d(np.asarray(X_prev, dtype=np.float64))
    n = X_prev.shape[0]
    out = np.empty_like(X_prev)
    Z = np.empty((n, proposal.dim))
    calls = np.zeros(n, dtype=np.int64)
    todo = np.arange(n)
    for _ in range(max_attempts):
        if todo.size == 0:
            break
        xp = X_prev[todo]
        z = proposal.sample(xp, rng)
        nxt, ok = sim.step_batch(xp + sim.embed(z))
        calls[todo] += 1
        done = todo[ok]
        out[done] = nxt[ok]
        Z[done] = z[ok]
        todo = todo[~ok]
    if todo.size:
        raise MaxAttemptsExceeded(max_attempts, todo.size)
    return out, Z, calls


def iterate_once(sim: Simulator, x_prev, proposal, rng):
    """Exactly one proposal and one simulator call; ``BOTTOM`` propagates."""
    x_prev = np.asarray(x_prev, dtype=np.float64).reshape(1, -1)
    z = proposal.sample(x_prev, rng)
    nxt, ok = sim.step_batch(x_prev + sim.embed(z))
    return (nxt[0] if ok[0] else BOTTOM), z[0]


def iterate_once_batch(sim: Simulator, X_prev, proposal, rng):
    X_prev = np.atleast_2d(X_prev)
    Z = proposal.sample(X_prev, rng)
    nxt, ok = sim.step_batch(X_prev + sim.embed(Z))
    return nxt, ok, Z


@dataclass
class AcceptanceEstimate:
    rate: float
    lower: float
    upper: float
    n_trials: int
    n_accepted: int

    @property
    def rejection(self) -> float:
        return 1.0 - self.rate


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


StateSampler = Union[Callable[[np.random.Generator, int], np.ndarray], np.ndarray]


def _draw_states(sampler: StateSampler, rng, n) -> np.ndarray:
    if callable(sampler):
        return np.atleast_2d(sampler(rng, n))
    pool = np.atleast_2d(np.asarray(sampler, dtype=np.float64))
    return pool[rng.integers(0, pool.shape[0], n)]


def estimate_acceptance_rate(
    sim: Simulator,
    state_sampler: StateSampler,
    proposal,
    n_trials: int,
    rng: np.random.Generator,
    batch_size: int = 20_000,
) -> AcceptanceEstimate:
    """Fraction of single-call successes, with a Wilson 95% interval.

    ``state_sampler`` is either ``f(rng, n) -> states`` or an array of states
    to resample from.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    accepted = 0
    left = n_trials
    while left:
        k = min(batch_size, left)
        X = _draw_states(state_sampler, rng, k)
        _, ok, _ = iterate_once_batch(sim, X, proposal, rng)
        accepted += int(ok.sum())
        left -= k
    lo, hi = wilson_interval(accepted, n_trials)
    return AcceptanceEstimate(accepted / n_trials, lo, hi, n_trials, accepted)


def rejection_rate_map(
    sim: Simulator,
    grid_x,
    grid_y,
    frozen_state,
    proposal,
    n_per_cell: int,
    rng: np.random.Generator,
    position_index=(0, 1),
) -> np.ndarray:
    """Single-call rejection frequency with the chosen coordinates placed on a grid.

    Result has shape ``(len(grid_y), len(grid_x))``.
    """
    gx = np.asarray(grid_x, dtype=np.float64)
    gy = np.asarray(grid_y, dtype=np.float64)
    base = np.asarray(frozen_state, dtype=np.float64)
    ix, iy = position_index
    YY, XX = np.meshgrid(gy, gx, indexing="ij")
    cells = np.repeat(base[None, :], XX.size, axis=0)
    cells[:, ix] = XX.ravel()
    cells[:, iy] = YY.ravel()
    states = np.repeat(cells, n_per_cell, axis=0)
    rejected = np.zeros(states.shape[0], dtype=bool)
    chunk = 50_000
    for s in range(0, states.shape[0], chunk):
        _, ok, _ = iterate_once_batch(sim, states[s : s + chunk], proposal, rng)
        rejected[s : s + chunk] = ~ok
    return rejected.reshape(XX.size, n_per_cell).mean(axis=1).reshape(XX.shape)


def write_rate_map_csv(path, grid_x, grid_y, rates: np.ndarray, n_per_cell: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid_x", "grid_y", "rate", "n_trials"])
        for j, yv in enumerate(grid_y):
            for i, xv in enumerate(grid_x):
                w.writerow([repr(float(xv)), repr(float(yv)), repr(float(rates[j, i])), n_per_cell])
