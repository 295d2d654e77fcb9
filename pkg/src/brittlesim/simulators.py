"""Brittle simulators: deterministic steps that may fail and return ``BOTTOM``.

A simulator maps an already perturbed state to its successor or to the
failure symbol. Three models are provided: the annulus toy (linear motion with
a cap on radial change), elastic bouncing balls in a square box, and a scalar
linear-Gaussian model that never fails and serves as an exact-evidence oracle.
External simulators plug in through :class:`FunctionSimulator` or by
subclassing :class:`Simulator`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class _Bottom:
    """The failure symbol. Carries no state."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BOTTOM"

    def __bool__(self):
        return False


BOTTOM = _Bottom()


def is_bottom(outcome) -> bool:
    return outcome is BOTTOM


class SimulatorInputError(ValueError):
    """Raised for malformed input (wrong dimension, non-finite entries).

    Distinct from ``BOTTOM``, which is a modelled outcome.
    """


LOG_2PI = float(np.log(2.0 * np.pi))


class Simulator:
    """Base class. Subclasses implement ``_step_batch`` and ``sample_prior``."""

    model_id = "generic"
    state_dim: int
    perturbed_index: np.ndarray
    observed_index: np.ndarray
    sigma_obs: float
    config: object

    def baseline_scales(self) -> np.ndarray:
        raise NotImplementedError

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def _step_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Step every row of ``X``; returns (successors, ok-mask).

        Rows with ``ok == False`` are failures; their successor rows are
        meaningless.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.state_dim:
            raise SimulatorInputError(
                f"{self.model_id}: expected states of dimension {self.state_dim}, got shape {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise SimulatorInputError(f"{self.model_id}: non-finite input state")
        return self._step_batch(X)

    def step(self, x):
        """Single application: successor state or ``BOTTOM``."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        nxt, ok = self.step_batch(x)
        return nxt[0] if ok[0] else BOTTOM

    def __call__(self, x):
        return self.step(x)

    def embed(self, z: np.ndarray) -> np.ndarray:
        """Lift perturbations on the perturbed subspace into full state space."""
        z = np.atleast_2d(z)
        out = np.zeros((z.shape[0], self.state_dim))
        out[:, self.perturbed_index] = z
        return out

    @property
    def perturbation_dim(self) -> int:
        return len(self.perturbed_index)

    def log_likelihood(self, y: np.ndarray, X: np.ndarray, ok: np.ndarray | None = None) -> np.ndarray:
        """Gaussian log-likelihood of ``y`` for each row of ``X``; ``-inf`` where not ok."""
        X = np.atleast_2d(X)
        diff = X[:, self.observed_index] - np.asarray(y)[None, :]
        d = len(self.observed_index)
        s2 = self.sigma_obs**2
        ll = -0.5 * np.sum(diff * diff, axis=1) / s2 - 0.5 * d * (LOG_2PI + np.log(s2))
        if ok is not None:
            ll = np.where(ok, ll, -np.inf)
        return ll

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"model": self.model_id, "config": _as_plain(self.config)}, sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _as_plain(cfg):
    if dataclasses.is_dataclass(cfg):
        return {k: _as_plain(v) for k, v in dataclasses.asdict(cfg).items()}
    if isinstance(cfg, (list, tuple)):
        return [_as_plain(v) for v in cfg]
    if isinstance(cfg, np.ndarray):
        return cfg.tolist()
    return cfg


def gaussian_likelihood(y, x, sigma_obs: float, observed_index=None) -> float:
    """Diagonal Gaussian density of ``y`` at the observed coordinates of ``x``.

    Exactly zero when ``x`` is ``BOTTOM``.
    """
    if is_bottom(x):
        return 0.0
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    obs = x if observed_index is None else x[np.asarray(observed_index)]
    d = y.size
    r2 = float(np.sum((y - obs) ** 2))
    return float((2.0 * np.pi * sigma_obs**2) ** (-0.5 * d) * np.exp(-0.5 * r2 / sigma_obs**2))


# ---- annulus ----------------------------------------------------------------


@dataclass(frozen=True)
class AnnulusConfig:
    dt: float = 0.1
    omega: float = 0.5
    r_min: float = 0.5
    r_max: float = 2.0
    tau: float = 0.00212  # calibrated for ~75% baseline rejection
    sigma_pos: float = 0.01
    sigma_vel: float = 0.05
    sigma_obs: float = 0.05

    def __post_init__(self):
        for name in ("dt", "tau", "sigma_pos", "sigma_vel", "sigma_obs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"annulus: {name} must be strictly positive")
        if not 0 < self.r_min <= self.r_max:
            raise ValueError("annulus: need 0 < r_min <= r_max")


def annulus_step(x, cfg: AnnulusConfig):
    """Linear motion over ``dt``; fails if the radius changes by more than ``tau``."""
    return AnnulusSimulator(cfg).step(x)


class AnnulusSimulator(Simulator):
    """State (x, y, vx, vy); perturbations on all four coordinates."""

    model_id = "annulus"
    state_dim = 4

    def __init__(self, config: AnnulusConfig | None = None):
        self.config = config or AnnulusConfig()
        self.perturbed_index = np.arange(4)
        self.observed_index = np.arange(2)
        self.sigma_obs = self.config.sigma_obs

    def baseline_scales(self):
        c = self.config
        return np.array([c.sigma_pos, c.sigma_pos, c.sigma_vel, c.sigma_vel])

    def radius_change(self, X: np.ndarray) -> np.ndarray:
        pos = X[:, :2]
        new = pos + self.config.dt * X[:, 2:]
        return np.hypot(new[:, 0], new[:, 1]) - np.hypot(pos[:, 0], pos[:, 1])

    def _step_batch(self, X):
        out = X.copy()
        out[:, :2] += self.config.dt * X[:, 2:]
        ok = np.abs(self.radius_change(X)) <= self.config.tau
        return out, ok

    def sample_prior(self, rng, n):
        # Points on the radius prior moving counter-clockwise at roughly the
        # orbital speed; velocity jittered at the perturbation scale.
        c = self.config
        r = rng.uniform(c.r_min, c.r_max, n)
        th = rng.uniform(0.0, 2.0 * np.pi, n)
        speed = c.omega * r
        X = np.empty((n, 4))
        X[:, 0] = r * np.cos(th)
        X[:, 1] = r * np.sin(th)
        X[:, 2] = -speed * np.sin(th) + c.sigma_vel * rng.standard_normal(n)
        X[:, 3] = speed * np.cos(th) + c.sigma_vel * rng.standard_normal(n)
        return X

    def with_tau(self, tau: float) -> "AnnulusSimulator":
        return AnnulusSimulator(dataclasses.replace(self.config, tau=float(tau)))

    def with_dt(self, dt: float) -> "AnnulusSimulator":
        return AnnulusSimulator(dataclasses.replace(self.config, dt=float(dt)))


# ---- bouncing balls ---------------------------------------------------------


@dataclass(frozen=True)
class BallsConfig:
    n_balls: int = 2
    radius: float = 5.0
    box: float = 30.0
    masses: tuple[float, ...] = (1.0, 1.0)
    dt: float = 0.1
    max_speed: float = 2.0
    sigma_pos: float = 0.1
    sigma_vel: float = 0.05
    sigma_obs: float = 0.5

    def __post_init__(self):
        for name in ("radius", "box", "dt", "sigma_pos", "sigma_vel", "sigma_obs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"balls: {name} must be strictly positive")
        if len(self.masses) != self.n_balls or min(self.masses) <= 0:
            raise ValueError("balls: need one positive mass per ball")
        if self.n_balls >= 2 and not self.box > 4 * self.radius:
            raise ValueError("balls: enclosure must be wider than four radii")


def balls_step(x, cfg: BallsConfig):
    return BallsSimulator(cfg).step(x)


class BallsSimulator(Simulator):
    """Per-ball layout (px, py, vx, vy), balls concatenated."""

    model_id = "balls"

    def __init__(self, config: BallsConfig | None = None):
        self.config = config or BallsConfig()
        B = self.config.n_balls
        self.state_dim = 4 * B
        self.perturbed_index = np.arange(4 * B)
        self.observed_index = np.array([4 * b + k for b in range(B) for k in (0, 1)])
        self.sigma_obs = self.config.sigma_obs

    def baseline_scales(self):
        c = self.config
        return np.tile([c.sigma_pos, c.sigma_pos, c.sigma_vel, c.sigma_vel], c.n_balls)

    def invalid(self, X: np.ndarray) -> np.ndarray:
        """True where some pair overlaps or some ball pokes through a wall."""
        c = self.config
        B = c.n_balls
        bad = np.zeros(X.shape[0], dtype=bool)
        for b in range(B):
            p = X[:, 4 * b : 4 * b + 2]
            bad |= np.any(p < c.radius, axis=1) | np.any(p > c.box - c.radius, axis=1)
            for o in range(b + 1, B):
                q = X[:, 4 * o : 4 * o + 2]
                bad |= np.hypot(*(p - q).T) < 2.0 * c.radius
        return bad

    def _step_batch(self, X):
        return self.integrate(X), ~self.invalid(X)

    def integrate(self, X: np.ndarray) -> np.ndarray:
        """Frictionless motion over ``dt`` with wall and pairwise elastic contacts.

        No validity check; ``step_batch`` applies that to the input first.
        """
        c = self.config
        B = c.n_balls
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        S = X.reshape(-1, B, 4).copy()
        pos = S[:, :, :2]
        vel = S[:, :, 2:]
        pos += c.dt * vel

        lo, hi = c.radius, c.box - c.radius
        below = pos < lo
        above = pos > hi
        pos[below] = lo
        pos[above] = hi
        vel[below] = np.abs(vel[below])
        vel[above] = -np.abs(vel[above])

        m = np.asarray(c.masses, dtype=np.float64)
        for i in range(B):
            for j in range(i + 1, B):
                d = pos[:, i] - pos[:, j]
                dist = np.hypot(d[:, 0], d[:, 1])
                hit = (dist < 2.0 * c.radius) & (dist > 0)
                if not np.any(hit):
                    continue
                n = d[hit] / dist[hit, None]
                rel = np.sum((vel[hit, i] - vel[hit, j]) * n, axis=1)
                closing = rel < 0
                mi, mj = m[i], m[j]
                imp = np.where(closing, rel, 0.0)[:, None] * n
                vel[hit, i] -= (2.0 * mj / (mi + mj)) * imp
                vel[hit, j] += (2.0 * mi / (mi + mj)) * imp
                # separate to contact distance (plus rounding slack so the
                # result passes the validity check), heavier ball moves less
                gap = (2.0 * c.radius * (1.0 + 1e-12) - dist[hit])[:, None] * n
                pos[hit, i] += gap * (mj / (mi + mj))
                pos[hit, j] -= gap * (mi / (mi + mj))
        np.clip(pos, lo, hi, out=pos)
        return S.reshape(X.shape)

    def sample_prior(self, rng, n):
        c = self.config
        B = c.n_balls
        X = np.empty((n, 4 * B))
        todo = np.arange(n)
        while todo.size:
            k = todo.size
            cand = np.empty((k, 4 * B))
            for b in range(B):
                cand[:, 4 * b : 4 * b + 2] = rng.uniform(c.radius, c.box - c.radius, (k, 2))
                ang = rng.uniform(0, 2 * np.pi, k)
                spd = rng.uniform(0, c.max_speed, k)
                cand[:, 4 * b + 2] = spd * np.cos(ang)
                cand[:, 4 * b + 3] = spd * np.sin(ang)
            good = ~self.invalid(cand)
            X[todo[good]] = cand[good]
            todo = todo[~good]
        return X

    def kinetic_energy(self, X):
        S = np.atleast_2d(X).reshape(-1, self.config.n_balls, 4)
        m = np.asarray(self.config.masses)
        return 0.5 * np.sum(m[None, :] * np.sum(S[:, :, 2:] ** 2, axis=2), axis=1)

    def momentum(self, X):
        S = np.atleast_2d(X).reshape(-1, self.config.n_balls, 4)
        m = np.asarray(self.config.masses)
        return np.sum(m[None, :, None] * S[:, :, 2:], axis=1)


# ---- linear Gaussian --------------------------------------------------------


@dataclass(frozen=True)
class LGSSMConfig:
    """Scalar model x_t = a x_{t-1} + N(0, sigma_trans^2), y_t = x_t + N(0, sigma_obs^2).

    As a brittle simulator the step is ``x -> a x`` applied to the perturbed
    state, so the perturbation scale is ``sigma_trans / |a|``.
    """

    a: float = 0.9
    sigma_trans: float = 0.3
    sigma_obs: float = 0.5
    prior_mean: float = 0.0
    prior_var: float = 1.0

    def __post_init__(self):
        if self.a == 0:
            raise ValueError("lgssm: a must be non-zero")
        if not (self.sigma_trans > 0 and self.sigma_obs > 0 and self.prior_var > 0):
            raise ValueError("lgssm: variances must be strictly positive")


def lgssm_step(x, cfg: LGSSMConfig):
    return LGSSMSimulator(cfg).step(x)


class LGSSMSimulator(Simulator):
    model_id = "lgssm"
    state_dim = 1

    def __init__(self, config: LGSSMConfig | None = None):
        self.config = config or LGSSMConfig()
        self.perturbed_index = np.arange(1)
        self.observed_index = np.arange(1)
        self.sigma_obs = self.config.sigma_obs

    def baseline_scales(self):
        return np.array([self.config.sigma_trans / abs(self.config.a)])

    def _step_batch(self, X):
        return self.config.a * X, np.ones(X.shape[0], dtype=bool)

    def sample_prior(self, rng, n):
        c = self.config
        return c.prior_mean + np.sqrt(c.prior_var) * rng.standard_normal((n, 1))


# ---- plug-in wrapper --------------------------------------------------------


@dataclass
class FunctionSimulator(Simulator):
    """Wrap a per-state callable ``fn(x) -> array | BOTTOM`` as a simulator.

    This is the hook for external simulators. ``prior`` draws initial states.
    """

    fn: Callable
    state_dim: int
    scales: np.ndarray
    prior: Callable | None = None
    perturbed_index: np.ndarray | None = None
    observed_index: np.ndarray | None = None
    sigma_obs: float = 1.0
    model_id: str = "function"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if self.perturbed_index is None:
            self.perturbed_index = np.arange(self.state_dim)
        if self.observed_index is None:
            self.observed_index = np.arange(self.state_dim)
        self.perturbed_index = np.asarray(self.perturbed_index)
        self.observed_index = np.asarray(self.observed_index)

    def baseline_scales(self):
        return self.scales

    def sample_prior(self, rng, n):
        if self.prior is None:
            return np.zeros((n, self.state_dim))
        return np.asarray(self.prior(rng, n), dtype=np.float64).reshape(n, self.state_dim)

    def _step_batch(self, X):
        out = np.empty_like(X)
        ok = np.zeros(X.shape[0], dtype=bool)
        for i, x in enumerate(X):
            r = self.fn(x)
            if not is_bottom(r):
                out[i] = r
                ok[i] = True
        return out, ok


# ---- dataset generation -----------------------------------------------------


@dataclass
class Dataset:
    model_id: str
    y: np.ndarray  # (T, d_obs), y[t-1] observes x[t]
    x: np.ndarray  # (T+1, D)
    meta: dict = field(default_factory=dict)


def generate_dataset(
    sim: Simulator,
    T: int,
    seed: int,
    *,
    radius: float | None = None,
    phase: float | None = None,
    max_attempts: int = 10_000,
) -> Dataset:
    """Synthetic observations ``y_{1:T}`` with ground truth ``x_{0:T}``.

    Annulus data come from the true constant-speed circular orbit, not from
    the misspecified linear model. Balls and LGSSM data roll the perturbed
    simulator forward, re-proposing on failure.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.Generator(np.random.Philox(seed))
    meta: dict = {"seed": seed, "T": T}
    if isinstance(sim, AnnulusSimulator):
        c = sim.config
        r = rng.uniform(c.r_min, c.r_max) if radius is None else float(radius)
        th0 = rng.uniform(0.0, 2.0 * np.pi) if phase is None else float(phase)
        th = th0 + c.omega * c.dt * np.arange(T + 1)
        x = np.stack(
            [r * np.cos(th), r * np.sin(th), -r * c.omega * np.sin(th), r * c.omega * np.cos(th)],
            axis=1,
        )
        meta.update(radius=r, phase=th0)
    else:
        scales = sim.baseline_scales()
        x = np.empty((T + 1, sim.state_dim))
        x[0] = sim.sample_prior(rng, 1)[0]
        for t in range(1, T + 1):
            for _ in range(max_attempts):
                z = scales * rng.standard_normal(scales.size)
                nxt, ok = sim.step_batch(x[t - 1 : t] + sim.embed(z))
                if ok[0]:
                    x[t] = nxt[0]
                    break
            else:
                raise RuntimeError(f"dataset generation stuck at t={t}")
    obs = x[1:, sim.observed_index]
    y = obs + sim.sigma_obs * rng.standard_normal(obs.shape)
    return Dataset(sim.model_id, y, x, meta)


def save_dataset(ds: Dataset, path, config_echo: dict | None = None) -> None:
    """CSV (t, y columns, ground-truth x columns) plus a YAML sidecar."""
    import csv
    from pathlib import Path

    import yaml

    path = Path(path)
    T = ds.y.shape[0]
    ycols = [f"y{i}" for i in range(ds.y.shape[1])]
    xcols = [f"x{i}" for i in range(ds.x.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *ycols, *xcols])
        w.writerow([0, *([""] * len(ycols)), *(repr(float(v)) for v in ds.x[0])])
        for t in range(1, T + 1):
            w.writerow([t, *(repr(float(v)) for v in ds.y[t - 1]), *(repr(float(v)) for v in ds.x[t])])
    side = {"model_id": ds.model_id, "meta": ds.meta}
    if config_echo is not None:
        side["config"] = config_echo
    with open(path.with_suffix(".yaml"), "w") as fh:
        yaml.safe_dump(side, fh, sort_keys=True)


def load_dataset(path) -> Dataset:
    import csv
    from pathlib import Path

    import yaml

    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    yi = [i for i, h in enumerate(header) if h.startswith("y")]
    xi = [i for i, h in enumerate(header) if h.startswith("x")]
    x = np.array([[float(r[i]) for i in xi] for r in body])
    y = np.array([[float(r[i]) for i in yi] for r in body[1:]])
    side = path.with_suffix(".yaml")
    meta, model_id = {}, "unknown"
    if side.exists():
        info = yaml.safe_load(side.read_text())
        meta, model_id = info.get("meta", {}), info.get("model_id", model_id)
    return Dataset(model_id, y, x, meta)


def make_simulator(model_id: str, params: dict | None = None) -> Simulator:
    params = dict(params or {})
    if model_id == "annulus":
        return AnnulusSimulator(AnnulusConfig(**params))
    if model_id == "balls":
        if "masses" in params:
            params["masses"] = tuple(params["masses"])
        return BallsSimulator(BallsConfig(**params))
    if model_id == "lgssm":
        return LGSSMSimulator(LGSSMConfig(**params))
    raise ValueError(f"unknown model id {model_id!r}")
