"""Collecting accepted (state, perturbation) pairs and fitting the flow to them."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import (
    DEFAULT_MAX_ATTEMPTS,
    BaselineGaussian,
    LearnedFlow,
    estimate_acceptance_rate,
    iterate_batch,
    iterate_simulator,
    rng_stream,
)
from .flow import FlowModel
from .simulators import AnnulusSimulator, Simulator

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    rollout_length: int = 50
    n_trajectories: int = 500
    holdout_fraction: float = 0.1
    seed: int = 0
    clip_norm: float = 10.0
    log_every: int = 250
    eval_trials: int = 4000
    fresh_samples: bool = False
    lr_schedule: str = "cosine"
    recalibrate_batchnorm: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1 or self.rollout_length < 1 or self.n_trajectories < 1:
            raise ValueError("batch_size, rollout_length and n_trajectories must be >= 1")
        if not 0.0 <= self.holdout_fraction <= 0.5:
            raise ValueError("holdout_fraction must lie in [0, 0.5]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")


@dataclass
class PairPool:
    """Accepted pairs: ``x_prev[i]`` was perturbed by ``z[i]`` without failure."""

    x_prev: np.ndarray
    z: np.ndarray
    trajectory: np.ndarray
    simulator_calls: int = 0

    def __len__(self):
        return self.x_prev.shape[0]

    def subset(self, idx) -> "PairPool":
        return PairPool(self.x_prev[idx], self.z[idx], self.trajectory[idx], 0)

    def split(self, holdout_fraction: float, rng) -> tuple["PairPool", "PairPool"]:
        n = len(self)
        perm = rng.permutation(n)
        n_hold = int(round(holdout_fraction * n))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))

    def to_csv(self, path) -> None:
        dx, dz = self.x_prev.shape[1], self.z.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", *(f"x{i}" for i in range(dx)), *(f"z{i}" for i in range(dz))])
            for t, x, z in zip(self.trajectory, self.x_prev, self.z):
                w.writerow([int(t), *(repr(float(v)) for v in x), *(repr(float(v)) for v in z)])

    @classmethod
    def from_csv(cls, path) -> "PairPool":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        xi = [i for i, h in enumerate(head) if h.startswith("x")]
        zi = [i for i, h in enumerate(head) if h.startswith("z")]
        x = np.array([[float(r[i]) for i in xi] for r in body]).reshape(len(body), len(xi))
        z = np.array([[float(r[i]) for i in zi] for r in body]).reshape(len(body), len(zi))
        traj = np.array([int(r[0]) for r in body], dtype=np.int64)
        return cls(x, z, traj)


def collect_pairs(
    sim: Simulator,
    proposal,
    prior,
    rollout_length: int,
    n_trajectories: int,
    seed: int,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> PairPool:
    """Roll the perturbed simulator forward from prior draws, keeping every accepted pair.

    Each trajectory owns the stream ``rng_stream(seed, i)`` so the pool does
    not depend on execution order. ``prior`` is ``f(rng, n) -> states``.
    """
    if n_trajectories < 1 or rollout_length < 1:
        raise ValueError("need at least one trajectory of at least one step")
    xs, zs, ids = [], [], []
    calls = 0
    for i in range(n_trajectories):
        rng = rng_stream(seed, i)
        x = np.atleast_2d(prior(rng, 1))[0]
        for _ in range(rollout_length):
            nxt, rec = iterate_simulator(sim, x, proposal, rng, max_attempts)
            xs.append(x)
            zs.append(rec.z)
            ids.append(i)
            calls += rec.calls
            x = nxt
    return PairPool(np.array(xs), np.array(zs), np.array(ids, dtype=np.int64), calls)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, indices: np.ndarray):
        self.iteration = iteration
        self.indices = indices
        super().__init__(f"non-finite objective at iteration {iteration}; minibatch rows {indices.tolist()}")


@dataclass
class TrainResult:
    flow: FlowModel
    metrics: list[dict] = field(default_factory=list)
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def write_metrics_csv(self, path) -> None:
        cols = ["iteration", "train_objective", "heldout_objective", "rejection_rate"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.metrics:
                w.writerow(["" if row.get(c) is None else row[c] for c in cols])


def mean_log_density(flow: FlowModel, pool: PairPool, chunk: int = 8192) -> float:
    if len(pool) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(pool), chunk):
        total += float(np.sum(flow.log_density(pool.z[s : s + chunk], pool.x_prev[s : s + chunk])))
    return total / len(pool)


def train_q(
    flow: FlowModel,
    pool: PairPool,
    cfg: TrainConfig,
    *,
    heldout: PairPool | None = None,
    sim: Simulator | None = None,
    eval_states: np.ndarray | None = None,
) -> TrainResult:
    """Maximise the mean minibatch log q(z | x_prev) by ADAM ascent.

    Batch norm runs in training mode during updates; held-out objective and
    (when ``sim`` is given) the single-call rejection rate are logged every
    ``cfg.log_every`` iterations. ``flow`` is updated in place.
    """
    if len(pool) == 0:
        raise ValueError("empty training pool")
    if pool.x_prev.shape[1] != flow.dim_x or pool.z.shape[1] != flow.dim_z:
        raise ValueError("pool dimensions do not match the flow")
    rng = rng_stream(cfg.seed, 1)
    eval_rng_seed = cfg.seed
    state = ad.AdamState.for_params(flow.params, lr=cfg.lr)
    baseline = None
    if cfg.fresh_samples:
        if sim is None:
            raise ValueError("fresh sampling needs the simulator")
        baseline = BaselineGaussian(sim.baseline_scales())
    if eval_states is None and heldout is not None and len(heldout):
        eval_states = heldout.x_prev

    def snapshot(k, train_obj):
        row = {"iteration": k, "train_objective": train_obj, "heldout_objective": None, "rejection_rate": None}
        if heldout is not None and len(heldout):
            row["heldout_objective"] = mean_log_density(flow, heldout)
        if sim is not None and eval_states is not None and cfg.eval_trials > 0:
            est = estimate_acceptance_rate(
                sim, eval_states, LearnedFlow(flow), cfg.eval_trials, rng_stream(eval_rng_seed, 2, k)
            )
            row["rejection_rate"] = est.rejection
        return row

    result = TrainResult(flow)
    trace = np.empty(cfg.iterations)
    n = len(pool)
    bs = min(cfg.batch_size, n)
    for k in range(cfg.iterations):
        if cfg.log_every and k % cfg.log_every == 0:
            result.metrics.append(snapshot(k, float(trace[k - 1]) if k else None))
        if cfg.lr_schedule == "cosine":
            state.lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * k / cfg.iterations))
        idx = rng.choice(n, size=bs, replace=False)
        X = pool.x_prev[idx]
        if baseline is not None:
            _, Z, _ = iterate_batch(sim, X, baseline, rng)
        else:
            Z = pool.z[idx]
        obj = ad.mean(flow.log_prob(Z, X, training=True))
        val = float(obj.data[0])
        if not np.isfinite(val):
            raise TrainingDiverged(k, idx)
        grads = ad.backward(obj, flow.params)
        ad.clip_grad_norm(grads, cfg.clip_norm)
        ad.adam_step(flow.params, grads, state)
        trace[k] = val
        if cfg.log_every and k % cfg.log_every == 0:
            log.debug("iter %d objective %.4f", k, val)
    if cfg.iterations and cfg.recalibrate_batchnorm:
        recalibrate_batchnorm(flow, pool)
    if cfg.iterations:
        result.metrics.append(snapshot(cfg.iterations, float(trace[-1])))
    result.objective_trace = trace
    return result


def recalibrate_batchnorm(flow: FlowModel, pool: PairPool, chunk: int = 8192) -> None:
    """Replace batch-norm running statistics with population statistics of ``pool``.

    Layers are processed in order so each sees inputs normalised by the
    already-recalibrated layers before it.
    """
    with ad.no_grad():
        cond = flow.condition(pool.x_prev)
        for k in range(flow.n_blocks - 1):
            eps_in = _input_to_bn(flow, cond, pool.z, k)
            flow.bn_running_mean[k] = eps_in.mean(axis=0)
            flow.bn_running_var[k] = eps_in.var(axis=0)


def _input_to_bn(flow: FlowModel, cond, Z, k):
    from .autodiff import Tensor

    u = Tensor(Z / flow.base_scales)
    for j in range(k + 1):
        if j > 0:
            u, _ = flow._batchnorm(j - 1, u, training=False)
        mu, s = flow.made_params(cond, j, u)
        u = ad.multiply(u - mu, ad.exp(-s))
    return u.data


def evaluate_proposal(flow_or_proposal, sim: Simulator, state_sampler, n_trials: int, rng) -> float:
    """Single-call rejection rate of a flow (or any proposal) on ``sim``."""
    prop = LearnedFlow(flow_or_proposal) if isinstance(flow_or_proposal, FlowModel) else flow_or_proposal
    return estimate_acceptance_rate(sim, state_sampler, prop, n_trials, rng).rejection


def calibrate_annulus_tau(
    sim: AnnulusSimulator,
    target_rejection: float = 0.75,
    *,
    rollout_length: int = 50,
    n_trajectories: int = 200,
    n_samples: int = 200_000,
    rounds: int = 4,
    seed: int = 0,
) -> AnnulusSimulator:
    """Set tau to the (1 - target) quantile of |radius change| under the baseline.

    States come from baseline rollouts, which themselves depend on tau, so the
    quantile is iterated to a fixed point starting from prior states.
    """
    baseline = BaselineGaussian(sim.baseline_scales())
    rng = rng_stream(seed, 7)
    states = sim.sample_prior(rng, n_samples)
    for r in range(rounds):
        X = states[rng.integers(0, len(states), n_samples)]
        dr = np.abs(sim.radius_change(X + baseline.sample(X, rng)))
        sim = sim.with_tau(float(np.quantile(dr, 1.0 - target_rejection)))
        if r < rounds - 1:
            pool = collect_pairs(sim, baseline, sim.sample_prior, rollout_length, n_trajectories, seed + 1000 + r)
            states = pool.x_prev
    return sim


def fit_proposal(
    sim: Simulator,
    cfg: TrainConfig,
    *,
    hidden: int = 64,
    n_blocks: int = 5,
    pool: PairPool | None = None,
) -> tuple[TrainResult, PairPool, PairPool]:
    """Collect pairs under the baseline (unless ``pool`` is given), split, and train.

    Returns the training result with the train and held-out pools.
    """
    from .flow import flow_for

    if pool is None:
        baseline = BaselineGaussian(sim.baseline_scales())
        pool = collect_pairs(sim, baseline, sim.sample_prior, cfg.rollout_length, cfg.n_trajectories, cfg.seed)
    train, heldout = pool.split(cfg.holdout_fraction, rng_stream(cfg.seed, 9))
    flow = flow_for(sim, hidden=hidden, n_blocks=n_blocks, seed=cfg.seed, states=train.x_prev)
    log.info("training on %d pairs, %d held out", len(train), len(heldout))
    result = train_q(flow, train, cfg, heldout=heldout, sim=sim)
    return result, train, heldout


def config_dict(cfg) -> dict:
    return asdict(cfg)
