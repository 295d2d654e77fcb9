"""Bootstrap SMC with pseudo-marginal log-evidence for brittle simulators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DEFAULT_MAX_ATTEMPTS, BaselineGaussian, iterate_batch, iterate_once_batch, rng_stream
from .simulators import LGSSMConfig, Simulator

REJECTION_LOOP = "rejection"
FIXED_BUDGET = "fixed"


@dataclass
class SweepConfig:
    n_particles: int = 100
    mode: str = FIXED_BUDGET
    resampling: str = "multinomial"
    seed: int = 0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if self.mode not in (REJECTION_LOOP, FIXED_BUDGET):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.resampling != "multinomial":
            raise ValueError("only multinomial resampling is supported")


@dataclass
class SweepResult:
    log_evidence: float
    step_log_mean_weight: np.ndarray
    failed: bool
    simulator_calls: int
    particles: np.ndarray | None = None  # (T+1, N, D) after resampling
    ancestors: np.ndarray | None = None  # (T, N)

    def trajectories(self) -> np.ndarray:
        """Genealogy of the final particles, shape (T+1, N, D)."""
        if self.particles is None or self.ancestors is None:
            raise ValueError("sweep was run without keeping particles")
        T = self.ancestors.shape[0]
        out = np.empty_like(self.particles)
        idx = np.arange(self.particles.shape[1])
        out[T] = self.particles[T]
        # particle n at step t descends from particle ancestors[t-1][n] at step t-1
        for t in range(T, 0, -1):
            idx = self.ancestors[t - 1][idx]
            out[t - 1] = self.particles[t - 1][idx]
        return out


def log_mean_exp(logw: np.ndarray) -> float:
    """log(mean(exp(logw))) with a max shift; ``-inf`` if every entry is ``-inf``."""
    m = np.max(logw)
    if not np.isfinite(m):
        return -math.inf
    return float(m + np.log(np.mean(np.exp(logw - m))))


def resample(W: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from Discrete(W); zero-weight entries are never drawn."""
    W = np.asarray(W, dtype=np.float64)
    c = np.cumsum(W)
    total = c[-1]
    if not total > 0:
        raise ValueError("cannot resample from all-zero weights")
    u = rng.random(n) * total
    idx = np.searchsorted(c, u, side="right")
    last = np.flatnonzero(W > 0)[-1]
    return np.minimum(idx, last)


def smc_sweep(
    sim: Simulator,
    proposal,
    y: np.ndarray,
    cfg: SweepConfig,
    rng: np.random.Generator | None = None,
    *,
    keep_particles: bool = False,
) -> SweepResult:
    """One SMC sweep over observations ``y`` (shape (T, d_obs))."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    if T < 1:
        raise ValueError("need at least one observation")
    if not np.all(np.isfinite(y)):
        raise ValueError("observations must be finite")
    if rng is None:
        rng = rng_stream(cfg.seed)
    N = cfg.n_particles
    X = sim.sample_prior(rng, N)
    lmw = np.full(T, np.nan)
    L = 0.0
    calls = 0
    parts = [X.copy()] if keep_particles else None
    ancs = [] if keep_particles else None
    for t in range(T):
        if cfg.mode == REJECTION_LOOP:
            Xt, _, c = iterate_batch(sim, X, proposal, rng, cfg.max_attempts)
            ok = np.ones(N, dtype=bool)
            calls += int(c.sum())
        else:
            Xt, ok, _ = iterate_once_batch(sim, X, proposal, rng)
            calls += N
        logw = sim.log_likelihood(y[t], Xt, ok)
        step = log_mean_exp(logw)
        lmw[t] = step
        if not np.isfinite(step):
            return SweepResult(-math.inf, lmw, True, calls,
                               np.array(parts) if keep_particles else None,
                               np.array(ancs) if keep_particles else None)
        L += step
        W = np.exp(logw - np.max(logw))
        W /= W.sum()
        a = resample(W, N, rng)
        X = Xt[a]
        if keep_particles:
            parts.append(X.copy())
            ancs.append(a)
    return SweepResult(
        L, lmw, False, calls,
        np.array(parts) if keep_particles else None,
        np.array(ancs) if keep_particles else None,
    )


def write_sweeps_csv(path, results: Sequence[SweepResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "t", "log_mean_weight", "log_evidence", "failed"])
        for s, r in enumerate(results):
            for t, v in enumerate(r.step_log_mean_weight, start=1):
                w.writerow([s, t, repr(float(v)), repr(float(r.log_evidence)), int(r.failed)])


# ---- exact oracle -----------------------------------------------------------


def kalman_log_evidence(cfg: LGSSMConfig, y, *, prior_on_first_state: bool = False) -> float:
    """Exact log p(y_{1:T}) for the scalar linear-Gaussian model.

    By default the prior is over x_0 and y_1 observes x_1 = a x_0 + noise,
    matching the SMC sweep. With ``prior_on_first_state`` the prior is placed
    directly on the first observed state.
    """
    if not (cfg.prior_var > 0 and cfg.sigma_trans > 0 and cfg.sigma_obs > 0):
        raise ValueError("variances must be strictly positive")
    y = np.ravel(np.asarray(y, dtype=np.float64))
    a, q2, r2 = cfg.a, cfg.sigma_trans**2, cfg.sigma_obs**2
    m, P = cfg.prior_mean, cfg.prior_var
    ll = 0.0
    for t, yt in enumerate(y):
        if t > 0 or not prior_on_first_state:
            m, P = a * m, a * a * P + q2
        S = P + r2
        ll += -0.5 * (math.log(2 * math.pi * S) + (yt - m) ** 2 / S)
        K = P / S
        m, P = m + K * (yt - m), (1 - K) * P
    return ll


# ---- studies ---------------------------------------------------------------


@dataclass
class StudyRow:
    dataset: int
    var: dict[str, float]
    mean: dict[str, float]
    n_failed: dict[str, int]


@dataclass
class StudyTable:
    labels: list[str]
    rows: list[StudyRow] = field(default_factory=list)

    def column(self, what: str, label: str) -> np.ndarray:
        return np.array([getattr(r, what)[label] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["dataset"]
            for lab in self.labels:
                head += [f"var_{lab}", f"mean_{lab}", f"n_failed_sweeps_{lab}"]
            w.writerow(head)
            for r in self.rows:
                line = [r.dataset]
                for lab in self.labels:
                    line += [repr(r.var[lab]), repr(r.mean[lab]), r.n_failed[lab]]
                w.writerow(line)

    @classmethod
    def from_csv(cls, path) -> "StudyTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        labels = [h[4:] for h in head if h.startswith("var_")]
        table = cls(labels)
        for line in body:
            rec = dict(zip(head, line))
            table.rows.append(StudyRow(
                int(rec["dataset"]),
                {lab: float(rec[f"var_{lab}"]) for lab in labels},
                {lab: float(rec[f"mean_{lab}"]) for lab in labels},
                {lab: int(rec[f"n_failed_sweeps_{lab}"]) for lab in labels},
            ))
        return table


def run_sweeps(sim, proposal, y, n_sweeps: int, cfg: SweepConfig, *keys: int) -> list[SweepResult]:
    return [smc_sweep(sim, proposal, y, cfg, rng_stream(cfg.seed, *keys, s)) for s in range(n_sweeps)]


def evidence_variance_study(
    sim: Simulator,
    datasets: Sequence[np.ndarray],
    proposals: dict[str, object],
    n_sweeps: int,
    cfg: SweepConfig,
) -> StudyTable:
    """Variance of the log-evidence across sweeps, per dataset and proposal.

    Every proposal sees the same datasets and the same random streams. Failed
    sweeps (log-evidence ``-inf``) are counted and left out of the variance.
    """
    labels = list(proposals)
    table = StudyTable(labels)
    for d, y in enumerate(datasets):
        var, mean, nf = {}, {}, {}
        for lab in labels:
            Ls = np.array([r.log_evidence for r in run_sweeps(sim, proposals[lab], y, n_sweeps, cfg, d)])
            good = Ls[np.isfinite(Ls)]
            nf[lab] = int(len(Ls) - len(good))
            var[lab] = float(np.var(good, ddof=1)) if len(good) > 1 else float("nan")
            mean[lab] = float(np.mean(good)) if len(good) else -math.inf
        table.rows.append(StudyRow(d, var, mean, nf))
    return table


@dataclass
class ModelSelection:
    labels: list[str]
    mean_log_evidence: np.ndarray
    stderr: np.ndarray
    log_evidence_estimate: np.ndarray
    posterior: np.ndarray
    selected: str
    n_failed: np.ndarray

    def report(self) -> str:
        lines = ["hypothesis,mean_log_evidence,stderr,posterior,n_failed"]
        for i, lab in enumerate(self.labels):
            lines.append(
                f"{lab},{self.mean_log_evidence[i]:.6f},{self.stderr[i]:.6f},{self.posterior[i]:.6f},{self.n_failed[i]}"
            )
        lines.append(f"selected,{self.selected}")
        return "\n".join(lines)


def model_select(
    hypotheses: Sequence[tuple[str, Simulator]],
    y: np.ndarray,
    proposal: object | Callable[[Simulator], object] | None,
    n_sweeps: int,
    cfg: SweepConfig,
) -> ModelSelection:
    """Compare hypotheses by SMC evidence under a uniform prior.

    ``proposal`` may be a fixed proposal, a factory ``sim -> proposal``, or
    ``None`` for each hypothesis's own baseline Gaussian. The evidence used
    for the posterior is the log of the mean of exp(L) across sweeps.
    """
    if len(hypotheses) < 2:
        raise ValueError("need at least two hypotheses")
    labels, means, ses, lz, nfail = [], [], [], [], []
    for h, (label, sim) in enumerate(hypotheses):
        if proposal is None:
            prop = BaselineGaussian(sim.baseline_scales())
        elif callable(proposal) and not hasattr(proposal, "sample"):
            prop = proposal(sim)
        else:
            prop = proposal
        Ls = np.array([r.log_evidence for r in run_sweeps(sim, prop, y, n_sweeps, cfg, h)])
        good = Ls[np.isfinite(Ls)]
        labels.append(label)
        nfail.append(len(Ls) - len(good))
        means.append(np.mean(good) if len(good) else -math.inf)
        ses.append(np.std(good, ddof=1) / math.sqrt(len(good)) if len(good) > 1 else math.nan)
        lz.append(log_mean_exp(Ls) + 0.0)
    lz = np.array(lz)
    post = np.exp(lz - np.max(lz))
    post /= post.sum()
    return ModelSelection(
        labels, np.array(means), np.array(ses), lz, post, labels[int(np.argmax(post))], np.array(nfail)
    )
