import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from toys import Toy, always_fails, never_fails

from brittlesim.core import BaselineGaussian, rng_stream
from brittlesim.simulators import LGSSMConfig, LGSSMSimulator, generate_dataset
from brittlesim.smc import (
    FIXED_BUDGET,
    REJECTION_LOOP,
    StudyTable,
    SweepConfig,
    evidence_variance_study,
    kalman_log_evidence,
    log_mean_exp,
    model_select,
    resample,
    run_sweeps,
    smc_sweep,
    write_sweeps_csv,
)


class ConstantLikelihood(Toy):
    def __init__(self, c):
        super().__init__()
        self.log_c = math.log(c)

    def log_likelihood(self, y, X, ok=None):
        ll = np.full(np.atleast_2d(X).shape[0], self.log_c)
        return ll if ok is None else np.where(ok, ll, -np.inf)


@pytest.mark.parametrize("N", [1, 7, 100])
def test_constant_likelihood_evidence(N):
    sim = ConstantLikelihood(0.37)
    res = smc_sweep(sim, BaselineGaussian([1.0]), np.zeros((9, 1)), SweepConfig(n_particles=N))
    assert res.log_evidence == pytest.approx(9 * math.log(0.37), abs=1e-12)


def test_single_step_evidence_is_log_mean_weight():
    sim = never_fails()
    prop = BaselineGaussian([1.0])
    y = np.array([[0.4]])
    cfg = SweepConfig(n_particles=50, seed=3)
    res = smc_sweep(sim, prop, y, cfg, rng_stream(3))
    rng = rng_stream(3)
    X = sim.sample_prior(rng, 50)
    Z = prop.sample(X, rng)
    w = np.exp(-0.5 * (X + Z - 0.4) ** 2) / math.sqrt(2 * math.pi)
    assert res.log_evidence == pytest.approx(math.log(w.mean()), abs=1e-12)


def test_fixed_budget_call_count():
    res = smc_sweep(LGSSMSimulator(), BaselineGaussian([1.0]), np.zeros((13, 1)), SweepConfig(n_particles=40))
    assert res.simulator_calls == 40 * 13


def test_all_bottom_fails_sweep():
    res = smc_sweep(always_fails(), BaselineGaussian([1.0]), np.zeros((5, 1)), SweepConfig(n_particles=10))
    assert res.failed and res.log_evidence == -math.inf


def test_rejection_loop_equals_fixed_budget_without_failures():
    sim = LGSSMSimulator()
    y = generate_dataset(sim, 10, seed=1).y
    prop = BaselineGaussian(sim.baseline_scales())
    a = smc_sweep(sim, prop, y, SweepConfig(n_particles=30, mode=FIXED_BUDGET), rng_stream(5))
    b = smc_sweep(sim, prop, y, SweepConfig(n_particles=30, mode=REJECTION_LOOP), rng_stream(5))
    assert a.log_evidence == b.log_evidence
    np.testing.assert_array_equal(a.step_log_mean_weight, b.step_log_mean_weight)


def test_bottom_particles_never_ancestors():
    sim = Toy(lambda X: X[:, 0] > 0.0)
    res = smc_sweep(sim, BaselineGaussian([1.0]), np.zeros((6, 1)), SweepConfig(n_particles=200), rng_stream(1),
                    keep_particles=True)
    assert not res.failed
    # resampled particles are all successful outcomes
    assert np.all(res.particles[1:] <= 0.0)


def test_nonfinite_observation_rejected():
    with pytest.raises(ValueError):
        smc_sweep(never_fails(), BaselineGaussian([1.0]), np.array([[np.nan]]), SweepConfig())


def test_trajectories_follow_ancestors():
    sim = LGSSMSimulator()
    y = generate_dataset(sim, 6, seed=2).y
    res = smc_sweep(sim, BaselineGaussian(sim.baseline_scales()), y, SweepConfig(n_particles=20), rng_stream(0),
                    keep_particles=True)
    tr = res.trajectories()
    assert tr.shape == (7, 20, 1)
    np.testing.assert_array_equal(tr[-1], res.particles[-1])
    # parent of final particle n at the previous step
    a = res.ancestors[-1]
    np.testing.assert_array_equal(tr[-2], res.particles[-2][a])


# ---- resampling ----------------------------------------------------------------


def test_resample_one_hot():
    W = np.zeros(6)
    W[4] = 1.0
    assert np.all(resample(W, 100, rng_stream(0)) == 4)


def test_resample_uniform_frequencies():
    K, n = 10, 100_000
    idx = resample(np.full(K, 1.0 / K), n, rng_stream(1))
    freq = np.bincount(idx, minlength=K) / n
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert np.all(np.abs(freq - 1 / K) < 4 * sigma)


def test_resample_deterministic_and_skips_zeros():
    W = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    a, b = resample(W, 1000, rng_stream(2)), resample(W, 1000, rng_stream(2))
    np.testing.assert_array_equal(a, b)
    assert set(a.tolist()) <= {1, 3}


def test_resample_all_zero():
    with pytest.raises(ValueError):
        resample(np.zeros(3), 3, rng_stream(0))


def test_log_mean_exp_extreme_range():
    ln10 = math.log(10.0)
    logw = np.array([-1000.0, -1000.0 - 300 * ln10, -1000.0 - 150 * ln10])
    exact = Fraction(1) + Fraction(1, 10**300) + Fraction(1, 10**150)
    expect = -1000.0 + math.log(exact / 3)
    assert log_mean_exp(logw) == pytest.approx(expect, abs=1e-10)
    assert log_mean_exp(np.full(3, -np.inf)) == -math.inf


# ---- Kalman oracle ---------------------------------------------------------------


def test_kalman_single_step_example():
    cfg = LGSSMConfig(prior_mean=0.0, prior_var=1.0, sigma_obs=1.0)
    got = kalman_log_evidence(cfg, [0.0], prior_on_first_state=True)
    assert got == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-14)


def test_kalman_diffuse_observations_decrease():
    y = np.array([0.3, -0.2, 0.5])
    vals = [kalman_log_evidence(LGSSMConfig(sigma_obs=s), y) for s in np.geomspace(10, 1e6, 12)]
    assert np.all(np.diff(vals) < 0)
    assert vals[-1] < -30


def test_kalman_matches_grid_quadrature():
    cfg = LGSSMConfig(a=0.8, sigma_trans=0.4, sigma_obs=0.6, prior_mean=0.2, prior_var=0.9)
    y = np.array([0.5, -0.1, 0.7])
    g = np.linspace(-8, 8, 3201)
    h = g[1] - g[0]

    def npdf(v, m, s2):
        return np.exp(-0.5 * (v - m) ** 2 / s2) / np.sqrt(2 * np.pi * s2)

    alpha = npdf(g, cfg.prior_mean, cfg.prior_var)  # density of x0
    trans = npdf(g[:, None], cfg.a * g[None, :], cfg.sigma_trans**2)  # [x_t, x_{t-1}]
    for yt in y:
        alpha = (trans @ alpha) * h * npdf(yt, g, cfg.sigma_obs**2)
    brute = math.log(np.sum(alpha) * h)
    assert kalman_log_evidence(cfg, y) == pytest.approx(brute, abs=1e-4)


def test_kalman_rejects_bad_variance():
    cfg = LGSSMConfig()
    object.__setattr__(cfg, "sigma_obs", 0.0)  # bypass the config's own validation
    with pytest.raises(ValueError):
        kalman_log_evidence(cfg, [0.0])


def test_lgssm_smc_agrees_with_kalman_small():
    sim = LGSSMSimulator()
    y = generate_dataset(sim, 25, seed=4).y
    Ls = np.array([r.log_evidence for r in run_sweeps(
        sim, BaselineGaussian(sim.baseline_scales()), y, 100, SweepConfig(n_particles=1000), 1)])
    se = Ls.std(ddof=1) / math.sqrt(len(Ls))
    assert abs(Ls.mean() - kalman_log_evidence(sim.config, y)) < 3 * se


# ---- studies ---------------------------------------------------------------------


def test_study_same_proposal_identical_columns(tmp_path):
    sim = LGSSMSimulator()
    data = [generate_dataset(sim, 8, seed=s).y for s in range(3)]
    prop = BaselineGaussian(sim.baseline_scales())
    table = evidence_variance_study(sim, data, {"p": prop, "q": prop}, 5, SweepConfig(n_particles=20))
    np.testing.assert_array_equal(table.column("var", "p"), table.column("var", "q"))
    table.to_csv(tmp_path / "s.csv")
    back = StudyTable.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.column("var", "p"), table.column("var", "p"))
    assert back.labels == ["p", "q"]


def test_study_counts_failed_sweeps():
    sim = Toy(lambda X: X[:, 0] > 0.0)
    data = [np.zeros((20, 1))]
    table = evidence_variance_study(sim, data, {"p": BaselineGaussian([1.0])}, 6, SweepConfig(n_particles=1))
    assert table.rows[0].n_failed["p"] > 0


def test_sweeps_csv(tmp_path):
    sim = LGSSMSimulator()
    y = generate_dataset(sim, 4, seed=0).y
    res = run_sweeps(sim, BaselineGaussian(sim.baseline_scales()), y, 2, SweepConfig(n_particles=10))
    write_sweeps_csv(tmp_path / "w.csv", res)
    rows = list(csv.DictReader(open(tmp_path / "w.csv")))
    assert len(rows) == 8 and set(rows[0]) == {"sweep", "t", "log_mean_weight", "log_evidence", "failed"}


def test_identical_hypotheses_split_posterior():
    sim = LGSSMSimulator()
    y = generate_dataset(sim, 10, seed=5).y
    res = model_select([("a", sim), ("b", LGSSMSimulator())], y, None, 20, SweepConfig(n_particles=500))
    np.testing.assert_allclose(res.posterior, [0.5, 0.5], atol=0.05)
    assert res.posterior.sum() == pytest.approx(1.0)


def test_model_select_prefers_true_transition():
    truth = LGSSMSimulator(LGSSMConfig(a=0.9))
    y = generate_dataset(truth, 100, seed=6).y
    wrong = LGSSMSimulator(LGSSMConfig(a=0.5))
    # exact evidence agrees on the ordering
    assert kalman_log_evidence(truth.config, y) > kalman_log_evidence(wrong.config, y)
    res = model_select([("0.5", wrong), ("0.9", truth)], y, None, 5, SweepConfig(n_particles=300))
    assert res.selected == "0.9"
    assert "selected,0.9" in res.report()


def test_model_select_needs_two():
    with pytest.raises(ValueError):
        model_select([("a", LGSSMSimulator())], np.zeros((3, 1)), None, 2, SweepConfig())


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(n_particles=0)
    with pytest.raises(ValueError):
        SweepConfig(mode="adaptive")
    with pytest.raises(ValueError):
        SweepConfig(resampling="systematic")
