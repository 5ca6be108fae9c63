import numpy as np
import pytest

from multigoal import PriorSpec, SimulationConfig, expansion_terms, log_prior, simulate_dataset, theorem_study
from multigoal import log_residual_likelihood_derivative as dl
from multigoal.verify import area_classes, bias_study, predicted_shrinkage_gap, simulate_batch


def test_simulation_is_a_pure_function_of_config():
    cfg = SimulationConfig(m=20, seed=4)
    a = simulate_dataset(cfg, 7)
    b = simulate_dataset(cfg, 7)
    assert np.array_equal(a.data.y, b.data.y) and np.array_equal(a.theta, b.theta)
    Y, T = simulate_batch(cfg, [3, 7, 9])
    assert np.array_equal(Y[1], a.data.y)
    assert not np.array_equal(simulate_dataset(cfg, 8).data.y, a.data.y)
    assert not np.array_equal(simulate_dataset(SimulationConfig(m=20, seed=5), 7).data.y, a.data.y)


def test_zero_true_variance_gives_regression_means():
    cfg = SimulationConfig(m=10, p=2, true_beta=(1.0, -2.0), true_A=0.0, x_design=("random_uniform", 3))
    s = simulate_dataset(cfg, 0)
    np.testing.assert_allclose(s.theta, cfg.X() @ np.array([1.0, -2.0]))


def test_simulated_moments():
    cfg = SimulationConfig(m=5, true_beta=(2.0,), true_A=1.5, d_pattern=("explicit", [0.5, 1, 2, 3, 4]))
    Y, T = simulate_batch(cfg, range(100_000))
    np.testing.assert_allclose(Y.mean(axis=0), 2.0, atol=4 * np.sqrt((1.5 + 4) / 1e5))
    np.testing.assert_allclose(Y.var(axis=0), 1.5 + cfg.D(), rtol=0.02)
    np.testing.assert_allclose((Y - T).var(axis=0), cfg.D(), rtol=0.02)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        SimulationConfig(m=3)
    with pytest.raises(ValueError):
        SimulationConfig(true_A=-1)
    with pytest.raises(ValueError):
        SimulationConfig.from_dict({"m": 10, "bogus": 1})
    cfg = SimulationConfig(m=12, p=2, true_beta=(0, 1), x_design=("random_uniform", 1), seed=9)
    assert SimulationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        bias_study(SimulationConfig(replications=100))


def test_area_classes():
    D = np.array([3.0, 1.0, 2.0, 5.0, 4.0])
    assert area_classes(D) == {"min_D": 1, "median_D": 0, "max_D": 3}


def test_predicted_gap_is_negative_and_balanced_form():
    cfg = SimulationConfig(m=30, d_pattern=("balanced", 1.0))
    d = cfg.design()
    # -2D / (m/(A+D)^2 (A+D)^3) = -2D / (m (A+D))
    assert predicted_shrinkage_gap(d, 1.0, 0) == pytest.approx(-2 / 60)


def test_theorem1_with_constant_adjustment_is_identically_zero():
    cfg = SimulationConfig(m=25, replications=60, seed=1)
    rep = theorem_study(cfg, "theorem1", m_ladder=(25, 50), s=0.0)
    vals = [r["value"] for r in rep.records if np.isfinite(r["value"])]
    assert vals and all(v == 0.0 for v in vals)
    assert all(c["status"] == "pass" for c in rep.checks)


def test_theorem1_study_structure():
    cfg = SimulationConfig(m=25, replications=40, seed=2)
    rep = theorem_study(cfg, "theorem1", m_ladder=(25, 50))
    assert {r["area_class"] for r in rep.rows} == {"min_D", "median_D", "max_D"}
    assert len(rep.records) == 2 * 3 * 40
    r = rep.row(statistic="theorem1", m=50, area_class="max_D")
    vals = [x["value"] for x in rep.records if x["m"] == 50 and x["area_class"] == "max_D"]
    assert r["median"] == pytest.approx(np.nanmedian(vals))
    assert rep.to_dict(include_records=False).keys() >= {"study", "status", "rows", "checks"}


def test_theorem_study_thread_invariance():
    cfg = SimulationConfig(m=25, replications=60, seed=3)
    a = theorem_study(cfg, "corollary1", m_ladder=(25,), n_jobs=1)
    b = theorem_study(cfg, "corollary1", m_ladder=(25,), n_jobs=2)
    assert a.to_dict() == b.to_dict()


def test_unknown_study():
    with pytest.raises(ValueError):
        theorem_study(SimulationConfig(), "theorem9")


def _fd(f, A, h):
    return (f(A + h) - f(A - h)) / (2 * h)


@pytest.mark.parametrize("A", [0.4, 1.0, 3.0])
def test_expansion_terms_against_finite_differences(A):
    d = simulate_dataset(SimulationConfig(m=40, p=2, true_beta=(1.0, 0.5), x_design=("random_uniform", 0)), 0).data
    i = 5
    prior = PriorSpec.multigoal(area=i)
    t = expansion_terms(d, A, i, prior)
    h = 1e-4 * A
    B = lambda a: d.D[i] / (a + d.D[i])  # noqa: E731
    assert t.b1 == pytest.approx(_fd(B, A, h), rel=1e-5)
    assert t.b2 == pytest.approx(_fd(lambda a: -d.D[i] / (a + d.D[i]) ** 2, A, h), rel=1e-5)
    assert t.h2 == pytest.approx(-_fd(lambda a: dl(d, a, 1), A, h) / d.m, rel=1e-5)
    assert t.h3 == pytest.approx(-_fd(lambda a: dl(d, a, 2), A, h) / d.m, rel=1e-5)
    assert t.rho1 == pytest.approx(_fd(lambda a: log_prior(prior, d, a), A, h), rel=1e-5)
