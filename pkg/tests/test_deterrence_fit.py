import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patrolplan.deterrence_fit import (
    DeterrenceCoefficients,
    PanelFormatError,
    PatrolPanel,
    SeparationError,
    SingularDesignError,
    coefficients_from_dict,
    fit_logistic,
    normalize_efforts,
    read_panel_csv,
    synth_panel,
    write_panel_csv,
)
from patrolplan.park_env import logistic


def make_panel(current, past, neighbor, observed):
    n = len(observed)
    return PatrolPanel(
        np.arange(n), np.zeros(n, dtype=int), np.asarray(current, float), np.asarray(past, float),
        np.asarray(neighbor, float), np.asarray(observed),
    )


# -- normalization -----------------------------------------------------------

def test_normalize_constant_column_is_flagged_zero():
    panel = normalize_efforts(make_panel([3, 3, 3], [0, 1, 2], [1, 2, 4], [0, 1, 0]))
    assert np.array_equal(panel.current_effort, np.zeros(3))
    assert panel.normalization["flagged"] == ["current_effort"]


def test_normalize_two_point_column():
    panel = normalize_efforts(make_panel([0, 2], [0, 2], [0, 2], [0, 1]))
    assert np.array_equal(panel.current_effort, [-1.0, 1.0])
    assert panel.normalization["mean"]["past_effort"] == 1.0
    assert panel.normalization["std"]["past_effort"] == 1.0


@given(st.lists(st.floats(0, 1e3), min_size=2, max_size=60))
def test_normalized_column_has_zero_mean(values):
    n = len(values)
    panel = normalize_efforts(make_panel(values, values, values, [i % 2 for i in range(n)]))
    x = panel.current_effort
    assert abs(x.mean()) < 1e-12 * max(1.0, np.abs(x).max())
    if "current_effort" not in panel.normalization["flagged"]:
        assert x.std() == pytest.approx(1.0, rel=1e-9)


def test_normalize_rejects_empty_panel():
    with pytest.raises(ValueError):
        normalize_efforts(make_panel([], [], [], []))


def test_panel_invariants():
    with pytest.raises(ValueError, match="binary"):
        make_panel([1, 2], [1, 2], [1, 2], [0, 2])
    with pytest.raises(ValueError, match="nonnegative"):
        make_panel([1, -2], [1, 2], [1, 2], [0, 1])
    with pytest.raises(ValueError, match="unique"):
        PatrolPanel(np.zeros(2, int), np.zeros(2, int), np.ones(2), np.ones(2), np.ones(2), np.array([0, 1]))


# -- synthetic panels ------------------------------------------------------------

def test_synth_all_zero_coefficients_rate_half():
    panel = synth_panel(DeterrenceCoefficients(0.0, 0.0, 0.0), 25, 400, rng=np.random.default_rng(0))
    n = len(panel)
    rate = panel.observed.mean()
    assert abs(rate - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_synth_intercept_only_rate():
    p = float(logistic(-9.285))
    assert p == pytest.approx(9.2797319654226731e-5, rel=1e-12)
    zero = lambda rng, shape: np.zeros(shape)  # noqa: E731
    panel = synth_panel(DeterrenceCoefficients(-9.285, 1.074, -0.165), 100, 5000, zero, np.random.default_rng(1))
    n = len(panel)
    assert abs(panel.observed.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_synth_is_deterministic():
    c = DeterrenceCoefficients(-2.0, 1.0, -0.5, 0.3)
    a = synth_panel(c, 9, 20, rng=np.random.default_rng(3))
    b = synth_panel(c, 9, 20, rng=np.random.default_rng(3))
    for col in ("current_effort", "past_effort", "neighbor_effort", "observed"):
        assert np.array_equal(getattr(a, col), getattr(b, col))


def test_synth_neighbour_sums_use_previous_period():
    panel = synth_panel(DeterrenceCoefficients(0.0, 0.0, 0.0), 9, 3, rng=np.random.default_rng(0))
    past = panel.past_effort.reshape(3, 9)
    centre = past[:, 4]
    total = past.sum(axis=1)
    assert np.allclose(panel.neighbor_effort.reshape(3, 9)[:, 4], total - centre)
    corner = past[:, [1, 3, 4]].sum(axis=1)
    assert np.allclose(panel.neighbor_effort.reshape(3, 9)[:, 0], corner)


# -- fitting -------------------------------------------------------------------

def moderate_panel(seed, n_targets=100, n_periods=100, eta=None):
    truth = DeterrenceCoefficients(-1.0, 1.0, -0.5, eta)
    return truth, normalize_efforts(synth_panel(truth, n_targets, n_periods, rng=np.random.default_rng(seed)))


def test_fit_recovers_moderate_truth():
    truth, panel = moderate_panel(0)
    fit = fit_logistic(panel)
    for name in ("gamma", "beta"):
        assert abs(getattr(fit, name) - getattr(truth, name)) < 4 * fit.stderr[name]
    assert abs(fit.mean_attractiveness - truth.mean_attractiveness) < 4 * fit.stderr["intercept"]
    assert fit.eta is None


def test_fit_with_neighbours_recovers_eta():
    truth, panel = moderate_panel(1, eta=0.4)
    fit = fit_logistic(panel, include_neighbors=True)
    assert abs(fit.eta - 0.4) < 4 * fit.stderr["eta"]


def test_null_model_coefficients_within_three_se():
    rng = np.random.default_rng(5)
    n = 5000
    panel = normalize_efforts(make_panel(rng.exponential(size=n), rng.exponential(size=n),
                                         rng.exponential(size=n), (rng.random(n) < 0.3).astype(int)))
    fit = fit_logistic(panel)
    assert abs(fit.gamma) < 3 * fit.stderr["gamma"]
    assert abs(fit.beta) < 3 * fit.stderr["beta"]


def test_fit_gradient_converged_and_loglik_non_decreasing():
    _, panel = moderate_panel(2)
    fit = fit_logistic(panel)
    trace = np.array(fit.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-11 * np.abs(trace[1:]))
    assert fit.log_likelihood == trace[-1]
    assert fit.n_iter < 50


def test_fit_is_row_order_invariant():
    _, panel = moderate_panel(3, eta=0.3)
    perm = np.random.default_rng(0).permutation(len(panel))
    a = fit_logistic(panel, include_neighbors=True)
    b = fit_logistic(panel.take(perm), include_neighbors=True)
    for name in ("mean_attractiveness", "gamma", "beta", "eta"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-6)


def test_parametric_bootstrap_consistency():
    _, panel = moderate_panel(4)
    fit = fit_logistic(panel)
    rng = np.random.default_rng(9)
    p = logistic(fit.mean_attractiveness + fit.gamma * panel.current_effort + fit.beta * panel.past_effort)
    resampled = PatrolPanel(panel.target, panel.period, panel.current_effort, panel.past_effort,
                            panel.neighbor_effort, (rng.random(len(p)) < p).astype(int), panel.normalization)
    refit = fit_logistic(resampled)
    for name in ("gamma", "beta"):
        assert abs(getattr(refit, name) - getattr(fit, name)) < 4 * fit.stderr[name]


def test_per_target_intercepts():
    truth = DeterrenceCoefficients(-1.0, 0.8, -0.4, target_intercepts={t: -1.5 + 0.25 * t for t in range(4)})
    side_panel = synth_panel(truth, 4, 3000, rng=np.random.default_rng(0))
    fit = fit_logistic(normalize_efforts(side_panel), per_target_intercepts=True)
    assert sorted(fit.target_intercepts) == [0, 1, 2, 3]
    for t, v in fit.target_intercepts.items():
        assert abs(v - (-1.5 + 0.25 * t)) < 4 * fit.stderr[f"theta_{t}"]
    assert fit.mean_attractiveness == pytest.approx(np.mean(list(fit.target_intercepts.values())))


def test_perfect_separation_raises():
    x = np.linspace(0, 1, 200)
    panel = normalize_efforts(make_panel(x, np.random.default_rng(0).random(200), x[::-1], (x > 0.5).astype(int)))
    with pytest.raises(SeparationError):
        fit_logistic(panel)


def test_singular_design_raises():
    panel = normalize_efforts(make_panel([1, 1, 1, 1], [0, 1, 2, 3], [0, 1, 2, 3], [0, 1, 1, 0]))
    with pytest.raises(SingularDesignError):
        fit_logistic(panel)


def test_single_class_panel_raises():
    panel = normalize_efforts(make_panel([0, 1, 2], [2, 1, 0], [0, 0, 1], [0, 0, 0]))
    with pytest.raises(ValueError, match="positive"):
        fit_logistic(panel)


# -- I/O --------------------------------------------------------------------------

def test_panel_csv_round_trip(tmp_path):
    panel = synth_panel(DeterrenceCoefficients(-1.0, 0.5, -0.5), 9, 5, rng=np.random.default_rng(0))
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    assert path.read_text().splitlines()[0] == "target,period,current_effort,past_effort,neighbor_effort,observed"
    back = read_panel_csv(path)
    for col in ("target", "period", "current_effort", "past_effort", "neighbor_effort", "observed"):
        assert np.array_equal(getattr(back, col), getattr(panel, col))


@pytest.mark.parametrize(
    "text, message",
    [
        ("", ":1: empty file"),
        ("target,period,current_effort,past_effort,observed\n0,0,1,1,0\n", "missing column 'neighbor_effort'"),
        ("target,period,current_effort,past_effort,neighbor_effort,observed\n", "no data rows"),
        ("target,period,current_effort,past_effort,neighbor_effort,observed\n0,0,1,1,1,0\n1,0,x,1,1,0\n", ":3: cannot parse"),
        ("target,period,current_effort,past_effort,neighbor_effort,observed\n0,0,1,1,1,3\n", ":2: observed must be 0 or 1"),
        ("target,period,current_effort,past_effort,neighbor_effort,observed\n0,0,1,1,1,0\n0,0,1,1,1,1\n", "unique"),
    ],
)
def test_panel_csv_errors(tmp_path, text, message):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(PanelFormatError, match=message):
        read_panel_csv(path)


def test_coefficients_round_trip():
    c = DeterrenceCoefficients(-10.633, 0.687, -0.098, 0.696)
    back = coefficients_from_dict(c.to_dict())
    assert (back.mean_attractiveness, back.gamma, back.beta, back.eta) == (-10.633, 0.687, -0.098, 0.696)
    with pytest.raises(ValueError, match="unknown"):
        coefficients_from_dict({**c.to_dict(), "delta": 1.0})
