import math

import numpy as np
import pytest

from _oracles import toy_problem
from prefield.field import FieldParams, interpolation_matrix, matern_cov
from prefield.inference import FitResult, laplace_nll
from prefield.movement import Track
from prefield.predict import (
    PredictionGrid,
    ignorance,
    krige,
    lign,
    mign,
    predict_preferential,
    quantile_of_differences,
    rmspe,
    score,
    score_diffs,
    write_scores,
)


@pytest.fixture(scope="module")
def stacks():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(7, 11))
    P = S + rng.normal(0, 0.5, size=S.shape)
    V = rng.uniform(0.1, 2.0, size=S.shape)
    return S, P, V


# ------------------------------------------------------------- score identities


def test_ignorance_closed_form(stacks):
    S, P, V = stacks
    ref = 0.5 * np.log(2 * np.pi * V) + (S - P) ** 2 / (2 * V) - 0.5 * np.log(2 * np.pi)
    np.testing.assert_allclose(ignorance(S, P, V), ref, rtol=1e-13, atol=1e-13)
    assert ignorance([[1.0]], [[1.0]], [[1.0]])[0, 0] == 0.0


def test_mign_lign_share_grand_mean(stacks):
    S, P, V = stacks
    I = ignorance(S, P, V)
    np.testing.assert_allclose(mign(S, P, V), I.mean(axis=1))
    np.testing.assert_allclose(lign(S, P, V), I.mean(axis=0))
    assert mign(S, P, V).mean() == pytest.approx(lign(S, P, V).mean(), rel=1e-13)


def test_rmspe_conventions(stacks):
    S, P, _ = stacks
    np.testing.assert_allclose(rmspe(S, P, "paper"), np.mean(np.abs(S - P), axis=0))
    np.testing.assert_allclose(rmspe(S, P, "rmse"), np.sqrt(np.mean((S - P) ** 2, axis=0)))
    # Jensen: root mean square dominates mean absolute
    assert np.all(rmspe(S, P, "rmse") >= rmspe(S, P, "paper") - 1e-15)
    np.testing.assert_array_equal(rmspe(S, S, "paper"), 0.0)
    with pytest.raises(ValueError):
        rmspe(S, P, "other")


def test_score_diffs_are_antisymmetric(stacks):
    S, P, V = stacks
    a = score(S, P, V)
    b = score(S, S + 0.1, V)
    d1, d2 = score_diffs(a, b), score_diffs(b, a)
    for k in d1:
        np.testing.assert_allclose(d1[k], -d2[k])
    with pytest.raises(ValueError):
        score_diffs(a, score(S, P, V, "rmse"))


def test_score_input_validation(stacks):
    S, P, V = stacks
    with pytest.raises(ValueError):
        ignorance(S, P[:, :-1], V)
    with pytest.raises(ValueError):
        ignorance(S, P, np.zeros_like(V))
    with pytest.raises(ValueError):
        rmspe(S, np.full_like(P, np.nan))


def test_quantile_of_differences(stacks):
    S, P, _ = stacks
    q = quantile_of_differences(P, S, [0.25, 0.5, 0.75])
    assert q.shape == (3, S.shape[1])
    D = P - S
    for j in range(S.shape[1]):
        d = np.sort(D[:, j])
        # linear interpolation between order statistics at position q (n - 1)
        pos = 0.25 * (len(d) - 1)
        lo = int(math.floor(pos))
        assert q[0, j] == pytest.approx(d[lo] + (pos - lo) * (d[lo + 1] - d[lo]))
        assert q[1, j] == pytest.approx(np.median(d))
    with pytest.raises(ValueError):
        quantile_of_differences(P, S, 1.5)


def test_write_scores(tmp_path, stacks):
    import json
    S, P, V = stacks
    locs = np.column_stack([np.arange(11.0), np.zeros(11)])
    write_scores(tmp_path / "s.json", tmp_path / "s.csv", locs, score(S, P, V), score(S, S + 1, V))
    d = json.loads((tmp_path / "s.json").read_text())
    assert len(d["preferential"]["mign"]) == 7
    assert len((tmp_path / "s.csv").read_text().strip().splitlines()) == 12


# ------------------------------------------------------------------- kriging


def _tracks(X, y):
    X = np.asarray(X, float)
    return [Track(np.arange(len(X), dtype=float), X, np.asarray(y, float))]


def test_krige_single_datum_closed_form():
    fp = FieldParams(mu=2.0, tau2=0.5, phi=10.0, sigma2=1.5)
    X = np.array([[0.0, 0.0], [500.0, 500.0], [-500.0, 500.0]])  # far-apart data are independent
    y = np.array([3.0, 2.0, 2.0])
    t = np.array([[5.0, 0.0]])
    g = krige(fp, _tracks(X, y), t)
    c = matern_cov(5.0, fp)
    assert g.mean[0] == pytest.approx(2.0 + c / 2.0 * 1.0, rel=1e-10)
    assert g.variance[0] == pytest.approx(1.5 - c**2 / 2.0, rel=1e-10)


def test_krige_limits():
    fp = FieldParams(mu=1.0, tau2=0.0, phi=10.0, sigma2=1.5)
    X = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 30.0]])
    y = np.array([0.3, 2.0, 1.4])
    g = krige(fp, _tracks(X, y), np.vstack([X, [[1e5, 1e5]]]))
    # interpolates the data exactly without nugget
    np.testing.assert_allclose(g.mean[:3], y, atol=1e-8)
    assert np.all(g.variance[:3] < 1e-8)
    # reverts to the prior far away
    assert g.mean[3] == pytest.approx(1.0)
    assert g.variance[3] == pytest.approx(1.5)


def test_krige_variance_grows_with_distance():
    fp = FieldParams(mu=0.0, tau2=0.1, phi=10.0, sigma2=1.5)
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    t = np.column_stack([np.linspace(2, 80, 30), np.zeros(30)])
    v = krige(fp, _tracks(X, [0, 0, 0]), t).variance
    assert np.all(np.diff(v) > 0)
    assert np.all(v <= 1.5)


# ------------------------------------------------------ preferential prediction


def test_preferential_prediction_matches_dense_inverse():
    prob, theta = toy_problem(alpha=50.0, n=6)
    lap = laplace_nll(theta, prob)
    fit = FitResult(theta, lap, lap.nll, [], frozenset(), None, {}, True, 0, 0, "", 0.0)
    rng = np.random.default_rng(0)
    T = rng.uniform(1, 39, (15, 2))
    g = predict_preferential(fit, prob, prob.mesh, T)
    A = interpolation_matrix(prob.mesh, T).toarray()
    Hinv = np.linalg.inv(lap.hessian.toarray())[: prob.m, : prob.m]
    np.testing.assert_allclose(g.mean, theta.field.mu + A @ lap.mode.s, rtol=1e-12)
    np.testing.assert_allclose(g.variance, np.einsum("ij,jk,ik->i", A, Hinv, A), rtol=1e-8)
    assert np.all(g.valid)


def test_preferential_prediction_flags_outside_targets():
    prob, theta = toy_problem(alpha=50.0, n=6)
    lap = laplace_nll(theta, prob)
    fit = FitResult(theta, lap, lap.nll, [], frozenset(), None, {}, True, 0, 0, "", 0.0)
    g = predict_preferential(fit, prob, prob.mesh, [[10.0, 10.0], [100.0, 10.0]])
    assert g.valid.tolist() == [True, False]
    assert np.isnan(g.mean[1]) and np.isfinite(g.mean[0])


def test_prediction_grid_csv_round_trip(tmp_path):
    g = PredictionGrid(np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([1.0, 2.0]), np.array([0.5, 0.25]), "standard")
    g.to_csv(tmp_path / "p.csv")
    back = PredictionGrid.from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.mean, g.mean)
    np.testing.assert_array_equal(back.variance, g.variance)
    assert back.model_tag == "standard"


def test_prediction_grid_validation():
    with pytest.raises(ValueError):
        PredictionGrid(np.zeros((1, 2)), np.ones(1), np.zeros(1), "standard")
    with pytest.raises(ValueError):
        PredictionGrid(np.zeros((1, 2)), np.ones(1), np.ones(1), "other")
