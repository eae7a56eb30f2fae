import numpy as np
import pytest
from sklearn.base import clone

from coldstart import pmf
from coldstart.dataio import RatingsDataset, synth_generate
from coldstart.exceptions import DivergenceError
from coldstart.pmf import PMF, FactorModel, fold_in_user


def rank_one_dataset():
    r = np.random.default_rng(3)
    u, v = r.uniform(0.5, 1.5, 20), r.uniform(0.5, 1.5, 30)
    R = np.outer(u, v)
    users, items = np.meshgrid(np.arange(20), np.arange(30), indexing="ij")
    return RatingsDataset(users.ravel(), items.ravel(), R.ravel(), 20, 30), R


RANK_ONE_HYPER = {"n_factors": 1, "reg": 0.0, "lr": 0.02, "n_epochs": 300, "init_std": 0.5}


def test_rank_one_recovery():
    ds, R = rank_one_dataset()
    model = pmf.train(ds, RANK_ONE_HYPER, seed=0)
    assert pmf.rmse(model, ds) < 0.05
    Rhat = model.U.T @ model.V
    assert np.linalg.norm(Rhat - R) / np.linalg.norm(R) < 0.05


def test_training_is_bitwise_reproducible():
    ds, _ = rank_one_dataset()
    a = pmf.train(ds, RANK_ONE_HYPER, seed=4)
    b = pmf.train(ds, RANK_ONE_HYPER, seed=4)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)


def test_loss_fluctuation_within_tolerance():
    ds, _ = synth_generate(60, 80, 4, 0.3, seed=1, density=0.5)
    model = pmf.train(ds, {"n_factors": 4, "lr": 0.01, "n_epochs": 50}, seed=0)
    assert pmf.loss_fluctuation(model.loss_history) <= pmf.LOSS_FLUCTUATION
    assert model.loss_history[-1] < model.loss_history[0]


def test_unrated_item_shrinks_toward_zero():
    ds = RatingsDataset([0, 1], [0, 0], [3.0, 4.0], 2, 2)
    model = pmf.train(ds, {"n_factors": 2, "init_std": 0.1, "n_epochs": 5}, seed=0)
    init = np.random.default_rng(0)
    init.normal(size=(2, 2))
    V0 = init.normal(0.0, 0.1, size=(2, 2))
    # item 1 never receives a gradient step: it keeps its prior-scaled start
    np.testing.assert_array_equal(model.V[:, 1], V0[:, 1])


def test_divergence_detected():
    ds, _ = synth_generate(30, 30, 3, 0.0, seed=0)
    with pytest.raises(DivergenceError):
        pmf.train(ds, {"n_factors": 3, "lr": 50.0, "n_epochs": 5}, seed=0)


def test_bad_hyperparameters():
    ds, _ = rank_one_dataset()
    with pytest.raises(ValueError):
        pmf.train(ds, {"reg": -1.0})
    with pytest.raises(ValueError):
        pmf.train(ds, {"n_factors": 0})
    with pytest.raises(ValueError):
        pmf.train(ds, {"bogus": 1})
    with pytest.raises(ValueError):
        pmf.train(RatingsDataset([], [], [], 2, 2))


def test_predict_examples(rng):
    m = FactorModel(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([[3.0], [-1.0]]))
    assert pmf.predict(m, 0, 0) == 1.0
    assert pmf.predict(m, 1, 0) == 0.0
    assert pmf.predict(m, 0, 0, scale=(2, 5)) == 2.0
    with pytest.raises(IndexError):
        pmf.predict(m, 2, 0)
    r = FactorModel(rng.normal(size=(4, 5)), rng.normal(size=(4, 6)))
    assert pmf.predict(r, 3, 2) == pytest.approx(float(np.dot(r.U[:, 3], r.V[:, 2])), abs=1e-12)


def test_estimate_noise_examples():
    m = FactorModel(np.ones((1, 2)), np.array([[2.0, 3.0, 1.0]]))
    # item 0 residuals {+1, -1}; item 1 residuals {0, 0}; item 2 unrated
    ds = RatingsDataset([0, 1, 0, 1], [0, 0, 1, 1], [3.0, 1.0, 3.0, 3.0], 2, 3)
    nz = pmf.estimate_noise(m, ds)
    assert nz.sigma[0] == pytest.approx(1.0)
    assert nz.sigma[1] == pytest.approx(1e-3)
    assert nz.sigma[2] == pytest.approx((1.0 + 1e-3) / 2)


def test_estimate_noise_matches_direct_and_permutation_invariant(rng):
    ds, truth = synth_generate(40, 25, 3, 0.4, seed=2, density=0.6)
    nz = pmf.estimate_noise(truth, ds)
    for j in range(ds.n_items):
        mask = ds.items == j
        resid = ds.ratings[mask] - truth.predict_pairs(ds.users[mask], ds.items[mask])
        assert nz.sigma[j] == pytest.approx(max(np.sqrt(np.mean(resid**2)), 1e-3), abs=1e-12)
    perm = rng.permutation(ds.n_ratings)
    shuffled = RatingsDataset(ds.users[perm], ds.items[perm], ds.ratings[perm], ds.n_users, ds.n_items)
    np.testing.assert_allclose(pmf.estimate_noise(truth, shuffled).sigma, nz.sigma, rtol=1e-12)


def test_fold_in_one_dimensional_closed_form():
    m = FactorModel(np.zeros((1, 1)), np.array([[1.7]]))
    prof = fold_in_user(m, [(0, 4.0)], reg=0.1, seed=0)
    assert prof.u[0] == pytest.approx(1.7 * 4.0 / (1.7**2 + 0.1), abs=1e-5)


def test_fold_in_exact_interpolation(rng):
    V = rng.normal(size=(4, 4))
    u = rng.normal(size=4)
    m = FactorModel(np.zeros((4, 1)), V)
    prof = fold_in_user(m, list(enumerate(V.T @ u)), reg=0.0, seed=1)
    np.testing.assert_allclose(prof.u, u, atol=1e-4)


def test_fold_in_seed_independent_and_descends(rng):
    V = rng.normal(size=(5, 12))
    m = FactorModel(np.zeros((5, 1)), V)
    ratings = [(j, float(x)) for j, x in enumerate(rng.uniform(1, 5, 12))]
    a = fold_in_user(m, ratings, seed=0)
    b = fold_in_user(m, ratings, seed=99)
    np.testing.assert_allclose(a.u, b.u, atol=1e-6)
    assert pmf.fold_in_objective(m, ratings, a.u) <= pmf.fold_in_objective(m, ratings, np.zeros(5))
    V_before = m.V.copy()
    fold_in_user(m, ratings)
    assert np.array_equal(m.V, V_before)
    with pytest.raises(ValueError):
        fold_in_user(m, [])


def test_checkpoint_roundtrip_exact(tmp_path, rng):
    m = FactorModel(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), {"lr": 0.002}, 7, [1.5, 1.25])
    m.save(tmp_path / "m.json")
    back = FactorModel.load(tmp_path / "m.json")
    assert np.array_equal(back.U, m.U) and np.array_equal(back.V, m.V)
    assert back.hyper == m.hyper and back.seed == 7 and back.loss_history == [1.5, 1.25]
    assert back.to_json() == m.to_json()


def test_factor_model_validation():
    with pytest.raises(ValueError):
        FactorModel(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        FactorModel(np.array([[np.nan]]), np.ones((1, 1)))


def test_estimator_api():
    ds, _ = rank_one_dataset()
    X = np.column_stack([ds.users, ds.items])
    est = PMF(n_factors=1, reg=0.0, lr=0.02, n_epochs=300, init_std=0.5, random_state=0)
    assert est.get_params()["n_factors"] == 1
    est.fit(X, ds.ratings)
    assert -est.score(X, ds.ratings) < 0.05
    assert len(est.loss_history_) == 301
    assert clone(est).get_params() == est.get_params()
    clipped = PMF(rating_scale=(1, 5), n_factors=1, n_epochs=5, random_state=0).fit(X, ds.ratings)
    assert clipped.predict(X).min() >= 1
    with pytest.raises(ValueError):
        est.predict(np.zeros((3, 3)))
