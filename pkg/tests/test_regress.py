import json
import os
import tempfile

import numpy as np
import pytest
from scipy.optimize import minimize

from mound_counter.config import MODEL_KINDS, PipelineConfig
from mound_counter.errors import InsufficientDataError, ParseError, UnsupportedVersionError, ValidationError
from mound_counter.features import FeatureVector, PatchSample, TrainingSet
from mound_counter.pipeline import block_dataset
from mound_counter.regress import (
    LassoModel,
    LinearModel,
    ModelBundle,
    Standardizer,
    cross_validate_lasso,
    cross_validated_rcp,
    fit_lasso,
    fit_mlp,
    fit_ols,
    fit_standardizer,
    fit_svr,
    init_mlp,
    kernel_matrix,
    lasso_lambda_max,
    load_bundle,
    mlp_loss_and_gradients,
    predict,
    predict_many,
    save_bundle,
    select_best,
    select_by_cross_validation,
    soft_threshold,
    svr_dual_objective,
    train_bundle,
)
from mound_counter.synth import SynthParams, generate_block

FAST = PipelineConfig(mlp_epochs=200, svr_tune=False)


def _regression_problem(n=50, seed=0, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4)) * np.array([3.0, 0.2, 0.1, 0.15]) + np.array([10.0, 0.2, 0.1, 0.1])
    y = X @ np.array([1.2, 4.0, -3.0, 2.0]) + 1.5 + noise * rng.normal(size=n)
    return X, y


def _training_set(X, y, block_id="b"):
    samples = []
    for k, (row, target) in enumerate(zip(X, y)):
        x1 = max(0, int(round(row[0])))
        ratios = [min(max(float(v), 0.0), 1.0) for v in row[1:]]
        samples.append(PatchSample(block_id, k // 8, k % 8, FeatureVector(x1, *ratios), float(target)))
    return TrainingSet(tuple(samples))


def _full_theta(model, X):
    theta = np.zeros(X.shape[0])
    for vector, coeff in zip(model.support_vectors, model.dual_coeffs):
        theta[np.nonzero(np.all(X == vector, axis=1))[0][0]] = coeff
    return theta


def _svr_oracle(K, y, C, epsilon):
    """Dual optimum over (alpha, alpha*) from a general-purpose constrained solver."""
    n = len(y)

    def objective(v):
        theta = v[:n] - v[n:]
        return 0.5 * theta @ K @ theta + epsilon * v.sum() - y @ theta

    def gradient(v):
        g = K @ (v[:n] - v[n:])
        return np.concatenate([g + epsilon - y, -g + epsilon + y])

    result = minimize(objective, np.zeros(2 * n), jac=gradient, method="SLSQP",
                      bounds=[(0.0, C)] * (2 * n),
                      constraints=[{"type": "eq", "fun": lambda v: v[:n].sum() - v[n:].sum()}],
                      options={"ftol": 1e-14, "maxiter": 2000})
    return result.fun


def test_standardizer():
    """Test standardization of single rows, random and already standardized data."""
    single = fit_standardizer([[3.0, 0.1, 0.0, 0.5]])
    assert single.means == (3.0, 0.1, 0.0, 0.5)
    assert single.stddevs == (1.0, 1.0, 1.0, 1.0)
    assert all(single.zero_variance)

    rng = np.random.default_rng(1)
    X = rng.normal(5.0, 3.0, size=(100, 4))
    Z = fit_standardizer(X).apply(X)
    assert np.all(np.abs(Z.mean(axis=0)) <= 1e-10)
    assert np.all(np.abs(Z.std(axis=0) - 1.0) <= 1e-10)
    assert np.allclose(fit_standardizer(Z).apply(Z), Z, atol=1e-12, rtol=0)

    with pytest.raises(InsufficientDataError):
        fit_standardizer(np.zeros((0, 4)))
    with pytest.raises(ValidationError):
        single.apply([[1.0, 2.0]])
    assert Standardizer.from_dict(single.to_dict()) == single


def test_ols_examples():
    """Two-point line and constant targets."""
    model = fit_ols([[0, 0, 0, 0], [1, 0, 0, 0]], [1, 3])
    assert model.weights[0] == pytest.approx(2.0, abs=1e-9)
    assert model.intercept == pytest.approx(1.0, abs=1e-9)

    X, _ = _regression_problem()
    constant = fit_ols(X, np.full(len(X), 7.0))
    assert np.allclose(constant.weights, 0.0, atol=1e-12)
    assert constant.intercept == pytest.approx(7.0)

    with pytest.raises(InsufficientDataError):
        fit_ols([[1, 0, 0, 0]], [1])


def test_ols_stationarity():
    """The residual is orthogonal to every column and to the intercept."""
    X, y = _regression_problem()
    model = fit_ols(X, y)
    residual = model.predict_raw(X) - y
    assert np.max(np.abs(X.T @ residual)) <= 1e-8
    assert abs(residual.sum()) <= 1e-8


def test_soft_threshold():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0


def test_lasso_without_penalty_is_ols():
    """Test that lambda = 0 reproduces the least squares weights."""
    X, y = _regression_problem()
    lasso = fit_lasso(X, y, 0.0)
    ols = fit_ols(X, y)
    assert np.allclose(lasso.weights, ols.weights, atol=1e-6)
    assert lasso.intercept == pytest.approx(ols.intercept, abs=1e-5)


def test_lasso_lambda_max():
    """At lambda_max every weight is exactly zero, confirmed by a brute-force grid."""
    X = np.array([[1.0, 0.3, 2.0], [2.0, 0.1, 1.0], [4.0, 0.5, 0.5]])
    y = np.array([2.0, 3.0, 7.0])
    # just above the threshold, clear of last-bit differences in the correlation sums
    lam = lasso_lambda_max(X, y) * (1 + 1e-9)
    model = fit_lasso(X, y, lam)
    assert np.all(model.weights == 0.0)
    assert model.intercept == pytest.approx(y.mean())

    Z = fit_standardizer(X).apply(X)
    axis = np.linspace(-1.0, 1.0, 41)
    W = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    residuals = (y - y.mean())[None, :] - W @ Z.T
    objective = (residuals ** 2).sum(axis=1) / (2 * len(y)) + lam * np.abs(W).sum(axis=1)
    at_zero = ((y - y.mean()) ** 2).sum() / (2 * len(y))
    assert at_zero <= objective.min() + 1e-12

    assert np.any(fit_lasso(X, y, 0.9 * lam).weights != 0.0)


def test_lasso_kkt_conditions():
    """Subgradient optimality holds coordinate by coordinate."""
    X, y = _regression_problem(seed=3)
    lam = 0.3
    model = fit_lasso(X, y, lam)
    standardizer = fit_standardizer(X)
    Z = standardizer.apply(X)
    w = model.weights * np.asarray(standardizer.stddevs)
    correlation = Z.T @ (y - model.predict_raw(X)) / len(y)
    for j in range(4):
        if w[j] == 0.0:
            assert abs(correlation[j]) <= lam + 1e-6
        else:
            assert correlation[j] == pytest.approx(lam * np.sign(w[j]), abs=1e-6)


def test_lasso_duplicate_columns():
    """A duplicated feature keeps the combined effect while shrinking each weight."""
    rng = np.random.default_rng(8)
    x = rng.normal(size=200)
    y = 3.0 * x + 1.0 + 0.1 * rng.normal(size=200)
    ols = fit_ols(x[:, None], y)
    lasso = fit_lasso(np.column_stack([x, x]), y, 0.01)
    combined = lasso.weights.sum()
    assert combined == pytest.approx(ols.weights[0], rel=0.05)
    assert np.all(np.abs(lasso.weights) <= abs(ols.weights[0]))


def test_lasso_cross_validation():
    """Test that the chosen lambda comes from the grid, and small sets skip CV."""
    X, y = _regression_problem(n=40, seed=5)
    lambdas = [1e-4, 1e-2, 1.0, 10.0]
    chosen = cross_validate_lasso(X, y, lambdas)
    assert chosen in lambdas
    assert chosen < 10.0, "a penalty that zeroes every weight cannot win on informative data"
    assert cross_validate_lasso(X[:3], y[:3], lambdas) == 1e-4


def test_svr_constant_target():
    """Everything inside the tube: no support vectors and the bias is the constant."""
    X, _ = _regression_problem(n=10)
    model = fit_svr(X, np.full(10, 4.0), C=10.0, epsilon=0.1)
    assert len(model.dual_coeffs) == 0
    assert model.bias == pytest.approx(4.0)
    assert np.allclose(model.predict_raw(X), 4.0)


def test_svr_matches_quadratic_program_oracle():
    """Small fixtures: the dual objective agrees with a constrained solver."""
    rng = np.random.default_rng(21)
    for n, kernel, C in ((4, "linear", 1.0), (5, "rbf", 10.0), (6, "rbf", 1.0), (6, "linear", 5.0)):
        X = rng.normal(size=(n, 4))
        y = rng.normal(2.0, 1.5, size=n)
        model = fit_svr(X, y, C=C, epsilon=0.1, kernel=kernel, gamma=0.25, tol=1e-8)
        K = kernel_matrix(X, X, kernel, 0.25)
        theta = _full_theta(model, X)
        assert np.all(np.abs(theta) <= C + 1e-12)
        assert abs(theta.sum()) <= 1e-6
        ours = svr_dual_objective(theta, K, y, 0.1)
        oracle = _svr_oracle(K, y, C, 0.1)
        assert ours == pytest.approx(oracle, abs=1e-3), f"{kernel} n={n}: {ours} vs {oracle}"


def test_svr_fits_exact_linear_data_inside_the_tube():
    """y = 2*x1 + 1 with a linear kernel stays within epsilon on every training point."""
    x1 = np.arange(11, dtype=float)
    X = np.column_stack([x1, np.zeros((11, 3))])
    y = 2.0 * x1 + 1.0
    model = fit_svr(X, y, C=100.0, epsilon=0.05, kernel="linear", tol=1e-10)
    assert np.max(np.abs(model.predict_raw(X) - y)) <= 0.05 + 1e-6

    bundle = ModelBundle(model, Standardizer.identity())
    assert predict(bundle, FeatureVector(5)) == pytest.approx(11.0, abs=0.05)


def test_svr_rejects_bad_arguments():
    X, y = _regression_problem(n=6)
    with pytest.raises(ValidationError):
        fit_svr(X, y, C=0.0)
    with pytest.raises(ValidationError):
        fit_svr(X, y, epsilon=-1.0)
    with pytest.raises(ValidationError):
        kernel_matrix(X, X, "poly", 1.0)


def test_mlp_zero_epochs_returns_initial_network():
    X, y = _regression_problem(n=8)
    trained = fit_mlp(X, y, (5,), epochs=0, rng_seed=4)
    initial = init_mlp((5,), 4)
    assert np.array_equal(trained.predict_raw(X), initial.predict_raw(X))


def test_mlp_gradients_match_finite_differences():
    """Analytic gradients of every layer agree with central differences."""
    rng = np.random.default_rng(6)
    X = rng.normal(size=(8, 4))
    y = rng.normal(size=8)
    model = init_mlp((5, 3), rng_seed=3)
    _, grad_w, grad_b = mlp_loss_and_gradients(model, X, y)
    h = 1e-5

    for params, analytic in ((model.weights, grad_w), (model.biases, grad_b)):
        for layer, (values, gradient) in enumerate(zip(params, analytic)):
            numeric = np.zeros_like(values)
            for index in np.ndindex(values.shape):
                original = values[index]
                values[index] = original + h
                plus = mlp_loss_and_gradients(model, X, y)[0]
                values[index] = original - h
                minus = mlp_loss_and_gradients(model, X, y)[0]
                values[index] = original
                numeric[index] = (plus - minus) / (2 * h)
            error = np.linalg.norm(gradient - numeric) / np.linalg.norm(gradient + numeric)
            assert error <= 1e-4, f"layer {layer}: relative gradient error {error:.2e}"


def test_mlp_without_hidden_layers_approaches_ols():
    """A network with no hidden layer is a linear model trained by gradient descent."""
    X, y = _regression_problem(n=60, seed=2)
    Z = fit_standardizer(X).apply(X)
    model = fit_mlp(Z, y, hidden_sizes=(), learning_rate=0.01, epochs=2000, rng_seed=0)
    mlp_mse = np.mean((model.predict_raw(Z) - y) ** 2)
    ols_mse = np.mean((fit_ols(Z, y).predict_raw(Z) - y) ** 2)
    assert mlp_mse <= 2 * ols_mse


def test_mlp_loss_never_increases():
    """An aggressive learning rate is backed off instead of raising the loss."""
    X, y = _regression_problem(n=20, seed=9)
    Z = fit_standardizer(X).apply(X)
    model = fit_mlp(Z, y, hidden_sizes=(8,), learning_rate=5.0, epochs=300, rng_seed=1)
    history = np.asarray(model.loss_history)
    assert len(history) >= 2
    assert np.all(np.diff(history) <= 1e-12)
    assert history[-1] < history[0]


def test_predict_clamps_and_checks_dimensions():
    """Identity bundle examples: pass-through, clamping and a wrong width."""
    identity = ModelBundle(LinearModel([1.0, 0.0, 0.0, 0.0], 0.0), Standardizer.identity())
    assert predict(identity, FeatureVector(7)) == 7.0
    negative = ModelBundle(LinearModel([0.0, 0.0, 0.0, 0.0], -3.2), Standardizer.identity())
    assert predict(negative, FeatureVector(2)) == 0.0
    with pytest.raises(ValidationError):
        predict_many(identity, [[1.0, 2.0, 3.0]])
    with pytest.raises(ValidationError):
        predict(identity, [[1, 0, 0, 0], [2, 0, 0, 0]])


def test_bundle_round_trip_for_every_kind():
    """Saved and reloaded bundles predict bit-identically."""
    print("Testing bundle round trips...")
    X, y = _regression_problem(n=40, seed=11)
    training = _training_set(X, y)
    queries = np.random.default_rng(12).uniform(0, 1, size=(100, 4)) * np.array([20, 1, 1, 1])
    with tempfile.TemporaryDirectory() as temp_dir:
        for kind in MODEL_KINDS:
            bundle = train_bundle(kind, training, FAST, block_id="b")
            path = os.path.join(temp_dir, f"{kind}.json")
            save_bundle(bundle, path)
            loaded = load_bundle(path)
            assert loaded.kind == kind
            assert loaded.metadata["training_block"] == "b"
            assert loaded.metadata["n_samples"] == 40
            assert np.array_equal(predict_many(loaded, queries), predict_many(bundle, queries)), kind
    print("Bundle round trips verified")


def test_bundle_file_errors():
    """Truncated files, future versions and unknown fields are rejected."""
    bundle = ModelBundle(LinearModel([1.0, 2.0, 0.0, 0.0], 0.5), fit_standardizer(_regression_problem()[0]))
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "linear.json")
        save_bundle(bundle, path)
        with open(path) as f:
            text = f.read()
        data = json.loads(text)
        assert data["format_version"] == "1"
        assert data["model_type"] == "linear"
        assert len(data["params"]["original_weights"]) == 4

        with open(path, "w") as f:
            f.write(text[: len(text) // 2])
        with pytest.raises(ParseError):
            load_bundle(path)

        for mutate, error in (
            (lambda d: d.update(format_version="99"), UnsupportedVersionError),
            (lambda d: d.update(extra=1), ValidationError),
            (lambda d: d["params"].update(momentum=0.9), ValidationError),
            (lambda d: d["params"].pop("intercept"), ParseError),
        ):
            broken = json.loads(text)
            mutate(broken)
            with open(path, "w") as f:
                json.dump(broken, f)
            with pytest.raises(error):
                load_bundle(path)

        with pytest.raises(ValidationError):
            load_bundle(os.path.join(temp_dir, "missing.json"))


def test_original_units_reproduce_predictions():
    """Linear weights re-expressed on raw features give the same predictions."""
    X, y = _regression_problem(seed=13)
    bundle = train_bundle("linear", _training_set(X, y), FAST)
    weights, intercept = bundle.original_units()
    raw = np.vstack([s.features.as_array() for s in _training_set(X, y).samples])
    assert np.allclose(raw @ weights + intercept, bundle.model.predict_raw(bundle.standardizer.apply(raw)))


def test_select_best_examples():
    """Single candidates, perfect against zero, and the tie order."""
    validation = TrainingSet(tuple(
        PatchSample("v", 0, c, FeatureVector(c + 1), float(c + 1)) for c in range(5)))
    identity = Standardizer.identity()
    perfect = ModelBundle(LinearModel([1.0, 0.0, 0.0, 0.0], 0.0), identity)
    zero = ModelBundle(LinearModel([0.0, 0.0, 0.0, 0.0], 0.0), identity)

    best, scores = select_best([perfect], validation)
    assert best is perfect and scores == [("linear", 1.0)]

    best, scores = select_best([zero, perfect], validation)
    assert best is perfect
    assert [s for _, s in scores] == [0.0, 1.0]

    lasso = ModelBundle(LassoModel([1.0, 0.0, 0.0, 0.0], 0.0, 0.1), identity)
    best, _ = select_best([lasso, perfect], validation)
    assert best is perfect, "linear wins a tie against lasso"

    with pytest.raises(ValidationError):
        select_best([], validation)
    with pytest.raises(InsufficientDataError):
        select_best([perfect], TrainingSet())


def test_cross_validated_selection():
    """Selection on one block scores every kind on folds it was not fitted on."""
    print("Testing cross-validated selection...")
    X, y = _regression_problem(n=40, seed=21, noise=2.0)
    training = _training_set(X, y)
    config = PipelineConfig(models=("linear", "lasso"), selection_folds=5)

    recomputed = []
    for kind in ("linear", "lasso"):
        fold_rcps = []
        for fold in np.array_split(np.arange(40), 5):
            rest = [k for k in range(40) if k not in set(fold.tolist())]
            bundle = train_bundle(kind, training.subset(rest), config)
            held_out = training.subset(fold.tolist())
            _, scores = select_best([bundle], held_out)
            fold_rcps.append(scores[0][1])
        recomputed.append(float(np.mean(fold_rcps)))
        assert cross_validated_rcp(kind, training, config) == pytest.approx(recomputed[-1])

    selected, scores = select_by_cross_validation(("linear", "lasso"), training, config)
    assert [kind for kind, _ in scores] == ["linear", "lasso"]
    assert [value for _, value in scores] == pytest.approx(recomputed)
    assert selected == ("lasso" if recomputed[1] > recomputed[0] else "linear")

    # OLS with an intercept reproduces its own training total exactly
    linear = train_bundle("linear", training, config)
    assert select_best([linear], training)[1][0][1] == 1.0
    assert recomputed[0] < 1.0
    print("Cross-validated selection verified")


def test_cross_validated_selection_edge_cases():
    """Tiny blocks fall back to the training patches; empty folds are skipped."""
    X, y = _regression_problem(n=3, seed=22)
    tiny = _training_set(X, y)
    with pytest.raises(InsufficientDataError):
        cross_validated_rcp("linear", tiny, FAST)
    selected, scores = select_by_cross_validation(("linear", "lasso"), tiny, FAST)
    assert selected == "linear"
    assert [kind for kind, _ in scores] == ["linear", "lasso"]

    with pytest.raises(ValidationError):
        select_by_cross_validation((), tiny, FAST)

    empty = TrainingSet(tuple(PatchSample("z", 0, c, FeatureVector(c % 3), 0.0) for c in range(8)))
    with pytest.raises(InsufficientDataError):
        cross_validated_rcp("linear", empty, FAST)


def test_selection_and_correction_on_synthetic_blocks():
    """Four models trained on one seeded block and selected on another."""
    config = PipelineConfig(patch_size=304, mlp_epochs=300, svr_tune=False)
    train = block_dataset(generate_block(SynthParams(block_width=1216, block_height=1216, rng_seed=41), "t"), config)
    held_out = block_dataset(generate_block(SynthParams(block_width=1216, block_height=1216, rng_seed=42), "v"),
                             config)
    bundles = [train_bundle(kind, train, config) for kind in MODEL_KINDS]
    best, scores = select_best(bundles, held_out)

    X, y = held_out.to_arrays()
    truth = int(np.floor(y.sum() + 0.5))
    recomputed = []
    for bundle in bundles:
        predicted = int(np.floor(predict_many(bundle, X).sum() + 0.5))
        recomputed.append(1.0 - abs(predicted - truth) / truth)
    assert [s for _, s in scores] == pytest.approx(recomputed)
    assert best is bundles[int(np.argmax(recomputed))]

    linear = bundles[0]
    assert predict_many(linear, X).mean() >= X[:, 0].mean(), "correction must lift the undercount"


def test_training_is_deterministic():
    """Identical data and seeds give identical bundles."""
    X, y = _regression_problem(n=30, seed=14)
    training = _training_set(X, y)
    for kind in MODEL_KINDS:
        first = train_bundle(kind, training, FAST).to_dict()
        second = train_bundle(kind, training, FAST).to_dict()
        assert first == second, kind
    with pytest.raises(ValidationError):
        train_bundle("forest", training, FAST)
