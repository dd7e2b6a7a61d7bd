"""
Patch-level count correction.

Four regressors map a patch's feature vector (detected count, tree, water and
debris ratios) to a corrected mound count: ordinary least squares, lasso by
coordinate descent, epsilon-SVR solved with SMO-style pair updates, and a
small tanh multilayer perceptron trained by full-batch gradient descent.
Every model is bundled with the standardizer fitted on its training data.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import MODEL_KINDS, PipelineConfig, derive_seed
from .errors import (
    InsufficientDataError,
    ParseError,
    UnsupportedVersionError,
    ValidationError,
)
from .evaluate import block_count, rcp
from .features import FeatureVector, TrainingSet

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = "1"
N_FEATURES = 4

LASSO_TOL = 1e-8
LASSO_MAX_SWEEPS = 10_000
SVR_TOL = 1e-4
SVR_TAU = 1e-12
MLP_MAX_HALVINGS = 20
MLP_LOSS_TOL = 1e-12


def _as_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise ValidationError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    return X, y


def _require_samples(n: int, minimum: int = 2):
    if n < minimum:
        raise InsufficientDataError(f"need at least {minimum} samples to fit, got {n}")


# -- standardization -------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    means: Tuple[float, ...]
    stddevs: Tuple[float, ...]
    zero_variance: Tuple[bool, ...] = ()

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != len(self.means):
            raise ValidationError(f"expected {len(self.means)} features, got {X.shape[-1]}")
        return (X - np.asarray(self.means)) / np.asarray(self.stddevs)

    def to_dict(self) -> dict:
        return {
            'means': list(self.means),
            'stddevs': list(self.stddevs),
            'zero_variance': list(self.zero_variance),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        _reject_unknown(data, {'means', 'stddevs', 'zero_variance'}, "standardizer")
        return cls(tuple(float(v) for v in data['means']),
                   tuple(float(v) for v in data['stddevs']),
                   tuple(bool(v) for v in data.get('zero_variance', [])))

    @classmethod
    def identity(cls, n: int = N_FEATURES) -> "Standardizer":
        return cls((0.0,) * n, (1.0,) * n, (False,) * n)


def fit_standardizer(X) -> Standardizer:
    """Per-column mean and population stddev; a zero-variance column keeps stddev 1."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InsufficientDataError("cannot standardize an empty feature matrix")
    means = X.mean(axis=0)
    stddevs = X.std(axis=0)
    zero = stddevs <= 1e-12 * np.maximum(1.0, np.abs(means))
    if zero.any():
        logger.info("zero-variance feature columns %s; stddev forced to 1", np.nonzero(zero)[0].tolist())
    stddevs = np.where(zero, 1.0, stddevs)
    return Standardizer(tuple(means.tolist()), tuple(stddevs.tolist()), tuple(bool(z) for z in zero))


# -- models ----------------------------------------------------------------

class LinearModel:
    kind = "linear"

    def __init__(self, weights, intercept: float):
        self.weights = np.asarray(weights, dtype=float)
        self.intercept = float(intercept)

    def predict_raw(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.intercept

    def to_params(self) -> dict:
        return {'weights': self.weights.tolist(), 'intercept': self.intercept}

    @classmethod
    def from_params(cls, params: dict) -> "LinearModel":
        return cls(params['weights'], params['intercept'])

    def hyperparameters(self) -> dict:
        return {}


class LassoModel(LinearModel):
    kind = "lasso"

    def __init__(self, weights, intercept: float, lam: float):
        super().__init__(weights, intercept)
        if lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {lam}")
        self.lam = float(lam)

    def to_params(self) -> dict:
        params = super().to_params()
        params['lambda'] = self.lam
        return params

    @classmethod
    def from_params(cls, params: dict) -> "LassoModel":
        return cls(params['weights'], params['intercept'], params['lambda'])

    def hyperparameters(self) -> dict:
        return {'lambda': self.lam}


def kernel_matrix(A, B, kernel: str, gamma: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if kernel == "linear":
        return A @ B.T
    if kernel == "rbf":
        sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * A @ B.T
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise ValidationError(f"unknown kernel {kernel!r}")


class SvrModel:
    kind = "svr"

    def __init__(self, support_vectors, dual_coeffs, bias: float, kernel: str = "rbf",
                 gamma: float = 0.25, C: float = 10.0, epsilon: float = 0.5):
        self.dual_coeffs = np.asarray(dual_coeffs, dtype=float).ravel()
        vectors = np.asarray(support_vectors, dtype=float)
        if vectors.size == 0:
            self.support_vectors = vectors.reshape(0, N_FEATURES)
        else:
            self.support_vectors = vectors.reshape(len(self.dual_coeffs), -1)
        self.bias = float(bias)
        self.kernel = kernel
        self.gamma = float(gamma)
        self.C = float(C)
        self.epsilon = float(epsilon)

    def predict_raw(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.dual_coeffs) == 0:
            return np.full(X.shape[0], self.bias)
        return kernel_matrix(X, self.support_vectors, self.kernel, self.gamma) @ self.dual_coeffs + self.bias

    def to_params(self) -> dict:
        return {
            'support_vectors': self.support_vectors.tolist(),
            'dual_coeffs': self.dual_coeffs.tolist(),
            'bias': self.bias,
            'kernel': self.kernel,
            'gamma': self.gamma,
            'C': self.C,
            'epsilon': self.epsilon,
        }

    @classmethod
    def from_params(cls, params: dict) -> "SvrModel":
        return cls(params['support_vectors'], params['dual_coeffs'], params['bias'],
                   params['kernel'], params['gamma'], params['C'], params['epsilon'])

    def hyperparameters(self) -> dict:
        return {'kernel': self.kernel, 'gamma': self.gamma, 'C': self.C, 'epsilon': self.epsilon}


class MlpModel:
    """tanh hidden layers, identity output; weights[l] has shape (fan_out, fan_in)."""
    kind = "mlp"

    def __init__(self, layer_sizes: Sequence[int], weights: Sequence, biases: Sequence,
                 rng_seed: int = 0, learning_rate: float = 0.01, epochs: int = 0):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights = [np.asarray(w, dtype=float).reshape(o, i)
                        for w, i, o in zip(weights, self.layer_sizes[:-1], self.layer_sizes[1:])]
        self.biases = [np.asarray(b, dtype=float).reshape(o) for b, o in zip(biases, self.layer_sizes[1:])]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValidationError("MLP weight list does not match its layer sizes")
        self.rng_seed = int(rng_seed)
        self.learning_rate = float(learning_rate)
        self.epochs = int(epochs)
        self.loss_history: List[float] = []

    def forward(self, X) -> List[np.ndarray]:
        """Activations of every layer, input first."""
        activations = [np.atleast_2d(np.asarray(X, dtype=float))]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = activations[-1] @ W.T + b
            activations.append(z if k == last else np.tanh(z))
        return activations

    def predict_raw(self, X) -> np.ndarray:
        return self.forward(X)[-1][:, 0]

    def copy_with(self, weights, biases) -> "MlpModel":
        return MlpModel(self.layer_sizes, weights, biases, self.rng_seed, self.learning_rate, self.epochs)

    def to_params(self) -> dict:
        return {
            'layer_sizes': list(self.layer_sizes),
            'weights': [w.tolist() for w in self.weights],
            'biases': [b.tolist() for b in self.biases],
            'rng_seed': self.rng_seed,
            'learning_rate': self.learning_rate,
            'epochs': self.epochs,
        }

    @classmethod
    def from_params(cls, params: dict) -> "MlpModel":
        return cls(params['layer_sizes'], params['weights'], params['biases'],
                   params['rng_seed'], params['learning_rate'], params['epochs'])

    def hyperparameters(self) -> dict:
        return {'hidden_sizes': list(self.layer_sizes[1:-1]), 'learning_rate': self.learning_rate,
                'epochs': self.epochs, 'rng_seed': self.rng_seed}


MODEL_CLASSES = {cls.kind: cls for cls in (LinearModel, SvrModel, LassoModel, MlpModel)}
PARAM_KEYS = {
    "linear": {'weights', 'intercept'},
    "lasso": {'weights', 'intercept', 'lambda'},
    "svr": {'support_vectors', 'dual_coeffs', 'bias', 'kernel', 'gamma', 'C', 'epsilon'},
    "mlp": {'layer_sizes', 'weights', 'biases', 'rng_seed', 'learning_rate', 'epochs'},
}
ORIGINAL_UNIT_KEYS = {'original_weights', 'original_intercept'}


# -- ordinary least squares ------------------------------------------------

def fit_ols(X, y) -> LinearModel:
    """Least squares with intercept; rank-deficient designs get the minimum-norm weights."""
    X, y = _as_xy(X, y)
    _require_samples(X.shape[0])
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    weights, _, rank, _ = np.linalg.lstsq(X - x_mean, y - y_mean, rcond=None)
    if rank < X.shape[1]:
        logger.debug("OLS design has rank %d of %d", rank, X.shape[1])
    return LinearModel(weights, y_mean - x_mean @ weights)


# -- lasso -----------------------------------------------------------------

def soft_threshold(value: float, threshold: float) -> float:
    return math.copysign(max(abs(value) - threshold, 0.0), value)


def lasso_lambda_max(X, y) -> float:
    """Smallest lambda for which every standardized weight is zero."""
    X, y = _as_xy(X, y)
    Z = fit_standardizer(X).apply(X)
    return float(np.max(np.abs(Z.T @ (y - y.mean())))) / X.shape[0]


def fit_lasso(X, y, lam: float) -> LassoModel:
    """
    Coordinate descent on (1/2N)||y - Zw - b||^2 + lam*||w||_1 over standardized
    features Z; the unpenalized intercept is the target mean. The returned
    weights are re-expressed in the units of X.
    """
    X, y = _as_xy(X, y)
    n = X.shape[0]
    _require_samples(n)
    if not lam >= 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    standardizer = fit_standardizer(X)
    Z = standardizer.apply(X)
    y_mean = y.mean()
    residual = y - y_mean
    col_sq = (Z * Z).sum(axis=0) / n
    w = np.zeros(X.shape[1])

    for sweep in range(LASSO_MAX_SWEEPS):
        max_change = 0.0
        for j in range(X.shape[1]):
            if col_sq[j] == 0.0:
                continue
            rho = Z[:, j] @ residual / n + col_sq[j] * w[j]
            new = soft_threshold(rho, lam) / col_sq[j]
            change = new - w[j]
            if change != 0.0:
                residual -= change * Z[:, j]
                w[j] = new
                max_change = max(max_change, abs(change))
        if max_change <= LASSO_TOL:
            break
    else:
        logger.warning("lasso did not converge in %d sweeps (lambda=%g)", LASSO_MAX_SWEEPS, lam)

    stddevs = np.asarray(standardizer.stddevs)
    means = np.asarray(standardizer.means)
    weights = w / stddevs
    return LassoModel(weights, y_mean - means @ weights, lam)


def _contiguous_folds(n: int, folds: int) -> List[np.ndarray]:
    return [f for f in np.array_split(np.arange(n), min(folds, n)) if len(f)]


def cross_validate_lasso(X, y, lambdas: Sequence[float], folds: int = 5) -> float:
    """Lambda with the lowest mean squared validation error over contiguous folds."""
    X, y = _as_xy(X, y)
    n = X.shape[0]
    lambdas = list(lambdas)
    if n < 4:
        logger.info("only %d samples; skipping lasso cross-validation", n)
        return float(min(lambdas))
    scores = []
    for lam in lambdas:
        errors = []
        for fold in _contiguous_folds(n, folds):
            train = np.setdiff1d(np.arange(n), fold)
            model = fit_lasso(X[train], y[train], lam)
            errors.append(np.mean((model.predict_raw(X[fold]) - y[fold]) ** 2))
        scores.append(float(np.mean(errors)))
    best = int(np.argmin(scores))
    logger.debug("lasso CV errors %s -> lambda %g", scores, lambdas[best])
    return float(lambdas[best])


# -- epsilon-SVR -----------------------------------------------------------

def svr_dual_objective(theta, K, y, epsilon: float) -> float:
    """0.5 theta'K theta + epsilon*|theta|_1 - y'theta, with theta = alpha - alpha*."""
    theta = np.asarray(theta, dtype=float)
    return float(0.5 * theta @ K @ theta + epsilon * np.abs(theta).sum() - np.asarray(y) @ theta)


def fit_svr(X, y, C: float = 10.0, epsilon: float = 0.5, kernel: str = "rbf",
            gamma: float = 0.25, tol: float = SVR_TOL, max_iter: int = None) -> SvrModel:
    """
    Solve the epsilon-SVR dual over the 2N variables (alpha, alpha*) with
    maximal-violating-pair selection using second-order information, until
    the KKT gap falls below ``tol``. The bias averages the free variables.
    """
    X, y = _as_xy(X, y)
    n = X.shape[0]
    _require_samples(n)
    if not C > 0:
        raise ValidationError(f"C must be > 0, got {C}")
    if not epsilon >= 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    max_iter = max_iter or max(100_000, 200 * n)

    K = kernel_matrix(X, X, kernel, gamma)
    k_diag = np.diag(K)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    idx = np.concatenate([np.arange(n), np.arange(n)])
    beta = np.zeros(2 * n)
    grad = np.concatenate([epsilon - y, epsilon + y])

    for iteration in range(max_iter):
        up = ((z > 0) & (beta < C)) | ((z < 0) & (beta > 0))
        low = ((z < 0) & (beta < C)) | ((z > 0) & (beta > 0))
        score = -z * grad
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        m = score[i]
        if m - np.min(np.where(low, score, np.inf)) < tol:
            break

        k_i = K[idx[i], idx]
        b = m - score
        a = k_diag[idx[i]] + k_diag[idx] - 2.0 * k_i
        a = np.where(a > 0, a, SVR_TAU)
        candidates = low & (score < m)
        j = int(np.argmin(np.where(candidates, -(b * b) / a, np.inf)))

        old_i, old_j = beta[i], beta[j]
        step = b[j] / a[j]
        total = z[i] * old_i + z[j] * old_j
        new_i = min(max(old_i + z[i] * step, 0.0), C)
        new_j = min(max(z[j] * (total - z[i] * new_i), 0.0), C)
        new_i = z[i] * (total - z[j] * new_j)
        beta[i], beta[j] = new_i, new_j

        delta_i, delta_j = new_i - old_i, new_j - old_j
        grad += z * (z[i] * delta_i * k_i + z[j] * delta_j * K[idx[j], idx])
    else:
        logger.warning("SVR solver stopped at the %d iteration cap", max_iter)

    bias = -_svr_rho(beta, grad, z, C)
    theta = beta[:n] - beta[n:]
    support = np.nonzero(theta)[0]
    logger.debug("SVR: %d iterations, %d support vectors", iteration + 1, len(support))
    return SvrModel(X[support], theta[support], bias, kernel, gamma, C, epsilon)


def _svr_rho(beta, grad, z, C) -> float:
    y_grad = z * grad
    at_upper = beta >= C
    at_lower = beta <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        return float(y_grad[free].mean())
    # bounds on rho from the variables pinned at either end of the box
    upper_set = (at_upper & (z < 0)) | (at_lower & (z > 0))
    lower_set = (at_upper & (z > 0)) | (at_lower & (z < 0))
    ub = y_grad[upper_set].min() if upper_set.any() else np.inf
    lb = y_grad[lower_set].max() if lower_set.any() else -np.inf
    if not np.isfinite(ub):
        return float(lb)
    if not np.isfinite(lb):
        return float(ub)
    return float((ub + lb) / 2.0)


def tune_svr(X, y, C_values: Sequence[float], epsilons: Sequence[float], kernel: str = "rbf",
             gamma: float = 0.25, folds: int = 5) -> Tuple[float, float]:
    """(C, epsilon) with the lowest cross-validated squared error; first wins on ties."""
    X, y = _as_xy(X, y)
    n = X.shape[0]
    grid = [(float(c), float(e)) for c in C_values for e in epsilons]
    if n < 4:
        return grid[0]
    best, best_score = grid[0], np.inf
    for C, epsilon in grid:
        errors = []
        for fold in _contiguous_folds(n, folds):
            train = np.setdiff1d(np.arange(n), fold)
            if len(train) < 2:
                continue
            model = fit_svr(X[train], y[train], C, epsilon, kernel, gamma)
            errors.append(np.mean((model.predict_raw(X[fold]) - y[fold]) ** 2))
        score = float(np.mean(errors))
        if score < best_score:
            best, best_score = (C, epsilon), score
    logger.debug("SVR grid search -> C=%g epsilon=%g (mse %.4g)", best[0], best[1], best_score)
    return best


# -- multilayer perceptron -------------------------------------------------

def init_mlp(hidden_sizes: Sequence[int], rng_seed: int, n_inputs: int = N_FEATURES,
             learning_rate: float = 0.01) -> MlpModel:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    sizes = [n_inputs] + [int(h) for h in hidden_sizes] + [1]
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(sizes, weights, biases, rng_seed, learning_rate, 0)


def mlp_loss_and_gradients(model: MlpModel, X, y) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean squared error and its analytic gradients for every weight and bias."""
    X, y = _as_xy(X, y)
    activations = model.forward(X)
    output = activations[-1][:, 0]
    n = X.shape[0]
    error = output - y
    loss = float(np.mean(error ** 2))

    delta = (2.0 / n) * error[:, None]
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        grad_w[k] = delta.T @ activations[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (1.0 - activations[k] ** 2)
    return loss, grad_w, grad_b


def fit_mlp(X, y, hidden_sizes: Sequence[int] = (16, 8), learning_rate: float = 0.01,
            epochs: int = 5000, rng_seed: int = 0) -> MlpModel:
    """
    Full-batch gradient descent on mean squared error. A step that raises the
    loss is undone and the rate halved; after 20 halvings training stops, so
    the loss never increases.
    """
    X, y = _as_xy(X, y)
    _require_samples(X.shape[0])
    if epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    model = init_mlp(hidden_sizes, rng_seed, X.shape[1], learning_rate)
    rate = float(learning_rate)
    halvings = 0
    loss, grad_w, grad_b = mlp_loss_and_gradients(model, X, y)
    model.loss_history = [loss]

    for epoch in range(epochs):
        while True:
            trial = model.copy_with([W - rate * g for W, g in zip(model.weights, grad_w)],
                                    [b - rate * g for b, g in zip(model.biases, grad_b)])
            trial_loss, trial_gw, trial_gb = mlp_loss_and_gradients(trial, X, y)
            if trial_loss <= loss + MLP_LOSS_TOL:
                break
            if halvings >= MLP_MAX_HALVINGS:
                trial = None
                break
            rate /= 2.0
            halvings += 1
            logger.debug("epoch %d: loss rose, learning rate halved to %g", epoch, rate)
        if trial is None:
            logger.warning("MLP stopped at epoch %d after %d learning-rate halvings", epoch, halvings)
            break
        history = model.loss_history
        model = trial
        model.loss_history = history + [trial_loss]
        loss, grad_w, grad_b = trial_loss, trial_gw, trial_gb

    model.epochs = int(epochs)
    return model


# -- bundles ---------------------------------------------------------------

@dataclass
class ModelBundle:
    model: object
    standardizer: Standardizer
    metadata: Dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    def original_units(self) -> Optional[Tuple[np.ndarray, float]]:
        """Linear and lasso weights and intercept expressed on unstandardized features."""
        if not isinstance(self.model, LinearModel):
            return None
        stddevs = np.asarray(self.standardizer.stddevs)
        means = np.asarray(self.standardizer.means)
        weights = self.model.weights / stddevs
        return weights, self.model.intercept - means @ weights

    def to_dict(self) -> dict:
        params = self.model.to_params()
        original = self.original_units()
        if original is not None:
            params['original_weights'] = original[0].tolist()
            params['original_intercept'] = float(original[1])
        metadata = dict(self.metadata)
        metadata['format_version'] = BUNDLE_FORMAT_VERSION
        return {
            'format_version': BUNDLE_FORMAT_VERSION,
            'model_type': self.kind,
            'standardizer': self.standardizer.to_dict(),
            'params': params,
            'metadata': metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        version = str(data.get('format_version'))
        if version != BUNDLE_FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"model bundle format_version {version!r} is not supported (expected {BUNDLE_FORMAT_VERSION!r})")
        _reject_unknown(data, {'format_version', 'model_type', 'standardizer', 'params', 'metadata'}, "bundle")
        kind = data['model_type']
        if kind not in MODEL_CLASSES:
            raise ValidationError(f"unknown model_type {kind!r}")
        params = dict(data['params'])
        allowed = PARAM_KEYS[kind] | (ORIGINAL_UNIT_KEYS if kind in ("linear", "lasso") else set())
        _reject_unknown(params, allowed, f"{kind} params")
        missing = PARAM_KEYS[kind] - set(params)
        if missing:
            raise ParseError(f"missing {kind} params: {', '.join(sorted(missing))}")
        for key in ORIGINAL_UNIT_KEYS:
            params.pop(key, None)
        model = MODEL_CLASSES[kind].from_params(params)
        return cls(model, Standardizer.from_dict(data['standardizer']), dict(data.get('metadata', {})))


def _reject_unknown(data: dict, allowed: set, where: str):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValidationError(f"unknown {where} fields: {', '.join(unknown)}")


def save_bundle(bundle: ModelBundle, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(bundle.to_dict(), f, indent=2)
        f.write("\n")


def load_bundle(path) -> ModelBundle:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ValidationError(f"model bundle not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, source=str(path), line=e.lineno) from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    if not isinstance(data, dict):
        raise ParseError("bundle must be a JSON object", source=str(path))
    try:
        return ModelBundle.from_dict(data)
    except (KeyError, TypeError) as e:
        raise ParseError(f"malformed bundle: {e}", source=str(path)) from e


def _feature_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureVector):
        return features.as_array()[None, :]
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != N_FEATURES:
        raise ValidationError(f"expected {N_FEATURES} features, got {X.shape[1]}")
    return X


def predict_many(bundle: ModelBundle, features) -> np.ndarray:
    """Corrected counts for a batch of feature rows, clamped at zero."""
    X = _feature_matrix(features)
    raw = bundle.model.predict_raw(bundle.standardizer.apply(X))
    return np.maximum(raw, 0.0)


def predict(bundle: ModelBundle, features) -> float:
    """Corrected count of one patch."""
    X = _feature_matrix(features)
    if X.shape[0] != 1:
        raise ValidationError(f"predict takes one feature vector, got {X.shape[0]}")
    return float(predict_many(bundle, X)[0])


def train_bundle(kind: str, training_set: TrainingSet, config: PipelineConfig = None,
                 block_id: str = None) -> ModelBundle:
    """Standardize the training features, fit one model kind and bundle the two."""
    config = config or PipelineConfig()
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}")
    X, y = training_set.to_arrays()
    _require_samples(X.shape[0])
    standardizer = fit_standardizer(X)
    Z = standardizer.apply(X)

    if kind == "linear":
        model = fit_ols(Z, y)
    elif kind == "lasso":
        lam = cross_validate_lasso(Z, y, config.lasso_lambdas, config.lasso_folds)
        model = fit_lasso(Z, y, lam)
    elif kind == "svr":
        C, epsilon = config.svr_C, config.svr_epsilon
        if config.svr_tune:
            C, epsilon = tune_svr(Z, y, [config.svr_C * f for f in config.svr_C_factors],
                                  config.svr_epsilons, config.svr_kernel, config.svr_gamma)
        model = fit_svr(Z, y, C, epsilon, config.svr_kernel, config.svr_gamma)
    else:
        model = fit_mlp(Z, y, config.mlp_hidden_sizes, config.mlp_learning_rate,
                        config.mlp_epochs, derive_seed(config.seed, "mlp"))

    blocks = sorted({s.block_id for s in training_set.samples})
    metadata = {
        'training_block': block_id or ",".join(blocks),
        'n_samples': int(X.shape[0]),
        'hyperparameters': model.hyperparameters(),
    }
    logger.info("trained %s on %d samples", kind, X.shape[0])
    return ModelBundle(model, standardizer, metadata)


def validation_rcp(bundle: ModelBundle, validation: TrainingSet) -> float:
    """Block-level RCP of the summed patch predictions against the summed targets."""
    X, y = validation.to_arrays()
    predicted = block_count(predict_many(bundle, X).tolist())
    return rcp(predicted, block_count(y.tolist()))


def select_best(candidates: Sequence[ModelBundle], validation: TrainingSet) -> Tuple[ModelBundle, List[Tuple[str, float]]]:
    """
    The candidate with the highest validation RCP. Ties go to the earlier kind
    in the order linear, svr, lasso, mlp, then to the earlier candidate.
    """
    if not candidates:
        raise ValidationError("no candidate models to select from")
    if len(validation) == 0:
        raise InsufficientDataError("validation set is empty")
    scores = [(bundle.kind, validation_rcp(bundle, validation)) for bundle in candidates]
    best = _best_by_kind_order([kind for kind, _ in scores], [value for _, value in scores])
    logger.info("selected %s (RCP %.4f)", candidates[best].kind, scores[best][1])
    return candidates[best], scores


def _best_by_kind_order(kinds: Sequence[str], scores: Sequence[float]) -> int:
    order = sorted(range(len(kinds)), key=lambda k: (MODEL_KINDS.index(kinds[k]), k))
    best = order[0]
    for k in order[1:]:
        if scores[k] > scores[best]:
            best = k
    return best


def cross_validated_rcp(kind: str, training_set: TrainingSet, config: PipelineConfig = None,
                        folds: int = None) -> float:
    """
    Mean block-level RCP over contiguous held-out folds. Each fold is counted
    by a ``kind`` model fitted on the remaining patches; folds without any
    ground-truth mound are skipped.
    """
    config = config or PipelineConfig()
    folds = folds or config.selection_folds
    n = len(training_set)
    if n < 4:
        raise InsufficientDataError(f"cross-validated selection needs at least 4 patches, got {n}")
    _, y = training_set.to_arrays()
    scores = []
    for fold in _contiguous_folds(n, folds):
        truth = block_count(y[fold].tolist())
        if truth == 0:
            continue
        train = np.setdiff1d(np.arange(n), fold)
        bundle = train_bundle(kind, training_set.subset(train.tolist()), config)
        X_fold = training_set.subset(fold.tolist()).feature_matrix()
        scores.append(rcp(block_count(predict_many(bundle, X_fold).tolist()), truth))
    if not scores:
        raise InsufficientDataError("no held-out fold has a ground-truth mound")
    return float(np.mean(scores))


def select_by_cross_validation(kinds: Sequence[str], training_set: TrainingSet,
                               config: PipelineConfig = None) -> Tuple[str, List[Tuple[str, float]]]:
    """
    Pick a model kind from one training block using held-out folds of that
    block. Same tie order as select_best. Below 4 patches the fitted models
    are scored on the training patches themselves.
    """
    if not kinds:
        raise ValidationError("no candidate models to select from")
    config = config or PipelineConfig()
    if len(training_set) < 4:
        logger.info("only %d patches; selecting on the training patches", len(training_set))
        bundles = [train_bundle(kind, training_set, config) for kind in kinds]
        best, scores = select_best(bundles, training_set)
        return best.kind, scores
    scores = [(kind, cross_validated_rcp(kind, training_set, config)) for kind in kinds]
    best = _best_by_kind_order([k for k, _ in scores], [v for _, v in scores])
    logger.info("selected %s (cross-validated RCP %.4f)", scores[best][0], scores[best][1])
    return scores[best][0], scores
