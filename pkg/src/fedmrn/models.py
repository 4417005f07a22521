"""Small models with hand-written gradients over flat float64 parameter vectors."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .rng import RngState, derive_seed, rng_gaussian


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    # mean cross-entropy and d loss / d logits
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return float(loss), dlogits / n


class Model:
    kind: str
    dims: tuple[int, ...]

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def init_params(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def loss_grad(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss(self, params, x, y) -> float:
        return self.loss_grad(params, x, y)[0]

    def predict(self, params, x) -> np.ndarray:
        raise NotImplementedError

    def accuracy(self, params, data: Dataset) -> float:
        return float(np.mean(self.predict(params, data.features) == data.labels))


class LogisticRegression(Model):
    """Multinomial logistic regression; parameters are W (classes x features) then b."""

    kind = "logistic_regression"

    def __init__(self, n_features: int, n_classes: int):
        self.dims = (n_features, n_classes)

    @property
    def n_params(self) -> int:
        f, c = self.dims
        return c * f + c

    def _unpack(self, params):
        f, c = self.dims
        return params[: c * f].reshape(c, f), params[c * f:]

    def init_params(self, seed: int) -> np.ndarray:
        return np.zeros(self.n_params)

    def logits(self, params, x):
        w, b = self._unpack(params)
        return x @ w.T + b

    def loss_grad(self, params, x, y):
        w, _ = self._unpack(params)
        loss, dl = _softmax_xent(self.logits(params, x), y)
        return loss, np.concatenate([(dl.T @ x).ravel(), dl.sum(axis=0)])

    def predict(self, params, x):
        return self.logits(params, x).argmax(axis=1)


class MLP(Model):
    """One hidden layer: W1, b1, W2, b2 flattened in that order."""

    kind = "mlp_one_hidden"

    def __init__(self, n_features: int, n_hidden: int, n_classes: int, activation: str = "tanh"):
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.dims = (n_features, n_hidden, n_classes)
        self.activation = activation

    @property
    def n_params(self) -> int:
        f, h, c = self.dims
        return h * f + h + c * h + c

    def _unpack(self, params):
        f, h, c = self.dims
        i = 0
        w1 = params[i:i + h * f].reshape(h, f); i += h * f
        b1 = params[i:i + h]; i += h
        w2 = params[i:i + c * h].reshape(c, h); i += c * h
        return w1, b1, w2, params[i:]

    def init_params(self, seed: int) -> np.ndarray:
        f, h, c = self.dims
        state = RngState(derive_seed(seed, "mlp-init"))
        w1 = rng_gaussian(state.derive("w1"), h * f, 1.0) / np.sqrt(f)
        w2 = rng_gaussian(state.derive("w2"), c * h, 1.0) / np.sqrt(h)
        return np.concatenate([w1, np.zeros(h), w2, np.zeros(c)])

    def _forward(self, params, x):
        w1, b1, w2, b2 = self._unpack(params)
        pre = x @ w1.T + b1
        hid = np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)
        return pre, hid, hid @ w2.T + b2

    def loss_grad(self, params, x, y):
        w1, b1, w2, b2 = self._unpack(params)
        pre, hid, logits = self._forward(params, x)
        loss, dl = _softmax_xent(logits, y)
        dhid = dl @ w2
        if self.activation == "tanh":
            dpre = dhid * (1.0 - hid * hid)
        else:
            dpre = dhid * (pre > 0)
        grad = np.concatenate([
            (dpre.T @ x).ravel(), dpre.sum(axis=0), (dl.T @ hid).ravel(), dl.sum(axis=0),
        ])
        return loss, grad

    def predict(self, params, x):
        return self._forward(params, x)[2].argmax(axis=1)


class Quadratic(Model):
    """Strongly convex testbed: per-sample loss 0.5 * sum_i h_i (w_i - z_i)^2.

    Samples live in ``Dataset.features`` (one target z per row); labels are
    ignored. The global minimiser over a sample set is its mean.
    """

    kind = "quadratic"

    def __init__(self, curvature):
        self.curvature = np.asarray(curvature, dtype=np.float64)
        if self.curvature.ndim != 1 or np.any(self.curvature <= 0):
            raise ValueError("curvature must be a positive vector")
        self.dims = (self.curvature.size,)

    @property
    def n_params(self) -> int:
        return self.dims[0]

    @property
    def mu(self) -> float:
        return float(self.curvature.min())

    @property
    def smoothness(self) -> float:
        return float(self.curvature.max())

    def init_params(self, seed: int) -> np.ndarray:
        return np.zeros(self.n_params)

    def loss_grad(self, params, x, y=None):
        diff = params - x
        loss = 0.5 * float(np.mean((diff * diff) @ self.curvature))
        return loss, self.curvature * diff.mean(axis=0)

    def minimizer(self, x) -> tuple[np.ndarray, float]:
        w = x.mean(axis=0)
        return w, self.loss(w, x, None)

    def accuracy(self, params, data) -> float:
        return float("nan")


def model_loss_grad(model: Model, batch: Dataset, at: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (or quadratic) loss of ``batch`` at ``at`` and its exact gradient."""
    at = np.asarray(at, dtype=np.float64)
    if at.shape != (model.n_params,):
        raise ValueError(f"parameter vector has shape {at.shape}, model needs ({model.n_params},)")
    if len(batch) == 0:
        raise ValueError("empty batch")
    return model.loss_grad(at, batch.features, batch.labels)


def finite_difference_grad(fn, at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function; the oracle for analytic gradients."""
    at = np.asarray(at, dtype=np.float64)
    grad = np.empty_like(at)
    probe = at.copy()
    for i in range(at.size):
        probe[i] = at[i] + h
        up = fn(probe)
        probe[i] = at[i] - h
        down = fn(probe)
        probe[i] = at[i]
        grad[i] = (up - down) / (2 * h)
    return grad


def build_model(kind: str, n_features: int, n_classes: int, n_hidden: int = 32,
                activation: str = "tanh") -> Model:
    if kind == "logistic_regression":
        return LogisticRegression(n_features, n_classes)
    if kind == "mlp_one_hidden":
        return MLP(n_features, n_hidden, n_classes, activation)
    raise ValueError(f"unknown model kind {kind!r}")
