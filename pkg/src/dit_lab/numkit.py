"""Dense-network kernels: loss, gradients, Hessian-vector products.

Every model is a fully connected network ``f(x) = W_L a_{L-1} + b_L`` with
ReLU hidden layers and a single output logit. Logistic regression is the
network without hidden layers. The parameter vector is flattened
layer-major; inside a layer the weight matrix (shape ``out x in``) comes first
in row-major order, followed by the bias. For logistic regression this gives
``theta = (w_0, ..., w_{d-1}, b)``.

Two losses are supported: binary cross-entropy on the logit (``logistic`` and
``mlp`` models) and half squared error (``least_squares``, used as the
constant-Hessian fixture for error-bound checks).

All batch functions take ``X`` with shape ``(B, d)`` and ``y`` with shape
``(B,)``. Single-sample wrappers accept a :class:`Sample`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ContractError

KINDS = ("logistic", "mlp", "least_squares")


class Sample(NamedTuple):
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_widths: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ContractError("input_dim must be positive")
        widths = tuple(int(w) for w in self.hidden_widths)
        if self.kind == "mlp" and not widths:
            widths = (8, 8)
        if self.kind != "mlp" and widths:
            raise ContractError(f"{self.kind} model takes no hidden layers")
        if any(w < 1 for w in widths):
            raise ContractError("hidden widths must be positive")
        if self.activation != "relu":
            raise ContractError("only relu activation is supported")
        object.__setattr__(self, "hidden_widths", widths)

    @property
    def layer_shapes(self):
        """(out, in) shape of each dense layer, input to output."""
        widths = (self.input_dim,) + self.hidden_widths + (1,)
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    @property
    def num_params(self):
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d.get("hidden_widths", ())),
            activation=d.get("activation", "relu"),
        )


def init_params(model: ModelSpec, seed: int, scale: float = 1.0) -> np.ndarray:
    """Seeded initial parameters: N(0, scale^2/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for out_dim, in_dim in model.layer_shapes:
        parts.append(rng.standard_normal(out_dim * in_dim) * (scale / np.sqrt(in_dim)))
        parts.append(np.zeros(out_dim))
    return np.concatenate(parts)


def unpack(model: ModelSpec, params) -> list:
    """Split a flat parameter vector into ``[(W, b), ...]`` views."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != model.num_params:
        raise ContractError(
            f"parameter vector has shape {params.shape}, model expects ({model.num_params},)"
        )
    layers = []
    pos = 0
    for out_dim, in_dim in model.layer_shapes:
        W = params[pos:pos + out_dim * in_dim].reshape(out_dim, in_dim)
        pos += out_dim * in_dim
        b = params[pos:pos + out_dim]
        pos += out_dim
        layers.append((W, b))
    return layers


def _check_inputs(model, X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ContractError(f"inputs have shape {X.shape}, model expects (B, {model.input_dim})")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ContractError(f"labels have shape {y.shape}, expected ({X.shape[0]},)")
    return X, y


def _forward(layers, X):
    # returns activations a_0..a_{L-1} (inputs to each layer), ReLU masks, logits
    acts = [X]
    masks = []
    a = X
    for W, b in layers[:-1]:
        z = a @ W.T + b
        m = (z > 0).astype(np.float64)
        a = z * m
        acts.append(a)
        masks.append(m)
    W, b = layers[-1]
    f = (a @ W.T + b)[:, 0]
    return acts, masks, f


def _loss_derivs(kind, f, y):
    """Per-sample (loss, dloss/df, d2loss/df2)."""
    if kind == "least_squares":
        r = f - y
        return 0.5 * r * r, r, np.ones_like(f)
    s = expit(f)
    # softplus(f) - y f, stable for either sign of f
    value = np.logaddexp(0.0, f) - y * f
    return value, s - y, s * (1.0 - s)


def _logit_grad_layers(layers, acts, masks, coef):
    """Gradients of sum_b coef_b * f_b, per sample, as a list of (gW, gb) with batch axis."""
    B = acts[0].shape[0]
    delta = coef[:, None]
    out = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        gW = delta[:, :, None] * acts[l][:, None, :]
        out[l] = (gW.reshape(B, -1), delta)
        if l > 0:
            delta = (delta @ layers[l][0]) * masks[l - 1]
    return np.concatenate([np.concatenate(pair, axis=1) for pair in out], axis=1)


def logits(model: ModelSpec, params, X) -> np.ndarray:
    X = _check_inputs(model, X)
    return _forward(unpack(model, params), X)[2]


def losses(model: ModelSpec, params, X, y) -> np.ndarray:
    X, y = _check_inputs(model, X, y)
    f = _forward(unpack(model, params), X)[2]
    return _loss_derivs(model.kind, f, y)[0]


def mean_loss(model: ModelSpec, params, X, y) -> float:
    return float(np.mean(losses(model, params, X, y)))


def per_sample_grads(model: ModelSpec, params, X, y) -> np.ndarray:
    """Loss gradient of every row, shape ``(B, p)``."""
    X, y = _check_inputs(model, X, y)
    layers = unpack(model, params)
    acts, masks, f = _forward(layers, X)
    dl = _loss_derivs(model.kind, f, y)[1]
    return _logit_grad_layers(layers, acts, masks, dl)


def logit_grads(model: ModelSpec, params, X) -> np.ndarray:
    """Gradient of the logit with respect to parameters for every row, shape ``(B, p)``."""
    X = _check_inputs(model, X)
    layers = unpack(model, params)
    acts, masks, f = _forward(layers, X)
    return _logit_grad_layers(layers, acts, masks, np.ones_like(f))


def batch_hvp(model: ModelSpec, params, X, y, v) -> np.ndarray:
    """Batch-mean Hessian of the loss applied to ``v``.

    Uses forward-over-reverse differentiation of the logit gradient. ReLU is
    treated as piecewise linear, so the masks are constant under the
    directional derivative.
    """
    X, y = _check_inputs(model, X, y)
    if X.shape[0] == 0:
        raise ContractError("hvp needs a non-empty batch")
    layers = unpack(model, params)
    dirs = unpack(model, v)
    acts, masks, f = _forward(layers, X)
    _, d1, d2 = _loss_derivs(model.kind, f, y)
    B = X.shape[0]

    # directional derivatives of activations and logit
    r_acts = [np.zeros_like(X)]
    ra = r_acts[0]
    for l, ((W, _), (V, c)) in enumerate(zip(layers[:-1], dirs[:-1])):
        rz = acts[l] @ V.T + c + ra @ W.T
        ra = rz * masks[l]
        r_acts.append(ra)
    (W, _), (V, c) = layers[-1], dirs[-1]
    rf = (acts[-1] @ V.T + c + r_acts[-1] @ W.T)[:, 0]

    # Hv = mean_b [ l''(f) Rf grad f + l'(f) R(grad f) ]
    outer = (d2 * rf)[:, None]
    delta = np.ones((B, 1))
    r_delta = np.zeros((B, 1))
    out = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        coef_a = outer * delta + d1[:, None] * r_delta
        gW = coef_a.T @ acts[l] + (d1[:, None] * delta).T @ r_acts[l]
        gb = coef_a.sum(axis=0)
        out[l] = (gW.ravel(), gb)
        if l > 0:
            W_l, V_l = layers[l][0], dirs[l][0]
            new_delta = (delta @ W_l) * masks[l - 1]
            r_delta = (r_delta @ W_l + delta @ V_l) * masks[l - 1]
            delta = new_delta
    return np.concatenate([np.concatenate(pair) for pair in out]) / B


def dense_hessian(model: ModelSpec, params, X, y) -> np.ndarray:
    """Batch-mean Hessian assembled column by column from ``batch_hvp``."""
    p = model.num_params
    H = np.empty((p, p))
    e = np.zeros(p)
    for i in range(p):
        e[i] = 1.0
        H[:, i] = batch_hvp(model, params, X, y, e)
        e[i] = 0.0
    return H


def _single(model, z):
    x = np.asarray(z.x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != model.input_dim:
        raise ContractError(f"sample has {x.shape[1]} features, model expects {model.input_dim}")
    return x, np.array([float(z.y)])


def loss(model: ModelSpec, params, z: Sample) -> float:
    X, y = _single(model, z)
    return float(losses(model, params, X, y)[0])


def grad(model: ModelSpec, params, z: Sample) -> np.ndarray:
    X, y = _single(model, z)
    return per_sample_grads(model, params, X, y)[0]


def hvp(model: ModelSpec, params, batch_samples, v) -> np.ndarray:
    """Batch-mean Hessian-vector product over a list of samples."""
    if len(batch_samples) == 0:
        raise ContractError("hvp needs a non-empty batch")
    X = np.stack([np.asarray(z.x, dtype=np.float64) for z in batch_samples])
    y = np.array([float(z.y) for z in batch_samples])
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.num_params,):
        raise ContractError(f"v has shape {v.shape}, expected ({model.num_params},)")
    return batch_hvp(model, params, X, y, v)


def predict(model: ModelSpec, params, x) -> float:
    """Pre-sigmoid logit of one input."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(logits(model, params, x)[0])


def predict_grad(model: ModelSpec, params, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return logit_grads(model, params, x)[0]


def feature_param_grad(model: ModelSpec, params, z: Sample, k: int) -> np.ndarray:
    """Gradient with respect to parameters of d loss / d x_k.

    Closed form for the single-layer models; central differences of the
    parameter gradient along ``x_k`` for the MLP.
    """
    if not 0 <= k < model.input_dim:
        raise ContractError(f"feature index {k} out of range [0, {model.input_dim})")
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(z.x, dtype=np.float64)
    if model.kind == "mlp":
        h = 1e-5 * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        gp = grad(model, params, Sample(xp, z.y))
        gm = grad(model, params, Sample(xm, z.y))
        return (gp - gm) / (2.0 * h)
    X, y = _single(model, z)
    f = logits(model, params, X)
    _, d1, d2 = _loss_derivs(model.kind, f, y)
    d = model.input_dim
    w_k = params[k]
    # d/dtheta [ l'(f) w_k ] = l''(f) w_k (x, 1) + l'(f) e_k
    out = d2[0] * w_k * np.append(x, 1.0)
    out[k] += d1[0]
    assert out.shape[0] == d + 1
    return out
