"""Dynamic influence tracking over SGD time windows.

For a window ``[t1, t2]`` and query function ``q(t)`` the influence of
removing training sample ``j`` is

    Q = <q(t2), dtheta^[t2]> - <q(t1), dtheta^[t1]>,

where ``dtheta^[t]`` is the linearised deviation of the counterfactual run.
:func:`compute_influence` evaluates it with one backward sweep that carries
``q(t2)`` and ``q(t1)`` through ``Z_t = I - lr_t H^[t]`` using Hessian-vector
products; :func:`estimate_param_change` builds the same deviation from dense
``Z_t`` matrices and serves as the reference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numkit, trainer
from .errors import ContractError, DivergenceError
from .numkit import Sample

log = logging.getLogger(__name__)

DENSE_P_LIMIT = 512


# -- queries -----------------------------------------------------------------

class Query:
    """A map from (step, parameters) to a direction in parameter space."""

    query_id = "query"
    time_invariant = False

    def evaluate(self, model, params, t):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TestLoss(Query):
    x: np.ndarray
    y: float
    name: str = "test_loss"

    @property
    def query_id(self):
        return self.name

    def evaluate(self, model, params, t):
        return numkit.grad(model, params, Sample(self.x, self.y))


@dataclass(frozen=True, eq=False)
class TestSetLoss(Query):
    """Mean loss gradient over a held-out set."""

    X: np.ndarray
    y: np.ndarray
    name: str = "test_set_loss"

    @property
    def query_id(self):
        return self.name

    def evaluate(self, model, params, t):
        return numkit.per_sample_grads(model, params, self.X, self.y).mean(axis=0)


@dataclass(frozen=True, eq=False)
class Prediction(Query):
    x: np.ndarray
    name: str = "prediction"

    @property
    def query_id(self):
        return self.name

    def evaluate(self, model, params, t):
        return numkit.predict_grad(model, params, self.x)


@dataclass(frozen=True, eq=False)
class ParamBasis(Query):
    index: int
    time_invariant = True

    @property
    def query_id(self):
        return f"param_{self.index}"

    def evaluate(self, model, params, t):
        if not 0 <= self.index < model.num_params:
            raise ContractError(f"basis index {self.index} out of range")
        e = np.zeros(model.num_params)
        e[self.index] = 1.0
        return e


@dataclass(frozen=True, eq=False)
class FeatureImportance(Query):
    x: np.ndarray
    y: float
    feature: int
    name: str = "feature_importance"

    @property
    def query_id(self):
        return f"{self.name}_{self.feature}"

    def evaluate(self, model, params, t):
        return numkit.feature_param_grad(model, params, Sample(self.x, self.y), self.feature)


@dataclass(frozen=True, eq=False)
class SelfGradient(Query):
    """Loss gradient of a training sample (gradient-alignment query)."""

    x: np.ndarray
    y: float
    name: str = "self_gradient"

    @property
    def query_id(self):
        return self.name

    def evaluate(self, model, params, t):
        return numkit.grad(model, params, Sample(self.x, self.y))


def eval_query(q: Query, trajectory, t) -> np.ndarray:
    if not trajectory.has_params(t):
        raise ContractError(f"theta^[{t}] is not recoverable from the stored window {trajectory.window}")
    v = np.asarray(q.evaluate(trajectory.model, trajectory.params_at(t), t), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"query {q.query_id} is non-finite at step {t}", step=t)
    return v


# -- records -------------------------------------------------------------------

@dataclass(frozen=True)
class TimeWindow:
    t1: int
    t2: int

    def __post_init__(self):
        if not 0 <= self.t1 < self.t2:
            raise ContractError(f"time window [{self.t1}, {self.t2}] needs 0 <= t1 < t2")

    def check(self, T):
        if self.t2 > T:
            raise ContractError(f"time window [{self.t1}, {self.t2}] exceeds T={T}")
        return self


@dataclass(frozen=True)
class InfluenceRecord:
    j: int
    window: TimeWindow
    query_id: str
    Q: float


# -- backward sweep --------------------------------------------------------------

class _StoreSource:
    """Step data read from a full-storage trajectory."""

    def __init__(self, store):
        self.store = store
        self.model = store.model
        self.T = store.T

    def params_at(self, t):
        return self.store.params_at(t)

    def batch(self, t):
        return self.store.batch(t)

    def lr(self, t):
        return self.store.lr(t)

    def check(self, t2):
        w0, w1 = self.store.window
        if w0 != 0 or w1 < t2:
            raise ContractError(f"window needs steps [0, {t2}) logged; stored window is [{w0}, {w1})")


class _CheckpointSource:
    """Step data recomputed segment by segment from checkpoints.

    Parameters for the segment holding ``t`` are replayed from the nearest
    checkpoint at or before it and cached; a backward sweep therefore
    replays each segment once.
    """

    def __init__(self, ck, dataset):
        self.ck = ck
        self.dataset = dataset
        self.model = ck.model
        self.T = ck.T
        self.starts = sorted(ck.checkpoints)
        self.cache = {}

    def params_at(self, t):
        if t not in self.cache:
            c = max(s for s in self.starts if s <= t)
            later = [s for s in self.starts if s > c]
            stop = min(later[0] if later else self.T, self.T)
            stop = max(stop, t)
            self.cache = trainer.replay_segment(self.ck, self.dataset, c, stop)
        return self.cache[t]

    def batch(self, t):
        return self.ck.batches[t]

    def lr(self, t):
        return float(self.ck.lrs[t])

    def check(self, t2):
        if t2 > self.T:
            raise ContractError(f"t2={t2} exceeds T={self.T}")


def _query_at(q, source, t):
    v = np.asarray(q.evaluate(source.model, source.params_at(t), t), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"query {q.query_id} is non-finite at step {t}", step=t)
    return v


def _sweep(source, dataset, q, window, j=None, stop=0):
    """Backward influence sweep.

    With ``j`` set returns that sample's Q; with ``j=None`` returns the
    vector of Q for every sample. Both paths compute the batch's per-sample
    gradients and the contraction the same way, so results agree exactly.
    """
    t1, t2 = window.t1, window.t2
    source.check(t2)
    model = source.model
    X, y = dataset.X, dataset.y
    u2 = _query_at(q, source, t2)
    u1 = np.zeros_like(u2)
    u1_live = False
    Q = np.zeros(len(dataset)) if j is None else 0.0
    for t in range(t2 - 1, stop - 1, -1):
        S = source.batch(t)
        lr = source.lr(t)
        theta = source.params_at(t)
        hit = j is None or bool(np.any(S == j))
        if hit:
            G = numkit.per_sample_grads(model, theta, X[S], y[S])
            contrib = (G @ (u2 - u1)) * (lr / len(S))
            if j is None:
                Q[S] += contrib
            else:
                Q += contrib[int(np.flatnonzero(S == j)[0])]
        Xb, yb = X[S], y[S]
        u2 = u2 - lr * numkit.batch_hvp(model, theta, Xb, yb, u2)
        if u1_live:
            u1 = u1 - lr * numkit.batch_hvp(model, theta, Xb, yb, u1)
        if t == t1:
            u1 = _query_at(q, source, t1)
            u1_live = True
        if not (np.all(np.isfinite(u2)) and np.all(np.isfinite(u1))):
            raise DivergenceError(f"influence propagation became non-finite at step {t}", step=t)
    return Q


def _check_j(j, N):
    if not 0 <= j < N:
        raise ContractError(f"sample index {j} out of range [0, {N})")


def compute_influence(trajectory, dataset, q: Query, window: TimeWindow, j) -> InfluenceRecord:
    """Influence of removing sample ``j`` over ``window`` (backward sweep to step 0)."""
    window.check(trajectory.T)
    _check_j(j, len(dataset))
    Q = _sweep(_StoreSource(trajectory), dataset, q, window, j=j)
    return InfluenceRecord(int(j), window, q.query_id, float(Q))


def influence_vector(trajectory, dataset, q: Query, window: TimeWindow) -> np.ndarray:
    """Q for every sample from one shared sweep."""
    window.check(trajectory.T)
    return _sweep(_StoreSource(trajectory), dataset, q, window)


def compute_influence_all(trajectory, dataset, q: Query, window: TimeWindow) -> list:
    Q = influence_vector(trajectory, dataset, q, window)
    return [InfluenceRecord(j, window, q.query_id, float(v)) for j, v in enumerate(Q)]


def compute_influence_ckpt(checkpoints, dataset, q: Query, window: TimeWindow, j=None,
                           full_history=True):
    """Influence from a checkpoint store.

    With ``full_history`` (the default) the sweep runs down to step 0 and
    matches :func:`compute_influence` exactly. ``full_history=False`` stops
    the sweep at ``t1`` and only replays from the checkpoint before ``t1``;
    this drops the contributions of steps before the window.

    Returns an :class:`InfluenceRecord` for a single ``j`` or the vector of
    all samples' Q when ``j`` is None.
    """
    window.check(checkpoints.T)
    source = _CheckpointSource(checkpoints, dataset)
    stop = 0 if full_history else window.t1
    if j is None:
        return _sweep(source, dataset, q, window, stop=stop)
    _check_j(j, len(dataset))
    Q = _sweep(source, dataset, q, window, j=j, stop=stop)
    return InfluenceRecord(int(j), window, q.query_id, float(Q))


# -- dense reference ---------------------------------------------------------------

def _indicator_term(trajectory, dataset, t, j):
    S = trajectory.batch(t)
    if not np.any(S == j):
        return None
    theta = trajectory.params_at(t)
    g = numkit.grad(trajectory.model, theta, dataset[j])
    return (trajectory.lr(t) / len(S)) * g


def z_matrix(trajectory, dataset, t):
    """Dense ``I - lr_t H^[t]`` for step ``t``."""
    S = trajectory.batch(t)
    H = numkit.dense_hessian(trajectory.model, trajectory.params_at(t), dataset.X[S], dataset.y[S])
    return np.eye(H.shape[0]) - trajectory.lr(t) * H


def estimate_param_change(trajectory, dataset, window: TimeWindow, j) -> np.ndarray:
    """Linearised parameter change over ``[t1, t2]`` from dense products of ``Z_t``.

    Evaluates ``(prod_{k=t1}^{t2-1} Z_k - I) a + sum_{t=t1}^{t2-1} (prod_{k=t+1}^{t2-1} Z_k) e_t``
    with ``a = sum_{t<t1} (prod_{k=t+1}^{t1-1} Z_k) e_t`` and
    ``e_t = 1[j in S_t] lr_t/|S_t| grad(z_j; theta^[t])``.
    """
    window.check(trajectory.T)
    _check_j(j, len(dataset))
    p = trajectory.p
    if p > DENSE_P_LIMIT:
        raise ContractError(f"dense estimator limited to p <= {DENSE_P_LIMIT}, got {p}")
    t1, t2 = window.t1, window.t2
    Z = [z_matrix(trajectory, dataset, t) for t in range(t2)]
    I = np.eye(p)

    def propagated_sum(lo, hi):
        # sum_{t=lo}^{hi-1} Z_{hi-1} ... Z_{t+1} e_t, plus the full product Z_{hi-1} ... Z_lo
        total = np.zeros(p)
        P = I.copy()
        for t in range(hi - 1, lo - 1, -1):
            e = _indicator_term(trajectory, dataset, t, j)
            if e is not None:
                total += P @ e
            P = P @ Z[t]
        return total, P

    before, _ = propagated_sum(0, t1)
    inside, product = propagated_sum(t1, t2)
    return (product - I) @ before + inside


# -- error bound -------------------------------------------------------------------

@dataclass(frozen=True)
class BoundConstants:
    L_H: float
    epsilon_H: float
    M: float
    M_H: float
    eta_max: float

    def __post_init__(self):
        for name in ("L_H", "epsilon_H", "M", "M_H", "eta_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"{name} must be finite and non-negative, got {v}")

    @property
    def B_tilde(self):
        return self.L_H * self.M ** 2 / 2.0 + self.epsilon_H * self.M


def error_bound(c: BoundConstants, window: TimeWindow) -> float:
    """Upper bound on ``||dtheta^[t1,t2] - estimate||``.

    ``(B/M_H)(exp(M_H eta (t2+1)) + exp(M_H eta (t1+1)) - 2)`` with
    ``B = L_H M^2/2 + eps_H M``; for ``M_H = 0`` the continuous limit
    ``B eta (t1 + t2 + 2)``.
    """
    B = c.B_tilde
    if B == 0.0:
        return 0.0
    if c.M_H == 0.0:
        return B * c.eta_max * (window.t1 + window.t2 + 2)
    a = c.M_H * c.eta_max
    return (B / c.M_H) * (math.expm1(a * (window.t2 + 1)) + math.expm1(a * (window.t1 + 1)))


def operator_norm(matvec, p, iters=300, seed=0, rtol=1e-12):
    """Largest |eigenvalue| of a symmetric operator by power iteration."""
    v = np.random.default_rng(seed).standard_normal(p)
    v /= np.linalg.norm(v)
    best = 0.0
    for _ in range(iters):
        w = matvec(v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return best
        converged = abs(norm - best) <= rtol * norm
        best = max(best, norm)
        if converged:
            break
        v = w / norm
    return best


_MAX_SIGMOID_2ND = 1.0 / (6.0 * math.sqrt(3.0))


def estimate_constants(trajectory, dataset, j, counterfactual=None, upto=None,
                       lipschitz_probes=8, seed=0) -> BoundConstants:
    """Measure the bound's constants along a logged run.

    ``M_H`` is the largest batch-Hessian operator norm and ``epsilon_H`` the
    largest norm of ``H^[t]`` minus the batch Hessian with sample ``j``'s
    term removed (keeping the ``1/|S_t|`` weighting the counterfactual update
    uses). ``M`` comes from the exact counterfactual run over steps
    ``0..upto``. ``L_H`` is 0 for least squares, analytic for logistic
    regression and a finite-difference probe maximum for the MLP.
    """
    model = trajectory.model
    T = trajectory.T if upto is None else upto
    if counterfactual is None:
        counterfactual = _replay_counterfactual(trajectory, dataset, j)
    p = trajectory.p
    M = 0.0
    M_H = 0.0
    eps = 0.0
    eta_max = 0.0
    for t in range(T + 1):
        M = max(M, float(np.linalg.norm(counterfactual[t] - trajectory.params_at(t))))
        if t == T:
            break
        S = trajectory.batch(t)
        theta = trajectory.params_at(t)
        Xb, yb = dataset.X[S], dataset.y[S]
        eta_max = max(eta_max, trajectory.lr(t))
        M_H = max(M_H, operator_norm(lambda v: numkit.batch_hvp(model, theta, Xb, yb, v), p, seed=seed))
        if np.any(S == j):
            xj, yj = dataset.X[[j]], dataset.y[[j]]
            eps = max(eps, operator_norm(
                lambda v: numkit.batch_hvp(model, theta, xj, yj, v) / len(S), p, seed=seed))
    if model.kind == "least_squares":
        L_H = 0.0
    elif model.kind == "logistic":
        u = np.hstack([dataset.X, np.ones((len(dataset), 1))])
        L_H = _MAX_SIGMOID_2ND * float(np.max(np.linalg.norm(u, axis=1))) ** 3
    else:
        L_H = _probe_hessian_lipschitz(trajectory, dataset, T, lipschitz_probes, seed)
    return BoundConstants(L_H=L_H, epsilon_H=eps, M=M, M_H=M_H, eta_max=eta_max)


def _replay_counterfactual(trajectory, dataset, j):
    lrs = [r.lr for r in trajectory.records]
    return trainer.replay_without(trajectory.model, dataset, trajectory.theta0,
                                  trajectory.batches(), lrs, j)


def _probe_hessian_lipschitz(trajectory, dataset, T, probes, seed):
    rng = np.random.default_rng(seed)
    model = trajectory.model
    p = trajectory.p
    best = 0.0
    for t in np.linspace(0, max(T - 1, 0), num=min(probes, max(T, 1))).astype(int):
        theta = trajectory.params_at(int(t))
        for i in rng.choice(len(dataset), size=min(4, len(dataset)), replace=False):
            xi, yi = dataset.X[[i]], dataset.y[[i]]
            d = rng.standard_normal(p)
            d *= 1e-3 / np.linalg.norm(d)

            def diff(v):
                return (numkit.batch_hvp(model, theta + d, xi, yi, v)
                        - numkit.batch_hvp(model, theta, xi, yi, v))
            best = max(best, operator_norm(diff, p, iters=50, seed=seed) / 1e-3)
    return best
