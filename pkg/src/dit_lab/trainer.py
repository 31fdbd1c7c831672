"""Deterministic mini-batch SGD with trajectory logging and counterfactual replay.

Every update, normal or counterfactual, goes through :func:`sgd_step`, so a
run that skips a sample which never appears in a batch reproduces the
normal run bit for bit, and checkpoint replay reproduces the logged
parameters exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ContractError, DivergenceError
from .numkit import ModelSpec


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.

    ``lr`` is either a constant or a step-decay list ``[(step, lr), ...]``
    whose first entry starts at step 0; each rate holds until the next
    entry's step. ``window`` is the half-open range of logged steps
    ``[start, stop)`` and defaults to all steps.
    """

    steps: int
    batch_size: int
    lr: object = 0.1
    seed: int = 0
    window: tuple | None = None
    checkpoint_interval: int | None = None
    init_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must fit in an unsigned 64-bit integer")
        if isinstance(self.lr, (list, tuple)):
            sched = tuple((int(s), float(e)) for s, e in self.lr)
            if not sched or sched[0][0] != 0:
                raise ContractError("step-decay schedule must start at step 0")
            if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
                raise ContractError("step-decay schedule steps must increase")
            object.__setattr__(self, "lr", sched)
            rates = [e for _, e in sched]
        else:
            object.__setattr__(self, "lr", float(self.lr))
            rates = [self.lr]
        if not all(r > 0 and math.isfinite(r) for r in rates):
            raise ContractError("learning rates must be positive and finite")
        window = (0, self.steps) if self.window is None else tuple(int(w) for w in self.window)
        if len(window) != 2 or not 0 <= window[0] <= window[1] <= self.steps:
            raise ContractError(f"storage window {window} must satisfy 0 <= start <= stop <= {self.steps}")
        object.__setattr__(self, "window", window)
        if self.checkpoint_interval is not None and self.checkpoint_interval < 1:
            raise ContractError("checkpoint_interval must be positive")

    def lr_at(self, t):
        if isinstance(self.lr, float):
            return self.lr
        rate = self.lr[0][1]
        for start, value in self.lr:
            if t >= start:
                rate = value
        return rate

    def lr_schedule(self):
        return np.array([self.lr_at(t) for t in range(self.steps)], dtype=np.float64)

    @property
    def eta_max(self):
        return float(self.lr) if isinstance(self.lr, float) else max(e for _, e in self.lr)

    def to_dict(self):
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr if isinstance(self.lr, float) else [list(p) for p in self.lr],
            "seed": self.seed,
            "window": list(self.window),
            "checkpoint_interval": self.checkpoint_interval,
            "init_scale": self.init_scale,
        }


def steps_per_epoch(N, batch_size):
    return max(1, math.ceil(N / batch_size))


def sample_batches(N, T, batch_size, seed):
    """Pre-generate ``T`` batches by slicing a stream of per-epoch shuffles.

    Each epoch is a fresh seeded permutation of ``range(N)`` appended to the
    stream; batches take the next ``batch_size`` stream entries. When a batch
    straddles an epoch boundary, entries already in the batch are skipped and
    stay at the front of the stream for the following batch, so batches never
    hold duplicates and every epoch still visits each sample exactly once.
    """
    if batch_size > N:
        raise ContractError(f"batch_size {batch_size} exceeds dataset size {N}")
    if N < 1:
        raise ContractError("dataset is empty")
    rng = np.random.default_rng(seed)
    stream = []
    batches = []
    for _ in range(T):
        batch = []
        taken = set()
        i = 0
        while len(batch) < batch_size:
            if i == len(stream):
                stream.extend(int(k) for k in rng.permutation(N))
            k = stream[i]
            if k in taken:
                i += 1
                continue
            batch.append(k)
            taken.add(k)
            del stream[i]
        batches.append(np.array(batch, dtype=np.int64))
    return batches


def sgd_step(model, theta, X, y, indices, lr, divisor):
    """``theta - lr/divisor * sum_{i in indices} grad(z_i; theta)``."""
    if len(indices) == 0:
        return theta.copy()
    G = numkit.per_sample_grads(model, theta, X[indices], y[indices])
    return theta - (lr / divisor) * G.sum(axis=0)


@dataclass(frozen=True)
class StepRecord:
    t: int
    batch: np.ndarray
    lr: float
    params_after: np.ndarray


@dataclass
class TrajectoryStore:
    """Logged run: header plus one record per step in the storage window."""

    model: ModelSpec
    N: int
    T: int
    seed: int
    theta0: np.ndarray
    window: tuple
    records: list = field(default_factory=list)

    @property
    def p(self):
        return self.theta0.shape[0]

    def _record(self, t):
        w0, w1 = self.window
        if not w0 <= t < w1:
            raise ContractError(f"step {t} is outside the stored window [{w0}, {w1})")
        return self.records[t - w0]

    def batch(self, t):
        return self._record(t).batch

    def lr(self, t):
        return self._record(t).lr

    def params_at(self, t):
        """theta^[t], from theta^[0] or the previous step's record."""
        if t == 0:
            return self.theta0
        if not 0 < t <= self.T:
            raise ContractError(f"step {t} outside [0, {self.T}]")
        return self._record(t - 1).params_after

    def has_params(self, t):
        return t == 0 or self.window[0] <= t - 1 < self.window[1]

    def batches(self):
        return [r.batch for r in self.records]

    def param_matrix(self):
        """Stacked theta^[0..T]; requires a full storage window."""
        if self.window != (0, self.T):
            raise ContractError("param_matrix needs the full storage window")
        return np.vstack([self.theta0] + [r.params_after for r in self.records])


@dataclass
class CheckpointStore:
    """Batch indices and rates for every step plus parameter snapshots.

    ``checkpoints`` maps a parameter index ``s`` to theta^[s]; snapshots exist
    for ``s = 0``, every multiple of the interval, and ``s = T``.
    """

    model: ModelSpec
    N: int
    T: int
    seed: int
    interval: int
    theta0: np.ndarray
    batches: list
    lrs: np.ndarray
    checkpoints: dict

    @property
    def p(self):
        return self.theta0.shape[0]


def _check_finite(theta, t):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"non-finite parameters after step {t}", step=t)


def train(dataset, model: ModelSpec, config: TrainConfig, batches=None, theta0=None):
    """Run SGD and log ``{S_t, lr_t, theta^[t+1]}`` for steps in the window.

    Returns the :class:`TrajectoryStore`, or ``(store, checkpoints)`` when the
    config sets ``checkpoint_interval``.
    """
    if dataset.feature_dim != model.input_dim:
        raise ContractError(f"dataset has {dataset.feature_dim} features, model expects {model.input_dim}")
    N, T = len(dataset), config.steps
    if batches is None:
        batches = sample_batches(N, T, config.batch_size, config.seed) if T else []
    if len(batches) != T:
        raise ContractError(f"got {len(batches)} batches for {T} steps")
    theta = (numkit.init_params(model, config.seed, config.init_scale)
             if theta0 is None else np.array(theta0, dtype=np.float64))
    theta.setflags(write=False)
    store = TrajectoryStore(model, N, T, config.seed, theta, config.window)
    C = config.checkpoint_interval
    ckpts = {0: theta} if C else None
    lrs = config.lr_schedule()
    X, y = dataset.X, dataset.y
    w0, w1 = config.window
    for t in range(T):
        S = batches[t]
        theta = sgd_step(model, theta, X, y, S, lrs[t], len(S))
        _check_finite(theta, t)
        theta.setflags(write=False)
        if w0 <= t < w1:
            store.records.append(StepRecord(t, S, float(lrs[t]), theta))
        if C and ((t + 1) % C == 0 or t + 1 == T):
            ckpts[t + 1] = theta
    if C:
        return store, CheckpointStore(model, N, T, config.seed, C, store.theta0,
                                      list(batches), lrs, ckpts)
    return store


def counterfactual_train(dataset, model: ModelSpec, config: TrainConfig, j, batches, theta0=None):
    """Replay ``batches`` while skipping sample ``j``; returns theta_{-j}^[0..T] as a ``(T+1, p)`` array.

    The divisor stays the full batch size, so a step whose batch lacks ``j``
    is the same computation as in the normal run.
    """
    T = config.steps
    if len(batches) != T:
        raise ContractError(f"batch sequence has length {len(batches)}, expected {T}")
    theta = (numkit.init_params(model, config.seed, config.init_scale)
             if theta0 is None else np.array(theta0, dtype=np.float64))
    return replay_without(model, dataset, theta, batches, config.lr_schedule(), j)


def replay_without(model, dataset, theta0, batches, lrs, j):
    """Counterfactual SGD from ``theta0`` over a given batch and rate sequence."""
    X, y = dataset.X, dataset.y
    theta = theta0
    out = np.empty((len(batches) + 1, theta.shape[0]))
    out[0] = theta
    for t, S in enumerate(batches):
        keep = S[S != j]
        theta = sgd_step(model, theta, X, y, keep, lrs[t], len(S))
        _check_finite(theta, t)
        out[t + 1] = theta
    return out


def replay_segment(checkpoints: CheckpointStore, dataset, from_step, to_step):
    """Recompute theta^[t] for ``from_step <= t <= to_step`` from the nearest earlier checkpoint."""
    if not 0 <= from_step <= to_step <= checkpoints.T:
        raise ContractError(f"invalid replay range [{from_step}, {to_step}]")
    starts = [s for s in checkpoints.checkpoints if s <= from_step]
    if not starts:
        raise ContractError(f"no checkpoint at or before step {from_step}")
    c = max(starts)
    model = checkpoints.model
    X, y = dataset.X, dataset.y
    theta = checkpoints.checkpoints[c]
    out = {}
    for t in range(c, to_step + 1):
        if t in checkpoints.checkpoints:
            theta = checkpoints.checkpoints[t]
        if t >= from_step:
            out[t] = theta
        if t == to_step:
            break
        S = checkpoints.batches[t]
        theta = sgd_step(model, theta, X, y, S, checkpoints.lrs[t], len(S))
    return out
