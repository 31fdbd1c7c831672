"""Leave-one-out ground truth and the classical influence function."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numkit, trainer
from .dit import DENSE_P_LIMIT, TimeWindow
from .errors import ContractError


@dataclass(frozen=True)
class LooResult:
    j: int
    window: TimeWindow
    delta_test_loss: float


@dataclass(frozen=True)
class IfResult:
    """``score`` follows -mean(grad_test)^T H^-1 grad_j (the upweighting convention).

    ``removal_estimate`` rescales it to the predicted change in test loss
    when the sample is dropped, the same orientation as LOO deltas and DIT.
    """

    j: int
    score: float
    damping: float
    n_train: int

    @property
    def removal_estimate(self):
        return -self.score / self.n_train


def _reference_params(dataset, model, config, batches, reference):
    if reference is None:
        reference = trainer.train(dataset, model, config, batches=batches)
    if isinstance(reference, trainer.TrajectoryStore):
        return reference.param_matrix()
    return np.asarray(reference)


def _window(window, T):
    return TimeWindow(0, T) if window is None else window.check(T)


def _test_loss(model, params, test_set):
    return numkit.mean_loss(model, params, test_set.X, test_set.y)


def _windowed_delta(model, normal, counter, test_set, w):
    # [L(cf@t2) - L(cf@t1)] - [L(n@t2) - L(n@t1)]
    lc2 = _test_loss(model, counter[w.t2], test_set)
    lc1 = _test_loss(model, counter[w.t1], test_set)
    ln2 = _test_loss(model, normal[w.t2], test_set)
    ln1 = _test_loss(model, normal[w.t1], test_set)
    return (lc2 - lc1) - (ln2 - ln1)


def loo_influence(dataset, model, config, batches, j, test_set, window=None,
                  reference=None, resample=False) -> LooResult:
    """Test-loss change over ``window`` from retraining without sample ``j``.

    By default the counterfactual replays the normal run's batches with ``j``
    skipped. ``resample=True`` instead reshuffles the remaining samples with
    the same seed and batch size, so sampling noise is included.
    ``reference`` may carry the normal run (a TrajectoryStore or a
    ``(T+1, p)`` array) to avoid retraining it.
    """
    T = config.steps
    w = _window(window, T)
    normal = _reference_params(dataset, model, config, batches, reference)
    if resample:
        keep = np.array([i for i in range(len(dataset)) if i != j])
        sub = dataset.subset(keep)
        sub_batches = trainer.sample_batches(len(sub), T, config.batch_size, config.seed)
        theta0 = normal[0]
        counter = trainer.counterfactual_train(sub, model, config, -1, sub_batches, theta0=theta0)
    else:
        counter = trainer.counterfactual_train(dataset, model, config, j, batches)
    return LooResult(int(j), w, float(_windowed_delta(model, normal, counter, test_set, w)))


def _loo_series_worker(args):
    dataset, model, config, batches, j, test_set, windows, normal = args
    counter = trainer.counterfactual_train(dataset, model, config, j, batches)
    return [_windowed_delta(model, normal, counter, test_set, w) for w in windows]


def loo_windows(dataset, model, config, batches, test_set, windows, indices=None,
                reference=None, jobs=1) -> np.ndarray:
    """LOO deltas for many samples and windows; shape ``(len(indices), len(windows))``.

    One counterfactual run per sample serves every window. With ``jobs > 1``
    samples are spread over worker processes and merged in index order.
    """
    normal = _reference_params(dataset, model, config, batches, reference)
    indices = list(range(len(dataset))) if indices is None else [int(j) for j in indices]
    windows = [w.check(config.steps) for w in windows]
    tasks = [(dataset, model, config, batches, j, test_set, windows, normal) for j in indices]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_loo_series_worker, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        rows = [_loo_series_worker(t) for t in tasks]
    return np.array(rows, dtype=np.float64).reshape(len(indices), len(windows))


def loo_all(dataset, model, config, batches, test_set, window=None, reference=None, jobs=1):
    """Full-window (or single-window) LOO delta for every training sample."""
    w = _window(window, config.steps)
    return loo_windows(dataset, model, config, batches, test_set, [w],
                       reference=reference, jobs=jobs)[:, 0]


def epoch_windows(T, steps_per_epoch):
    n = T // steps_per_epoch
    if n < 1:
        raise ContractError(f"T={T} is shorter than one epoch of {steps_per_epoch} steps")
    return [TimeWindow(e * steps_per_epoch, (e + 1) * steps_per_epoch) for e in range(n)]


def loo_epoch_series(dataset, model, config, batches, sample_subset, test_set,
                     steps_per_epoch=None, reference=None, jobs=1):
    """Per-epoch windowed LOO deltas for a subset of samples, as an InfluenceSeries."""
    from .analytics import InfluenceSeries

    subset = [int(j) for j in sample_subset]
    if any(not 0 <= j < len(dataset) for j in subset):
        raise ContractError("sample subset has indices outside the dataset")
    spe = steps_per_epoch or trainer.steps_per_epoch(len(dataset), config.batch_size)
    windows = epoch_windows(config.steps, spe)
    values = loo_windows(dataset, model, config, batches, test_set, windows, indices=subset,
                         reference=reference, jobs=jobs)
    return InfluenceSeries(values, np.array(subset))


def default_damping(H):
    p = H.shape[0]
    return 1e-3 * float(np.trace(H)) / p


def if_scores(dataset, model, final_params, test_set, damping=None):
    """Influence-function scores for every training sample.

    Assembles the full-data Hessian at ``final_params`` from Hessian-vector
    products, solves ``(H + damping I) x = mean test gradient`` once and
    returns ``(scores, damping)`` with ``scores[j] = -x . grad(z_j)``.
    """
    p = model.num_params
    if p > DENSE_P_LIMIT:
        raise ContractError(f"influence function limited to p <= {DENSE_P_LIMIT}, got {p}")
    H = numkit.dense_hessian(model, final_params, dataset.X, dataset.y)
    lam = default_damping(H) if damping is None else float(damping)
    if not lam > 0:
        raise ContractError("damping must be positive")
    g_test = numkit.per_sample_grads(model, final_params, test_set.X, test_set.y).mean(axis=0)
    A = H + lam * np.eye(p)
    try:
        x = np.linalg.solve(A, g_test)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"damped Hessian solve failed (damping={lam:g}): {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError(f"damped Hessian solve produced non-finite values (damping={lam:g})")
    G = numkit.per_sample_grads(model, final_params, dataset.X, dataset.y)
    return -(G @ x), lam


def if_influence(dataset, model, final_params, j, test_set, damping=None) -> IfResult:
    scores, lam = if_scores(dataset, model, final_params, test_set, damping)
    return IfResult(int(j), float(scores[j]), lam, len(dataset))


def if_removal_estimates(dataset, model, final_params, test_set, damping=None):
    """Predicted test-loss change on removal for every sample (``-score / N``)."""
    scores, lam = if_scores(dataset, model, final_params, test_set, damping)
    return -scores / len(dataset), lam
