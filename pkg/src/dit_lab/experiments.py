"""Per-seed experiment pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analytics, baselines, data, dit, formats, numkit, trainer
from .config import train_hash
from .errors import ContractError

log = logging.getLogger(__name__)

CACHE_ENV = "DIT_LAB_CACHE"


@dataclass
class SeedSetup:
    seed: int
    train: data.Dataset
    test: data.Dataset
    flips: data.FlipRecord | None
    model: numkit.ModelSpec
    config: trainer.TrainConfig

    @property
    def steps_per_epoch(self):
        return trainer.steps_per_epoch(len(self.train), self.config.batch_size)

    @property
    def n_epochs(self):
        return self.config.steps // self.steps_per_epoch


def load_data(ds_cfg, seed):
    """Train and test datasets for one seed (the seed only matters for synthetic data)."""
    kind = ds_cfg["kind"]
    if kind == "synthetic":
        n = ds_cfg["n_train"]
        full = data.make_synthetic(seed, n + ds_cfg["n_test"], ds_cfg["dim"], float(ds_cfg["separation"]))
        return data.split(full, n)
    if kind == "csv":
        full = data.load_csv(ds_cfg["path"], ds_cfg["label_column"], ds_cfg["numeric_columns"],
                             ds_cfg["categorical_columns"], ds_cfg["positive_label"])
        return data.split(full, ds_cfg["n_train"])
    full = data.load_idx(ds_cfg["images"], ds_cfg["labels"], ds_cfg["class_a"], ds_cfg["class_b"])
    n, m = ds_cfg["n_train"], ds_cfg["n_test"]
    if n + m > len(full):
        raise ContractError(f"idx subset has {len(full)} samples, need {n + m}")
    return full.subset(np.arange(n)), full.subset(np.arange(n, n + m))


def build_model(m_cfg, input_dim):
    return numkit.ModelSpec(m_cfg["kind"], input_dim, tuple(m_cfg["hidden_widths"]),
                            m_cfg.get("activation", "relu"))


def build_train_config(tr, seed):
    lr = tr["lr"]
    if isinstance(lr, list):
        lr = [tuple(p) for p in lr]
    return trainer.TrainConfig(steps=tr["steps"], batch_size=tr["batch_size"], lr=lr, seed=seed,
                               window=tr["window"], checkpoint_interval=tr["checkpoint_interval"],
                               init_scale=float(tr["init_scale"]))


def setup_seed(cfg, seed) -> SeedSetup:
    train_ds, test_ds = load_data(cfg["dataset"], seed)
    flips = None
    rate = float(cfg["dataset"].get("flip_rate", 0.0))
    if rate > 0:
        train_ds, flips = data.flip_labels(train_ds, rate, seed)
    model = build_model(cfg["model"], train_ds.feature_dim)
    return SeedSetup(seed, train_ds, test_ds, flips, model, build_train_config(cfg["train"], seed))


def train_seed(setup: SeedSetup, cache_key=None):
    """Train (or reuse a cached trajectory) for one seed.

    With ``DIT_LAB_CACHE`` set and a ``cache_key`` given, a DIT1 file named
    after the key is read if present and written otherwise.
    """
    cache = os.environ.get(CACHE_ENV)
    path = Path(cache) / f"{cache_key}.dit1" if cache and cache_key else None
    full_window = setup.config.window == (0, setup.config.steps)
    if path is not None and path.exists() and full_window:
        try:
            store = formats.read_trajectory(path, setup.model)
            if store.N == len(setup.train) and store.T == setup.config.steps and store.seed == setup.seed:
                log.info("reusing cached trajectory %s", path)
                return store
        except formats.FormatError as exc:
            log.warning("ignoring unreadable cache entry %s: %s", path, exc)
    out = trainer.train(setup.train, setup.model, setup.config)
    store = out[0] if isinstance(out, tuple) else out
    if path is not None and full_window:
        path.parent.mkdir(parents=True, exist_ok=True)
        formats.write_trajectory(store, path)
    return store


def trajectory_for(cfg, setup):
    return train_seed(setup, train_hash(cfg, setup.seed))


def make_query(q_cfg, setup: SeedSetup):
    kind = q_cfg["kind"]
    test = setup.test
    if kind == "test_set_loss":
        return dit.TestSetLoss(test.X, test.y)
    if kind == "param_basis":
        return dit.ParamBasis(q_cfg["index"])
    if kind == "self_gradient":
        z = setup.train[q_cfg["sample"]]
        return dit.SelfGradient(z.x, z.y, name=f"self_gradient_{q_cfg['sample']}")
    i = q_cfg["test_index"]
    if not 0 <= i < len(test):
        raise ContractError(f"test_index {i} outside the test set of size {len(test)}")
    z = test[i]
    if kind == "test_loss":
        return dit.TestLoss(z.x, z.y, name=f"test_loss_{i}")
    if kind == "prediction":
        return dit.Prediction(z.x, name=f"prediction_{i}")
    return dit.FeatureImportance(z.x, z.y, q_cfg["feature"], name=f"feature_importance_{i}")


def epoch_loss_curve(setup: SeedSetup, store):
    """Full training loss at the end of every complete epoch."""
    spe = setup.steps_per_epoch
    return np.array([numkit.mean_loss(setup.model, store.params_at((e + 1) * spe), setup.train.X, setup.train.y)
                     for e in range(setup.n_epochs)])


def resolve_windows(w_cfg, setup: SeedSetup, store):
    T = setup.config.steps
    mode = w_cfg["mode"]
    if mode == "full":
        if T == 0:
            raise ContractError("full window needs at least one step")
        return [dit.TimeWindow(0, T)]
    if mode == "explicit":
        return [dit.TimeWindow(t1, t2).check(T) for t1, t2 in w_cfg["list"]]
    if mode == "epochs":
        return baselines.epoch_windows(T, setup.steps_per_epoch)
    split = analytics.segment_stages(epoch_loss_curve(setup, store))
    return [dit.TimeWindow(*w) for w in split.windows(setup.steps_per_epoch)[:3]]


def influence_records(setup, store, q, windows):
    out = []
    for w in windows:
        out.extend(dit.compute_influence_all(store, setup.train, q, w))
    return out


# -- compare -------------------------------------------------------------------

def _metrics(est, truth, fraction, direction):
    out = {}
    for name in ("pearson", "spearman", "kendall"):
        out[name] = analytics.METRICS[name](est, truth)
    out["jaccard"] = analytics.jaccard_top(est, truth, fraction, direction)
    return out


def compare_seed(cfg, setup: SeedSetup, store=None, jobs=1):
    """DIT and IF against full-window LOO for one seed.

    Returns ``{"dit": metrics, "if": metrics, "vectors": {...}}``; the IF
    entry is omitted when disabled in the config.
    """
    store = store or trajectory_for(cfg, setup)
    a, b = cfg["analysis"], cfg["baselines"]
    T = setup.config.steps
    q = dit.TestSetLoss(setup.test.X, setup.test.y)
    dit_vec = dit.influence_vector(store, setup.train, q, dit.TimeWindow(0, T))
    loo_vec = baselines.loo_all(setup.train, setup.model, setup.config, store.batches(), setup.test,
                                reference=store, jobs=jobs)
    result = {"dit": _metrics(dit_vec, loo_vec, a["jaccard_fraction"], a["jaccard_direction"]),
              "vectors": {"dit": dit_vec, "loo": loo_vec}}
    if b["if"]:
        if_vec, lam = baselines.if_removal_estimates(setup.train, setup.model, store.params_at(T), setup.test,
                                                     b["if_damping"])
        result["if"] = _metrics(if_vec, loo_vec, a["jaccard_fraction"], a["jaccard_direction"])
        result["if_damping"] = lam
        result["vectors"]["if"] = if_vec
    return result


# -- detect ----------------------------------------------------------------------

DETECT_METHODS = ("dit_full", "if", "loo", "dit_first_epoch", "dit_mid_epoch", "dit_last_epoch")


def epoch_window(setup, which):
    spe, E = setup.steps_per_epoch, setup.n_epochs
    if E < 1:
        raise ContractError("detection needs at least one complete epoch")
    e = {"first": 0, "mid": E // 2, "last": E - 1}[which]
    return dit.TimeWindow(e * spe, (e + 1) * spe)


def detect_seed(cfg, setup: SeedSetup, store=None, jobs=1, methods=DETECT_METHODS):
    """Correctly identified flipped samples per method for one seed."""
    flips = setup.flips or data.FlipRecord(frozenset(), 0.0)
    store = store or trajectory_for(cfg, setup)
    T = setup.config.steps
    q = dit.TestSetLoss(setup.test.X, setup.test.y)
    scores = {}
    for m in methods:
        if m == "dit_full":
            scores[m] = dit.influence_vector(store, setup.train, q, dit.TimeWindow(0, T))
        elif m.startswith("dit_"):
            w = epoch_window(setup, m.split("_")[1])
            scores[m] = dit.influence_vector(store, setup.train, q, w)
        elif m == "if":
            scores[m], _ = baselines.if_removal_estimates(setup.train, setup.model, store.params_at(T), setup.test,
                                                          cfg["baselines"]["if_damping"])
        elif m == "loo":
            scores[m] = baselines.loo_all(setup.train, setup.model, setup.config, store.batches(), setup.test,
                                          reference=store, jobs=jobs)
        else:
            raise ContractError(f"unknown detection method {m!r}")
    counts = {m: analytics.evaluate_detection(v, flips) for m, v in scores.items()}
    return {"k": len(flips.flipped_indices), "counts": counts}


# -- dynamics --------------------------------------------------------------------

def tracked_subset(N, k, seed):
    k = min(k, N)
    rng = np.random.default_rng([seed, 0x7472])
    return np.sort(rng.choice(N, size=k, replace=False))


def pattern_report(series: analytics.InfluenceSeries, p_threshold=0.05, fluct_threshold=1.0):
    labels, z = analytics.classify_patterns(series, p_threshold, fluct_threshold)
    return {
        "distribution": analytics.pattern_distribution(labels),
        "centroids": analytics.pattern_centroids(labels, z, series.sample_ids),
        "labels": {int(k): v.value for k, v in labels.items()},
    }


def dynamics_seed(cfg, setup: SeedSetup, store=None, jobs=1):
    """Influence patterns from per-epoch LOO and the stage correlation table for one seed."""
    store = store or trajectory_for(cfg, setup)
    a = cfg["analysis"]
    E = setup.n_epochs
    if E < 6:
        raise ContractError(f"dynamics needs at least 6 complete epochs, run has {E}")
    subset = tracked_subset(len(setup.train), a["tracked_samples"], setup.seed)
    series = baselines.loo_epoch_series(setup.train, setup.model, setup.config, store.batches(), subset,
                                        setup.test, reference=store, jobs=jobs)
    patterns = pattern_report(series, a["p_threshold"], a["fluct_threshold"])
    curve = epoch_loss_curve(setup, store)
    split = analytics.segment_stages(curve)
    q = dit.TestSetLoss(setup.test.X, setup.test.y)
    taus = analytics.stage_correlation_table(store, setup.train, q, split, setup.steps_per_epoch)
    return {
        **patterns,
        "loss_curve": curve,
        "stages": {"b1": split.b1, "b2": split.b2, "epochs": split.total, "fallback": split.fallback},
        "stage_tau": taus,
    }


def summarize(values_by_seed):
    """Mean and population std of each key across seeds."""
    keys = list(values_by_seed[0])
    out = {}
    for k in keys:
        v = np.array([d[k] for d in values_by_seed], dtype=np.float64)
        out[k] = {"mean": float(v.mean()), "std": float(v.std())}
    return out

