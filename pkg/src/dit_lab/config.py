"""Experiment configuration: a single JSON document, validated before any compute.

Example::

    {
      "dataset": {"kind": "synthetic", "n_train": 200, "n_test": 100, "dim": 20,
                  "separation": 2.0, "flip_rate": 0.0},
      "model": {"kind": "logistic"},
      "train": {"steps": 500, "batch_size": 20, "lr": 0.1},
      "query": {"kind": "test_set_loss"},
      "windows": {"mode": "full"},
      "baselines": {"loo": true, "if": true},
      "analysis": {"tracked_samples": 64},
      "seeds": [0, 1, 2],
      "output": "runs/lr"
    }

Missing keys take the defaults below. Relative paths resolve against the
config file's directory. The normalized document (defaults filled in) is
what gets hashed, so two files that differ only in omitted defaults share
a hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ContractError

DEFAULTS = {
    "dataset": {"kind": "synthetic", "n_train": 200, "n_test": 100, "dim": 20,
                "separation": 2.0, "flip_rate": 0.0},
    "model": {"kind": "logistic", "hidden_widths": [8, 8], "activation": "relu"},
    "train": {"steps": 500, "batch_size": 20, "lr": 0.1, "window": None,
              "checkpoint_interval": None, "init_scale": 1.0},
    "query": {"kind": "test_set_loss"},
    "windows": {"mode": "full"},
    "baselines": {"loo": True, "if": True, "if_damping": None, "loo_resample": False},
    "analysis": {"tracked_samples": 64, "p_threshold": 0.05, "fluct_threshold": 1.0,
                 "jaccard_fraction": 0.3, "jaccard_direction": "descending",
                 "replay_pairs": 20},
    "seeds": list(range(16)),
    "output": "dit_lab_out",
}

DATASET_KINDS = ("synthetic", "csv", "idx")
QUERY_KINDS = ("test_set_loss", "test_loss", "prediction", "param_basis",
               "feature_importance", "self_gradient")
WINDOW_MODES = ("full", "explicit", "epochs", "stages")
TRAIN_KEYS = ("dataset", "model", "train")


class ConfigError(ContractError):
    """The experiment configuration is malformed or inconsistent."""


def _merge(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where} must be an object")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults.get(k), dict) and k not in ("dataset",):
            out[k] = _merge(defaults[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _int(section, key, lo=None):
    v = section.get(key)
    _require(isinstance(v, int) and not isinstance(v, bool), f"{key} must be an integer, got {v!r}")
    if lo is not None:
        _require(v >= lo, f"{key} must be >= {lo}, got {v}")
    return v


def _resolve_paths(ds, base):
    for key in ("path", "images", "labels"):
        if key in ds and base is not None:
            p = Path(ds[key])
            ds[key] = str(p if p.is_absolute() else (base / p))


def normalize(raw: dict, base_dir=None) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError`."""
    _require(isinstance(raw, dict), "config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw, "config")

    ds = cfg["dataset"]
    kind = ds.get("kind", "synthetic")
    _require(kind in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}")
    if kind == "synthetic":
        ds = {**DEFAULTS["dataset"], **ds}
        _int(ds, "n_train", 2)
        _int(ds, "n_test", 1)
        _int(ds, "dim", 1)
        _require(float(ds["separation"]) >= 0, "dataset.separation must be non-negative")
    elif kind == "csv":
        for key in ("path", "label_column"):
            _require(key in ds, f"csv dataset needs {key!r}")
        ds.setdefault("numeric_columns", [])
        ds.setdefault("categorical_columns", [])
        ds.setdefault("positive_label", None)
        _int(ds, "n_train", 2)
    else:
        for key in ("images", "labels", "class_a", "class_b"):
            _require(key in ds, f"idx dataset needs {key!r}")
        _int(ds, "n_train", 2)
        _int(ds, "n_test", 1)
    ds.setdefault("flip_rate", 0.0)
    _require(0.0 <= float(ds["flip_rate"]) < 1.0, "dataset.flip_rate must lie in [0, 1)")
    _resolve_paths(ds, Path(base_dir) if base_dir is not None else None)
    cfg["dataset"] = ds

    m = cfg["model"]
    _require(m["kind"] in ("logistic", "mlp", "least_squares"), f"unknown model kind {m['kind']!r}")
    if m["kind"] != "mlp":
        m["hidden_widths"] = []
    _require(all(isinstance(w, int) and w > 0 for w in m["hidden_widths"]), "hidden widths must be positive integers")

    tr = cfg["train"]
    _int(tr, "steps", 0)
    _int(tr, "batch_size", 1)
    if kind == "synthetic":
        _require(tr["batch_size"] <= ds["n_train"], "train.batch_size exceeds n_train")

    q = cfg["query"]
    _require(q.get("kind") in QUERY_KINDS, f"query.kind must be one of {QUERY_KINDS}")
    if q["kind"] in ("test_loss", "prediction", "feature_importance"):
        _int(q, "test_index", 0)
    if q["kind"] == "feature_importance":
        _int(q, "feature", 0)
    if q["kind"] == "param_basis":
        _int(q, "index", 0)
    if q["kind"] == "self_gradient":
        _int(q, "sample", 0)

    w = cfg["windows"]
    _require(w.get("mode") in WINDOW_MODES, f"windows.mode must be one of {WINDOW_MODES}")
    if w["mode"] == "explicit":
        lst = w.get("list")
        _require(isinstance(lst, list) and lst, "windows.list must be a non-empty list of [t1, t2]")
        for pair in lst:
            _require(isinstance(pair, list) and len(pair) == 2, f"bad window {pair!r}")
            t1, t2 = pair
            _require(isinstance(t1, int) and isinstance(t2, int) and 0 <= t1 < t2 <= tr["steps"],
                     f"window {pair} must satisfy 0 <= t1 < t2 <= {tr['steps']}")

    a = cfg["analysis"]
    _require(0 < float(a["jaccard_fraction"]) <= 1, "analysis.jaccard_fraction must lie in (0, 1]")
    _require(a["jaccard_direction"] in ("descending", "absolute"), "analysis.jaccard_direction must be descending or absolute")
    _int(a, "tracked_samples", 1)

    seeds = cfg["seeds"]
    _require(isinstance(seeds, list) and seeds, "seeds must be a non-empty list")
    _require(all(isinstance(s, int) and 0 <= s < 2**63 for s in seeds), "seeds must be non-negative integers")
    _require(len(set(seeds)) == len(seeds), "seeds must be distinct")
    _require(isinstance(cfg["output"], str) and cfg["output"], "output must be a path string")

    # constructing the runtime objects catches the remaining contract violations
    from .trainer import TrainConfig
    try:
        TrainConfig(steps=tr["steps"], batch_size=tr["batch_size"], lr=tr["lr"], seed=0,
                    window=tr["window"], checkpoint_interval=tr["checkpoint_interval"],
                    init_scale=float(tr["init_scale"]))
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return normalize(raw, base_dir=path.parent)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj).encode("utf-8")).hexdigest()


def config_hash(cfg) -> str:
    return digest(cfg)


def train_hash(cfg, seed) -> str:
    """Hash of everything that determines the trajectory for one seed."""
    return digest({k: cfg[k] for k in TRAIN_KEYS} | {"seed": seed})
