"""``dit-lab`` command-line front end.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 artifact
mismatch (stale, corrupt or foreign trajectory files).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analytics, config as cfgmod, dit, experiments, formats, reports, trainer
from .config import ConfigError

log = logging.getLogger("dit_lab")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISMATCH = 0, 1, 2, 3


class ArtifactMismatch(RuntimeError):
    """A stored artifact does not belong to the current configuration."""


class _Run:
    """Output directory, config and stage timings for one command invocation."""

    def __init__(self, command, cfg, out_dir, jobs):
        self.command = command
        self.cfg = cfg
        self.out = Path(out_dir)
        self.jobs = jobs
        self.timings = {}
        self.artifacts = {}

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t0, 6)
                return False

        return _Timer()

    def record(self, name, path):
        path = Path(path)
        self.artifacts[name] = {"path": str(path.relative_to(self.out)), "sha256": sha256_file(path)}
        return path

    def write_manifest(self):
        """Merge this command's entry into ``manifest.json`` (atomic replace).

        Per-seed training hashes are written only by ``train``; later
        commands compare against them to detect stale trajectories.
        """
        manifest = read_manifest(self.out)
        cfg_hash = cfgmod.config_hash(self.cfg)
        manifest.update({"tool": "dit-lab", "version": __version__, "config_hash": cfg_hash})
        if self.command == "train":
            hashes = manifest.setdefault("train_hashes", {})
            hashes.update({str(s): cfgmod.train_hash(self.cfg, s) for s in self.cfg["seeds"]})
            digests = manifest.setdefault("trajectory_sha256", {})
            for name, rec in self.artifacts.items():
                if name.startswith("trajectory_seed"):
                    digests[name.removeprefix("trajectory_seed")] = rec["sha256"]
        manifest.setdefault("commands", {})[self.command] = {
            "config": self.cfg,
            "config_hash": cfg_hash,
            "artifacts": self.artifacts,
            "timings_s": self.timings,
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        reports.write_json(self.out / "manifest.json", manifest)


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(out_dir):
    path = Path(out_dir) / "manifest.json"
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return {}


def trajectory_path(out_dir, seed):
    return Path(out_dir) / "trajectories" / f"seed{seed}.dit1"


def checkpoint_path(out_dir, seed):
    return Path(out_dir) / "trajectories" / f"seed{seed}.ditc"


# -- trajectory loading with artifact checks --------------------------------------

def load_trajectory(run: _Run, setup, explicit=None):
    """Read and validate the stored trajectory for ``setup.seed``.

    Checks the manifest's per-seed training hash and recorded file digest
    against the current config, then the file header against the dataset.
    """
    seed = setup.seed
    if explicit is not None:
        path = Path(explicit)
    else:
        path = trajectory_path(run.out, seed)
        manifest = read_manifest(run.out)
        if not path.exists() or str(seed) not in manifest.get("train_hashes", {}):
            raise ArtifactMismatch(f"no trajectory for seed {seed} in {run.out}; run `dit-lab train` first")
        if manifest["train_hashes"][str(seed)] != cfgmod.train_hash(run.cfg, seed):
            raise ArtifactMismatch(f"{path} was trained with a different configuration")
        if manifest.get("trajectory_sha256", {}).get(str(seed)) != sha256_file(path):
            raise ArtifactMismatch(f"{path} does not match the digest recorded at training time")
    try:
        store = formats.read_trajectory(path, setup.model)
    except formats.FormatError as exc:
        raise ArtifactMismatch(str(exc)) from exc
    except OSError as exc:
        raise ArtifactMismatch(f"cannot read {path}: {exc}") from exc
    if store.N != len(setup.train) or store.T != setup.config.steps or store.seed != seed:
        raise ArtifactMismatch(
            f"{path}: header (N={store.N}, T={store.T}, seed={store.seed}) does not match the config "
            f"(N={len(setup.train)}, T={setup.config.steps}, seed={seed})")
    return store


# -- commands ----------------------------------------------------------------------

def cmd_train(run: _Run, args):
    C = run.cfg["train"]["checkpoint_interval"]
    for seed in run.cfg["seeds"]:
        with run.stage(f"setup_seed{seed}"):
            setup = experiments.setup_seed(run.cfg, seed)
        with run.stage(f"train_seed{seed}"):
            if C:
                out = trainer.train(setup.train, setup.model, setup.config)
                store, ck = out if isinstance(out, tuple) else (out, None)
            else:
                store, ck = experiments.trajectory_for(run.cfg, setup), None
        path = trajectory_path(run.out, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        formats.write_trajectory(store, path)
        run.record(f"trajectory_seed{seed}", path)
        if ck is not None:
            cpath = checkpoint_path(run.out, seed)
            formats.write_checkpoints(ck, cpath)
            run.record(f"checkpoints_seed{seed}", cpath)
        log.info("seed %d: trained %d steps, wrote %s", seed, store.T, path)
    return EXIT_OK


def cmd_influence(run: _Run, args):
    if args.trajectory and len(run.cfg["seeds"]) != 1:
        raise ConfigError("--trajectory needs exactly one seed (use --seed-override)")
    summary = {"config_hash": cfgmod.config_hash(run.cfg), "seeds": {}}
    for seed in run.cfg["seeds"]:
        setup = experiments.setup_seed(run.cfg, seed)
        store = load_trajectory(run, setup, args.trajectory)
        q = experiments.make_query(run.cfg["query"], setup)
        with run.stage(f"influence_seed{seed}"):
            windows = experiments.resolve_windows(run.cfg["windows"], setup, store)
            records = experiments.influence_records(setup, store, q, windows)
        path = run.out / "influence" / f"seed{seed}.csv"
        reports.write_influence_csv(path, records)
        run.record(f"influence_seed{seed}", path)
        summary["seeds"][str(seed)] = {
            "query_id": q.query_id,
            "rows": len(records),
            "windows": [[w.t1, w.t2] for w in windows],
            "csv": str(path.relative_to(run.out)),
        }
    run.record("influence_json", reports.write_json(run.out / "influence" / "influence.json", summary))
    return EXIT_OK


METRIC_NAMES = ("pearson", "spearman", "kendall", "jaccard")


def cmd_compare(run: _Run, args):
    if not run.cfg["baselines"]["loo"]:
        raise ConfigError("compare needs baselines.loo enabled (LOO is the ground truth)")
    methods = ["dit"] + (["if"] if run.cfg["baselines"]["if"] else [])
    per_seed = {}
    for seed in run.cfg["seeds"]:
        setup = experiments.setup_seed(run.cfg, seed)
        with run.stage(f"train_seed{seed}"):
            store = experiments.trajectory_for(run.cfg, setup)
        with run.stage(f"compare_seed{seed}"):
            per_seed[seed] = experiments.compare_seed(run.cfg, setup, store, jobs=run.jobs)
        log.info("seed %d: DIT kendall %.3f", seed, per_seed[seed]["dit"]["kendall"])
    rows, summary = [], {}
    for m in methods:
        for seed, res in per_seed.items():
            rows.append([seed, m] + [float(res[m][k]) for k in METRIC_NAMES])
        summary[m] = experiments.summarize([res[m] for res in per_seed.values()])
    for m in methods:
        rows.append(["mean", m] + [summary[m][k]["mean"] for k in METRIC_NAMES])
        rows.append(["std", m] + [summary[m][k]["std"] for k in METRIC_NAMES])
    out = run.out / "compare"
    run.record("compare_csv", reports.write_csv(out / "compare.csv", ["seed", "method", *METRIC_NAMES], rows))
    text = reports.aligned_table(
        ["method", *METRIC_NAMES],
        [[m.upper()] + [reports.pm([res[m][k] for res in per_seed.values()]) for k in METRIC_NAMES]
         for m in methods])
    run.record("compare_txt", reports.atomic_write(out / "compare.txt", text))
    doc = {"per_seed": {str(s): {m: r[m] for m in methods} for s, r in per_seed.items()}, "summary": summary}
    run.record("compare_json", reports.write_json(out / "compare.json", doc))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_detect(run: _Run, args):
    methods = experiments.DETECT_METHODS
    per_seed = {}
    for seed in run.cfg["seeds"]:
        setup = experiments.setup_seed(run.cfg, seed)
        with run.stage(f"train_seed{seed}"):
            store = experiments.trajectory_for(run.cfg, setup)
        with run.stage(f"detect_seed{seed}"):
            per_seed[seed] = experiments.detect_seed(run.cfg, setup, store, jobs=run.jobs)
    header = ["seed", "k", *methods]
    rows = [[s, r["k"], *[r["counts"][m] for m in methods]] for s, r in per_seed.items()]
    ks = [r["k"] for r in per_seed.values()]
    counts = {m: [r["counts"][m] for r in per_seed.values()] for m in methods}
    rows.append(["mean", float(np.mean(ks)), *[float(np.mean(counts[m])) for m in methods]])
    rows.append(["std", float(np.std(ks)), *[float(np.std(counts[m])) for m in methods]])
    out = run.out / "detect"
    run.record("detect_csv", reports.write_csv(out / "detect.csv", header, rows))
    text = reports.aligned_table(["method", "identified", "k"],
                                 [[m, reports.pm(counts[m]), reports.pm(ks)] for m in methods])
    run.record("detect_txt", reports.atomic_write(out / "detect.txt", text))
    run.record("detect_json", reports.write_json(out / "detect.json", {
        "per_seed": {str(s): r for s, r in per_seed.items()},
        "summary": {m: {"mean": float(np.mean(counts[m])), "std": float(np.std(counts[m]))} for m in methods},
    }))
    sys.stdout.write(text)
    return EXIT_OK


def dynamics_tables(per_seed):
    """Pattern-distribution and stage-tau tables (mean ± std across seeds) as aligned text."""
    labels = [lab.value for lab in analytics.PatternLabel]
    dist = reports.aligned_table(["pattern", "percent"],
                                 [[lab, reports.pm([r["distribution"][lab] for r in per_seed])] for lab in labels])
    pairs = [name for name, _, _ in analytics.STAGE_PAIRS]
    taus = reports.aligned_table(["stages", "kendall_tau"],
                                 [[p, reports.pm([r["stage_tau"][p] for r in per_seed])] for p in pairs])
    return dist, taus


def mean_centroids(per_seed):
    out = {}
    for lab in analytics.PatternLabel:
        rows = [r["centroids"][lab.value] for r in per_seed if lab.value in r["centroids"]]
        if rows:
            out[lab.value] = np.mean(rows, axis=0)
    return out


def cmd_dynamics(run: _Run, args):
    per_seed = {}
    for seed in run.cfg["seeds"]:
        setup = experiments.setup_seed(run.cfg, seed)
        with run.stage(f"train_seed{seed}"):
            store = experiments.trajectory_for(run.cfg, setup)
        with run.stage(f"dynamics_seed{seed}"):
            per_seed[seed] = experiments.dynamics_seed(run.cfg, setup, store, jobs=run.jobs)
    results = list(per_seed.values())
    out = run.out / "dynamics"
    labels = [lab.value for lab in analytics.PatternLabel]
    pat_rows = [[s, *[r["distribution"][lab] for lab in labels]] for s, r in per_seed.items()]
    run.record("patterns_csv", reports.write_csv(out / "patterns.csv", ["seed", *labels], pat_rows))
    pairs = [name for name, _, _ in analytics.STAGE_PAIRS]
    tau_rows = [[s, r["stages"]["b1"], r["stages"]["b2"], *[r["stage_tau"][p] for p in pairs]]
                for s, r in per_seed.items()]
    run.record("stage_tau_csv", reports.write_csv(out / "stage_tau.csv", ["seed", "b1", "b2", *pairs], tau_rows))
    dist, taus = dynamics_tables(results)
    text = dist + "\n" + taus
    run.record("dynamics_txt", reports.atomic_write(out / "dynamics.txt", text))
    centroids = mean_centroids(results)
    run.record("dynamics_json", reports.write_json(out / "dynamics.json", {
        "per_seed": {str(s): {k: r[k] for k in ("distribution", "stages", "stage_tau", "loss_curve", "centroids")}
                     for s, r in per_seed.items()},
        "mean_centroids": centroids,
    }))
    run.record("centroids_svg", reports.write_svg_lines(out / "centroids.svg", centroids,
                                                         ylabel="standardized influence"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_replay_check(run: _Run, args):
    """Replay every seed from checkpoints and compare with the full trajectory.

    Parameters must match bit for bit and checkpoint-based influence must
    agree with full-storage influence within 1e-10 on random (j, window) pairs.
    """
    tol = 1e-10
    report, ok = {}, True
    for seed in run.cfg["seeds"]:
        setup = experiments.setup_seed(run.cfg, seed)
        store = load_trajectory(run, setup)
        cpath = checkpoint_path(run.out, seed)
        if cpath.exists():
            try:
                ck = formats.read_checkpoints(cpath, setup.model)
            except formats.FormatError as exc:
                raise ArtifactMismatch(str(exc)) from exc
        else:
            ck = formats.checkpoint_from_trajectory(store, run.cfg["train"]["checkpoint_interval"]
                                                    or setup.steps_per_epoch)
        T = store.T
        with run.stage(f"replay_seed{seed}"):
            replayed = trainer.replay_segment(ck, setup.train, 0, T)
            bad_steps = [t for t in range(T + 1) if not np.array_equal(replayed[t], store.params_at(t))]
        rng = np.random.default_rng(seed)
        q = dit.TestSetLoss(setup.test.X, setup.test.y)
        worst = 0.0
        with run.stage(f"influence_seed{seed}"):
            for _ in range(run.cfg["analysis"]["replay_pairs"] if T else 0):
                j = int(rng.integers(len(setup.train)))
                t1, t2 = sorted(rng.choice(T + 1, size=2, replace=False).tolist())
                w = dit.TimeWindow(t1, t2)
                a = dit.compute_influence(store, setup.train, q, w, j).Q
                b = dit.compute_influence_ckpt(ck, setup.train, q, w, j).Q
                worst = max(worst, abs(a - b))
        seed_ok = not bad_steps and worst <= tol
        ok &= seed_ok
        report[str(seed)] = {"param_mismatch_steps": bad_steps[:20], "n_param_mismatches": len(bad_steps),
                             "max_influence_diff": worst, "ok": seed_ok, "interval": ck.interval}
    run.record("replay_check_json", reports.write_json(run.out / "replay_check.json", report))
    status = "replay-check: OK" if ok else "replay-check: MISMATCH"
    sys.stdout.write(status + "\n")
    return EXIT_OK if ok else EXIT_MISMATCH


COMMANDS = {
    "train": (cmd_train, "train and write DIT1 (and DITC) trajectories"),
    "influence": (cmd_influence, "compute DIT influence for every sample and window"),
    "compare": (cmd_compare, "compare DIT and IF against leave-one-out"),
    "detect": (cmd_detect, "flipped-label detection counts per method"),
    "dynamics": (cmd_dynamics, "influence patterns and stage correlations"),
    "replay-check": (cmd_replay_check, "verify checkpoint replay against the full trajectory"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="dit-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dit-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="experiment JSON file")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for LOO sweeps")
        s.add_argument("--seed-override", type=int, dest="seed_override",
                       help="run only this seed instead of the config's list")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "influence":
            s.add_argument("--trajectory", help="explicit DIT1 file (skips manifest checks)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = cfgmod.load(args.config)
        if args.seed_override is not None:
            if args.seed_override < 0:
                raise ConfigError("--seed-override must be non-negative")
            cfg["seeds"] = [args.seed_override]
        out = args.out or cfg["output"]
        if args.out is None and not Path(out).is_absolute():
            out = str(Path(args.config).parent / out)
        run = _Run(args.command, cfg, out, args.jobs)
        fn = COMMANDS[args.command][0]
        code = fn(run, args)
        run.write_manifest()
        return code
    except ConfigError as exc:
        print(f"dit-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactMismatch as exc:
        print(f"dit-lab: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as exc:  # noqa: BLE001 - every module error maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"dit-lab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
