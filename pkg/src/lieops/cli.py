"""Experiment runner.

Subcommands map to the desk-scale experiments plus the oracle suite:

    lieops swissroll       operator learning on the swiss roll (exact vs
                           variational inference, sample-count sweep)
    lieops manifoldclr-toy combined contrastive system on synthetic class
                           manifolds, with linear-probe evaluation
    lieops semisup-toy     semi-supervised trials on frozen toy features
    lieops check-grads     run every gradient/oracle check, tabulated
    lieops paths           extrapolate operator paths from a checkpoint

Configs are JSON; defaults for any subcommand print with --print-defaults.
Exit codes: 0 success, 2 config error, 3 numerical divergence, 4 oracle
check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checks import run_all_checks
from .contrastive import (
    ManifoldClrConfig,
    OperatorTrainConfig,
    ProbeConfig,
    apply_preset,
    evaluate_operator_model,
    linear_probe,
    train_lie_operators,
    train_manifoldclr,
)
from .datasets import NeighborTable, export_points_csv, swiss_roll, synth_class_manifolds
from .errors import ConfigError, DivergenceError
from .inference import LaplacianParams
from .metrics import effective_rank, emit, export_paths_csv, operator_paths
from .networks import save_mlp
from .operators import InitConfig, init_dictionary, load_dictionary, save_dictionary
from .semisup import METHODS, PriorSampler, SemiSupConfig, run_semisup_trial, sample_label_split

KINDS = ("swissroll", "manifoldclr-toy", "semisup-toy", "check-grads", "paths")


# ---------------------------------------------------------------------------
# Per-kind configuration
# ---------------------------------------------------------------------------


@dataclass
class SwissrollConfig:
    n_points: int = 5000
    noise_sd: float = 0.0
    k_lo: int = 20
    k_hi: int = 60
    pairs_per_epoch: int = 500
    eval_pairs: int = 500
    n_operators: int = 6
    init_alpha: float = 1.0e-4
    init_beta: float = 6.0
    init_jitter: float = 0.02
    j_values: tuple = (1, 5, 10, 20)
    run_fista: bool = True
    run_standard: bool = True
    run_thresholded: bool = True
    paths_grid_max: float = 2.0
    paths_grid_steps: int = 41
    training: OperatorTrainConfig = field(default_factory=OperatorTrainConfig)


@dataclass
class ManifoldClrToyConfig:
    n_classes: int = 5
    per_class: int = 200
    ambient_dim: int = 32
    intrinsic_dim: int = 2
    pair_jitter: float = 0.03
    train_fraction: float = 0.8
    steps_per_epoch: int = 10
    preset: str = "s0"
    model: ManifoldClrConfig = field(default_factory=ManifoldClrConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass
class SemisupToyConfig:
    n_splits: int = 20
    labels_per_class: int = 5
    methods: tuple = METHODS
    pretrain: ManifoldClrToyConfig = field(default_factory=ManifoldClrToyConfig)
    semisup: SemiSupConfig = field(default_factory=SemiSupConfig)


@dataclass
class PathsConfig:
    dictionary: str = ""
    start: tuple = ()
    operators: tuple = ()  # empty selects every operator
    grid_max: float = 2.0
    grid_steps: int = 41


@dataclass
class CheckGradsConfig:
    inject_error: bool = False  # negative-control hook for tests


_SECTIONS = {
    "swissroll": ("swissroll", SwissrollConfig),
    "manifoldclr-toy": ("manifoldclr", ManifoldClrToyConfig),
    "semisup-toy": ("semisup", SemisupToyConfig),
    "paths": ("paths", PathsConfig),
    "check-grads": ("check_grads", CheckGradsConfig),
}


@dataclass
class RunConfig:
    kind: str
    seed: int = 0
    out_dir: str = ""
    record_timing: bool = True
    workers: int = 1
    section: object = None

    def to_json_dict(self) -> dict:
        key, _ = _SECTIONS[self.kind]
        return {
            "kind": self.kind,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "record_timing": self.record_timing,
            "workers": self.workers,
            key: dataclasses.asdict(self.section),
        }


def default_config(kind: str) -> RunConfig:
    if kind not in _SECTIONS:
        raise ConfigError("kind", f"unknown experiment kind {kind!r}, expected one of {KINDS}")
    _, cls = _SECTIONS[kind]
    return RunConfig(kind=kind, out_dir=f"runs/{kind}", section=cls())


def _merge_dataclass(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "config", "expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {}
    for name, f in fields.items():
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        sub_path = f"{path}.{name}" if path else name
        if name not in data:
            kwargs[name] = default
            continue
        val = data[name]
        if dataclasses.is_dataclass(default):
            kwargs[name] = _merge_dataclass(type(default), val, sub_path)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(sub_path, "expected a boolean")
            kwargs[name] = val
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(sub_path, "expected an integer")
            kwargs[name] = val
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(sub_path, "expected a number")
            kwargs[name] = float(val)
        elif isinstance(default, str):
            if not isinstance(val, str):
                raise ConfigError(sub_path, "expected a string")
            kwargs[name] = val
        elif isinstance(default, tuple):
            if not isinstance(val, (list, tuple)):
                raise ConfigError(sub_path, "expected an array")
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from exc


def load_config(kind: str, data: dict) -> RunConfig:
    """Build a validated RunConfig from a JSON object for the given kind."""
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    if "kind" in data and data["kind"] != kind:
        raise ConfigError("kind", f"config is for {data['kind']!r}, requested {kind!r}")
    key, cls = _SECTIONS[kind]
    allowed = {"kind", "seed", "out_dir", "record_timing", "workers", key}
    for k in data:
        if k not in allowed:
            raise ConfigError(k, "unknown field")
    cfg = default_config(kind)
    if "seed" in data:
        if isinstance(data["seed"], bool) or not isinstance(data["seed"], int) or data["seed"] < 0:
            raise ConfigError("seed", "expected a non-negative integer")
        cfg.seed = data["seed"]
    if "out_dir" in data:
        if not isinstance(data["out_dir"], str):
            raise ConfigError("out_dir", "expected a string")
        cfg.out_dir = data["out_dir"]
    if "record_timing" in data:
        if not isinstance(data["record_timing"], bool):
            raise ConfigError("record_timing", "expected a boolean")
        cfg.record_timing = data["record_timing"]
    if "workers" in data:
        if isinstance(data["workers"], bool) or not isinstance(data["workers"], int) or data["workers"] < 1:
            raise ConfigError("workers", "expected a positive integer")
        cfg.workers = data["workers"]
    cfg.section = _merge_dataclass(cls, data.get(key, {}), key)
    return cfg


def _echo_config(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    return out


# ---------------------------------------------------------------------------
# swissroll
# ---------------------------------------------------------------------------


def swissroll_variants(sc: SwissrollConfig) -> list[dict]:
    """The (name, inference, J, threshold) grid a swissroll run covers."""
    variants = []
    if sc.run_fista:
        variants.append({"name": "fista", "inference": "fista"})
    for j in sc.j_values:
        if sc.run_standard:
            variants.append(
                {"name": f"standard_j{j}", "inference": "variational",
                 "n_samples": int(j), "use_threshold": False}
            )
        if sc.run_thresholded:
            variants.append(
                {"name": f"thresholded_j{j}", "inference": "variational",
                 "n_samples": int(j), "use_threshold": True}
            )
    return variants


def run_swissroll(cfg: RunConfig) -> dict:
    sc: SwissrollConfig = cfg.section
    out = _echo_config(cfg)
    roll = swiss_roll(sc.n_points, sc.noise_sd, seed=cfg.seed)
    export_points_csv(roll.points, None, out / "points.csv")
    table = NeighborTable(roll.points, sc.k_lo, sc.k_hi)
    eval_batch = table.sample(sc.eval_pairs, np.random.default_rng([cfg.seed, 10_000]))
    grid = np.linspace(-sc.paths_grid_max, sc.paths_grid_max, sc.paths_grid_steps)

    results = {}
    for idx, variant in enumerate(swissroll_variants(sc)):
        name = variant["name"]
        rng = np.random.default_rng([cfg.seed, idx])
        opdict = init_dictionary(
            sc.n_operators, 3, 3,
            InitConfig(alpha=sc.init_alpha, beta_eig=sc.init_beta),
            rng, allow_odd=True, jitter=sc.init_jitter,
        )
        train_cfg = sc.training
        if variant["inference"] == "variational":
            var = dataclasses.replace(
                train_cfg.variational,
                n_samples=variant["n_samples"],
                use_threshold=variant["use_threshold"],
            )
            train_cfg = dataclasses.replace(train_cfg, variational=var)
        t0 = time.perf_counter()
        res = train_lie_operators(
            lambda _epoch, r: table.sample(sc.pairs_per_epoch, r),
            opdict, variant["inference"], train_cfg, rng,
            record_timing=cfg.record_timing,
        )
        wall = time.perf_counter() - t0
        final = evaluate_operator_model(
            res.opdict, eval_batch,
            inference=variant["inference"],
            l1_weight=train_cfg.l1_weight,
            fista_max_iters=max(train_cfg.fista_max_iters, 200),
            encoder=res.encoder,
            var_cfg=train_cfg.variational if variant["inference"] == "variational" else None,
            rng=np.random.default_rng([cfg.seed, idx, 1]),
        )
        emit(
            res.records, out / f"metrics_{name}.csv", out / f"summary_{name}.json",
            config=cfg.to_json_dict(), seed=cfg.seed,
            wall_clock_s=wall if cfg.record_timing else None,
        )
        # Append the held-out evaluation to the summary.
        summary_path = out / f"summary_{name}.json"
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        summary["eval"] = final
        summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        save_dictionary(res.opdict, out / f"dictionary_{name}.json")
        paths = {
            m: operator_paths(res.opdict, roll.points[0], m, grid)
            for m in range(res.opdict.m)
        }
        export_paths_csv(paths, grid, out / f"paths_{name}.csv")
        results[name] = {"eval": final, "records": res.records}
    return results


# ---------------------------------------------------------------------------
# manifoldclr-toy
# ---------------------------------------------------------------------------


def _toy_pretrain(mc: ManifoldClrToyConfig, seed: int, record_timing: bool):
    """Shared dataset + pretraining used by the toy CLR and semisup runs."""
    ds = synth_class_manifolds(
        mc.n_classes, mc.per_class, mc.ambient_dim, mc.intrinsic_dim, seed=seed
    )
    n = ds.points.shape[0]
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(n)
    cut = int(round(mc.train_fraction * n))
    train_idx, test_idx = np.sort(perm[:cut]), np.sort(perm[cut:])
    model_cfg = apply_preset(mc.model, mc.preset)

    def sample_pairs(r):
        idx = r.choice(train_idx, size=model_cfg.train.batch_size, replace=False)
        return ds.positive_pairs(idx, mc.pair_jitter, r)

    def eval_features(state):
        out, _ = state.backbone.forward(ds.points[test_idx])
        return out

    state, records = train_manifoldclr(
        sample_pairs, mc.ambient_dim, model_cfg, np.random.default_rng([seed, 2]),
        steps_per_epoch=mc.steps_per_epoch,
        eval_features_fn=eval_features,
        record_timing=record_timing,
    )
    return ds, train_idx, test_idx, state, records


def run_manifoldclr(cfg: RunConfig) -> dict:
    mc: ManifoldClrToyConfig = cfg.section
    out = _echo_config(cfg)
    ds, train_idx, test_idx, state, records = _toy_pretrain(mc, cfg.seed, cfg.record_timing)
    features, _ = state.backbone.forward(ds.points)
    probe_cfg = dataclasses.replace(mc.probe, seed=cfg.seed)
    accuracy = linear_probe(features, ds.labels, probe_cfg)
    erank = effective_rank(features[test_idx])
    emit(
        records, out / "metrics.csv", out / "summary.json",
        config=cfg.to_json_dict(), seed=cfg.seed,
    )
    summary_path = out / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    summary["probe_accuracy"] = accuracy
    summary["effective_rank_test"] = erank
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    save_dictionary(state.opdict, out / "dictionary.json")
    save_mlp(state.backbone, out / "backbone.json")
    if state.prior is not None:
        save_mlp(state.prior, out / "prior.json")
    return {"probe_accuracy": accuracy, "effective_rank": erank, "records": records}


# ---------------------------------------------------------------------------
# semisup-toy
# ---------------------------------------------------------------------------


def _semisup_split_worker(task):
    (features, labels, test_features, test_labels, labeled_idx,
     prior, sem_cfg, method, split_id, seed) = task
    cfg = dataclasses.replace(sem_cfg, method=method)
    res = run_semisup_trial(
        features, labels, test_features, test_labels, labeled_idx,
        prior if method == "prior_aug" else None,
        cfg, seed,
    )
    return split_id, method, res.accuracy


def run_semisup(cfg: RunConfig) -> dict:
    st: SemisupToyConfig = cfg.section
    if "supervised" not in st.methods:
        raise ConfigError("semisup.methods", "the supervised baseline is required")
    out = _echo_config(cfg)
    ds, train_idx, test_idx, state, _records = _toy_pretrain(
        st.pretrain, cfg.seed, cfg.record_timing
    )
    all_features, _ = state.backbone.forward(ds.points)
    features = all_features[train_idx]
    labels = ds.labels[train_idx]
    test_features = all_features[test_idx]
    test_labels = ds.labels[test_idx]
    prior = PriorSampler(
        opdict=state.opdict,
        net=state.prior,
        fixed=None if state.prior is not None else LaplacianParams.from_scale(
            np.full(state.opdict.m, state.warmup.mu0),
            np.full(state.opdict.m, state.warmup.b0),
        ),
    )

    tasks = []
    split_files = {}
    for split_id in range(st.n_splits):
        split_rng = np.random.default_rng([cfg.seed, 3, split_id])
        labeled_idx = sample_label_split(labels, st.labels_per_class, split_rng)
        split_files[split_id] = labeled_idx
        for method in st.methods:
            tasks.append(
                (features, labels, test_features, test_labels, labeled_idx,
                 prior, st.semisup, method, split_id, int(np.random.default_rng(
                     [cfg.seed, 4, split_id]).integers(0, 2**31)))
            )
    if cfg.workers > 1:
        with multiprocessing.Pool(cfg.workers) as pool:
            rows = pool.map(_semisup_split_worker, tasks)
    else:
        rows = [_semisup_split_worker(t) for t in tasks]

    # Deterministic output order regardless of worker scheduling.
    acc = {(split_id, method): accuracy for split_id, method, accuracy in rows}
    method_order = list(st.methods)
    csv_lines = ["split_id,method,accuracy,improvement_pct"]
    improvements = {m: [] for m in method_order}
    for split_id in range(st.n_splits):
        base = acc[(split_id, "supervised")]
        for method in method_order:
            a = acc[(split_id, method)]
            pct = 0.0 if base == 0.0 else (a - base) / base * 100.0
            improvements[method].append(pct)
            csv_lines.append(f"{split_id},{method},{a!r},{pct!r}")
    (out / "trials.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    label_split_echo = {str(k): v.tolist() for k, v in split_files.items()}
    (out / "label_splits.json").write_text(
        json.dumps(label_split_echo) + "\n", encoding="utf-8"
    )
    summary = {
        "config": cfg.to_json_dict(),
        "seed": cfg.seed,
        "mean_accuracy": {
            m: float(np.mean([acc[(s, m)] for s in range(st.n_splits)])) for m in method_order
        },
        "mean_improvement_pct": {m: float(np.mean(v)) for m, v in improvements.items()},
        "sem_improvement_pct": {
            m: float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
            for m, v in improvements.items()
        },
    }
    if "prior_aug" in method_order and "mixup" in method_order:
        wins = sum(
            acc[(s, "prior_aug")] > acc[(s, "mixup")] for s in range(st.n_splits)
        )
        summary["prior_aug_beats_mixup"] = {"wins": int(wins), "splits": st.n_splits}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return {"accuracies": acc, "summary": summary}


# ---------------------------------------------------------------------------
# check-grads and paths
# ---------------------------------------------------------------------------


def run_check_grads(cfg: RunConfig) -> int:
    gc: CheckGradsConfig = cfg.section
    results = run_all_checks(cfg.seed, inject_error=gc.inject_error)
    width = max(len(r.name) for r in results) + 2
    print(f"{'check':<{width}}{'max_rel_err':>14}{'tol':>10}  status")
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        if not r.passed:
            failed += 1
        print(f"{r.name:<{width}}{r.max_rel_err:>14.3e}{r.tol:>10.0e}  {status}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 4


def run_paths(cfg: RunConfig) -> dict:
    pc: PathsConfig = cfg.section
    if not pc.dictionary:
        raise ConfigError("paths.dictionary", "a dictionary checkpoint path is required")
    if not pc.start:
        raise ConfigError("paths.start", "a start point is required")
    opdict = load_dictionary(pc.dictionary)
    start = np.asarray(pc.start, dtype=np.float64)
    if start.shape != (opdict.dim,):
        raise ConfigError("paths.start", f"expected {opdict.dim} coordinates, got {start.size}")
    out = _echo_config(cfg)
    grid = np.linspace(-pc.grid_max, pc.grid_max, pc.grid_steps)
    indices = [int(i) for i in pc.operators] if pc.operators else list(range(opdict.m))
    for i in indices:
        if not (0 <= i < opdict.m):
            raise ConfigError("paths.operators", f"operator index {i} out of range")
    paths = {i: operator_paths(opdict, start, i, grid) for i in indices}
    export_paths_csv(paths, grid, out / "paths.csv")
    return {"paths": paths}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lieops", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", type=str, default=None, help="override the output directory")
        p.add_argument("--workers", type=int, default=None, help="parallel trial workers")
        p.add_argument("--dry-run", action="store_true", help="validate config and exit")
        p.add_argument(
            "--print-defaults", action="store_true", help="print the default config and exit"
        )
        if kind == "check-grads":
            p.add_argument(
                "--inject-error", action="store_true",
                help="negative control: perturb one gradient so the suite must fail",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    kind = args.kind
    try:
        if args.print_defaults:
            print(json.dumps(default_config(kind).to_json_dict(), indent=2))
            return 0
        if args.config is not None:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
            cfg = load_config(kind, raw)
        else:
            cfg = default_config(kind)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "expected a non-negative integer")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers", "expected a positive integer")
            cfg.workers = args.workers
        if kind == "check-grads" and getattr(args, "inject_error", False):
            cfg.section.inject_error = True
        if args.dry_run:
            print(f"config ok: kind={cfg.kind} seed={cfg.seed} out={cfg.out_dir}")
            return 0
        if kind == "swissroll":
            run_swissroll(cfg)
        elif kind == "manifoldclr-toy":
            run_manifoldclr(cfg)
        elif kind == "semisup-toy":
            run_semisup(cfg)
        elif kind == "paths":
            run_paths(cfg)
        elif kind == "check-grads":
            return run_check_grads(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
