"""Benchmark command line: data generation, training, evaluation, sweeps.

Configuration comes from an optional JSON file plus command-line overrides
(the command line wins).  The only environment variable consulted is
TREEDOA_OUT, which supplies the output directory when --out is absent.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .array_signal import ArrayConfig
from .baselines import load_flat, save_flat, train_flat_dnn
from .bench import (
    BenchResult,
    ExperimentConfig,
    GridConfig,
    aggregate_plot_data,
    build_multi_dataset,
    build_single_dataset,
    emit_plot_data,
    emit_results,
    flat_estimator,
    oracle_estimator,
    qtdnn_estimator,
    root_music_estimator,
    run_classes_sweep,
    run_q_sweep,
    run_snr_sweep,
    tdnn_estimator,
)
from .mlnn import TrainConfig
from .multi import load_qtdnn, save_qtdnn, train_qtdnn
from .profiles import PROFILE_NAMES, get_profile
from .tree import TreeSpec, complexity_report, load_tree, save_tree, train_tree

__all__ = ["main", "ConfigError"]


class ConfigError(Exception):
    """Bad arguments or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); route to exit code 1
        raise ConfigError(message)


def _floats_csv(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints_csv(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _out_dir(args) -> str:
    out = args.out or os.environ.get("TREEDOA_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _section(payload: dict, name: str) -> dict:
    section = payload.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a JSON object")
    return dict(section)


def _build(cls, base: dict, overrides: dict, label: str):
    """Instantiate a config dataclass from file values plus CLI overrides."""
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {label} configuration: {exc}") from exc


def _resolve_profile(args, payload: dict) -> tuple[ArrayConfig, TreeSpec]:
    name = args.profile or payload.get("profile") or "desk"
    try:
        return get_profile(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _grid_config(args, payload: dict) -> GridConfig:
    overrides = {
        "per_cell": getattr(args, "per_cell", None),
        "noisy_snr_db": _floats_csv(args.noisy_snr) if getattr(args, "noisy_snr", None) else None,
        "num_snapshots": getattr(args, "snapshots", None),
        "seed": getattr(args, "seed", None),
    }
    return _build(GridConfig, _section(payload, "grid"), overrides, "grid")


def _train_config(args, payload: dict) -> TrainConfig:
    overrides = {
        "learning_rate": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "optimizer": getattr(args, "optimizer", None),
        "loss": getattr(args, "loss", None),
        "seed": getattr(args, "seed", None),
        "target_accuracy": getattr(args, "target_accuracy", None),
        "patience": getattr(args, "patience", None),
    }
    return _build(TrainConfig, _section(payload, "train"), overrides, "training")


def _experiment_config(args, payload: dict, **extra) -> ExperimentConfig:
    overrides = {
        "profile": getattr(args, "profile", None),
        "snr_db": _floats_csv(args.snr) if getattr(args, "snr", None) else None,
        "num_snapshots": getattr(args, "snapshots", None),
        "trials": getattr(args, "trials", None),
        "seed": getattr(args, "seed", None),
        "theta_mode": getattr(args, "theta_mode", None),
        "theta_fixed": _floats_csv(args.theta) if getattr(args, "theta", None) else None,
        "min_separation": getattr(args, "min_separation", None),
    }
    overrides.update(extra)
    return _build(ExperimentConfig, _section(payload, "experiment"), overrides, "experiment")


def _save_dataset(path: str, doas: np.ndarray, features: np.ndarray, meta: dict) -> None:
    np.savez(path, doas=doas, features=features, meta=json.dumps(meta, sort_keys=True))


def _load_dataset(path: str):
    try:
        with np.load(path, allow_pickle=False) as payload:
            doas = payload["doas"]
            features = payload["features"]
            meta = json.loads(str(payload["meta"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    return doas, features, meta


def _write_manifest(out: str, name: str, config, result: BenchResult | None, extra: dict | None = None) -> None:
    payload = {"version": __version__, "config": asdict(config) if config is not None else None}
    if result is not None:
        payload["summary"] = result.summary
        payload["failures"] = result.failures
        payload["timing_ms"] = {k: round(v, 3) for k, v in result.timing_ms.items()}
    if extra:
        payload.update(extra)
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_summary(result: BenchResult) -> None:
    for row in result.summary:
        print(
            f"{row['method']:>12}  x={row['x']:>7.2f}  rmse={row['rmse']:.6f}"
            f"  stderr={row['stderr']:.6f}  n={row['n']}"
        )
    if result.failures:
        print(f"{len(result.failures)} per-trial method failures; see the run manifest")


# ---------------------------------------------------------------------------
# verbs


def _cmd_gen_data(args) -> int:
    payload = _load_config_file(args.config)
    cfg, spec = _resolve_profile(args, payload)
    grid = _grid_config(args, payload)
    out = _out_dir(args)
    sources = args.sources or 1
    if sources == 1:
        doas, feats = build_single_dataset(cfg, spec, grid)
        name = "train_single.npz"
    else:
        count = args.tuples or 50 * spec.num_cells
        doas, feats = build_multi_dataset(cfg, spec, sources, count, grid, args.min_separation)
        name = f"train_q{sources}.npz"
    meta = {
        "version": __version__,
        "profile": args.profile or payload.get("profile", "desk"),
        "grid": asdict(grid),
        "num_sources": sources,
    }
    path = os.path.join(out, name)
    _save_dataset(path, doas, feats, meta)
    print(f"wrote {path}: {feats.shape[0]} rows, feature dim {feats.shape[1]}")
    return 0


def _cmd_train(args) -> int:
    payload = _load_config_file(args.config)
    cfg, spec = _resolve_profile(args, payload)
    train_cfg = _train_config(args, payload)
    grid = _grid_config(args, payload)
    out = _out_dir(args)
    sources = args.sources or 1
    if args.data:
        doas, feats, _ = _load_dataset(args.data)
        found = doas.shape[1] if doas.ndim == 2 else 1
        if args.sources and args.sources != found:
            raise ConfigError(f"--sources {args.sources} but {args.data} holds {found}-source rows")
        sources = found
    if args.kind == "qtdnn" and sources < 2:
        raise ConfigError("qtdnn training needs multi-source data (--sources 2 or more)")
    if args.kind != "qtdnn" and sources != 1:
        raise ConfigError(f"{args.kind} training is single-source, got {sources}-source rows")

    if not args.data:
        if args.kind == "qtdnn":
            count = args.tuples or 50 * spec.num_cells
            doas, feats = build_multi_dataset(cfg, spec, sources, count, grid, args.min_separation)
        else:
            doas, feats = build_single_dataset(cfg, spec, grid)

    report: dict = {"kind": args.kind, "train": asdict(train_cfg), "rows": int(feats.shape[0])}
    if args.kind == "tree":
        fitted = train_tree(spec, doas, feats, train_cfg, n_jobs=args.jobs)
        target = os.path.join(out, args.name or "tree")
        save_tree(fitted.model, target)
        report["node_accuracy"] = {
            "-".join(map(str, k)) or "root": v for k, v in sorted(fitted.node_accuracy.items())
        }
    elif args.kind == "flat":
        model, result = train_flat_dnn(spec, doas, feats, train_cfg)
        target = os.path.join(out, args.name or "flat")
        save_flat(model, target)
        report["final_accuracy"] = result.final_accuracy
        report["final_loss"] = result.final_loss
    else:
        fitted_q = train_qtdnn(spec, doas, feats, train_cfg, args.min_separation, n_jobs=args.jobs)
        target = os.path.join(out, args.name or f"qtdnn{sources}")
        save_qtdnn(fitted_q.model, target)
        report["skipped_nodes"] = [
            ["-".join(map(str, p)) or "root" for p in r.skipped_nodes]
            for r in fitted_q.branch_results
        ]
    with open(os.path.join(target, "train_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"saved {args.kind} checkpoint to {target}")
    return 0


def _detect_checkpoint(path: str) -> str:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            return json.load(fh).get("format", "")
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint manifest in {path}: {exc}") from exc


def _estimator_for_checkpoint(path: str):
    fmt = _detect_checkpoint(path)
    if fmt == "tdnn-tree":
        model = load_tree(path)
        return "tdnn", tdnn_estimator(model), model.spec, 1
    if fmt == "flat-dnn":
        model = load_flat(path)
        return "dnn", flat_estimator(model), model.spec, 1
    if fmt == "qtdnn":
        model = load_qtdnn(path)
        return "qtdnn", qtdnn_estimator(model), model.spec, model.num_sources
    raise ConfigError(f"{path}: unrecognized checkpoint format {fmt!r}")


def _cmd_eval(args) -> int:
    payload = _load_config_file(args.config)
    name, estimator, spec, sources = _estimator_for_checkpoint(args.model)
    cfg, _ = _resolve_profile(args, payload)
    if spec.input_dim != cfg.num_elements * (cfg.num_elements - 1):
        raise ConfigError("checkpoint feature size does not match the profile's array")
    config = _experiment_config(args, payload, num_sources=sources)
    estimators = {name: estimator}
    if args.with_oracle:
        estimators["oracle"] = oracle_estimator(spec)
    if args.with_root_music:
        estimators["root-music"] = root_music_estimator(cfg)
    result = run_snr_sweep(cfg, config, estimators, include_crlb=args.with_crlb)
    _print_summary(result)
    if args.out:
        out = _out_dir(args)
        emit_results(os.path.join(out, "eval.csv"), result.rows, config)
        _write_manifest(out, "eval_manifest.json", config, result)
    return 0


def _cmd_bench_snr(args) -> int:
    payload = _load_config_file(args.config)
    cfg, spec = _resolve_profile(args, payload)
    config = _experiment_config(args, payload, num_sources=1)
    estimators = {}
    if args.tree:
        model = load_tree(args.tree)
        estimators["tdnn"] = tdnn_estimator(model)
        spec = model.spec
    if args.flat:
        flat = load_flat(args.flat)
        estimators["dnn"] = flat_estimator(flat)
        spec = flat.spec
    if args.with_oracle:
        estimators["oracle"] = oracle_estimator(spec)
    if args.with_root_music:
        estimators["root-music"] = root_music_estimator(cfg)
    if not estimators and not args.with_crlb:
        raise ConfigError("no methods selected; pass --tree/--flat or --with-* flags")
    result = run_snr_sweep(cfg, config, estimators, include_crlb=args.with_crlb)
    out = _out_dir(args)
    emit_results(os.path.join(out, "snr_results.csv"), result.rows, config)
    emit_plot_data(os.path.join(out, "snr_plot.csv"), aggregate_plot_data(result.rows), config)
    _write_manifest(out, "snr_manifest.json", config, result)
    _print_summary(result)
    print(f"wrote {out}/snr_results.csv")
    return 0


def _parse_model_map(pairs, label: str) -> dict[int, str]:
    out: dict[int, str] = {}
    for pair in pairs or []:
        key, _, path = pair.partition("=")
        try:
            q = int(key)
        except ValueError as exc:
            raise ConfigError(f"bad {label} mapping {pair!r}; expected Q=PATH") from exc
        if not path:
            raise ConfigError(f"bad {label} mapping {pair!r}; expected Q=PATH")
        out[q] = path
    return out


def _cmd_bench_q(args) -> int:
    payload = _load_config_file(args.config)
    cfg, spec = _resolve_profile(args, payload)
    config = _experiment_config(args, payload)
    qtdnn_map = _parse_model_map(args.qtdnn, "--qtdnn")
    flat_map = _parse_model_map(args.flat, "--flat")
    q_values = args.q_values and _ints_csv(args.q_values) or sorted(
        set(qtdnn_map) | set(flat_map)
    )
    if not q_values:
        raise ConfigError("no source counts to sweep; pass --q or model mappings")
    estimators_per_q: dict[int, dict] = {}
    for q in q_values:
        entry: dict = {}
        if q in qtdnn_map:
            model = load_qtdnn(qtdnn_map[q])
            if model.num_sources != q:
                raise ConfigError(f"{qtdnn_map[q]} holds {model.num_sources} branches, not {q}")
            entry["qtdnn"] = qtdnn_estimator(model)
            spec = model.spec
        if q in flat_map:
            flat = load_flat(flat_map[q])
            entry["dnn"] = flat_estimator(flat, q)
            spec = flat.spec
        if args.with_oracle:
            entry["oracle"] = oracle_estimator(spec)
        if args.with_root_music:
            entry["root-music"] = root_music_estimator(cfg)
        if not entry:
            raise ConfigError(f"no methods available for Q={q}")
        estimators_per_q[q] = entry
    result = run_q_sweep(cfg, config, estimators_per_q, include_crlb=args.with_crlb)
    out = _out_dir(args)
    emit_results(os.path.join(out, "q_results.csv"), result.rows, config)
    emit_plot_data(
        os.path.join(out, "q_plot.csv"),
        aggregate_plot_data(result.rows, x_field="num_sources"),
        config,
    )
    _write_manifest(out, "q_manifest.json", config, result)
    _print_summary(result)
    print(f"wrote {out}/q_results.csv")
    return 0


def _cmd_bench_classes(args) -> int:
    payload = _load_config_file(args.config)
    cfg, spec = _resolve_profile(args, payload)
    train_cfg = _train_config(args, payload)
    grid = _grid_config(args, payload)
    counts = _ints_csv(args.counts) if args.counts else (12, 30, 60, 120)
    tree_specs = {}
    if args.with_trees:
        tree_specs["tree2"] = TreeSpec(
            (12, 10), spec.theta_min, spec.theta_max, spec.hidden_sizes, spec.input_dim
        )
        tree_specs["tree3"] = TreeSpec(
            (6, 5, 4), spec.theta_min, spec.theta_max, spec.hidden_sizes, spec.input_dim
        )
    rows = run_classes_sweep(
        cfg, spec, counts, train_cfg, grid, seed=args.seed or 0, tree_specs=tree_specs
    )
    out = _out_dir(args)
    path = os.path.join(out, "classes.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# version: {__version__}\n")
        fh.write("series,label,train_accuracy,val_accuracy\n")
        for row in rows:
            fh.write(
                f"{row['series']},{row['label']},{row['train_accuracy']!r},"
                f"{row['val_accuracy']!r}\n"
            )
    for row in rows:
        print(
            f"{row['series']:>8} {row['label']:>8}  train={row['train_accuracy']:.4f}"
            f"  val={row['val_accuracy']:.4f}"
        )
    print(f"wrote {path}")
    return 0


def _cmd_inspect_model(args) -> int:
    fmt = _detect_checkpoint(args.path)
    info: dict = {"format": fmt}
    if fmt == "tdnn-tree":
        model = load_tree(args.path)
        info["spec"] = asdict(model.spec)
        info["nodes"] = len(model.nodes)
        info["parameters"] = sum(n.num_parameters for n in model.nodes.values())
        info["complexity"] = complexity_report(model.spec)
    elif fmt == "flat-dnn":
        flat = load_flat(args.path)
        info["spec"] = asdict(flat.spec)
        info["parameters"] = flat.net.num_parameters
        info["layer_sizes"] = list(flat.net.layer_sizes)
    elif fmt == "qtdnn":
        qmodel = load_qtdnn(args.path)
        info["spec"] = asdict(qmodel.spec)
        info["num_sources"] = qmodel.num_sources
        info["nodes_per_branch"] = len(qmodel.branches[0].nodes)
        info["parameters"] = sum(
            n.num_parameters for b in qmodel.branches for n in b.nodes.values()
        )
        info["complexity"] = complexity_report(qmodel.spec)
    else:
        raise ConfigError(f"{args.path}: unrecognized checkpoint format {fmt!r}")
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser, *, seed=True, out=True, config=True, profile=True):
    if config:
        parser.add_argument("--config", help="JSON configuration file")
    if profile:
        parser.add_argument("--profile", choices=PROFILE_NAMES, help="array/tree profile")
    if seed:
        parser.add_argument("--seed", type=int, help="master seed")
    if out:
        parser.add_argument("--out", help="output directory (default: $TREEDOA_OUT or .)")


def _add_grid_args(parser):
    parser.add_argument("--per-cell", dest="per_cell", type=int, help="training angles per leaf cell")
    parser.add_argument("--noisy-snr", dest="noisy_snr", help="comma list of SNRs for sampled training copies")
    parser.add_argument("--snapshots", type=int, help="snapshots per sampled covariance")


def _add_train_args(parser):
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--optimizer", choices=("adam", "sgd"))
    parser.add_argument("--loss", choices=("bce", "cce"))
    parser.add_argument("--patience", type=int)
    parser.add_argument("--target-accuracy", dest="target_accuracy", type=float)
    parser.add_argument("--jobs", type=int, default=1, help="parallel node training threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treedoa", description=__doc__)
    parser.add_argument("--version", action="version", version=f"treedoa {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[], help="generate a training dataset")
    _add_common(p)
    _add_grid_args(p)
    p.add_argument("--sources", type=int, help="emitters per scene (default 1)")
    p.add_argument("--tuples", type=int, help="multi-source tuple count")
    p.add_argument("--min-separation", dest="min_separation", type=float)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    _add_grid_args(p)
    _add_train_args(p)
    p.add_argument("--kind", choices=("tree", "flat", "qtdnn"), required=True)
    p.add_argument("--data", help="dataset .npz from gen-data (default: generate)")
    p.add_argument("--name", help="checkpoint directory name")
    p.add_argument("--sources", type=int, help="emitters (qtdnn only)")
    p.add_argument("--tuples", type=int)
    p.add_argument("--min-separation", dest="min_separation", type=float)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over an SNR sweep")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--snr", help="comma list of SNR points")
    p.add_argument("--trials", type=int)
    p.add_argument("--snapshots", type=int)
    p.add_argument("--theta-mode", dest="theta_mode", choices=("random", "fixed"))
    p.add_argument("--theta", help="comma list of fixed DOAs")
    p.add_argument("--min-separation", dest="min_separation", type=float)
    p.add_argument("--with-oracle", action="store_true")
    p.add_argument("--with-root-music", action="store_true")
    p.add_argument("--with-crlb", action="store_true")
    p.set_defaults(func=_cmd_eval)

    bench = sub.add_parser("bench", help="benchmark sweeps")
    bench_sub = bench.add_subparsers(dest="bench_command")

    p = bench_sub.add_parser("snr", help="RMSE versus SNR")
    _add_common(p)
    p.add_argument("--tree", help="tree checkpoint directory")
    p.add_argument("--flat", help="flat classifier checkpoint directory")
    p.add_argument("--snr", help="comma list of SNR points")
    p.add_argument("--trials", type=int)
    p.add_argument("--snapshots", type=int)
    p.add_argument("--theta-mode", dest="theta_mode", choices=("random", "fixed"))
    p.add_argument("--theta", help="comma list of fixed DOAs")
    p.add_argument("--with-oracle", action="store_true")
    p.add_argument("--with-root-music", action="store_true")
    p.add_argument("--with-crlb", action="store_true")
    p.set_defaults(func=_cmd_bench_snr)

    p = bench_sub.add_parser("q", help="RMSE versus source count")
    _add_common(p)
    p.add_argument("--qtdnn", action="append", metavar="Q=PATH")
    p.add_argument("--flat", action="append", metavar="Q=PATH")
    p.add_argument("--q", dest="q_values", help="comma list of source counts")
    p.add_argument("--snr", help="operating SNR (first value used)")
    p.add_argument("--trials", type=int)
    p.add_argument("--snapshots", type=int)
    p.add_argument("--min-separation", dest="min_separation", type=float)
    p.add_argument("--with-oracle", action="store_true")
    p.add_argument("--with-root-music", action="store_true")
    p.add_argument("--with-crlb", action="store_true")
    p.set_defaults(func=_cmd_bench_q, theta_mode=None, theta=None)

    p = bench_sub.add_parser("classes", help="accuracy versus output-layer size")
    _add_common(p)
    _add_grid_args(p)
    _add_train_args(p)
    p.add_argument("--counts", help="comma list of class counts")
    p.add_argument("--with-trees", action="store_true", help="add per-node tree accuracies")
    p.set_defaults(func=_cmd_bench_classes)

    inspect = sub.add_parser("inspect", help="inspect artifacts")
    inspect_sub = inspect.add_subparsers(dest="inspect_command")
    p = inspect_sub.add_parser("model", help="summarize a checkpoint")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect_model)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        func = getattr(args, "func", None)
        if func is None:
            parser.print_help(sys.stderr)
            return 1
        return func(args) or 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
