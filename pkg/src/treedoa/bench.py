"""Monte-Carlo benchmark harness: dataset builders, sweeps, and result I/O.

A sweep point draws per-trial scenes (one seed stream per point and trial,
derived from the master seed), synthesizes finite-snapshot covariances, and
hands the same trial to every estimator, so methods are compared on
identical data.  Result tables round-trip losslessly through CSV and every
artifact embeds the resolved configuration and library version.  Wall-clock
timings are kept out of the result table (they live in the run manifest),
so a rerun with the same configuration and seed is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .array_signal import (
    ArrayConfig,
    SourceSet,
    extract_features,
    multi_source_features,
    sample_covariance,
    sampled_features,
    single_source_features,
    synth_snapshots,
)
from .baselines import FlatDnnModel, crlb_stochastic, predict_flat, root_music, train_flat_dnn
from .mlnn import TrainConfig, forward
from .multi import QTdnnModel, predict_multi, sample_training_tuples
from .profiles import PROFILE_NAMES
from .tree import TdnnModel, TreeSpec, cells_of, oracle_quantize, route_predict, train_tree, training_grid

__all__ = [
    "GridConfig",
    "build_single_dataset",
    "build_multi_dataset",
    "ExperimentConfig",
    "Trial",
    "TrialResult",
    "BenchResult",
    "tdnn_estimator",
    "qtdnn_estimator",
    "flat_estimator",
    "oracle_estimator",
    "root_music_estimator",
    "run_snr_sweep",
    "run_q_sweep",
    "run_classes_sweep",
    "RESULT_HEADER",
    "emit_results",
    "load_results",
    "rmse_of_rows",
    "aggregate_plot_data",
    "PLOT_HEADER",
    "emit_plot_data",
]


# ---------------------------------------------------------------------------
# training dataset builders


@dataclass(frozen=True)
class GridConfig:
    """How training features are produced from the leaf grid.

    The base rows are noise-free analytic-covariance features of the grid
    angles.  Each entry of noisy_snr_db appends one finite-snapshot copy of
    the grid sampled at that SNR, which hardens the classifiers against
    sample-covariance jitter.
    """

    per_cell: int = 5
    noisy_snr_db: tuple[float, ...] = ()
    num_snapshots: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "noisy_snr_db", tuple(float(v) for v in self.noisy_snr_db))


def build_single_dataset(
    cfg: ArrayConfig, spec: TreeSpec, grid: GridConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Single-emitter training rows: angles and matching feature vectors."""
    _check_domains(cfg, spec)
    angles = training_grid(spec, grid.per_cell)
    doas = [angles]
    feats = [single_source_features(cfg, angles)]
    for i, snr in enumerate(grid.noisy_snr_db):
        seed = np.random.SeedSequence(entropy=(int(grid.seed), 1, i))
        doas.append(angles)
        feats.append(sampled_features(cfg, angles[:, None], snr, grid.num_snapshots, seed))
    return np.concatenate(doas), np.vstack(feats)


def build_multi_dataset(
    cfg: ArrayConfig,
    spec: TreeSpec,
    num_sources: int,
    num_tuples: int,
    grid: GridConfig,
    min_separation: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-emitter training rows: sorted DOA tuples and shared features."""
    _check_domains(cfg, spec)
    tuples = sample_training_tuples(
        spec,
        num_sources,
        num_tuples,
        min_separation,
        seed=np.random.SeedSequence(entropy=(int(grid.seed), 2)),
    )
    doas = [tuples]
    feats = [multi_source_features(cfg, tuples)]
    for i, snr in enumerate(grid.noisy_snr_db):
        seed = np.random.SeedSequence(entropy=(int(grid.seed), 3, i))
        doas.append(tuples)
        feats.append(sampled_features(cfg, tuples, snr, grid.num_snapshots, seed))
    return np.vstack(doas), np.vstack(feats)


def _check_domains(cfg: ArrayConfig, spec: TreeSpec) -> None:
    if (cfg.theta_min, cfg.theta_max) != (spec.theta_min, spec.theta_max):
        raise ValueError(
            f"array domain [{cfg.theta_min}, {cfg.theta_max}) disagrees with "
            f"tree domain [{spec.theta_min}, {spec.theta_max})"
        )


# ---------------------------------------------------------------------------
# trials and estimators


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings of one benchmark run; embedded in every artifact."""

    profile: str = "desk"
    snr_db: tuple[float, ...] = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0)
    num_snapshots: int = 50
    num_sources: int = 1
    trials: int = 500
    seed: int = 0
    theta_mode: str = "random"
    theta_fixed: tuple[float, ...] = (27.0,)
    min_separation: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "snr_db", tuple(float(v) for v in self.snr_db))
        object.__setattr__(self, "theta_fixed", tuple(float(v) for v in self.theta_fixed))
        if self.profile not in PROFILE_NAMES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {PROFILE_NAMES}")
        if self.trials < 1 or self.num_snapshots < 1 or self.num_sources < 1:
            raise ValueError("trials, num_snapshots and num_sources must be at least 1")
        if self.theta_mode not in ("random", "fixed"):
            raise ValueError(f"unknown theta mode {self.theta_mode!r}")
        if len(self.snr_db) == 0:
            raise ValueError("need at least one SNR point")
        if self.min_separation < 0:
            raise ValueError("min_separation must be non-negative")
        if self.theta_mode == "fixed":
            if len(self.theta_fixed) != self.num_sources:
                raise ValueError(
                    f"fixed mode needs {self.num_sources} angles, got {len(self.theta_fixed)}"
                )
            if any(b <= a for a, b in zip(self.theta_fixed, self.theta_fixed[1:])):
                raise ValueError("fixed angles must be strictly increasing")


@dataclass(frozen=True)
class Trial:
    """Everything an estimator may look at for one Monte-Carlo scene."""

    covariance: np.ndarray
    features: np.ndarray
    theta_true: np.ndarray
    snr_db: float
    num_snapshots: int


Estimator = Callable[[Trial], np.ndarray]


def tdnn_estimator(model: TdnnModel) -> Estimator:
    """Single-emitter estimate through the routing tree."""

    def run(trial: Trial) -> np.ndarray:
        return np.array([route_predict(model, trial.features)[1]])

    return run


def qtdnn_estimator(model: QTdnnModel) -> Estimator:
    def run(trial: Trial) -> np.ndarray:
        return predict_multi(model, trial.features)

    return run


def flat_estimator(model: FlatDnnModel, num_sources: int = 1) -> Estimator:
    def run(trial: Trial) -> np.ndarray:
        return predict_flat(model, trial.features, num_sources)

    return run


def oracle_estimator(spec: TreeSpec) -> Estimator:
    """Error-free classifier chain: quantizes the true DOAs to cell midpoints."""

    def run(trial: Trial) -> np.ndarray:
        return oracle_quantize(spec, trial.theta_true)

    return run


def root_music_estimator(cfg: ArrayConfig) -> Estimator:
    def run(trial: Trial) -> np.ndarray:
        return root_music(trial.covariance, trial.theta_true.size, cfg)

    return run


# ---------------------------------------------------------------------------
# sweep engine


@dataclass
class TrialResult:
    """One estimator's outcome on one trial; maps 1:1 onto a CSV row."""

    method: str
    snr_db: float
    num_snapshots: int
    num_sources: int
    trial: int
    theta_true: tuple[float, ...]
    theta_est: tuple[float, ...]
    error: tuple[float, ...]
    seed: int
    ms: float | None = None


@dataclass
class BenchResult:
    rows: list[TrialResult] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    timing_ms: dict[str, float] = field(default_factory=dict)


def _draw_scene(rng, cfg: ArrayConfig, config: ExperimentConfig) -> np.ndarray:
    if config.theta_mode == "fixed":
        thetas = np.sort(np.asarray(config.theta_fixed, dtype=float))
        if thetas.size != config.num_sources:
            raise ValueError(
                f"theta_fixed has {thetas.size} entries for {config.num_sources} sources"
            )
        return thetas
    for _ in range(10_000):
        thetas = np.sort(rng.uniform(cfg.theta_min, cfg.theta_max, config.num_sources))
        if config.num_sources == 1 or np.all(np.diff(thetas) >= config.min_separation):
            return thetas
    raise RuntimeError(
        f"failed to draw {config.num_sources} DOAs separated by {config.min_separation}"
    )


def _summary_row(method: str, x: float, per_trial_mse: np.ndarray) -> dict:
    n = per_trial_mse.size
    rmse = float(np.sqrt(per_trial_mse.mean()))
    if n > 1 and rmse > 0:
        stderr = float(np.std(per_trial_mse, ddof=1) / np.sqrt(n) / (2.0 * rmse))
    else:
        stderr = 0.0
    return {"method": method, "x": x, "rmse": rmse, "stderr": stderr, "n": n}


def _run_points(
    cfg: ArrayConfig,
    config: ExperimentConfig,
    points: list[dict],
    include_crlb: bool,
) -> BenchResult:
    result = BenchResult()
    for point_idx, point in enumerate(points):
        snr = point["snr_db"]
        num_sources = point["num_sources"]
        estimators: dict[str, Estimator] = point["estimators"]
        point_config = _point_config(config, num_sources)
        per_method_mse: dict[str, list[float]] = {name: [] for name in estimators}
        crlb_values: list[float] = []
        for trial_idx in range(config.trials):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=(int(config.seed), point_idx, trial_idx))
            )
            thetas = _draw_scene(rng, cfg, point_config)
            src = SourceSet(tuple(thetas), (1.0,) * num_sources, 10.0 ** (-snr / 10.0))
            snapshots = synth_snapshots(cfg, src, config.num_snapshots, rng)
            cov = sample_covariance(snapshots)
            trial = Trial(cov, extract_features(cov), thetas, snr, config.num_snapshots)
            for name, estimator in estimators.items():
                started = time.perf_counter()
                try:
                    est = np.sort(np.asarray(estimator(trial), dtype=float))
                except Exception as exc:  # survive and report per-method failures
                    result.failures.append(
                        {"method": name, "x": point["x"], "trial": trial_idx, "error": str(exc)}
                    )
                    continue
                finally:
                    elapsed = (time.perf_counter() - started) * 1e3
                    result.timing_ms[name] = result.timing_ms.get(name, 0.0) + elapsed
                if est.shape != thetas.shape:
                    result.failures.append(
                        {
                            "method": name,
                            "x": point["x"],
                            "trial": trial_idx,
                            "error": f"estimator returned shape {est.shape}",
                        }
                    )
                    continue
                err = est - thetas
                result.rows.append(
                    TrialResult(
                        method=name,
                        snr_db=snr,
                        num_snapshots=config.num_snapshots,
                        num_sources=num_sources,
                        trial=trial_idx,
                        theta_true=tuple(float(v) for v in thetas),
                        theta_est=tuple(float(v) for v in est),
                        error=tuple(float(v) for v in err),
                        seed=config.seed,
                    )
                )
                per_method_mse[name].append(float(np.mean(err**2)))
            if include_crlb:
                bound = crlb_stochastic(cfg, src, config.num_snapshots)
                per_source = np.sqrt(np.diag(bound))
                crlb_values.append(float(np.mean(np.diag(bound))))
                # the bound is a pseudo-method row so plots pick up the curve;
                # its "error" is the per-source bound itself
                result.rows.append(
                    TrialResult(
                        method="crlb",
                        snr_db=snr,
                        num_snapshots=config.num_snapshots,
                        num_sources=num_sources,
                        trial=trial_idx,
                        theta_true=tuple(float(v) for v in thetas),
                        theta_est=tuple(float(v) for v in thetas),
                        error=tuple(float(v) for v in per_source),
                        seed=config.seed,
                    )
                )
        for name, mses in per_method_mse.items():
            if mses:
                result.summary.append(_summary_row(name, point["x"], np.asarray(mses)))
        if include_crlb and crlb_values:
            result.summary.append(_summary_row("crlb", point["x"], np.asarray(crlb_values)))
    return result


def _point_config(config: ExperimentConfig, num_sources: int) -> ExperimentConfig:
    if num_sources == config.num_sources:
        return config
    fixed = config.theta_fixed
    if config.theta_mode == "fixed" and len(fixed) != num_sources:
        raise ValueError("fixed-theta mode cannot vary the source count")
    return ExperimentConfig(
        profile=config.profile,
        snr_db=config.snr_db,
        num_snapshots=config.num_snapshots,
        num_sources=num_sources,
        trials=config.trials,
        seed=config.seed,
        theta_mode=config.theta_mode,
        theta_fixed=fixed,
        min_separation=config.min_separation,
    )


def run_snr_sweep(
    cfg: ArrayConfig,
    config: ExperimentConfig,
    estimators: dict[str, Estimator],
    include_crlb: bool = False,
) -> BenchResult:
    """RMSE versus SNR: every method sees the same trials at each SNR point."""
    points = [
        {"x": snr, "snr_db": snr, "num_sources": config.num_sources, "estimators": estimators}
        for snr in config.snr_db
    ]
    return _run_points(cfg, config, points, include_crlb)


def run_q_sweep(
    cfg: ArrayConfig,
    config: ExperimentConfig,
    estimators_per_q: dict[int, dict[str, Estimator]],
    include_crlb: bool = False,
) -> BenchResult:
    """RMSE versus source count at a fixed SNR (the first entry of snr_db)."""
    snr = config.snr_db[0]
    points = [
        {"x": float(q), "snr_db": snr, "num_sources": q, "estimators": est}
        for q, est in sorted(estimators_per_q.items())
    ]
    return _run_points(cfg, config, points, include_crlb)


def run_classes_sweep(
    cfg: ArrayConfig,
    spec: TreeSpec,
    class_counts,
    train_cfg: TrainConfig,
    grid: GridConfig,
    val_draws: int = 2000,
    seed: int = 0,
    tree_specs: dict[str, TreeSpec] | None = None,
) -> list[dict]:
    """Classifier accuracy versus output-layer size on identical data budgets.

    Trains one flat classifier per class count over the shared domain, all
    on the same training rows, and reports final training accuracy plus
    accuracy on freshly drawn noise-free validation angles.  When tree_specs
    is given, each tree is trained on the same rows and its per-node
    training accuracies are appended as extra result rows.
    """
    doas, feats = build_single_dataset(cfg, spec, grid)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 4)))
    val_angles = rng.uniform(spec.theta_min, spec.theta_max, val_draws)
    val_feats = single_source_features(cfg, val_angles)
    rows: list[dict] = []
    for count in class_counts:
        flat_spec = TreeSpec(
            fanouts=(int(count),),
            theta_min=spec.theta_min,
            theta_max=spec.theta_max,
            hidden_sizes=spec.hidden_sizes,
            input_dim=spec.input_dim,
        )
        model, fitted = train_flat_dnn(flat_spec, doas, feats, train_cfg)
        val_pred = np.argmax(forward(model.net, val_feats), axis=1)
        val_acc = float(np.mean(val_pred == cells_of(flat_spec, val_angles)))
        rows.append(
            {
                "series": "flat",
                "label": str(int(count)),
                "train_accuracy": fitted.final_accuracy,
                "val_accuracy": val_acc,
            }
        )
    for name, tree_spec in (tree_specs or {}).items():
        fitted_tree = train_tree(tree_spec, doas, feats, train_cfg)
        for prefix, acc in sorted(fitted_tree.node_accuracy.items()):
            label = "root" if not prefix else "-".join(str(v) for v in prefix)
            rows.append(
                {
                    "series": name,
                    "label": label,
                    "train_accuracy": acc,
                    "val_accuracy": float("nan"),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# result I/O

RESULT_HEADER = (
    "method",
    "snr_db",
    "T",
    "Q",
    "trial",
    "theta_true",
    "theta_est",
    "error",
    "seed",
    "ms",
)

PLOT_HEADER = ("series", "x", "mean", "stderr", "n")


def _fmt(value: float) -> str:
    return repr(float(value))


def _fmt_list(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def _parse_list(text: str) -> tuple[float, ...]:
    if not text:
        return ()
    return tuple(float(v) for v in text.split(";"))


def config_json(config) -> str:
    """Canonical one-line JSON of a config dataclass, stable across runs."""
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def emit_results(path, rows: list[TrialResult], config) -> None:
    """Write trial rows as CSV with the resolved config and version embedded.

    The ms column stays empty: wall-clock timing lives in the run manifest
    so identical configurations always emit identical bytes.
    """
    buf = io.StringIO()
    buf.write(f"# version: {__version__}\n")
    buf.write(f"# config: {config_json(config)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_HEADER)
    for r in rows:
        writer.writerow(
            [
                r.method,
                _fmt(r.snr_db),
                r.num_snapshots,
                r.num_sources,
                r.trial,
                _fmt_list(r.theta_true),
                _fmt_list(r.theta_est),
                _fmt_list(r.error),
                r.seed,
                "" if r.ms is None else _fmt(r.ms),
            ]
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def load_results(path) -> tuple[list[TrialResult], dict]:
    """Read a result CSV back; rows round-trip losslessly through repr."""
    meta: dict = {}
    body: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, value = line[2:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                body.append(line)
    if "config" in meta:
        meta["config"] = json.loads(meta["config"])
    reader = csv.reader(body)
    header = tuple(next(reader, ()))
    if header != RESULT_HEADER:
        raise ValueError(f"{path}: unexpected result header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        rows.append(
            TrialResult(
                method=rec[0],
                snr_db=float(rec[1]),
                num_snapshots=int(rec[2]),
                num_sources=int(rec[3]),
                trial=int(rec[4]),
                theta_true=_parse_list(rec[5]),
                theta_est=_parse_list(rec[6]),
                error=_parse_list(rec[7]),
                seed=int(rec[8]),
                ms=float(rec[9]) if rec[9] else None,
            )
        )
    return rows, meta


def rmse_of_rows(rows: list[TrialResult]) -> float:
    """RMSE over every error component of the given rows."""
    errors = np.concatenate([np.asarray(r.error) for r in rows])
    return float(np.sqrt(np.mean(errors**2)))


def aggregate_plot_data(rows: list[TrialResult], x_field: str = "snr_db") -> list[dict]:
    """Per-series (x, mean, stderr, n) of the per-trial RMS error.

    The plotted value is the per-trial root-mean-square error over sources;
    stderr is the sample standard deviation of those values over sqrt(n).
    """
    groups: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        x = float(getattr(r, x_field)) if x_field != "num_sources" else float(r.num_sources)
        err = np.asarray(r.error)
        groups.setdefault((r.method, x), []).append(float(np.sqrt(np.mean(err**2))))
    out = []
    for (method, x), values in sorted(groups.items()):
        arr = np.asarray(values)
        stderr = float(np.std(arr, ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        out.append(
            {
                "series": method,
                "x": x,
                "mean": float(arr.mean()),
                "stderr": stderr,
                "n": int(arr.size),
            }
        )
    return out


def emit_plot_data(path, aggregated: list[dict], config) -> None:
    """Write aggregated plot series with the same embedded metadata."""
    buf = io.StringIO()
    buf.write(f"# version: {__version__}\n")
    buf.write(f"# config: {config_json(config)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLOT_HEADER)
    for row in aggregated:
        writer.writerow(
            [row["series"], _fmt(row["x"]), _fmt(row["mean"]), _fmt(row["stderr"]), row["n"]]
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
