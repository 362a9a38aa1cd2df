"""Multi-emitter extension: one routing tree per source rank.

A scene with Q emitters produces one shared feature vector; branch q learns
the label path of the q-th smallest DOA, so the combined model is Q
structurally identical trees trained on rank-relabeled views of the same
data.  Estimates are the per-branch decodes, reported in ascending order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .mlnn import TrainConfig
from .tree import (
    TdnnModel,
    TreeSpec,
    TreeTrainResult,
    load_tree,
    route_predict,
    save_tree,
    spec_from_dict,
    spec_to_dict,
    train_tree,
)

__all__ = [
    "QTdnnModel",
    "QTdnnTrainResult",
    "validate_tuples",
    "sample_training_tuples",
    "build_multi_training_set",
    "train_qtdnn",
    "predict_multi",
    "multi_rmse",
    "save_qtdnn",
    "load_qtdnn",
]


@dataclass
class QTdnnModel:
    """Q rank-ordered branches sharing one tree geometry."""

    branches: list[TdnnModel]

    def __post_init__(self) -> None:
        if len(self.branches) < 1:
            raise ValueError("need at least one branch")
        specs = {b.spec for b in self.branches}
        if len(specs) != 1:
            raise ValueError("all branches must share the same tree spec")

    @property
    def spec(self) -> TreeSpec:
        return self.branches[0].spec

    @property
    def num_sources(self) -> int:
        return len(self.branches)


def default_separation(spec: TreeSpec) -> float:
    """Minimum DOA separation used for training tuples: two leaf cells."""
    return 2.0 * spec.leaf_width


def validate_tuples(spec: TreeSpec, doa_tuples, min_separation: float | None = None) -> np.ndarray:
    """Check (n, Q) DOA tuples: in-domain, ascending, adequately separated."""
    if min_separation is None:
        min_separation = default_separation(spec)
    tuples = np.atleast_2d(np.asarray(doa_tuples, dtype=float))
    if tuples.ndim != 2 or tuples.shape[1] < 1:
        raise ValueError(f"expected an (n, Q) tuple array, got shape {tuples.shape}")
    if np.any(tuples < spec.theta_min) or np.any(tuples >= spec.theta_max):
        raise ValueError("tuple DOAs leave the domain")
    if tuples.shape[1] > 1:
        gaps = np.diff(tuples, axis=1)
        if np.any(gaps <= 0):
            raise ValueError("tuple DOAs must be strictly increasing")
        if np.any(gaps < min_separation):
            worst = float(gaps.min())
            raise ValueError(
                f"tuple separation {worst:.4f} below the minimum {min_separation:.4f}"
            )
    return tuples


def _rank_window(spec: TreeSpec, rank: int, num_sources: int, min_separation: float):
    """Open interval of angles reachable by the given rank under the separation rule."""
    lo = spec.theta_min + rank * min_separation
    hi = spec.theta_max - (num_sources - 1 - rank) * min_separation
    return lo, hi


def sample_training_tuples(
    spec: TreeSpec,
    num_sources: int,
    num_tuples: int,
    min_separation: float | None = None,
    seed=0,
) -> np.ndarray:
    """Sorted DOA tuples stratified over (source rank, leaf cell) anchors.

    Tuple i anchors rank (i mod Q) inside a leaf cell that cycles over the
    cells reachable by that rank, then fills the remaining ranks uniformly
    inside their feasible windows.  Every reachable (rank, cell) pair is
    therefore covered about num_tuples / (Q * N) times.  The default count
    elsewhere is 50 tuples per leaf cell.
    """
    if num_sources < 1:
        raise ValueError(f"need at least one source, got {num_sources}")
    if num_tuples < 1:
        raise ValueError(f"need at least one tuple, got {num_tuples}")
    if min_separation is None:
        min_separation = default_separation(spec)
    if (num_sources - 1) * min_separation >= spec.span:
        raise ValueError(
            f"{num_sources} sources with separation {min_separation} cannot fit "
            f"in a {spec.span} degree domain"
        )
    rng = np.random.default_rng(seed)
    width = spec.leaf_width
    # leaf cells whose interval intersects each rank's feasible window
    anchor_cells: list[np.ndarray] = []
    for rank in range(num_sources):
        lo, hi = _rank_window(spec, rank, num_sources, min_separation)
        cells = np.arange(spec.num_cells)
        lefts = spec.theta_min + cells * width
        rights = lefts + width
        anchor_cells.append(cells[(rights > lo) & (lefts < hi)])

    out = np.empty((num_tuples, num_sources))
    counters = [0] * num_sources
    for i in range(num_tuples):
        rank = i % num_sources
        cells = anchor_cells[rank]
        cell = int(cells[counters[rank] % cells.size])
        counters[rank] += 1
        lo, hi = _rank_window(spec, rank, num_sources, min_separation)
        left = max(spec.theta_min + cell * width, lo)
        right = min(spec.theta_min + (cell + 1) * width, hi)
        anchor = rng.uniform(left, right)
        row = np.empty(num_sources)
        row[rank] = anchor
        for k in range(rank - 1, -1, -1):  # ranks below the anchor
            low = spec.theta_min + k * min_separation
            high = row[k + 1] - min_separation
            row[k] = rng.uniform(low, high) if high > low else high
        for k in range(rank + 1, num_sources):  # ranks above the anchor
            low = row[k - 1] + min_separation
            high = spec.theta_max - (num_sources - 1 - k) * min_separation
            row[k] = rng.uniform(low, high) if high > low else low
        out[i] = row
    return validate_tuples(spec, out, min_separation)


def build_multi_training_set(
    spec: TreeSpec,
    doa_tuples,
    features,
    min_separation: float | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-branch training views of a shared multi-source dataset.

    Branch q trains on (angles of rank q, features); with one source this is
    exactly the single-tree pairing.  Tuples are validated (ascending,
    in-domain, separated) before the views are taken.
    """
    tuples = validate_tuples(spec, doa_tuples, min_separation)
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] != tuples.shape[0]:
        raise ValueError(f"tuples {tuples.shape} and features {feats.shape} do not align")
    return [(tuples[:, q].copy(), feats) for q in range(tuples.shape[1])]


@dataclass
class QTdnnTrainResult:
    model: QTdnnModel
    branch_results: list[TreeTrainResult] = field(default_factory=list)


def train_qtdnn(
    spec: TreeSpec,
    doa_tuples,
    features,
    cfg: TrainConfig,
    min_separation: float | None = None,
    n_jobs: int = 1,
) -> QTdnnTrainResult:
    """Train one branch per source rank on rank-relabeled shared features.

    Nodes whose interval is unreachable by their branch's rank (the extreme
    cells, squeezed out by the separation rule) receive no data; they are
    left freshly initialized and listed in the branch result.
    """
    views = build_multi_training_set(spec, doa_tuples, features, min_separation)
    branch_results: list[TreeTrainResult] = []
    for q, (angles, feats) in enumerate(views):
        branch_seed = int(
            np.random.SeedSequence(entropy=(int(cfg.seed), 104729, q)).generate_state(
                1, dtype=np.uint64
            )[0]
        )
        branch_cfg = replace(cfg, seed=branch_seed)
        branch_results.append(
            train_tree(spec, angles, feats, branch_cfg, on_empty="skip", n_jobs=n_jobs)
        )
    model = QTdnnModel([r.model for r in branch_results])
    return QTdnnTrainResult(model, branch_results)


def predict_multi(model: QTdnnModel, features) -> np.ndarray:
    """One angle estimate per branch, returned in ascending order."""
    estimates = [route_predict(branch, features)[1] for branch in model.branches]
    return np.sort(np.asarray(estimates))


def multi_rmse(true_tuples, est_tuples) -> float:
    """RMSE after pairing both sides rank by rank in ascending order."""
    t = np.sort(np.atleast_2d(np.asarray(true_tuples, dtype=float)), axis=1)
    e = np.sort(np.atleast_2d(np.asarray(est_tuples, dtype=float)), axis=1)
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {e.shape}")
    return float(np.sqrt(np.mean((t - e) ** 2)))


_QTDNN_FORMAT = "qtdnn"
_QTDNN_VERSION = 1


def save_qtdnn(model: QTdnnModel, directory) -> None:
    """Write a branch-per-subdirectory checkpoint with a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    names = [f"branch_{q}" for q in range(model.num_sources)]
    manifest = {
        "format": _QTDNN_FORMAT,
        "version": _QTDNN_VERSION,
        "num_sources": model.num_sources,
        "spec": spec_to_dict(model.spec),
        "branches": names,
    }
    for name, branch in zip(names, model.branches):
        save_tree(branch, os.path.join(directory, name))
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_qtdnn(directory) -> QTdnnModel:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{directory}: unreadable checkpoint manifest ({exc})") from exc
    if manifest.get("format") != _QTDNN_FORMAT:
        raise ValueError(f"{directory}: not a multi-emitter checkpoint")
    if manifest.get("version") != _QTDNN_VERSION:
        raise ValueError(
            f"{directory}: unsupported checkpoint version {manifest.get('version')}"
        )
    spec = spec_from_dict(manifest.get("spec", {}))
    branches = []
    for name in manifest.get("branches", []):
        branch = load_tree(os.path.join(directory, name))
        if branch.spec != spec:
            raise ValueError(f"{directory}: branch {name} disagrees with the manifest spec")
        branches.append(branch)
    if len(branches) != manifest.get("num_sources"):
        raise ValueError(f"{directory}: branch count does not match the manifest")
    return QTdnnModel(branches)
