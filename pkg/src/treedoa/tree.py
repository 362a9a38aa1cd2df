"""Hierarchical interval classifier over a one-dimensional angle domain.

The half-open domain [theta_min, theta_max) splits recursively: level h fans
every surviving interval into fanouts[h-1] children, so a root-to-leaf path
of per-level child picks addresses one of prod(fanouts) leaf cells.  Each
interior position owns a small classifier net; decoding a feature vector
runs exactly one net per level and returns the midpoint of the selected
leaf cell.  Labels are 0-based throughout.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .mlnn import MlnnModel, TrainConfig, load_model, new_model, predict_class, save_model, train

__all__ = [
    "TreeSpec",
    "level_widths",
    "node_prefixes",
    "cell_of",
    "cells_of",
    "cell_to_labels",
    "labels_to_cell",
    "doa_to_labels",
    "labels_to_doa",
    "labels_matrix",
    "oracle_quantize",
    "quantization_floor",
    "training_grid",
    "build_node_training_set",
    "TdnnModel",
    "TreeTrainResult",
    "train_tree",
    "route_predict",
    "complexity_report",
    "save_tree",
    "load_tree",
]


@dataclass(frozen=True)
class TreeSpec:
    """Geometry of the classifier tree.

    fanouts[h-1] is the number of children L_h at level h (1-based levels);
    the leaf grid has prod(fanouts) cells of equal width.  input_dim is the
    feature length every node net consumes, hidden_sizes the shared hidden
    layer widths.
    """

    fanouts: tuple[int, ...]
    theta_min: float = -60.0
    theta_max: float = 60.0
    hidden_sizes: tuple[int, ...] = (128, 64, 32)
    input_dim: int = 240

    def __post_init__(self) -> None:
        object.__setattr__(self, "fanouts", tuple(int(v) for v in self.fanouts))
        object.__setattr__(self, "hidden_sizes", tuple(int(v) for v in self.hidden_sizes))
        if len(self.fanouts) == 0:
            raise ValueError("a tree needs at least one level")
        if any(f < 2 for f in self.fanouts):
            raise ValueError(f"every fanout must be at least 2, got {self.fanouts}")
        if not self.theta_min < self.theta_max:
            raise ValueError(f"empty domain [{self.theta_min}, {self.theta_max})")
        if len(self.hidden_sizes) == 0 or any(s < 1 for s in self.hidden_sizes):
            raise ValueError(f"invalid hidden sizes {self.hidden_sizes}")
        if self.input_dim < 1:
            raise ValueError(f"input dimension must be positive, got {self.input_dim}")

    @property
    def depth(self) -> int:
        return len(self.fanouts)

    @property
    def num_cells(self) -> int:
        return math.prod(self.fanouts)

    @property
    def span(self) -> float:
        return self.theta_max - self.theta_min

    @property
    def leaf_width(self) -> float:
        return self.span / self.num_cells

    @property
    def group_counts(self) -> tuple[int, ...]:
        """Number of nodes G_h per level: G_1 = 1, G_(h+1) = G_h * L_h."""
        return tuple(math.prod(self.fanouts[:h]) for h in range(self.depth))

    @property
    def num_nodes(self) -> int:
        return sum(self.group_counts)

    def node_layer_sizes(self, level: int) -> tuple[int, ...]:
        """Layer size vector of a node net at the given 1-based level."""
        if not 1 <= level <= self.depth:
            raise ValueError(f"level {level} outside 1..{self.depth}")
        return (self.input_dim, *self.hidden_sizes, self.fanouts[level - 1])


def level_widths(spec: TreeSpec) -> np.ndarray:
    """Interval width resolved at each level: span / (G_h * L_h)."""
    return np.array([spec.span / math.prod(spec.fanouts[:h]) for h in range(1, spec.depth + 1)])


def quantization_floor(spec: TreeSpec) -> float:
    """RMSE of an ideal classifier chain: leaf_width / sqrt(12)."""
    return spec.leaf_width / math.sqrt(12.0)


def node_prefixes(spec: TreeSpec):
    """All node addresses, level by level; a length-k prefix is a level-(k+1) node."""
    for h in range(spec.depth):
        yield from itertools.product(*(range(f) for f in spec.fanouts[:h]))


def cells_of(spec: TreeSpec, thetas_deg) -> np.ndarray:
    """Leaf cell index of each angle in the half-open domain."""
    t = np.asarray(thetas_deg, dtype=float)
    if np.any(t < spec.theta_min) or np.any(t >= spec.theta_max):
        bad = t[(t < spec.theta_min) | (t >= spec.theta_max)]
        raise ValueError(
            f"angles {bad[:5]} leave the domain [{spec.theta_min}, {spec.theta_max})"
        )
    idx = np.floor((t - spec.theta_min) / spec.leaf_width).astype(int)
    # rounding at the far boundary may push an in-domain angle one cell over
    return np.minimum(idx, spec.num_cells - 1)


def cell_of(spec: TreeSpec, theta_deg: float) -> int:
    return int(cells_of(spec, theta_deg))


def cell_to_labels(spec: TreeSpec, cell: int) -> tuple[int, ...]:
    """Mixed-radix digits of a leaf cell index, most significant level first."""
    if not 0 <= cell < spec.num_cells:
        raise ValueError(f"cell {cell} outside 0..{spec.num_cells - 1}")
    labels = []
    rem = int(cell)
    for h in range(spec.depth):
        stride = math.prod(spec.fanouts[h + 1 :])
        labels.append(rem // stride)
        rem %= stride
    return tuple(labels)


def labels_to_cell(spec: TreeSpec, labels) -> int:
    labels = _check_labels(spec, labels)
    cell = 0
    for lab, fan in zip(labels, spec.fanouts):
        cell = cell * fan + lab
    return cell


def _check_labels(spec: TreeSpec, labels) -> tuple[int, ...]:
    labels = tuple(int(v) for v in labels)
    if len(labels) != spec.depth:
        raise ValueError(f"expected {spec.depth} labels, got {len(labels)}")
    for lab, fan in zip(labels, spec.fanouts):
        if not 0 <= lab < fan:
            raise ValueError(f"label {lab} outside 0..{fan - 1} in {labels}")
    return labels


def doa_to_labels(spec: TreeSpec, theta_deg: float) -> tuple[int, ...]:
    """Per-level child picks of the leaf cell containing theta_deg.

    Rejects angles outside the half-open domain.
    """
    return cell_to_labels(spec, cell_of(spec, theta_deg))


def labels_to_doa(spec: TreeSpec, labels, mode: str = "midpoint") -> float:
    """Angle encoded by a label path.

    "midpoint" (the default decoder everywhere) returns the center of the
    selected leaf cell; "edge" returns its right boundary instead.
    """
    labels = _check_labels(spec, labels)
    widths = level_widths(spec)
    theta = spec.theta_min
    for lab, width in zip(labels, widths):
        theta = theta + lab * width
    if mode == "midpoint":
        return theta + widths[-1] / 2.0
    if mode == "edge":
        return theta + widths[-1]
    raise ValueError(f"unknown decode mode {mode!r}")


def labels_matrix(spec: TreeSpec, thetas_deg) -> np.ndarray:
    """Label paths of many angles at once, shape (n, depth)."""
    cells = np.atleast_1d(cells_of(spec, thetas_deg))
    out = np.empty((cells.size, spec.depth), dtype=int)
    rem = cells.copy()
    for h in range(spec.depth):
        stride = math.prod(spec.fanouts[h + 1 :])
        out[:, h] = rem // stride
        rem %= stride
    return out


def oracle_quantize(spec: TreeSpec, thetas_deg) -> np.ndarray:
    """Midpoint decode of the true leaf cell, vectorized.

    This is what a tree with error-free node classifiers would emit; it
    reproduces labels_to_doa(doa_to_labels(theta)) bit for bit.
    """
    digits = labels_matrix(spec, thetas_deg)
    widths = level_widths(spec)
    theta = np.full(digits.shape[0], spec.theta_min)
    for h in range(spec.depth):
        theta = theta + digits[:, h] * widths[h]
    return theta + widths[-1] / 2.0


def training_grid(spec: TreeSpec, per_cell: int = 5) -> np.ndarray:
    """per_cell angles per leaf cell, uniformly placed strictly inside the cell.

    Odd per_cell values include the cell midpoint; the default 5 yields the
    midpoint plus four off-center angles at 10/30/70/90 percent of the cell.
    """
    if per_cell < 1:
        raise ValueError(f"per_cell must be at least 1, got {per_cell}")
    lefts = spec.theta_min + np.arange(spec.num_cells) * spec.leaf_width
    offsets = (np.arange(per_cell) + 0.5) / per_cell * spec.leaf_width
    return (lefts[:, None] + offsets).ravel()


def build_node_training_set(spec: TreeSpec, level: int, prefix, angles, features):
    """Training rows routed through one node, with one-hot child targets.

    level is 1-based; prefix is the node's address (length level-1).  A node
    that receives zero training angles is a configuration error.
    """
    prefix = tuple(int(v) for v in prefix)
    if not 1 <= level <= spec.depth:
        raise ValueError(f"level {level} outside 1..{spec.depth}")
    if len(prefix) != level - 1:
        raise ValueError(f"prefix {prefix} has wrong length for level {level}")
    angles = np.asarray(angles, dtype=float)
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] != angles.shape[0]:
        raise ValueError(f"angles {angles.shape} and features {feats.shape} do not align")
    digits = labels_matrix(spec, angles)
    return _node_rows(spec, level, prefix, digits, feats)


def _node_rows(spec: TreeSpec, level: int, prefix, digits: np.ndarray, feats: np.ndarray):
    mask = np.ones(digits.shape[0], dtype=bool)
    for h, lab in enumerate(prefix):
        mask &= digits[:, h] == lab
    if not mask.any():
        raise ValueError(
            f"no training angles fall in the interval of node {prefix} at level {level}"
        )
    child = digits[mask, level - 1]
    width = spec.fanouts[level - 1]
    targets = np.zeros((child.size, width))
    targets[np.arange(child.size), child] = 1.0
    return feats[mask], targets


@dataclass
class TdnnModel:
    """A trained tree: one classifier net per node, keyed by node prefix."""

    spec: TreeSpec
    nodes: dict[tuple[int, ...], MlnnModel]

    def node(self, prefix) -> MlnnModel:
        key = tuple(int(v) for v in prefix)
        try:
            return self.nodes[key]
        except KeyError:
            raise ValueError(f"tree has no node for prefix {key}") from None


@dataclass
class TreeTrainResult:
    model: TdnnModel
    node_accuracy: dict[tuple[int, ...], float] = field(default_factory=dict)
    node_loss: dict[tuple[int, ...], float] = field(default_factory=dict)
    skipped_nodes: list[tuple[int, ...]] = field(default_factory=list)


def _node_seeds(base_seed: int, level: int, prefix) -> tuple[int, int]:
    """Stable per-node (init, shuffle) seeds independent of training order."""
    ss = np.random.SeedSequence(entropy=(int(base_seed), int(level), *map(int, prefix)))
    init_seed, shuffle_seed = (int(v) for v in ss.generate_state(2, dtype=np.uint64))
    return init_seed, shuffle_seed


def train_tree(
    spec: TreeSpec,
    angles,
    features,
    cfg: TrainConfig,
    on_empty: str = "raise",
    n_jobs: int = 1,
) -> TreeTrainResult:
    """Fit every node classifier on the training rows routed through it.

    Parameters
    ----------
    spec : TreeSpec
    angles, features : array_like
        Training angles (degrees, inside the domain) and their feature rows.
        An angle may appear many times with different feature realizations.
    cfg : TrainConfig
        Shared optimizer settings.  Per-node seeds derive from cfg.seed and
        the node address alone, so results do not depend on training order
        and nodes within a level may train concurrently (n_jobs > 1).
    on_empty : {"raise", "skip"}
        A node whose interval holds no training angle is a configuration
        error by default; "skip" leaves such nodes freshly initialized and
        records them (used by the multi-emitter branches, where extreme
        rank/interval combinations are unreachable by construction).
    """
    if on_empty not in ("raise", "skip"):
        raise ValueError(f"unknown on_empty policy {on_empty!r}")
    angles = np.asarray(angles, dtype=float)
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] != angles.shape[0]:
        raise ValueError(f"angles {angles.shape} and features {feats.shape} do not align")
    if feats.shape[1] != spec.input_dim:
        raise ValueError(
            f"feature dimension {feats.shape[1]} does not match spec input {spec.input_dim}"
        )
    digits = labels_matrix(spec, angles)
    result = TreeTrainResult(TdnnModel(spec, {}))

    def fit_node(level: int, prefix: tuple[int, ...]):
        init_seed, shuffle_seed = _node_seeds(cfg.seed, level, prefix)
        sizes = spec.node_layer_sizes(level)
        try:
            x, z = _node_rows(spec, level, prefix, digits, feats)
        except ValueError:
            if on_empty == "raise":
                raise
            return prefix, new_model(sizes, init_seed), None
        node_cfg = replace(cfg, seed=shuffle_seed)
        fitted = train(new_model(sizes, init_seed), x, z, node_cfg)
        return prefix, fitted.model, fitted

    for h in range(1, spec.depth + 1):
        prefixes = list(itertools.product(*(range(f) for f in spec.fanouts[: h - 1])))
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                outcomes = list(pool.map(lambda p: fit_node(h, p), prefixes))
        else:
            outcomes = [fit_node(h, p) for p in prefixes]
        for prefix, net, fitted in outcomes:
            result.model.nodes[prefix] = net
            if fitted is None:
                result.skipped_nodes.append(prefix)
            else:
                result.node_accuracy[prefix] = fitted.final_accuracy
                result.node_loss[prefix] = fitted.final_loss
    return result


def route_predict(model: TdnnModel, features) -> tuple[tuple[int, ...], float]:
    """Greedy root-to-leaf decode: exactly one classifier evaluation per level.

    Returns the label path and the midpoint-decoded angle estimate.
    """
    labels: list[int] = []
    for _ in range(model.spec.depth):
        node = model.node(tuple(labels))
        labels.append(int(predict_class(node, features)))
    path = tuple(labels)
    return path, labels_to_doa(model.spec, path)


def complexity_report(spec: TreeSpec) -> dict[str, int]:
    """Cost counters for one routed inference versus the flat equivalent.

    model_classes sums the per-level output widths, flat_equivalent is the
    leaf count a single flat classifier would need, and mac_count totals the
    multiply-accumulates of the one-node-per-level forward passes.
    """
    mac = 0
    for level in range(1, spec.depth + 1):
        sizes = spec.node_layer_sizes(level)
        mac += sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
    return {
        "model_classes": sum(spec.fanouts),
        "flat_equivalent": spec.num_cells,
        "mac_count": mac,
    }


_TREE_FORMAT = "tdnn-tree"
_TREE_VERSION = 1


def _prefix_key(prefix: tuple[int, ...]) -> str:
    return "root" if not prefix else "-".join(str(v) for v in prefix)


def spec_to_dict(spec: TreeSpec) -> dict:
    return {
        "fanouts": list(spec.fanouts),
        "theta_min": spec.theta_min,
        "theta_max": spec.theta_max,
        "hidden_sizes": list(spec.hidden_sizes),
        "input_dim": spec.input_dim,
    }


def spec_from_dict(payload: dict) -> TreeSpec:
    try:
        return TreeSpec(
            fanouts=tuple(payload["fanouts"]),
            theta_min=float(payload["theta_min"]),
            theta_max=float(payload["theta_max"]),
            hidden_sizes=tuple(payload["hidden_sizes"]),
            input_dim=int(payload["input_dim"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed tree spec payload ({exc})") from exc


def save_tree(model: TdnnModel, directory) -> None:
    """Write a tree checkpoint: a JSON manifest plus one net file per node."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": _TREE_FORMAT,
        "version": _TREE_VERSION,
        "spec": spec_to_dict(model.spec),
        "nodes": {},
    }
    for prefix in node_prefixes(model.spec):
        key = _prefix_key(prefix)
        filename = f"node_{key}.mlnn"
        save_model(model.node(prefix), os.path.join(directory, filename))
        manifest["nodes"][key] = filename
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tree(directory) -> TdnnModel:
    """Read a checkpoint written by save_tree, verifying the node set is complete."""
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{directory}: unreadable tree manifest ({exc})") from exc
    if manifest.get("format") != _TREE_FORMAT:
        raise ValueError(f"{directory}: not a tree checkpoint")
    if manifest.get("version") != _TREE_VERSION:
        raise ValueError(
            f"{directory}: unsupported tree checkpoint version {manifest.get('version')}"
        )
    spec = spec_from_dict(manifest.get("spec", {}))
    nodes: dict[tuple[int, ...], MlnnModel] = {}
    listed = manifest.get("nodes", {})
    for prefix in node_prefixes(spec):
        key = _prefix_key(prefix)
        if key not in listed:
            raise ValueError(f"{directory}: checkpoint is missing node {key}")
        try:
            net = load_model(os.path.join(directory, listed[key]))
        except OSError as exc:
            raise ValueError(f"{directory}: cannot read node {key} ({exc})") from exc
        expected = spec.node_layer_sizes(len(prefix) + 1)
        if net.layer_sizes != expected:
            raise ValueError(
                f"{directory}: node {key} has layout {net.layer_sizes}, expected {expected}"
            )
        nodes[prefix] = net
    return TdnnModel(spec, nodes)
