"""Tree-geometry tests.

Cell indexing is checked against an independent nested-interval scan that
recomputes every cell's edges from scratch, and label codecs are exercised
over the full cell range plus boundary angles.
"""

import numpy as np
import numpy.testing as npt
import pytest

import treedoa.tree as tree_mod
from treedoa.mlnn import TrainConfig, new_model
from treedoa.array_signal import ArrayConfig, single_source_features
from treedoa.tree import (
    TreeSpec,
    build_node_training_set,
    cell_of,
    cell_to_labels,
    cells_of,
    complexity_report,
    doa_to_labels,
    labels_matrix,
    labels_to_cell,
    labels_to_doa,
    level_widths,
    load_tree,
    node_prefixes,
    oracle_quantize,
    quantization_floor,
    route_predict,
    save_tree,
    train_tree,
    training_grid,
)

DESK = TreeSpec((6, 5, 4), -60.0, 60.0, (128, 64, 32), 240)
TWO = TreeSpec((12, 10), -60.0, 60.0, (64,), 240)


def small_array_spec():
    cfg = ArrayConfig(num_elements=8)
    spec = TreeSpec((3, 2), -60.0, 60.0, (16,), cfg.num_elements * (cfg.num_elements - 1))
    return cfg, spec


def test_spec_validation():
    with pytest.raises(ValueError):
        TreeSpec((1, 4), -60.0, 60.0, (8,), 10)
    with pytest.raises(ValueError):
        TreeSpec((), -60.0, 60.0, (8,), 10)
    with pytest.raises(ValueError):
        TreeSpec((4,), -60.0, 60.0, (), 10)
    with pytest.raises(ValueError):
        TreeSpec((4,), 60.0, -60.0, (8,), 10)
    with pytest.raises(ValueError):
        TreeSpec((4,), -60.0, 60.0, (8,), 0)


def test_spec_derived_quantities():
    assert DESK.depth == 3
    assert DESK.num_cells == 120
    assert DESK.span == 120.0
    assert DESK.leaf_width == 1.0
    assert DESK.group_counts == (1, 6, 30)
    assert DESK.num_nodes == 37
    assert TWO.group_counts == (1, 12)
    assert TWO.num_nodes == 13


def test_level_widths_hand_values():
    npt.assert_allclose(level_widths(DESK), [20.0, 4.0, 1.0], rtol=1e-15)
    npt.assert_allclose(level_widths(TWO), [10.0, 1.0], rtol=1e-15)


def test_node_layer_sizes_per_level():
    assert DESK.node_layer_sizes(1) == (240, 128, 64, 32, 6)
    assert DESK.node_layer_sizes(2) == (240, 128, 64, 32, 5)
    assert DESK.node_layer_sizes(3) == (240, 128, 64, 32, 4)
    with pytest.raises(ValueError):
        DESK.node_layer_sizes(0)
    with pytest.raises(ValueError):
        DESK.node_layer_sizes(4)


def test_quantization_floor_value():
    npt.assert_allclose(quantization_floor(DESK), 1.0 / np.sqrt(12.0), rtol=1e-15)
    npt.assert_allclose(quantization_floor(TWO), 1.0 / np.sqrt(12.0), rtol=1e-15)


def test_node_prefixes_level_order_then_lexicographic():
    prefixes = list(node_prefixes(DESK))
    assert len(prefixes) == DESK.num_nodes == 37
    assert prefixes[0] == ()
    assert prefixes[1:7] == [(i,) for i in range(6)]
    assert prefixes[7:10] == [(0, 0), (0, 1), (0, 2)]
    assert prefixes[-1] == (5, 4)


def brute_force_cell(spec: TreeSpec, theta: float) -> tuple[int, tuple[int, ...]]:
    """Nested interval scan, no arithmetic shared with the implementation."""
    lo, hi = spec.theta_min, spec.theta_max
    labels = []
    for fan in spec.fanouts:
        width = (hi - lo) / fan
        for k in range(fan):
            if theta < lo + (k + 1) * width or k == fan - 1:
                labels.append(k)
                lo, hi = lo + k * width, lo + (k + 1) * width
                break
    cell = 0
    for lab, fan in zip(labels, spec.fanouts):
        cell = cell * fan + lab
    return cell, tuple(labels)


def test_cell_scan_over_every_cell():
    spec = DESK
    edges = np.linspace(spec.theta_min, spec.theta_max, spec.num_cells + 1)
    for c in range(spec.num_cells):
        inside = 0.5 * (edges[c] + edges[c + 1])
        assert cell_of(spec, float(inside)) == c
        labels = cell_to_labels(spec, c)
        assert labels_to_cell(spec, labels) == c
        assert doa_to_labels(spec, float(inside)) == labels
        bf_cell, bf_labels = brute_force_cell(spec, float(inside))
        assert (bf_cell, bf_labels) == (c, labels)
        # left edge belongs to this cell, right edge to the next
        assert cell_of(spec, float(edges[c])) == c


def test_hand_case_27_degrees():
    assert cell_of(DESK, 27.0) == 87
    assert doa_to_labels(DESK, 27.0) == (4, 1, 3)
    assert labels_to_cell(DESK, (4, 1, 3)) == 87
    npt.assert_allclose(labels_to_doa(DESK, (4, 1, 3)), 27.5, rtol=1e-15)
    npt.assert_allclose(labels_to_doa(DESK, (4, 1, 3), mode="edge"), 28.0, rtol=1e-15)


def test_domain_boundaries():
    assert cell_of(DESK, -60.0) == 0
    assert cell_of(DESK, -59.0) == 1  # interior edges belong to the upper cell
    eps_below_max = np.nextafter(60.0, -np.inf)
    assert cell_of(DESK, float(eps_below_max)) == 119
    assert doa_to_labels(DESK, float(eps_below_max)) == (5, 4, 3)
    with pytest.raises(ValueError):
        cell_of(DESK, 60.0)  # the domain is half-open
    with pytest.raises(ValueError):
        cells_of(DESK, np.array([0.0, -61.0]))


def test_label_round_trip_error_bound():
    rng = np.random.default_rng(77)
    thetas = rng.uniform(-60.0, 60.0, size=10_000)
    for spec in (DESK, TWO):
        err = np.array([abs(labels_to_doa(spec, doa_to_labels(spec, float(t))) - t) for t in thetas[:500]])
        assert err.max() <= spec.leaf_width / 2.0 + 1e-12


def test_oracle_quantize_matches_scalar_path_bitwise():
    rng = np.random.default_rng(78)
    thetas = rng.uniform(-60.0, 60.0, size=512)
    for spec in (DESK, TWO):
        vec = oracle_quantize(spec, thetas)
        scalar = np.array([labels_to_doa(spec, doa_to_labels(spec, float(t))) for t in thetas])
        npt.assert_array_equal(vec, scalar)


def test_labels_matrix_matches_scalar_labels():
    rng = np.random.default_rng(79)
    thetas = rng.uniform(-60.0, 60.0, size=64)
    mat = labels_matrix(DESK, thetas)
    assert mat.shape == (64, 3)
    for i, t in enumerate(thetas):
        assert tuple(mat[i]) == doa_to_labels(DESK, float(t))


def test_training_grid_layout():
    grid = training_grid(DESK, per_cell=5)
    assert grid.shape == (600,)
    assert grid.min() >= -60.0 and grid.max() < 60.0
    counts = np.bincount(cells_of(DESK, grid), minlength=120)
    npt.assert_array_equal(counts, np.full(120, 5))
    # five offsets inside cell 0: 10%..90% of the 1-degree width
    npt.assert_allclose(np.sort(grid)[:5], -60.0 + np.array([0.1, 0.3, 0.5, 0.7, 0.9]), atol=1e-12)
    mid = training_grid(DESK, per_cell=1)
    npt.assert_allclose(np.sort(mid)[:2], [-59.5, -58.5], atol=1e-12)


def test_build_node_training_set_partition_and_targets():
    spec = TreeSpec((6, 5, 4), -60.0, 60.0, (16,), 4)
    angles = training_grid(spec, per_cell=2)
    feats = np.arange(angles.size * 4, dtype=float).reshape(angles.size, 4)
    labs = labels_matrix(spec, angles)

    x_root, z_root = build_node_training_set(spec, 1, (), angles, feats)
    assert x_root.shape == (angles.size, 4)
    assert z_root.shape == (angles.size, 6)
    npt.assert_array_equal(z_root.sum(axis=1), np.ones(angles.size))
    npt.assert_array_equal(z_root.argmax(axis=1), labs[:, 0])

    total = 0
    for first in range(6):  # level-2 nodes partition the rows by root label
        x, z = build_node_training_set(spec, 2, (first,), angles, feats)
        total += x.shape[0]
        mask = labs[:, 0] == first
        assert x.shape[0] == int(mask.sum())
        npt.assert_array_equal(x, feats[mask])
        npt.assert_array_equal(z.argmax(axis=1), labs[mask, 1])
    assert total == angles.size

    with pytest.raises(ValueError):
        build_node_training_set(spec, 2, (0,), np.array([50.0]), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        build_node_training_set(spec, 2, (), angles, feats)  # wrong prefix length


def test_train_tree_deterministic_and_complete():
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=4)
    feats = single_source_features(cfg, angles)
    tc = TrainConfig(epochs=60, batch_size=8, seed=3, target_accuracy=1.0, min_epochs=2)
    r1 = train_tree(spec, angles, feats, tc)
    r2 = train_tree(spec, angles, feats, tc)
    assert set(r1.model.nodes) == {(), (0,), (1,), (2,)}
    assert r1.skipped_nodes == []
    for key in r1.model.nodes:
        for w1, w2 in zip(r1.model.nodes[key].weights, r2.model.nodes[key].weights):
            npt.assert_array_equal(w1, w2)
    # per-node seeds differ, so sibling nodes must not share initial weights
    assert not np.array_equal(r1.model.nodes[(0,)].weights[0], r1.model.nodes[(1,)].weights[0])


def test_train_tree_empty_cell_policies():
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=2)
    # removing a whole level-1 branch leaves the root without that class
    keep = labels_matrix(spec, angles)[:, 0] != 2
    feats = single_source_features(cfg, angles[keep])
    tc = TrainConfig(epochs=5, batch_size=8, seed=0)
    with pytest.raises(ValueError):
        train_tree(spec, angles[keep], feats, tc)
    result = train_tree(spec, angles[keep], feats, tc, on_empty="skip")
    assert (2,) in result.skipped_nodes
    assert (2,) in result.model.nodes  # node exists, just untrained


def test_route_predict_one_forward_pass_per_level(monkeypatch):
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=2)
    feats = single_source_features(cfg, angles)
    tc = TrainConfig(epochs=30, batch_size=8, seed=1, target_accuracy=1.0, min_epochs=2)
    model = train_tree(spec, angles, feats, tc).model

    calls = []
    real = tree_mod.predict_class

    def counting(net, x):
        calls.append(net.layer_sizes)
        return real(net, x)

    monkeypatch.setattr(tree_mod, "predict_class", counting)
    path, est = route_predict(model, feats[7])
    assert len(calls) == spec.depth
    assert len(path) == spec.depth
    assert spec.theta_min <= est <= spec.theta_max


def test_complexity_report_hand_checked():
    rep = complexity_report(DESK)
    assert rep["model_classes"] == 15  # 6 + 5 + 4 heads along one route
    assert rep["flat_equivalent"] == 120
    per_level_base = 240 * 128 + 128 * 64 + 64 * 32
    assert rep["mac_count"] == 3 * per_level_base + 32 * (6 + 5 + 4)


def test_tree_checkpoint_round_trip(tmp_path):
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=2)
    feats = single_source_features(cfg, angles)
    model = train_tree(spec, angles, feats, TrainConfig(epochs=5, batch_size=8, seed=2)).model
    save_tree(model, tmp_path / "tree")
    loaded = load_tree(tmp_path / "tree")
    assert loaded.spec == spec
    assert set(loaded.nodes) == set(model.nodes)
    for key in model.nodes:
        for w0, w1 in zip(model.nodes[key].weights, loaded.nodes[key].weights):
            npt.assert_array_equal(w0, w1)
    # routing agrees bitwise after the round trip
    for f in feats[:10]:
        assert route_predict(model, f) == route_predict(loaded, f)


def test_tree_checkpoint_error_paths(tmp_path):
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=2)
    feats = single_source_features(cfg, angles)
    model = train_tree(spec, angles, feats, TrainConfig(epochs=3, batch_size=8, seed=2)).model
    save_tree(model, tmp_path / "tree")

    (tmp_path / "tree" / "node_1.mlnn").unlink()  # level-2 node of branch 1
    with pytest.raises(ValueError, match="node"):
        load_tree(tmp_path / "tree")

    with pytest.raises(ValueError):
        load_tree(tmp_path)  # no manifest at all


def test_model_node_lookup_errors():
    cfg, spec = small_array_spec()
    angles = training_grid(spec, per_cell=2)
    feats = single_source_features(cfg, angles)
    model = train_tree(spec, angles, feats, TrainConfig(epochs=3, batch_size=8, seed=2)).model
    with pytest.raises(ValueError):
        model.node((9,))
