"""Reference estimators the tree model is measured against.

Three families: a flat classifier net over the full leaf grid (sharing the
tree's grid and decoder, so both quantize identically), the polynomial
rooting subspace estimator with a dense-grid spectral-search oracle, and
the stochastic-signal Cramer-Rao bound.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .array_signal import ArrayConfig, SourceSet, steering_vector
from .mlnn import MlnnModel, TrainConfig, TrainResult, forward, load_model, new_model, save_model, train
from .tree import TreeSpec, cell_to_labels, cells_of, labels_to_doa, spec_from_dict, spec_to_dict

__all__ = [
    "FlatDnnModel",
    "flat_layer_sizes",
    "flat_targets",
    "train_flat_dnn",
    "predict_flat",
    "save_flat",
    "load_flat",
    "root_music",
    "music_spectrum_oracle",
    "crlb_stochastic",
    "crlb_deterministic",
    "crlb_single_source",
]


# ---------------------------------------------------------------------------
# flat classifier over the leaf grid


@dataclass
class FlatDnnModel:
    """One classifier net over all leaf cells of a tree geometry."""

    spec: TreeSpec
    net: MlnnModel


def flat_layer_sizes(spec: TreeSpec) -> tuple[int, ...]:
    """Layer sizes of the flat equivalent: shared hidden stack, one output per cell."""
    return (spec.input_dim, *spec.hidden_sizes, spec.num_cells)


def flat_targets(spec: TreeSpec, doas) -> np.ndarray:
    """{0,1} target rows: one mark per source in its leaf cell.

    Accepts (n,) single-source angles or (n, Q) sorted tuples; a tuple row
    yields Q ones (multi-hot) in the same target vector.
    """
    arr = np.asarray(doas, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected (n,) angles or (n, Q) tuples, got shape {arr.shape}")
    targets = np.zeros((arr.shape[0], spec.num_cells))
    rows = np.arange(arr.shape[0])
    for q in range(arr.shape[1]):
        targets[rows, cells_of(spec, arr[:, q])] = 1.0
    return targets


def train_flat_dnn(spec: TreeSpec, doas, features, cfg: TrainConfig) -> tuple[FlatDnnModel, TrainResult]:
    """Fit the flat baseline on the same rows a tree would train on."""
    feats = np.asarray(features, dtype=float)
    targets = flat_targets(spec, doas)
    if feats.ndim != 2 or feats.shape[0] != targets.shape[0]:
        raise ValueError(f"doas and features do not align: {feats.shape}")
    net = new_model(flat_layer_sizes(spec), cfg.seed)
    fitted = train(net, feats, targets, cfg)
    return FlatDnnModel(spec, fitted.model), fitted


def predict_flat(model: FlatDnnModel, features, num_sources: int = 1) -> np.ndarray:
    """Midpoints of the num_sources most probable cells, ascending.

    Uses the same label decoder as the tree, so both share one quantization
    floor.  Ties in probability resolve to the lower cell index.
    """
    if not 1 <= num_sources <= model.spec.num_cells:
        raise ValueError(f"cannot pick {num_sources} cells out of {model.spec.num_cells}")
    probs = forward(model.net, features)
    top = np.argsort(-probs, kind="stable")[:num_sources]
    est = [labels_to_doa(model.spec, cell_to_labels(model.spec, int(c))) for c in top]
    return np.sort(np.asarray(est))


_FLAT_FORMAT = "flat-dnn"
_FLAT_VERSION = 1


def save_flat(model: FlatDnnModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": _FLAT_FORMAT,
        "version": _FLAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "net": "net.mlnn",
    }
    save_model(model.net, os.path.join(directory, "net.mlnn"))
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_flat(directory) -> FlatDnnModel:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{directory}: unreadable checkpoint manifest ({exc})") from exc
    if manifest.get("format") != _FLAT_FORMAT:
        raise ValueError(f"{directory}: not a flat classifier checkpoint")
    if manifest.get("version") != _FLAT_VERSION:
        raise ValueError(f"{directory}: unsupported checkpoint version {manifest.get('version')}")
    spec = spec_from_dict(manifest.get("spec", {}))
    net = load_model(os.path.join(directory, manifest.get("net", "net.mlnn")))
    if net.layer_sizes != flat_layer_sizes(spec):
        raise ValueError(f"{directory}: net layout does not match the tree geometry")
    return FlatDnnModel(spec, net)


# ---------------------------------------------------------------------------
# polynomial rooting subspace estimator


def _noise_subspace(covariance: np.ndarray, num_sources: int) -> np.ndarray:
    r = np.asarray(covariance)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"expected a square covariance, got shape {r.shape}")
    m = r.shape[0]
    if not 1 <= num_sources < m:
        raise ValueError(f"need 1 <= num_sources < {m}, got {num_sources}")
    _, vecs = np.linalg.eigh(r)  # ascending eigenvalues
    return vecs[:, : m - num_sources]


def root_music(covariance: np.ndarray, num_sources: int, cfg: ArrayConfig) -> np.ndarray:
    """Rooting subspace DOA estimator for a ULA covariance, in degrees.

    Eigendecomposes the covariance, forms the degree-2(M-1) spectrum
    polynomial from the diagonal sums of the noise-subspace projector, takes
    its companion-matrix roots (numpy.roots, which balances the companion
    matrix before the eigensolve), and keeps the num_sources roots strictly
    inside the unit circle that lie closest to it.  Root phases map to
    angles through arcsin(phase / (2 pi d0)).

    Conjugate-reciprocal duplicates are skipped during selection, so a root
    pair degenerating onto the unit circle cannot be picked twice.  An
    arcsin argument outside [-1, 1] is clamped and reported as a warning.
    """
    r = np.asarray(covariance)
    if r.shape[0] != cfg.num_elements:
        raise ValueError(
            f"covariance is {r.shape[0]}x{r.shape[0]} but the array has "
            f"{cfg.num_elements} elements"
        )
    en = _noise_subspace(r, num_sources)
    m = cfg.num_elements
    c = en @ en.conj().T
    coeffs = np.array([np.trace(c, offset=k) for k in range(m - 1, -m, -1)])
    roots = np.roots(coeffs)

    dist = np.abs(np.abs(roots) - 1.0)
    outside = (np.abs(roots) >= 1.0).astype(int)
    order = np.lexsort((dist, outside))  # strictly-inside roots first, then closest
    picked: list[complex] = []
    for z in roots[order]:
        if any(abs(z * np.conj(p) - 1.0) < 1e-9 or abs(z - p) < 1e-12 for p in picked):
            continue  # conjugate-reciprocal twin or duplicate of a chosen root
        picked.append(complex(z))
        if len(picked) == num_sources:
            break
    if len(picked) < num_sources:
        raise RuntimeError(
            f"only {len(picked)} distinct roots available for {num_sources} sources"
        )

    sin_theta = np.angle(np.asarray(picked)) / (2.0 * np.pi * cfg.spacing_wavelengths)
    clipped = np.clip(sin_theta, -1.0, 1.0)
    bad = np.abs(sin_theta) > 1.0
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} root phase(s) outside the visible region; "
            "estimates clamped to end-fire",
            RuntimeWarning,
            stacklevel=2,
        )
    return np.sort(np.degrees(np.arcsin(clipped)))


def music_spectrum_oracle(
    covariance: np.ndarray,
    num_sources: int,
    cfg: ArrayConfig,
    grid_step: float = 0.01,
):
    """Dense-grid spectral search, deliberately simple.

    Evaluates 1 / ||En^H a(theta)||^2 on a uniform grid over the array
    domain and picks the num_sources tallest interior local maxima.  Serves
    as an independent cross-check of the rooting estimator, accurate to the
    grid step.

    Returns (grid, spectrum, peak_angles_ascending); fewer than num_sources
    peaks are returned if the spectrum has fewer local maxima.
    """
    if grid_step <= 0:
        raise ValueError(f"grid step must be positive, got {grid_step}")
    en = _noise_subspace(covariance, num_sources)
    grid = np.arange(cfg.theta_min, cfg.theta_max, grid_step)
    a = steering_vector(cfg, grid)  # (n, M)
    denom = np.sum(np.abs(a.conj() @ en) ** 2, axis=1)
    spectrum = 1.0 / np.maximum(denom, np.finfo(float).tiny)
    s = spectrum
    interior = np.flatnonzero((s[1:-1] > s[:-2]) & (s[1:-1] >= s[2:])) + 1
    top = interior[np.argsort(-s[interior], kind="stable")[:num_sources]]
    return grid, spectrum, np.sort(grid[top])


# ---------------------------------------------------------------------------
# Cramer-Rao bounds


def _steering_and_derivative(cfg: ArrayConfig, doas_deg) -> tuple[np.ndarray, np.ndarray]:
    """Steering matrix A (M, Q) and its per-radian derivative D (M, Q)."""
    thetas = np.asarray(doas_deg, dtype=float)
    a = steering_vector(cfg, thetas).T  # (M, Q)
    m = np.arange(cfg.num_elements)[:, None]
    scale = 2.0 * np.pi * cfg.spacing_wavelengths * np.cos(np.deg2rad(thetas))[None, :]
    return a, 1j * scale * m * a


_RAD2DEG_SQ = (180.0 / np.pi) ** 2


def crlb_stochastic(cfg: ArrayConfig, src: SourceSet, num_snapshots: int) -> np.ndarray:
    """Stochastic-signal-model Cramer-Rao bound on the DOA vector, in deg^2.

    Implements
        CRLB = (sigma_v^2 / 2T) * { Re[ (D^H P_A_perp D) o (Rs A^H R^-1 A Rs)^T ] }^-1
    with o the elementwise product, P_A_perp the projector onto the
    complement of the steering columns, and D the steering derivative.  The
    Q x Q result is symmetric positive definite; its diagonal lower-bounds
    the per-source error variance of any unbiased estimator.
    """
    if num_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {num_snapshots}")
    if src.noise_power <= 0:
        raise ValueError("the stochastic bound requires positive noise power")
    a, d = _steering_and_derivative(cfg, src.doas_deg)
    q = src.num_sources
    if q >= cfg.num_elements:
        raise ValueError(f"bound needs fewer sources than elements, got {q}")
    rs = np.diag(np.asarray(src.powers, dtype=float))
    r = a @ rs @ a.conj().T + src.noise_power * np.eye(cfg.num_elements)

    gram = a.conj().T @ a
    proj_perp = np.eye(cfg.num_elements) - a @ np.linalg.solve(gram, a.conj().T)
    r_inv_a = np.linalg.solve(r, a)
    sandwich = rs @ (a.conj().T @ r_inv_a) @ rs
    h = (d.conj().T @ proj_perp @ d) * sandwich.T
    fisher = (2.0 * num_snapshots / src.noise_power) * np.real(h)
    crlb_rad = np.linalg.inv(fisher)
    crlb_deg = crlb_rad * _RAD2DEG_SQ
    return 0.5 * (crlb_deg + crlb_deg.T)


def crlb_deterministic(cfg: ArrayConfig, src: SourceSet, num_snapshots: int) -> np.ndarray:
    """Conditional-signal-model variant: the sandwich term collapses to Rs."""
    if num_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {num_snapshots}")
    if src.noise_power <= 0:
        raise ValueError("the bound requires positive noise power")
    a, d = _steering_and_derivative(cfg, src.doas_deg)
    if src.num_sources >= cfg.num_elements:
        raise ValueError("bound needs fewer sources than elements")
    rs = np.diag(np.asarray(src.powers, dtype=float))
    gram = a.conj().T @ a
    proj_perp = np.eye(cfg.num_elements) - a @ np.linalg.solve(gram, a.conj().T)
    h = (d.conj().T @ proj_perp @ d) * rs.T
    fisher = (2.0 * num_snapshots / src.noise_power) * np.real(h)
    crlb_deg = np.linalg.inv(fisher) * _RAD2DEG_SQ
    return 0.5 * (crlb_deg + crlb_deg.T)


def crlb_single_source(cfg: ArrayConfig, src: SourceSet, num_snapshots: int) -> float:
    """Closed scalar form of the stochastic bound for one emitter, in deg^2.

    Uses sum formulas for the element index moments instead of any linear
    algebra, so it is an independent check of the matrix expression:
        Re(d^H P_perp d) = c^2 (S2 - S1^2 / M),  c = 2 pi d0 cos(theta),
        a^H R^-1 a = M / (sigma_v^2 + M sigma_s^2).
    """
    if src.num_sources != 1:
        raise ValueError(f"closed form is single-source only, got {src.num_sources}")
    if num_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {num_snapshots}")
    if src.noise_power <= 0:
        raise ValueError("the stochastic bound requires positive noise power")
    m = cfg.num_elements
    power = src.powers[0]
    noise = src.noise_power
    c = 2.0 * np.pi * cfg.spacing_wavelengths * math.cos(math.radians(src.doas_deg[0]))
    s1 = m * (m - 1) / 2.0
    s2 = (m - 1) * m * (2 * m - 1) / 6.0
    d_perp = c * c * (s2 - s1 * s1 / m)
    quad = m / (noise + m * power)
    fisher = (2.0 * num_snapshots / noise) * d_perp * power * quad * power
    return (1.0 / fisher) * _RAD2DEG_SQ
