"""Uniform linear array geometry, snapshot synthesis, and covariance features.

Angles are degrees at every public interface and converted to radians only
through :func:`numpy.deg2rad` at the point of use.  All stochastic routines
take an explicit seed (or an already-constructed generator), so identical
inputs always reproduce identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ArrayConfig",
    "SourceSet",
    "source_set_for_snr",
    "steering_vector",
    "synth_snapshots",
    "sample_covariance",
    "analytic_covariance",
    "extract_features",
    "feature_length",
    "single_source_features",
    "multi_source_features",
    "sampled_features",
]

SeedLike = "int | np.random.SeedSequence | np.random.Generator"


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array with a half-open angular domain [theta_min, theta_max).

    Parameters
    ----------
    num_elements : int
        Number of array elements M.  Element 0 sits at the coordinate origin.
    spacing_wavelengths : float
        Inter-element spacing d0 expressed as a fraction of the carrier
        wavelength.  0.5 is the unambiguous half-wavelength layout.
    theta_min, theta_max : float
        Angular domain bounds in degrees.
    """

    num_elements: int
    spacing_wavelengths: float = 0.5
    theta_min: float = -60.0
    theta_max: float = 60.0

    def __post_init__(self) -> None:
        if self.num_elements < 2:
            raise ValueError(f"need at least 2 array elements, got {self.num_elements}")
        if not self.spacing_wavelengths > 0:
            raise ValueError(f"element spacing must be positive, got {self.spacing_wavelengths}")
        if not self.theta_min < self.theta_max:
            raise ValueError(
                f"empty angular domain [{self.theta_min}, {self.theta_max})"
            )

    @property
    def span(self) -> float:
        return self.theta_max - self.theta_min

    def contains(self, theta_deg) -> np.ndarray:
        """Elementwise membership test against the half-open domain."""
        t = np.asarray(theta_deg, dtype=float)
        return (t >= self.theta_min) & (t < self.theta_max)


@dataclass(frozen=True)
class SourceSet:
    """Narrowband emitters: DOAs in degrees, per-source powers, shared noise power."""

    doas_deg: tuple[float, ...]
    powers: tuple[float, ...]
    noise_power: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "doas_deg", tuple(float(t) for t in self.doas_deg))
        object.__setattr__(self, "powers", tuple(float(p) for p in self.powers))
        if len(self.doas_deg) == 0:
            raise ValueError("a source set needs at least one emitter")
        if len(self.powers) != len(self.doas_deg):
            raise ValueError(
                f"{len(self.doas_deg)} DOAs but {len(self.powers)} powers"
            )
        if any(b <= a for a, b in zip(self.doas_deg, self.doas_deg[1:])):
            raise ValueError(f"DOAs must be strictly increasing, got {self.doas_deg}")
        if any(p <= 0 for p in self.powers):
            raise ValueError(f"source powers must be positive, got {self.powers}")
        if self.noise_power < 0:
            raise ValueError(f"noise power must be non-negative, got {self.noise_power}")

    @property
    def num_sources(self) -> int:
        return len(self.doas_deg)

    def snr_db(self) -> np.ndarray:
        """Per-source SNR in dB; requires a strictly positive noise power."""
        if self.noise_power <= 0:
            raise ValueError("SNR is undefined for zero noise power")
        return 10.0 * np.log10(np.asarray(self.powers) / self.noise_power)


def source_set_for_snr(doas_deg, snr_db: float) -> SourceSet:
    """Unit-power emitters over noise sized so every source sits at snr_db.

    Keeping signal power at 1 and moving the noise keeps the covariance
    features on a fixed scale across an SNR sweep.
    """
    doas = tuple(float(t) for t in np.atleast_1d(doas_deg))
    return SourceSet(doas, (1.0,) * len(doas), 10.0 ** (-snr_db / 10.0))


def steering_vector(cfg: ArrayConfig, theta_deg) -> np.ndarray:
    """Array response a(theta) with element m carrying phase 2*pi*d0*m*sin(theta).

    Parameters
    ----------
    cfg : ArrayConfig
        Array geometry; d0 is ``cfg.spacing_wavelengths``.
    theta_deg : float or array_like
        Arrival angle(s) in degrees, measured from broadside.

    Returns
    -------
    numpy.ndarray
        Complex response, shape (M,) for a scalar angle and (n, M) for an
        n-vector of angles.  Element 0 is always exactly 1.
    """
    theta = np.deg2rad(np.asarray(theta_deg, dtype=float))
    m = np.arange(cfg.num_elements)
    phase = 2.0 * np.pi * cfg.spacing_wavelengths * np.sin(theta)[..., None] * m
    return np.exp(1j * phase)


def _complex_normal(rng: np.random.Generator, shape, variance) -> np.ndarray:
    """Circular complex Gaussian draws with the given per-entry variance."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_in_domain(cfg: ArrayConfig, src: SourceSet) -> None:
    if not bool(np.all(cfg.contains(src.doas_deg))):
        raise ValueError(
            f"source DOAs {src.doas_deg} leave the domain "
            f"[{cfg.theta_min}, {cfg.theta_max})"
        )


def synth_snapshots(cfg: ArrayConfig, src: SourceSet, num_snapshots: int, seed) -> np.ndarray:
    """Draw T array snapshots y(t) = sum_q a(theta_q) s_q(t) + v(t).

    Source amplitudes s_q(t) and receiver noise v(t) are independent circular
    complex Gaussians with variances ``src.powers`` and ``src.noise_power``.

    Parameters
    ----------
    cfg, src : array geometry and emitter description.
    num_snapshots : int
        Number of time samples T.
    seed : int, SeedSequence or Generator
        Randomness source; the same seed reproduces the batch bit for bit.

    Returns
    -------
    numpy.ndarray
        Complex snapshot batch of shape (T, M), one snapshot per row.
    """
    if num_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {num_snapshots}")
    _check_in_domain(cfg, src)
    rng = _as_rng(seed)
    A = steering_vector(cfg, src.doas_deg)  # (Q, M)
    s = _complex_normal(rng, (num_snapshots, src.num_sources), 1.0)
    s = s * np.sqrt(np.asarray(src.powers))
    y = s @ A
    if src.noise_power > 0:
        y = y + _complex_normal(rng, (num_snapshots, cfg.num_elements), src.noise_power)
    return y


def sample_covariance(snapshots: np.ndarray) -> np.ndarray:
    """Biased sample covariance (1/T) sum_t y(t) y(t)^H of a (T, M) batch."""
    y = np.asarray(snapshots)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a (T, M) snapshot batch, got shape {y.shape}")
    num = y.shape[0]
    r = y.T @ y.conj() / num
    # averaging the matrix with its own adjoint removes rounding skew
    return 0.5 * (r + r.conj().T)


def analytic_covariance(cfg: ArrayConfig, src: SourceSet) -> np.ndarray:
    """Model covariance sum_q p_q a(theta_q) a(theta_q)^H + noise_power * I.

    The matrix is assembled from its strict upper triangle and mirrored, so
    it is Hermitian bit for bit and its triangle reproduces the products of
    single_source_features exactly.
    """
    _check_in_domain(cfg, src)
    m = cfg.num_elements
    rows, cols = np.triu_indices(m, k=1)
    upper = np.zeros(rows.size, dtype=complex)
    diag = np.full(m, src.noise_power, dtype=float)
    for power, theta in zip(src.powers, src.doas_deg):
        a = steering_vector(cfg, theta)
        upper = upper + power * (a[rows] * a[cols].conj())
        diag = diag + power * (a * a.conj()).real
    r = np.zeros((m, m), dtype=complex)
    r[rows, cols] = upper
    r[cols, rows] = upper.conj()
    r[np.arange(m), np.arange(m)] = diag
    return r


def feature_length(num_elements: int) -> int:
    """Length M(M-1) of the covariance feature vector for an M-element array."""
    return num_elements * (num_elements - 1)


def extract_features(covariance: np.ndarray) -> np.ndarray:
    """Stack the strict upper triangle of a covariance into [Re parts, Im parts].

    Pairs are taken row-major: (0,1), ..., (0,M-1), (1,2), ..., (M-2,M-1).
    The diagonal never enters, so additive receiver noise with covariance
    sigma^2 I leaves the features unchanged, and the map is linear in its
    input.  Output length is M(M-1).
    """
    r = np.asarray(covariance)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"expected a square covariance matrix, got shape {r.shape}")
    rows, cols = np.triu_indices(r.shape[0], k=1)
    upper = r[rows, cols]
    return np.concatenate([upper.real, upper.imag])


def single_source_features(cfg: ArrayConfig, thetas_deg, power: float = 1.0) -> np.ndarray:
    """Noise-free covariance features of one emitter per angle, vectorized.

    Row i equals ``extract_features(analytic_covariance(cfg, source at
    thetas_deg[i]))`` exactly; the diagonal (and with it any noise term)
    never contributes.
    """
    arr = np.asarray(thetas_deg, dtype=float)
    thetas = np.atleast_1d(arr)
    a = steering_vector(cfg, thetas)  # (n, M)
    rows, cols = np.triu_indices(cfg.num_elements, k=1)
    upper = power * (a[:, rows] * a[:, cols].conj())
    out = np.concatenate([upper.real, upper.imag], axis=1)
    return out[0] if arr.ndim == 0 else out


def multi_source_features(cfg: ArrayConfig, doa_tuples, powers=None) -> np.ndarray:
    """Noise-free features of Q uncorrelated emitters, one row per DOA tuple.

    Because the feature map is linear and drops the diagonal, each row is
    exactly the sum of the per-source single-emitter feature rows.
    """
    tuples = np.atleast_2d(np.asarray(doa_tuples, dtype=float))
    num_sources = tuples.shape[1]
    if powers is None:
        powers = np.ones(num_sources)
    powers = np.asarray(powers, dtype=float)
    if powers.shape != (num_sources,):
        raise ValueError(f"expected {num_sources} powers, got shape {powers.shape}")
    acc = np.zeros((tuples.shape[0], feature_length(cfg.num_elements)))
    for q in range(num_sources):
        acc = acc + single_source_features(cfg, tuples[:, q], float(powers[q]))
    return acc


def sampled_features(
    cfg: ArrayConfig,
    doa_tuples,
    snr_db: float,
    num_snapshots: int,
    seed,
    chunk_size: int = 2048,
) -> np.ndarray:
    """Features of finite-snapshot sample covariances, one row per DOA tuple.

    Every source radiates at unit power over noise of power 10^(-snr_db/10).
    Draws are vectorized over tuples but fixed by the seed, so the output is
    independent of chunking internals.
    """
    tuples = np.atleast_2d(np.asarray(doa_tuples, dtype=float))
    if num_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {num_snapshots}")
    if not bool(np.all(cfg.contains(tuples))):
        raise ValueError("training DOAs leave the array domain")
    num_tuples, num_sources = tuples.shape
    # one child stream per row: draws stay with their row no matter how the
    # rows are batched below
    if isinstance(seed, np.random.Generator):
        gens = seed.spawn(num_tuples)
    else:
        base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        gens = [np.random.default_rng(child) for child in base.spawn(num_tuples)]
    noise_power = 10.0 ** (-snr_db / 10.0)
    rows, cols = np.triu_indices(cfg.num_elements, k=1)
    out = np.empty((num_tuples, feature_length(cfg.num_elements)))
    for start in range(0, num_tuples, chunk_size):
        stop = min(start + chunk_size, num_tuples)
        block = tuples[start:stop]
        a = steering_vector(cfg, block.ravel()).reshape(
            stop - start, num_sources, cfg.num_elements
        )
        s = np.stack(
            [_complex_normal(g, (num_snapshots, num_sources), 1.0) for g in gens[start:stop]]
        )
        y = np.einsum("ntq,nqm->ntm", s, a)
        y = y + np.stack(
            [
                _complex_normal(g, (num_snapshots, cfg.num_elements), noise_power)
                for g in gens[start:stop]
            ]
        )
        r = np.einsum("nti,ntj->nij", y, y.conj()) / num_snapshots
        upper = r[:, rows, cols]
        out[start:stop] = np.concatenate([upper.real, upper.imag], axis=1)
    return out
