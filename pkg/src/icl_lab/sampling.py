"""Seeded covariate and noise sampling.

Randomness flows through RngStream, a thin wrapper over numpy's Philox
counter-based generator keyed by (seed, stream id). Identical (seed, stream)
pairs replay bit-identical draws, and distinct stream ids are statistically
independent, so Monte Carlo consumers can derive one substream per context
without coupling draw order. Gaussians come from numpy's ziggurat
(``Generator.standard_normal``), which is bit-stable for a fixed numpy build.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, DimensionMismatch
from . import linalg

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x):
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Deterministic random stream identified by (seed, stream id)."""

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def derive(self, index):
        """Child stream for substream ``index``; independent of the parent.

        Ids are splitmix64 hashes of (stream, index), so nested derivations
        collide only with negligible probability.
        """
        child = _splitmix64(self.stream ^ _splitmix64(int(index) & _MASK64))
        return RngStream(self.seed, child)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


UNIFORM_SPHERE = "uniform_sphere"
ANISOTROPIC_SPHERE = "anisotropic_sphere"
SHAPED_SPHERE = "shaped_sphere"
LOWRANK_LATENT = "lowrank_latent"


@dataclass(frozen=True)
class CovariateDist:
    """One of the four covariate distributions on (or near) the unit sphere.

    uniform_sphere      x = g/|g|,  g ~ N(0, I_d)
    anisotropic_sphere  x = S^(1/2) g / |S^(1/2) g|   for a positive diagonal S
    shaped_sphere       x = J g / |J g|               for a full-rank d x d J
    lowrank_latent      x = c_u B u + c_v Bperp v     with u, v uniform on spheres
    """

    kind: str
    d: int
    scale_diag: np.ndarray | None = None
    shape_matrix: np.ndarray | None = None
    basis: np.ndarray | None = None
    basis_perp: np.ndarray | None = None
    c_u: float = 1.0
    c_v: float = 0.0

    @property
    def k(self):
        return None if self.basis is None else self.basis.shape[1]


def uniform_sphere(d):
    if d < 1:
        raise DegenerateInput("dimension must be >= 1")
    return CovariateDist(UNIFORM_SPHERE, d)


def anisotropic_sphere(scale_diag):
    s = linalg.as_vector(scale_diag, "scale_diag")
    if np.any(s <= 0):
        raise DegenerateInput("scale diagonal must be strictly positive")
    return CovariateDist(ANISOTROPIC_SPHERE, s.size, scale_diag=s)


def default_anisotropic(d):
    """The diag([1, ..., d]) scaling used by the non-isotropic experiments."""
    return anisotropic_sphere(np.arange(1.0, d + 1.0))


def shaped_sphere(shape_matrix):
    j = linalg.as_matrix(shape_matrix, "shape_matrix")
    d = j.shape[0]
    if j.shape != (d, d):
        raise DimensionMismatch(f"shape matrix must be square, got {j.shape}")
    if linalg.min_singular_value(j) <= 1e-10 * max(linalg.spectral_norm(j), 1.0):
        raise DegenerateInput("shape matrix is numerically rank deficient")
    return CovariateDist(SHAPED_SPHERE, d, shape_matrix=j)


def random_shaped_sphere(d, rng):
    """Draw J = (Jt^T Jt)^(1/2) from a standard Gaussian Jt, as the low-rank
    experiments do once per trial."""
    jt = rng.standard_normal((d, d))
    return shaped_sphere(linalg.psd_sqrt(jt.T @ jt))


def lowrank_latent(basis, basis_perp, c_u, c_v):
    b = linalg.as_matrix(basis, "basis")
    bp = linalg.as_matrix(basis_perp, "basis_perp")
    if c_u == 0.0:
        raise DegenerateInput("c_u must be nonzero")
    d, k = b.shape
    if bp.shape != (d, d - k):
        raise DimensionMismatch(f"complement must be {d}x{d - k}, got {bp.shape}")
    return CovariateDist(LOWRANK_LATENT, d, basis=b, basis_perp=bp, c_u=float(c_u), c_v=float(c_v))


def sample_gaussian(d, rng):
    """d iid standard normal entries."""
    if d < 1:
        raise DegenerateInput("dimension must be >= 1")
    return rng.standard_normal(d)


def _normalize_rows(x):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        # probability-zero event; caller redraws once
        raise DegenerateInput("drew a zero vector before normalization")
    return x / norms[:, None]


def sample_uniform_sphere(count, d, rng):
    """``count`` iid points uniform on the unit sphere in R^d."""
    for _ in range(2):
        try:
            return _normalize_rows(rng.standard_normal((count, d)))
        except DegenerateInput:
            continue
    raise DegenerateInput("repeatedly drew zero vectors on the sphere")


def sample_covariates(dist, count, rng):
    """``count`` iid draws from ``dist`` as a (count, d) array."""
    if dist.kind == UNIFORM_SPHERE:
        return sample_uniform_sphere(count, dist.d, rng)
    if dist.kind == ANISOTROPIC_SPHERE:
        g = rng.standard_normal((count, dist.d))
        return _normalize_rows(g * np.sqrt(dist.scale_diag))
    if dist.kind == SHAPED_SPHERE:
        g = rng.standard_normal((count, dist.d))
        return _normalize_rows(g @ dist.shape_matrix.T)
    if dist.kind == LOWRANK_LATENT:
        k = dist.k
        u = sample_uniform_sphere(count, k, rng)
        v = sample_uniform_sphere(count, dist.d - k, rng)
        return dist.c_u * (u @ dist.basis.T) + dist.c_v * (v @ dist.basis_perp.T)
    raise DegenerateInput(f"unknown covariate distribution {dist.kind!r}")


def sample_covariate(dist, rng):
    """Single draw from ``dist``."""
    return sample_covariates(dist, 1, rng)[0]


def sample_noise(sigma, rng, size=None):
    """N(0, sigma^2) label noise; sigma = 0 returns exact zeros."""
    if sigma < 0:
        raise DegenerateInput("sigma must be nonnegative")
    if sigma == 0.0:
        return 0.0 if size is None else np.zeros(size)
    return sigma * rng.standard_normal(size)


def make_random_subspace(d, k, rng):
    """Random column-orthonormal B (d x k, via QR of a Gaussian) and its
    orthonormal complement."""
    if not 1 <= k < d:
        raise DegenerateInput(f"need 1 <= k < d, got k={k}, d={d}")
    b = linalg.gram_schmidt_orthonormalize(rng.standard_normal((d, k)))
    return b, linalg.orthonormal_complement(b)
