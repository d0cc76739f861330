"""Minimal dense linear algebra used by every other module.

Everything operates on plain float ndarrays. The eigensolver is a cyclic
Jacobi sweep and the spectral norm is a power iteration; dimensions in this
package stay small (<= 64), so simplicity and accuracy win over speed.
"""

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NoConvergence

# Named tolerances, kept in one place so tests can cite them.
ORTHO_TOL = 1e-10          # max |Q^T Q - I| guaranteed by gram_schmidt
SYMMETRY_TOL = 1e-8        # max |S - S^T| accepted by symmetric_eig
COMPLEMENT_TOL = 1e-8      # orthonormality required of / produced by complements
JACOBI_MAX_SWEEPS = 60
PSD_CLIP_FLOOR = -1e-8     # eigenvalues above this are clipped to zero
PSD_REJECT_FLOOR = -1e-6   # eigenvalues below this mean genuinely non-PSD
SPECTRAL_REL_TOL = 1e-10   # power-iteration stopping tolerance


def as_matrix(a, name="matrix"):
    """Coerce to a 2-d float array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-d, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateInput(f"{name} contains non-finite entries")
    return m


def as_vector(v, name="vector"):
    """Coerce to a 1-d float array, rejecting non-finite entries."""
    x = np.asarray(v, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInput(f"{name} contains non-finite entries")
    return x


def gram_schmidt_orthonormalize(a, tol=1e-8):
    """Orthonormalize the columns of ``a`` (d x k, k <= d).

    Modified Gram-Schmidt with one reorthogonalization pass, so the result
    satisfies max|Q^T Q - I| < ORTHO_TOL. Raises DegenerateInput when a
    residual column norm falls to ``tol`` or below (numerical rank
    deficiency).
    """
    a = as_matrix(a, "a")
    d, k = a.shape
    if k > d:
        raise DimensionMismatch(f"need k <= d, got {a.shape}")
    q = np.empty((d, k))
    for j in range(k):
        v = a[:, j].copy()
        for _ in range(2):  # second pass mops up cancellation error
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm <= tol:
            raise DegenerateInput(f"column {j} is numerically dependent (residual {norm:.3e})")
        q[:, j] = v / norm
    return q


def orthonormal_complement(b):
    """Return a d x (d-k) orthonormal basis of the subspace orthogonal to col(b).

    Built by Gram-Schmidt over [b | I_d], dropping the near-zero residual
    columns, so the one primitive serves both jobs.
    """
    b = as_matrix(b, "b")
    d, k = b.shape
    gram = b.T @ b
    if np.max(np.abs(gram - np.eye(k))) > COMPLEMENT_TOL:
        raise DegenerateInput("b is not column-orthonormal")
    if k >= d:
        return np.empty((d, 0))
    cols = [b[:, j] for j in range(k)]
    comp = []
    for j in range(d):
        v = np.zeros(d)
        v[j] = 1.0
        for _ in range(2):
            for q in cols:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > COMPLEMENT_TOL:
            v /= norm
            cols.append(v)
            comp.append(v)
        if len(comp) == d - k:
            break
    if len(comp) != d - k:
        raise DegenerateInput("complement construction lost rank")
    return np.column_stack(comp)


def symmetric_eig(s):
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    Returns (eigenvalues sorted descending, eigenvector matrix with matching
    columns). Raises NoConvergence if the off-diagonal mass is not
    annihilated within JACOBI_MAX_SWEEPS sweeps.
    """
    s = as_matrix(s, "s")
    m = s.shape[0]
    if s.shape[1] != m:
        raise DimensionMismatch(f"matrix must be square, got {s.shape}")
    scale = max(np.max(np.abs(s)), 1.0)
    if np.max(np.abs(s - s.T)) > SYMMETRY_TOL * scale:
        raise DegenerateInput("matrix is not symmetric")
    a = 0.5 * (s + s.T)
    v = np.eye(m)
    if m == 1:
        return a[0].copy(), v
    off_tol = 1e-14 * scale * m
    for _ in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                off = max(off, abs(apq))
                if abs(apq) <= off_tol:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(1.0, t)
                sn = t * c
                rot = np.array([[c, sn], [-sn, c]])
                a[:, [p, q]] = a[:, [p, q]] @ rot
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[p, q] = a[q, p] = 0.0
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if off <= off_tol:
            break
    else:
        raise NoConvergence("Jacobi sweep did not reduce off-diagonal mass")
    lam = np.diag(a).copy()
    order = np.argsort(lam)[::-1]
    return lam[order], v[:, order]


def spectral_norm(m, iters=500, tol=SPECTRAL_REL_TOL):
    """Largest singular value of ``m`` via power iteration on m^T m.

    Deterministic start vector (1, ..., 1)/sqrt(d); if that vector is
    orthogonal to the top singular direction the iteration restarts once
    from a seeded pseudo-random vector, keeping results reproducible.
    """
    m = as_matrix(m, "m")
    if m.size == 0:
        return 0.0
    scale = np.max(np.abs(m))
    if scale == 0.0:
        return 0.0
    a = m / scale
    gram = a.T @ a
    d = gram.shape[0]

    def run(v):
        lam = 0.0
        v = v / np.linalg.norm(v)
        for _ in range(iters):
            w = gram @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0
            v = w / nw
            new_lam = float(v @ (gram @ v))
            if abs(new_lam - lam) <= tol * max(new_lam, 1e-300):
                return new_lam
            lam = new_lam
        return lam

    lam = run(np.ones(d))
    if lam <= 1e-30:
        # ones vector may sit in the null space; one seeded restart
        restart = np.random.Generator(np.random.Philox(key=0xC0FFEE)).standard_normal(d)
        lam = max(lam, run(restart))
    return float(np.sqrt(max(lam, 0.0)) * scale)


def min_singular_value(m):
    """Smallest singular value, via the eigensolver on m^T m."""
    m = as_matrix(m, "m")
    lam, _ = symmetric_eig(m.T @ m)
    return float(np.sqrt(max(lam[-1], 0.0)))


def psd_sqrt(s):
    """Symmetric square root of a symmetric PSD matrix.

    Small negative eigenvalues (>= PSD_CLIP_FLOOR relative to scale) are
    clipped to zero; anything below PSD_REJECT_FLOOR raises DegenerateInput.
    """
    s = as_matrix(s, "s")
    lam, vec = symmetric_eig(s)
    scale = max(abs(lam[0]), 1.0) if lam.size else 1.0
    if np.any(lam < PSD_REJECT_FLOOR * scale):
        raise DegenerateInput(f"matrix is not PSD (min eigenvalue {lam[-1]:.3e})")
    lam = np.clip(lam, 0.0, None)
    root = (vec * np.sqrt(lam)) @ vec.T
    return 0.5 * (root + root.T)
