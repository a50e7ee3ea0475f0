"""Haar-distributed row-orthonormal frames and section coordinate maps.

A frame is a d x n matrix P with P P^T = I_d whose row span is a uniformly
random d-dimensional subspace of R^n.  Sampling fills a Gaussian matrix,
orthonormalizes it, and applies the sign-of-diagonal correction from the
triangular factor; without the correction the law is orthonormal but not
uniform, which would bias every moment test downstream.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

ORTHONORMALITY_TOL = 1e-12


@dataclass(frozen=True)
class StiefelFrame:
    """Immutable row-orthonormal frame with its generating seed."""

    rows: np.ndarray = field(repr=False)
    n: int
    d: int
    seed: int

    def project(self, v: np.ndarray) -> np.ndarray:
        """Section coordinates P v of an ambient vector."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n,):
            raise ValueError(f"expected ambient vector of length {self.n}, got shape {v.shape}")
        return self.rows @ v

    def lift(self, w: np.ndarray) -> np.ndarray:
        """Ambient vector P^T w of section coordinates; norm preserving."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.d,):
            raise ValueError(f"expected section vector of length {self.d}, got shape {w.shape}")
        return self.rows.T @ w

    def orthonormality_defect(self) -> float:
        gram = self.rows @ self.rows.T
        return float(np.max(np.abs(gram - np.eye(self.d))))


def _haar_factor(gauss: np.ndarray) -> np.ndarray:
    """Orthonormalize stacked (..., n, d) Gaussian matrices to Haar Q factors."""
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.einsum("...ii->...i", r))
    signs[signs == 0] = 1.0
    return q * signs[..., None, :]


def sample_stiefel(n: int, d: int, seed: int) -> StiefelFrame:
    """Draw one Haar frame on the Stiefel manifold of d-frames in R^n."""
    if d < 1 or d > n:
        raise ValueError(f"section dimension must satisfy 1 <= d <= n, got d={d}, n={n}")
    rng = derive_rng(seed, "stiefel")
    q = _haar_factor(rng.standard_normal((n, d)))
    rows = np.ascontiguousarray(q.T)
    rows.setflags(write=False)
    return StiefelFrame(rows=rows, n=n, d=d, seed=int(seed))


def coordinate_frame(n: int, d: int, indices=None) -> StiefelFrame:
    """Deterministic frame selecting d coordinate axes (the first d by default)."""
    if d < 1 or d > n:
        raise ValueError(f"section dimension must satisfy 1 <= d <= n, got d={d}, n={n}")
    if indices is None:
        indices = range(d)
    rows = np.zeros((d, n))
    for row, idx in enumerate(indices):
        rows[row, idx] = 1.0
    rows.setflags(write=False)
    return StiefelFrame(rows=rows, n=n, d=d, seed=-1)


def project(frame: StiefelFrame, v: np.ndarray) -> np.ndarray:
    return frame.project(v)


def lift(frame: StiefelFrame, w: np.ndarray) -> np.ndarray:
    return frame.lift(w)


def haar_projection_samples(
    n: int,
    d: int,
    vectors: np.ndarray,
    samples: int,
    seed: int,
    chunk_bytes: int = 1 << 26,
) -> np.ndarray:
    """Project fixed ambient vectors through independent Haar frames.

    Returns an array of shape (samples, m, d) whose [t, i, :] slice holds
    P_t v_i for the t-th frame.  Frames are generated in chunks so the full
    (samples, n, d) Gaussian stack never has to be materialized at once;
    the result is identical for any chunk size given the same seed.
    """
    if d < 1 or d > n:
        raise ValueError(f"section dimension must satisfy 1 <= d <= n, got d={d}, n={n}")
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if vectors.shape[1] != n:
        raise ValueError(f"expected vectors of length {n}, got shape {vectors.shape}")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = derive_rng(seed, "stiefel-batch")
    chunk = max(1, int(chunk_bytes // (8 * n * d)))
    out = np.empty((samples, vectors.shape[0], d))
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        q = _haar_factor(rng.standard_normal((b, n, d)))
        out[done : done + b] = np.matmul(vectors, q)
        done += b
    return out
