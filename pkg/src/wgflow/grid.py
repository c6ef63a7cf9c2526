"""Uniform staggered grids and the finite-volume operators living on them.

Data layout
-----------
Densities are numpy arrays of shape ``(n,)`` in 1D and ``(n, n)`` in 2D,
indexed ``rho[iy, ix]`` so that a C-order ravel is x-fastest.  Momentum is
a tuple with one array per axis holding the normal fluxes on *interior*
faces only; boundary faces carry zero flux and are not stored.  For axis
``q`` the face array has ``n - 1`` entries along that axis and ``n`` along
the others, e.g. in 2D ``m[0].shape == (n, n - 1)`` (x-faces) and
``m[1].shape == (n - 1, n)`` (y-faces).  Per-cell vector fields (the
output of the averaging operator) are arrays of shape ``(dim, *cells)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import fft

__all__ = [
    "GridSpec",
    "apply_div",
    "apply_div_adjoint",
    "apply_avg",
    "apply_avg_adjoint",
    "solve_identity_plus_div_divT",
    "neumann_eigenvalues",
    "set_workers",
]

_WORKERS = 1


def set_workers(n: int) -> None:
    """Cap the number of threads used by the FFT kernels."""
    global _WORKERS
    if n < 1:
        raise ValueError("worker count must be >= 1")
    _WORKERS = int(n)


@dataclass(frozen=True)
class GridSpec:
    """Uniform box grid with ``n`` cells of width ``h`` along each axis."""

    dim: int
    n: int
    h: float
    origin: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 1:
            raise ValueError(f"cells per axis must be positive, got {self.n}")
        if not self.h > 0:
            raise ValueError(f"spacing must be positive, got {self.h}")
        if not self.origin:
            object.__setattr__(self, "origin", (0.0,) * self.dim)
        elif len(self.origin) != self.dim:
            raise ValueError("origin must have one coordinate per axis")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_box(cls, lower: Sequence[float] | float, upper: Sequence[float] | float, h: float, dim: int = 1):
        """Grid covering ``[lower, upper]^dim`` (same extent along every axis)."""
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (dim,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (dim,))
        lengths = upper - lower
        if not np.allclose(lengths, lengths[0]):
            raise ValueError("only square domains are supported")
        n = int(round(lengths[0] / h))
        if n < 1 or abs(n * h - lengths[0]) > 1e-9 * max(1.0, lengths[0]):
            raise ValueError(f"h={h} does not divide the domain length {lengths[0]}")
        return cls(dim=dim, n=n, h=float(h), origin=tuple(lower))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def length(self) -> float:
        return self.n * self.h

    def face_shape(self, q: int) -> tuple[int, ...]:
        shape = list(self.shape)
        shape[self.dim - 1 - q] = self.n - 1
        return tuple(shape)

    @property
    def n_faces(self) -> int:
        return self.dim * (self.n - 1) * self.n ** (self.dim - 1)

    def array_axis(self, q: int) -> int:
        """numpy axis holding grid axis ``q`` (0 is x)."""
        return self.dim - 1 - q

    def cell_centers(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays (x, y, ...) broadcast to the density shape."""
        axes = [self.origin[q] + (np.arange(self.n) + 0.5) * self.h for q in range(self.dim)]
        if self.dim == 1:
            return (axes[0],)
        y, x = np.meshgrid(axes[1], axes[0], indexing="ij")
        return (x, y)

    def zeros_momentum(self) -> tuple[np.ndarray, ...]:
        return tuple(np.zeros(self.face_shape(q)) for q in range(self.dim))

    def check_density(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if r.shape != self.shape:
            raise ValueError(f"density shape {r.shape} does not match grid {self.shape}")
        return r

    def check_momentum(self, m) -> tuple[np.ndarray, ...]:
        if len(m) != self.dim:
            raise ValueError(f"momentum has {len(m)} components, grid has dim {self.dim}")
        out = []
        for q, mq in enumerate(m):
            mq = np.asarray(mq, dtype=float)
            if mq.shape != self.face_shape(q):
                raise ValueError(
                    f"momentum component {q} has shape {mq.shape}, expected {self.face_shape(q)}"
                )
            out.append(mq)
        return tuple(out)

    def check_cell_vector(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim, *self.shape):
            raise ValueError(f"cell vector field shape {w.shape} != {(self.dim, *self.shape)}")
        return w


def _pad_faces(mq: np.ndarray, axis: int) -> np.ndarray:
    width = [(0, 0)] * mq.ndim
    width[axis] = (1, 1)
    return np.pad(mq, width)


def _cut(axis: int, start, stop, ndim: int) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def apply_div(m, g: GridSpec) -> np.ndarray:
    """Discrete divergence: net outflow of each cell divided by ``h``."""
    m = g.check_momentum(m)
    out = np.zeros(g.shape)
    for q, mq in enumerate(m):
        ax = g.array_axis(q)
        out += np.diff(_pad_faces(mq, ax), axis=ax)
    return out / g.h


def apply_div_adjoint(r: np.ndarray, g: GridSpec) -> tuple[np.ndarray, ...]:
    r = g.check_density(r)
    return tuple(-np.diff(r, axis=g.array_axis(q)) / g.h for q in range(g.dim))


def apply_avg(m, g: GridSpec) -> np.ndarray:
    """Average the two normal fluxes bounding each cell, axis by axis."""
    m = g.check_momentum(m)
    out = np.empty((g.dim, *g.shape))
    for q, mq in enumerate(m):
        ax = g.array_axis(q)
        p = _pad_faces(mq, ax)
        out[q] = 0.5 * (p[_cut(ax, 1, None, p.ndim)] + p[_cut(ax, None, -1, p.ndim)])
    return out


def apply_avg_adjoint(w: np.ndarray, g: GridSpec) -> tuple[np.ndarray, ...]:
    w = g.check_cell_vector(w)
    out = []
    for q in range(g.dim):
        ax = g.array_axis(q)
        wq = w[q]
        out.append(0.5 * (wq[_cut(ax, None, -1, wq.ndim)] + wq[_cut(ax, 1, None, wq.ndim)]))
    return tuple(out)


@lru_cache(maxsize=32)
def neumann_eigenvalues(g: GridSpec) -> np.ndarray:
    """Eigenvalues of div∘div_adjoint in the orthonormal DCT-II basis."""
    k = np.arange(g.n)
    lam1 = (2.0 / g.h**2) * (1.0 - np.cos(np.pi * k / g.n))
    lam = lam1 if g.dim == 1 else lam1[:, None] + lam1[None, :]
    lam.setflags(write=False)
    return lam


def solve_identity_plus_div_divT(rhs: np.ndarray, g: GridSpec, scale: float = 1.0) -> np.ndarray:
    """Solve ``(I + scale * A A^T) x = rhs`` exactly by a DCT-II diagonalization.

    ``A A^T`` is the negative Neumann Laplacian, so cosine modes are its
    eigenvectors.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rhs = g.check_density(rhs)
    coeffs = fft.dctn(rhs, type=2, norm="ortho", workers=_WORKERS)
    coeffs /= 1.0 + scale * neumann_eigenvalues(g)
    return fft.idctn(coeffs, type=2, norm="ortho", workers=_WORKERS)


def div_divT(r: np.ndarray, g: GridSpec) -> np.ndarray:
    """``A A^T r``, the negative Neumann Laplacian (five-point in 2D)."""
    return apply_div(apply_div_adjoint(r, g), g)


# flat-vector helpers used by the solvers

def momentum_dot(a, b) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))


def momentum_norm2(a) -> float:
    return float(sum(np.vdot(x, x) for x in a))


def pcg(matvec, b, precond, x0=None, rtol=1e-11, maxiter=500, atol=None):
    """Preconditioned conjugate gradients on flat vectors.

    Stops when ``|r| <= rtol |b|`` and, if ``atol`` is given, also
    ``|r| <= atol`` (floored at ``1e-15 |b|``).  Returns ``(x, iterations,
    relative_residual)``; never raises on non-convergence or breakdown
    (singular direction), the caller decides from the reported residual.
    """
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    stop = rtol * bnorm
    if atol is not None:
        stop = max(min(stop, atol), 1e-15 * bnorm)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float, copy=True)
    r = b - matvec(x) if x0 is not None else b.copy()
    rnorm = np.linalg.norm(r)
    if rnorm <= stop:
        return x, 0, rnorm / bnorm
    z = precond(r)
    p = z.copy()
    rz = float(np.dot(r, z))
    it = 0
    while it < maxiter:
        it += 1
        ap = matvec(p)
        pap = float(np.dot(p, ap))
        if not pap > 0.0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rnorm = np.linalg.norm(r)
        if rnorm <= stop:
            break
        z = precond(r)
        rz_new = float(np.dot(r, z))
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, it, rnorm / bnorm
