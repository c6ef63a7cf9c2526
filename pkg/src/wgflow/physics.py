"""Mobility and free-energy models.

Energies follow one convention throughout: ``grad`` returns the first
variation of the *rescaled* discrete energy (``E_h / h^d``), i.e. a
chemical potential per cell, and ``value`` returns ``E_h`` itself.  The
two are related by ``dE_h = h^d <grad, drho>``.

A model may also expose a convex splitting ``split`` that separates an
ill-conditioned convex part (handled implicitly through its conjugate) from
a smooth remainder handled by explicit gradient steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy import fft, sparse
from scipy.sparse import linalg as spla
from scipy.special import xlogy

from .grid import GridSpec, div_divT, neumann_eigenvalues, pcg

__all__ = [
    "DomainError",
    "EnergyUnavailable",
    "Mobility",
    "MOBILITIES",
    "mobility_midpoint",
    "laplacian",
    "Energy",
    "Split",
    "PorousMediumEnergy",
    "SaturatedFokkerPlanckEnergy",
    "ThinFilmEnergy",
    "CahnHilliardEnergy",
    "AnisotropicCahnHilliardEnergy",
    "DoublyDegenerateModel",
    "QuadraticEnergy",
    "ExponentialConjugate",
    "PointwisePart",
    "CoupledPart",
    "SpectralQuadraticPart",
    "GradientFlowProblem",
    "energy_grad",
    "energy_value",
]


class DomainError(ValueError):
    """A density left the domain where the model's formula is defined."""

    def __init__(self, message: str, index=None):
        super().__init__(message if index is None else f"{message} at cell {index}")
        self.index = index


class EnergyUnavailable(RuntimeError):
    """The model only supplies a chemical potential, not an energy value."""


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx) if idx.size > 1 else int(idx[0])


# --------------------------------------------------------------------------
# mobilities


@dataclass(frozen=True)
class Mobility:
    """Mobility ``M(rho)`` with its derivative.

    ``factor`` is ``g`` in ``M(rho) = rho * g(rho)``; it enables the
    semi-implicit variant ``M~(rho; rho_n) = rho * g(rho_n)``.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    bounds: tuple[float, float] = (-np.inf, np.inf)
    mode: str = "implicit"
    factor: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.mode not in ("implicit", "semi-implicit"):
            raise ValueError(f"unknown mobility mode {self.mode!r}")
        if self.mode == "semi-implicit" and self.factor is None:
            raise ValueError(f"mobility {self.name!r} has no semi-implicit form")

    def with_mode(self, mode: str) -> "Mobility":
        return replace(self, mode=mode)


def _linear():
    return Mobility("linear", lambda r: np.asarray(r, float).copy(), np.ones_like,
                    bounds=(0.0, np.inf), factor=np.ones_like)


def _saturated():
    return Mobility("saturated", lambda r: r * (1.0 - r), lambda r: 1.0 - 2.0 * r,
                    bounds=(0.0, 1.0), factor=lambda r: 1.0 - r)


def _cubic():
    return Mobility("cubic", lambda r: r**3, lambda r: 3.0 * r**2,
                    bounds=(0.0, np.inf), factor=lambda r: r**2)


def _one_minus_square():
    return Mobility("one_minus_square", lambda r: 1.0 - r**2, lambda r: -2.0 * r,
                    bounds=(-1.0, 1.0))


def _one_minus_square_squared():
    return Mobility("one_minus_square_squared", lambda r: (1.0 - r**2) ** 2,
                    lambda r: -4.0 * r * (1.0 - r**2), bounds=(-1.0, 1.0))


MOBILITIES: dict[str, Callable[[], Mobility]] = {
    "linear": _linear,
    "saturated": _saturated,
    "cubic": _cubic,
    "one_minus_square": _one_minus_square,
    "one_minus_square_squared": _one_minus_square_squared,
}


def mobility_midpoint(rho, rho_prev, mob: Mobility, box=None):
    """Effective mobility and its derivative with respect to ``rho``.

    Implicit mode evaluates ``M`` at the mid-point ``(rho_n + rho)/2`` and
    returns ``M'/2`` there (chain rule).  Semi-implicit mode returns
    ``rho * g(rho_n)`` and ``g(rho_n)``.  Arguments are clamped to ``box``
    (default: the mobility's own feasible bounds) before evaluation.
    """
    lo, hi = mob.bounds if box is None else box
    rho = np.clip(rho, lo, hi)
    rho_prev = np.clip(rho_prev, lo, hi)
    if mob.mode == "implicit":
        s = 0.5 * (rho + rho_prev)
        return mob.value(s), 0.5 * mob.deriv(s)
    g = mob.factor(rho_prev)
    return rho * g, np.array(g, dtype=float, copy=True)


# --------------------------------------------------------------------------
# finite-difference stencils for the energies


def laplacian(rho: np.ndarray, grid: GridSpec, bc: str = "neumann") -> np.ndarray:
    """Five-point (three-point in 1D) Laplacian with Neumann or periodic ends."""
    if bc == "neumann":
        return -div_divT(rho, grid)
    if bc == "periodic":
        out = -2.0 * grid.dim * rho
        for ax in range(grid.dim):
            out = out + np.roll(rho, 1, axis=ax) + np.roll(rho, -1, axis=ax)
        return out / grid.h**2
    raise ValueError(f"unknown boundary mode {bc!r}")


def _dirichlet_value(rho: np.ndarray, grid: GridSpec, bc: str) -> float:
    """``(1/2) sum |grad rho|^2 h^d`` with face differences (trapezoidal rule)."""
    total = 0.0
    for ax in range(grid.dim):
        if bc == "periodic":
            d = np.roll(rho, -1, axis=ax) - rho
        else:
            d = np.diff(rho, axis=ax)
        total += float(np.sum(d * d))
    return 0.5 * total * grid.h ** (grid.dim - 2)


def _periodic_eigenvalues(grid: GridSpec) -> np.ndarray:
    k = np.arange(grid.n)
    lam1 = (2.0 / grid.h**2) * (1.0 - np.cos(2.0 * np.pi * k / grid.n))
    if grid.dim == 1:
        return lam1
    return lam1[:, None] + lam1[None, :]


# --------------------------------------------------------------------------
# convex parts used by the splitting


class ExponentialConjugate:
    """``U(x) = sum x log x - x`` handled through ``U*(mu) = sum exp(mu)``."""

    closed_form = True

    def conj_grad(self, z):
        return np.exp(np.minimum(z, 700.0))

    def conj_hess(self, z):
        return np.exp(np.minimum(z, 700.0))

    def admissible(self, x) -> bool:
        return bool(np.all(np.asarray(x) > 0))

    def initial_guess(self, mu0, sigma, dt):
        """Start for ``sigma exp(mu/dt) + mu = mu0``.

        The root is ``mu0 - dt W(z)`` with ``log z = log(sigma/dt) + mu0/dt``;
        for large ``z`` the two-term expansion ``W ~ L - log L`` is used in
        log space (``z`` itself may overflow), otherwise ``mu0``.
        """
        big = np.log(sigma / dt) + mu0 / dt
        safe = np.maximum(big, np.e)
        w = safe - np.log(safe)
        return np.where(big > np.e, mu0 - dt * w, mu0)

    def grad(self, x):
        x = np.asarray(x, float)
        if np.any(x <= 0):
            raise DomainError("log of a non-positive density", _first_bad(x <= 0))
        return np.log(x)


class PointwisePart:
    """Separable convex part known through its derivative ``p(x)`` only."""

    closed_form = False

    def __init__(self, p, dp, lower: float = -np.inf, upper: float = np.inf):
        self.p, self.dp = p, dp
        self.lower, self.upper = lower, upper

    def admissible(self, x) -> bool:
        return bool(np.all((x > self.lower) & (x < self.upper)))

    def grad(self, x):
        return self.p(x)

    def newton_step(self, x, res, sigma, dt):
        return res / (sigma + dt * self.dp(x))


class SpectralQuadraticPart:
    """Quadratic convex part with gradient ``c L^power x``.

    ``L`` is the (positive) periodic or Neumann discrete Laplacian; with
    ``power=2`` this is ``U(x) = (c/2) |L x|^2``.  The gradient is diagonal
    in Fourier/cosine modes, so every Newton system is solved exactly.
    """

    closed_form = False
    lower, upper = -np.inf, np.inf

    def __init__(self, grid: GridSpec, coef: float, power: int = 2, bc: str = "periodic"):
        self.grid, self.coef, self.power, self.bc = grid, coef, power, bc
        lam = _periodic_eigenvalues(grid) if bc == "periodic" else neumann_eigenvalues(grid)
        self._symbol = coef * lam**power

    def admissible(self, x) -> bool:
        return True

    def grad(self, x):
        out = x
        for _ in range(self.power):
            out = -laplacian(out, self.grid, self.bc)
        return self.coef * out

    def newton_step(self, x, res, sigma, dt):
        denom = sigma + dt * self._symbol
        if self.bc == "periodic":
            return np.real(fft.ifftn(fft.fftn(res) / denom))
        c = fft.dctn(res, type=2, norm="ortho")
        return fft.idctn(c / denom, type=2, norm="ortho")


class CoupledPart:
    """Chemical potential ``w(x) = (x^3 - x + eps^2 A A^T x) / (1 - x^2)^2``.

    The proximal equation ``dt w(x) + sigma x = mu0`` is handled in scaled
    form, multiplied by ``(1 - x^2)^2``.  The scaled residual is the
    gradient of a polynomial (:meth:`scaled_objective`) and its Jacobian
    ``diag(q) + dt eps^2 A A^T`` has a constant-coefficient coupling, so
    Newton systems are solved by conjugate gradients with a DCT
    preconditioner, falling back to a sparse direct solve.
    """

    closed_form = False
    lower, upper = -1.0, 1.0

    def __init__(self, grid: GridSpec, eps: float, rtol: float = 1e-13, maxiter: int = 500):
        self.grid, self.eps = grid, eps
        self.rtol, self.maxiter = rtol, maxiter
        self._L = None

    def admissible(self, x) -> bool:
        return bool(np.all(np.abs(x) < 1.0))

    def grad(self, x):
        x = np.asarray(x, float)
        bad = np.abs(x) >= 1.0
        if np.any(bad):
            raise DomainError("|rho| >= 1 in the doubly degenerate potential", _first_bad(bad))
        w = 1.0 - x * x
        return (x**3 - x + self.eps**2 * div_divT(x, self.grid)) / (w * w)

    def _laplacian_matrix(self):
        if self._L is None:
            n = self.grid.n
            main = np.full(n, 2.0)
            main[0] = main[-1] = 1.0
            l1 = sparse.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1]) / self.grid.h**2
            if self.grid.dim == 1:
                self._L = l1.tocsr()
            else:
                eye = sparse.identity(n)
                self._L = (sparse.kron(eye, l1) + sparse.kron(l1, eye)).tocsr()
        return self._L

    def scaled_objective(self, x, mu0, sigma, dt):
        """Potential whose gradient is :meth:`scaled_residual` (the scaled Jacobian is symmetric)."""
        x2 = x * x
        cell = (dt * (0.25 * x2 * x2 - 0.5 * x2)
                + sigma * (0.5 * x2 - 0.5 * x2 * x2 + x2**3 / 6.0)
                - mu0 * x * (1.0 - 2.0 * x2 / 3.0 + 0.2 * x2 * x2))
        return float(np.sum(cell) + 0.5 * dt * self.eps**2 * np.sum(x * div_divT(x, self.grid)))

    def scaled_residual(self, x, mu0, sigma, dt):
        """Optimality residual multiplied by ``(1 - x^2)^2``; polynomial and defined on ``[-1, 1]``."""
        w = 1.0 - x * x
        return dt * (x**3 - x + self.eps**2 * div_divT(x, self.grid)) + (sigma * x - mu0) * w * w

    def scaled_hessian_diag(self, x, mu0, sigma, dt):
        w = 1.0 - x * x
        return dt * (3.0 * x * x - 1.0) + sigma * w * w - 4.0 * x * w * (sigma * x - mu0)

    def scaled_newton_step(self, diag, rhs, free, dt):
        """Solve ``(diag(diag) + dt eps^2 A A^T)_{FF} y = rhs_F``; zero outside ``free``."""
        c = dt * self.eps**2
        y = np.zeros(rhs.size)
        f = free.ravel()
        if not f.any():
            return y.reshape(rhs.shape)
        if f.all():
            d = _pcg_scaled(diag, c, rhs, self.grid, self.rtol, self.maxiter)
            if d is not None:
                return d
        jac = (sparse.diags(diag.ravel()) + c * self._laplacian_matrix()).tocsr()
        y[f] = spla.spsolve(jac[f][:, f].tocsc(), rhs.ravel()[f])
        return y.reshape(rhs.shape)


def _pcg_scaled(s, c, b, grid, rtol, maxiter):
    """CG on ``diag(s) + c A A^T`` preconditioned by ``(mean(s) I + c A A^T)^{-1}``."""
    shape = b.shape
    symbol = float(np.mean(s)) + c * neumann_eigenvalues(grid)

    def matvec(v):
        v = v.reshape(shape)
        return (s * v + c * div_divT(v, grid)).ravel()

    def prec(r):
        r = r.reshape(shape)
        return fft.idctn(fft.dctn(r, type=2, norm="ortho") / symbol, type=2, norm="ortho").ravel()

    x, _, rel = pcg(matvec, b.ravel(), prec, rtol=rtol, maxiter=maxiter)
    return x.reshape(shape) if rel <= 1e3 * rtol else None


@dataclass(frozen=True)
class Split:
    """``E_hat = U + V`` with ``U`` convex (implicit) and ``V`` smooth (explicit)."""

    convex: object
    v_grad: Callable[[np.ndarray], np.ndarray]

    def u_grad(self, rho):
        return self.convex.grad(rho)


# --------------------------------------------------------------------------
# energies


class Energy:
    """Base class; subclasses set ``name`` and implement ``grad``."""

    name = "energy"
    split: Optional[Split] = None
    has_value = True

    def __init__(self, grid: GridSpec, bc: str = "neumann"):
        self.grid = grid
        self.bc = bc

    def grad(self, rho: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, rho: np.ndarray) -> float:
        raise EnergyUnavailable(f"{self.name} supplies only its chemical potential")


class PorousMediumEnergy(Energy):
    """Internal energy ``U(rho) = rho^2``."""

    name = "porous_media"

    def grad(self, rho):
        return 2.0 * rho

    def value(self, rho):
        return float(np.sum(rho * rho)) * self.grid.cell_volume


class SaturatedFokkerPlanckEnergy(Energy):
    """Gibbs-Boltzmann entropy plus a confining potential ``V``.

    The entropy is the convex part of the split (conjugate ``sum exp``),
    the potential energy the explicit part.
    """

    name = "fokker_planck_saturated"

    def __init__(self, grid, potential: np.ndarray, bc="neumann"):
        super().__init__(grid, bc)
        self.potential = np.asarray(potential, float)
        self.split = Split(ExponentialConjugate(), lambda rho: self.potential)

    def grad(self, rho):
        bad = rho <= 0
        if np.any(bad):
            raise DomainError("log of a non-positive density", _first_bad(bad))
        return np.log(rho) + self.potential

    def value(self, rho):
        return float(np.sum(xlogy(rho, rho) - rho + self.potential * rho)) * self.grid.cell_volume


def _disjoining(kind: str, eps: float):
    """Disjoining pressure ``P``, its derivative, and an antiderivative."""
    if kind == "vdw1":
        return (lambda r: r**-3 - eps * r**-4,
                lambda r: -3.0 * r**-4 + 4.0 * eps * r**-5,
                lambda r: -0.5 * r**-2 + eps / 3.0 * r**-3)
    if kind == "vdw2":
        e6 = eps**6
        return (lambda r: r**-3 - e6 * r**-9,
                lambda r: -3.0 * r**-4 + 9.0 * e6 * r**-10,
                lambda r: -0.5 * r**-2 + e6 / 8.0 * r**-8)
    raise ValueError(f"unknown disjoining pressure {kind!r}")


class ThinFilmEnergy(Energy):
    """Surface energy ``(1/2)|grad rho|^2`` plus an optional intermolecular term.

    With an intermolecular pressure the splitting puts ``P`` in the convex
    (implicit) part and the Laplacian in the explicit part.
    """

    name = "thin_film"

    def __init__(self, grid, disjoining: Optional[str] = None, eps: float = 0.1, bc="neumann"):
        super().__init__(grid, bc)
        self.disjoining, self.eps = disjoining, eps
        if disjoining is None:
            self._p = None
        else:
            self.name = f"thin_film_{disjoining}"
            p, dp, self._pint = _disjoining(disjoining, eps)
            self._p = p
            self.split = Split(PointwisePart(p, dp, lower=0.0),
                               lambda rho: -laplacian(rho, self.grid, self.bc))

    def grad(self, rho):
        out = -laplacian(rho, self.grid, self.bc)
        if self._p is not None:
            bad = rho <= 0
            if np.any(bad):
                raise DomainError("film thickness must stay positive", _first_bad(bad))
            out = out + self._p(rho)
        return out

    def value(self, rho):
        e = _dirichlet_value(rho, self.grid, self.bc)
        if self._p is not None:
            e += float(np.sum(self._pint(rho))) * self.grid.cell_volume
        return e


class CahnHilliardEnergy(Energy):
    """Double well ``(rho^2 - 1)^2 / 4`` plus ``(eps^2/2)|grad rho|^2``."""

    name = "cahn_hilliard"

    def __init__(self, grid, eps: float, bc="neumann"):
        super().__init__(grid, bc)
        self.eps = eps

    def grad(self, rho):
        return rho * (rho * rho - 1.0) - self.eps**2 * laplacian(rho, self.grid, self.bc)

    def value(self, rho):
        bulk = 0.25 * float(np.sum((rho * rho - 1.0) ** 2)) * self.grid.cell_volume
        return bulk + self.eps**2 * _dirichlet_value(rho, self.grid, self.bc)


def _central_gradient(rho, grid):
    """Periodic centered differences ``(d/dx, d/dy)`` over ``2h``."""
    gx = (np.roll(rho, -1, axis=1) - np.roll(rho, 1, axis=1)) / (2.0 * grid.h)
    gy = (np.roll(rho, -1, axis=0) - np.roll(rho, 1, axis=0)) / (2.0 * grid.h)
    return gx, gy


class AnisotropicCahnHilliardEnergy(Energy):
    """Kobayashi-type anisotropic surface energy with biharmonic regularization.

    Per cell: ``(rho^2-1)^2/4 + (eps^2/2) gamma(p)^2 |D rho|^2
    + (beta eps^2/2) (Lap rho)^2`` with periodic centered differences ``D``
    and the regularized normal ``p = D rho / sqrt(|D rho|^2 + delta^2)``.
    The biharmonic term is the convex part of the split.

    ``kind`` selects gamma: ``fourfold``, ``eightfold`` or ``omega``
    (``1 + alpha cos(omega theta)``, ``tan(theta) = p1/p2``).
    """

    name = "cahn_hilliard_aniso"

    def __init__(self, grid, eps, beta, kind, alpha, omega=4.0, delta=1e-8):
        if grid.dim != 2:
            raise ValueError("anisotropic energies are two-dimensional")
        super().__init__(grid, "periodic")
        if kind not in ("fourfold", "eightfold", "omega"):
            raise ValueError(f"unknown anisotropy {kind!r}")
        self.name = f"cahn_hilliard_aniso_{kind}"
        self.eps, self.beta, self.kind = eps, beta, kind
        self.alpha, self.omega, self.delta = alpha, omega, delta
        self.biharmonic = SpectralQuadraticPart(grid, beta * eps**2, power=2, bc="periodic")
        self.split = Split(self.biharmonic, self._smooth_grad)

    def _gamma(self, gx, gy):
        a = self.alpha
        if self.kind == "omega":
            theta = np.arctan2(gx, gy)
            return 1.0 + a * np.cos(self.omega * theta)
        s = np.sqrt(gx * gx + gy * gy + self.delta**2)
        p1, p2 = gx / s, gy / s
        if self.kind == "fourfold":
            return 1.0 + a * (4 * p1**4 + 4 * p2**4 - 3)
        poly = lambda p: 8 * p**8 - 10 * p**6 + p**4
        return 1.0 + a * (8 * poly(p1) + 8 * poly(p2) + 9)

    def _flux(self, gx, gy):
        """Gradient of ``gamma(p(g))^2 |g|^2 / 2`` with respect to ``g``."""
        gam = self._gamma(gx, gy)
        g2 = gx * gx + gy * gy
        a = self.alpha
        if self.kind == "omega":
            theta = np.arctan2(gx, gy)
            c = -gam * a * self.omega * np.sin(self.omega * theta)
            return gam**2 * gx + c * gy, gam**2 * gy - c * gx
        s = np.sqrt(g2 + self.delta**2)
        p1, p2 = gx / s, gy / s
        if self.kind == "fourfold":
            d1, d2 = 16 * a * p1**3, 16 * a * p2**3
        else:
            dpoly = lambda p: 64 * p**7 - 60 * p**5 + 4 * p**3
            d1, d2 = 8 * a * dpoly(p1), 8 * a * dpoly(p2)
        # chain rule through p = g / s
        proj = (gx * d1 + gy * d2) / s**3
        dg1 = d1 / s - gx * proj
        dg2 = d2 / s - gy * proj
        return gam * g2 * dg1 + gam**2 * gx, gam * g2 * dg2 + gam**2 * gy

    def _smooth_grad(self, rho):
        gx, gy = _central_gradient(rho, self.grid)
        fx, fy = self._flux(gx, gy)
        dfx, _ = _central_gradient(fx, self.grid)
        _, dfy = _central_gradient(fy, self.grid)
        return rho * (rho * rho - 1.0) - self.eps**2 * (dfx + dfy)

    def grad(self, rho):
        return self._smooth_grad(rho) + self.biharmonic.grad(rho)

    def value(self, rho):
        gx, gy = _central_gradient(rho, self.grid)
        gam = self._gamma(gx, gy)
        lap = laplacian(rho, self.grid, "periodic")
        dens = (0.25 * (rho * rho - 1.0) ** 2
                + 0.5 * self.eps**2 * gam**2 * (gx * gx + gy * gy)
                + 0.5 * self.beta * self.eps**2 * lap * lap)
        return float(np.sum(dens)) * self.grid.cell_volume


class DoublyDegenerateModel(Energy):
    """Non-variational diffuse-interface model with a singular potential field.

    Only the potential ``w(rho)`` exists; it is entirely the implicit part
    of the splitting and is reached through the proximal of its conjugate.
    ``monitor`` evaluates the Ginzburg-Landau energy for diagnostics.
    """

    name = "doubly_degenerate"
    has_value = False

    def __init__(self, grid, eps: float, bc="neumann"):
        if bc != "neumann":
            raise ValueError("the doubly degenerate model uses Neumann boundaries")
        super().__init__(grid, bc)
        self.eps = eps
        self.part = CoupledPart(grid, eps)
        self.split = Split(self.part, lambda rho: np.zeros_like(rho))

    def grad(self, rho):
        return self.part.grad(rho)

    def monitor(self, rho):
        return CahnHilliardEnergy(self.grid, self.eps).value(rho)


class QuadraticEnergy(Energy):
    """``(c/2) sum rho^2 + sum V rho``; used for operator checks."""

    name = "quadratic"

    def __init__(self, grid, coef=1.0, potential=0.0):
        super().__init__(grid)
        self.coef, self.potential = coef, potential

    def grad(self, rho):
        return self.coef * rho + self.potential

    def value(self, rho):
        return float(np.sum(0.5 * self.coef * rho**2 + self.potential * rho)) * self.grid.cell_volume



# --------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class GradientFlowProblem:
    grid: GridSpec
    mobility: Mobility
    energy: Energy
    box: tuple[float, float]
    rho_bc: str = "neumann"

    def __post_init__(self):
        lo, hi = self.box
        if not lo < hi:
            raise ValueError(f"box bounds must satisfy lower < upper, got {self.box}")
        if self.rho_bc not in ("none", "neumann", "periodic"):
            raise ValueError(f"unknown rho boundary mode {self.rho_bc!r}")

    def check_initial(self, rho):
        rho = self.grid.check_density(rho)
        if not np.all(np.isfinite(rho)):
            raise ValueError("initial density has non-finite values")
        lo, hi = self.box
        bad = (rho < lo) | (rho > hi)
        if np.any(bad):
            raise ValueError(f"initial density leaves the box [{lo}, {hi}] at cell {_first_bad(bad)}")
        return rho


def energy_grad(rho, problem: GradientFlowProblem):
    return problem.energy.grad(problem.grid.check_density(rho))


def energy_value(rho, problem: GradientFlowProblem) -> float:
    return problem.energy.value(problem.grid.check_density(rho))
