"""Transfer operators on the positive unit sphere and their eigendata.

The operators ``P f(x) = E[|M x|^theta f((M x)~)]`` and the adjoint built
from ``M^T`` are discretised on an angular grid with piecewise-linear
interpolation. For ``d = 1`` the sphere is a single point and everything
is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .errors import InterpolationOutOfRange, NoConvergence, NoRoot
from .model import ModelSpec, Norm, vec_norm

__all__ = [
    "SphereGrid",
    "SpectralSolution",
    "make_grid",
    "transfer_matrix",
    "apply_transfer",
    "apply_adjoint",
    "eigenvalue",
    "solve_eigen",
    "find_alpha",
    "lambda_prime",
    "lambda_prime_mc",
    "solve_alpha",
    "duality_residual",
]

HALF_PI = 0.5 * math.pi
_ANGLE_SLACK = 1e-9

DEFAULT_RESOLUTION = {1: 1, 2: 513, 3: 49}


@dataclass(frozen=True)
class SphereGrid:
    """Angular grid on the nonnegative part of the unit sphere.

    Parameters
    ----------
    dim : int
        Dimension ``d`` (1, 2 or 3).
    n : int
        Points per angular axis. Ignored for ``d = 1``.
    norm : Norm
        Norm that defines the sphere; nodes satisfy ``|x| = 1``.

    Notes
    -----
    ``d = 2`` uses the angle ``phi = atan2(x_2, x_1)`` on ``[0, pi/2]``.
    ``d = 3`` uses the polar angle from the third axis and the azimuth,
    both on ``[0, pi/2]``, in a product grid. Nodes are the Euclidean unit
    vectors at those angles rescaled to the chosen norm, so the chart does
    not depend on the norm.
    """

    dim: int
    n: int = 0
    norm: Norm = Norm.L1
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)
    spacing: float = field(init=False, compare=False)

    def __post_init__(self):
        d = int(self.dim)
        norm = Norm(self.norm)
        n = int(self.n) if self.n else DEFAULT_RESOLUTION.get(d, 0)
        if d == 1:
            nodes = np.ones((1, 1))
            weights = np.ones(1)
            n, spacing = 1, 0.0
        elif d == 2:
            if n < 2:
                raise ValueError("a d=2 grid needs at least 2 points")
            phi = np.linspace(0.0, HALF_PI, n)
            nodes = np.column_stack([np.cos(phi), np.sin(phi)])
            spacing = HALF_PI / (n - 1)
            weights = np.full(n, spacing)
            weights[[0, -1]] *= 0.5
        elif d == 3:
            if n < 2:
                raise ValueError("a d=3 grid needs at least 2 points per axis")
            ang = np.linspace(0.0, HALF_PI, n)
            a, b = np.meshgrid(ang, ang, indexing="ij")
            a, b = a.ravel(), b.ravel()
            nodes = np.column_stack([np.sin(a) * np.cos(b), np.sin(a) * np.sin(b), np.cos(a)])
            spacing = HALF_PI / (n - 1)
            trap = np.full(n, spacing)
            trap[[0, -1]] *= 0.5
            weights = np.outer(trap, trap).ravel() * np.sin(a)
            weights *= HALF_PI / weights.sum()
        else:
            raise ValueError("sphere grids are available for d <= 3 only")
        nodes = nodes / vec_norm(nodes, norm)[:, None]
        nodes = np.clip(nodes, 0.0, None)
        for arr in (nodes, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "norm", norm)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def angles(self, x: np.ndarray) -> np.ndarray:
        """Chart coordinates of directions ``x`` with shape ``(..., d-1)``."""
        x = np.asarray(x, dtype=float)
        if self.dim == 2:
            return np.arctan2(x[..., 1], x[..., 0])[..., None]
        if self.dim == 3:
            rho = np.hypot(x[..., 0], x[..., 1])
            a = np.arctan2(rho, x[..., 2])
            b = np.arctan2(x[..., 1], x[..., 0])
            return np.stack([a, b], axis=-1)
        return np.zeros(x.shape[:-1] + (0,))

    def stencil(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolation stencil for directions ``x`` of shape ``(m, d)``.

        Returns
        -------
        idx : ndarray of int, shape (m, c)
            Node indices.
        wts : ndarray, shape (m, c)
            Interpolation weights, nonnegative and summing to one per row.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = x.shape[0]
        if self.dim == 1:
            return np.zeros((m, 1), dtype=np.intp), np.ones((m, 1))
        ang = self.angles(x)
        if np.any(ang < -_ANGLE_SLACK) or np.any(ang > HALF_PI + _ANGLE_SLACK) or not np.all(np.isfinite(ang)):
            raise InterpolationOutOfRange("direction left the nonnegative chart")
        t = np.clip(ang, 0.0, HALF_PI) / self.spacing
        j0 = np.clip(np.floor(t).astype(np.intp), 0, self.n - 2)
        fr = t - j0
        if self.dim == 2:
            idx = np.column_stack([j0[:, 0], j0[:, 0] + 1])
            wts = np.column_stack([1.0 - fr[:, 0], fr[:, 0]])
            return idx, wts
        i, j = j0[:, 0], j0[:, 1]
        fa, fb = fr[:, 0], fr[:, 1]
        n = self.n
        idx = np.column_stack([i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1])
        wts = np.column_stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb])
        return idx, wts

    def interpolate(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Piecewise-linear interpolation of node values at directions ``x``."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        idx, wts = self.stencil(x.reshape(-1, self.dim))
        out = (np.asarray(values)[idx] * wts).sum(axis=1)
        return out.reshape(shape)

    def angular_distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Euclidean angle between directions ``x`` and ``y``."""
        xe = np.asarray(x, dtype=float)
        ye = np.asarray(y, dtype=float)
        xe = xe / np.linalg.norm(xe, axis=-1, keepdims=True)
        ye = ye / np.linalg.norm(ye, axis=-1, keepdims=True)
        return np.arccos(np.clip((xe * ye).sum(axis=-1), -1.0, 1.0))


def make_grid(spec: ModelSpec, n: int | None = None) -> SphereGrid:
    """Default grid for a model."""
    return SphereGrid(spec.dim, n or 0, spec.norm)


# --------------------------------------------------------------------------
# operators


@dataclass(frozen=True)
class _Geometry:
    rows: np.ndarray
    cols: np.ndarray
    interp: np.ndarray
    logp: np.ndarray
    loggrowth: np.ndarray
    size: int


@lru_cache(maxsize=64)
def _geometry(spec: ModelSpec, grid: SphereGrid, adjoint: bool) -> _Geometry:
    rows, cols, interp, logp, loggrowth = [], [], [], [], []
    nodes = grid.nodes
    ar = np.arange(grid.size)
    for p, m in zip(spec.probs, spec.mats):
        mat = m.T if adjoint else m
        y = nodes @ mat.T
        g = vec_norm(y, grid.norm)
        idx, wts = grid.stencil(y / g[:, None])
        c = idx.shape[1]
        rows.append(np.repeat(ar, c))
        cols.append(idx.ravel())
        interp.append(wts.ravel())
        logp.append(np.full(ar.size * c, math.log(p)))
        loggrowth.append(np.repeat(np.log(g), c))
    return _Geometry(
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(interp),
        np.concatenate(logp),
        np.concatenate(loggrowth),
        grid.size,
    )


def transfer_matrix(spec: ModelSpec, grid: SphereGrid, theta: float, adjoint: bool = False) -> sp.csr_matrix:
    """Sparse matrix ``A`` with ``(P f)(nodes) = A @ f(nodes)``."""
    geo = _geometry(spec, grid, bool(adjoint))
    vals = np.exp(geo.logp + theta * geo.loggrowth) * geo.interp
    return sp.csr_matrix((vals, (geo.rows, geo.cols)), shape=(geo.size, geo.size))


def apply_transfer(spec: ModelSpec, grid: SphereGrid, theta: float, f: np.ndarray) -> np.ndarray:
    """Apply ``P_theta`` to node values ``f``."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite on all nodes")
    return transfer_matrix(spec, grid, theta) @ f


def apply_adjoint(spec: ModelSpec, grid: SphereGrid, theta: float, f: np.ndarray) -> np.ndarray:
    """Apply the transposed-matrix operator ``P*_theta`` to node values ``f``."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    return transfer_matrix(spec, grid, theta, adjoint=True) @ np.asarray(f, dtype=float)


def _power(op, n: int, tol: float, max_iter: int, measure: bool, what: str):
    """Power iteration for the dominant eigenpair of a nonnegative operator.

    Functions are scaled to unit sup-norm and measures to unit mass.
    Returns ``(lam, vec, residual, iterations)``.
    """
    v = np.full(n, 1.0 / n if measure else 1.0)
    lam_old = np.inf
    residual = np.inf
    for it in range(1, max_iter + 1):
        w = op(v)
        scale = w.sum() if measure else w.max()
        if not (scale > 0 and np.isfinite(scale)):
            raise NoConvergence(f"{what}: iterate collapsed", residual)
        lam = scale
        w = w / scale
        residual = float(np.abs(op(w) - lam * w).max() / np.abs(w).max())
        v = w
        if abs(lam - lam_old) <= tol * lam and residual <= tol * lam:
            return lam, v, residual, it
        lam_old = lam
    raise NoConvergence(f"{what}: no convergence after {max_iter} iterations", residual)


@dataclass(frozen=True)
class SpectralSolution:
    """Eigendata of the transfer operators at one value of ``theta``.

    Attributes
    ----------
    theta : float
    lam : float
        Dominant eigenvalue ``lambda(theta)``.
    Lambda : float
        ``log lam``.
    r, l : ndarray
        Right eigenfunction on nodes and eigenmeasure weights, normalised so
        that ``l`` sums to one and ``sum(r * l) = 1``.
    r_star, l_star : ndarray
        The same for the transposed-matrix operator.
    lam_star : float
        Eigenvalue found for the transposed operator.
    residual, adjoint_residual : float
        Relative sup-norm residuals of the right and left iterations.
    alpha, lambda_prime : float or None
        Set when ``theta`` is the root of ``lambda = 1``.
    """

    theta: float
    lam: float
    Lambda: float
    r: np.ndarray
    l: np.ndarray
    r_star: np.ndarray
    l_star: np.ndarray
    lam_star: float
    residual: float
    adjoint_residual: float
    grid: SphereGrid = field(repr=False)
    alpha: float | None = None
    lambda_prime: float | None = None
    iterations: int = 0

    def r_at(self, x: np.ndarray) -> np.ndarray:
        """Interpolated ``r`` at directions ``x``."""
        return self.grid.interpolate(self.r, x)

    @property
    def eta(self) -> np.ndarray:
        """Node weights ``r * l`` of the stationary direction law."""
        return self.r * self.l

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "lambda": self.lam,
            "Lambda": self.Lambda,
            "alpha": self.alpha,
            "lambda_prime": self.lambda_prime,
            "residual": max(self.residual, self.adjoint_residual),
            "grid_size": self.grid.size,
        }


def eigenvalue(spec: ModelSpec, grid: SphereGrid, theta: float, tol: float = 1e-12, max_iter: int = 20000) -> float:
    """Dominant eigenvalue of ``P_theta`` only."""
    a = transfer_matrix(spec, grid, theta)
    lam, _, _, _ = _power(a.dot, grid.size, tol, max_iter, False, "P_theta")
    return float(lam)


def solve_eigen(
    spec: ModelSpec,
    grid: SphereGrid,
    theta: float,
    tol: float = 1e-11,
    max_iter: int = 20000,
) -> SpectralSolution:
    """Eigendata ``(lambda, r, l, r*, l*)`` by power iteration.

    Parameters
    ----------
    tol : float
        Relative tolerance on successive eigenvalue estimates and on the
        sup-norm residual of every eigenvector.

    Raises
    ------
    NoConvergence
        If any of the four iterations fails within ``max_iter`` steps.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    a = transfer_matrix(spec, grid, theta)
    b = transfer_matrix(spec, grid, theta, adjoint=True)
    at, bt = a.T.tocsr(), b.T.tocsr()
    n = grid.size
    lam, r, res_r, it1 = _power(a.dot, n, tol, max_iter, False, "P_theta")
    lam_l, l, res_l, it2 = _power(at.dot, n, tol, max_iter, True, "P_theta left")
    lam_s, rs, res_rs, it3 = _power(b.dot, n, tol, max_iter, False, "P*_theta")
    _, ls, res_ls, it4 = _power(bt.dot, n, tol, max_iter, True, "P*_theta left")
    l = np.clip(l, 0.0, None)
    ls = np.clip(ls, 0.0, None)
    l /= l.sum()
    ls /= ls.sum()
    r = r / np.dot(r, l)
    rs = rs / np.dot(rs, ls)
    for arr in (r, l, rs, ls):
        arr.setflags(write=False)
    return SpectralSolution(
        theta=float(theta),
        lam=float(lam),
        Lambda=math.log(lam),
        r=r,
        l=l,
        r_star=rs,
        l_star=ls,
        lam_star=float(lam_s),
        residual=max(res_r, res_rs) / lam,
        adjoint_residual=max(res_l, res_ls) / lam,
        grid=grid,
        iterations=max(it1, it2, it3, it4),
    )


def find_alpha(
    spec: ModelSpec,
    grid: SphereGrid,
    bracket: Sequence[float] | None = None,
    tol: float = 1e-10,
    alpha_guess: float = 1.0,
) -> float:
    """Root ``alpha > 0`` of ``lambda(alpha) = 1``.

    Brent's bracketed method on ``theta -> log lambda(theta)``. Without an
    explicit bracket the search starts from
    ``[alpha_guess / 4, 4 * alpha_guess]`` and widens geometrically.

    Raises
    ------
    NoRoot
        If the bracket does not straddle 1.
    """

    def big_lambda(th):
        return math.log(eigenvalue(spec, grid, th, tol=min(1e-12, tol)))

    if bracket is not None:
        lo, hi = map(float, bracket)
        f_lo, f_hi = big_lambda(lo), big_lambda(hi)
        if not (f_lo < 0 < f_hi):
            raise NoRoot(f"bracket [{lo}, {hi}] gives lambda = ({math.exp(f_lo):.6g}, {math.exp(f_hi):.6g})")
    else:
        lo, hi = alpha_guess / 4.0, 4.0 * alpha_guess
        f_lo, f_hi = big_lambda(lo), big_lambda(hi)
        while f_hi <= 0:
            lo, f_lo = hi, f_hi
            hi *= 4.0
            if hi > 1e3:
                raise NoRoot("lambda(theta) stays below 1; moment condition fails")
            f_hi = big_lambda(hi)
        while f_lo >= 0:
            hi, f_hi = lo, f_lo
            lo /= 4.0
            if lo < 1e-8:
                raise NoRoot("lambda(theta) exceeds 1 near 0; the model is not contractive")
            f_lo = big_lambda(lo)
    alpha = brentq(big_lambda, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=200)
    if abs(math.expm1(big_lambda(alpha))) >= max(tol, 1e-12):
        raise NoRoot(f"root polish failed at alpha={alpha!r}")
    return float(alpha)


def lambda_prime(spec: ModelSpec, grid: SphereGrid, alpha: float, h: float | None = None) -> float:
    """Central finite difference of ``log lambda`` at ``alpha``.

    The default step is ``1e-4 * max(1, alpha)``.
    """
    if h is None:
        h = 1e-4 * max(1.0, alpha)
    up = math.log(eigenvalue(spec, grid, alpha + h))
    down = math.log(eigenvalue(spec, grid, alpha - h))
    return (up - down) / (2.0 * h)


def lambda_prime_mc(kernel, n_draws: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate of the drift of ``S`` under the stationary shifted chain.

    Draws ``X_0`` from ``r * l``, takes one shifted step and averages
    ``S_1``. Returns ``(mean, stderr)``.
    """
    from .shifted import stationary_start_batch, step_batch

    x = stationary_start_batch(kernel, n_draws, rng)
    _, _, dlog, _, _ = step_batch(kernel, x, rng)
    return float(dlog.mean()), float(dlog.std(ddof=1) / math.sqrt(n_draws))


def solve_alpha(spec: ModelSpec, grid: SphereGrid | None = None, tol: float = 1e-10, bracket=None) -> SpectralSolution:
    """Find ``alpha``, solve the eigenproblem there and attach ``Lambda'(alpha)``."""
    grid = grid or make_grid(spec)
    alpha = find_alpha(spec, grid, bracket=bracket, tol=tol)
    sol = solve_eigen(spec, grid, alpha)
    lp = lambda_prime(spec, grid, alpha)
    return SpectralSolution(**{**sol.__dict__, "alpha": alpha, "lambda_prime": lp})


def duality_residual(sol: SpectralSolution, swapped: bool = False) -> float:
    """Max relative gap in ``r*(x) = c * sum_y <x, y>^theta l(y)``.

    With ``swapped`` the roles of the two operators are exchanged:
    ``r(x) = c * sum_y <x, y>^theta l*(y)``. The constant ``c`` is the
    reciprocal of ``sum_x sum_y <x, y>^theta l*(x) l(y)``.
    """
    nodes = sol.grid.nodes
    kern = (nodes @ nodes.T) ** sol.theta
    if swapped:
        f, meas, other = sol.r, sol.l_star, sol.l
    else:
        f, meas, other = sol.r_star, sol.l, sol.l_star
    c = 1.0 / float(other @ kern @ meas)
    pred = c * (kern @ meas)
    return float(np.max(np.abs(f - pred) / f))
