"""Sampling under the exponentially shifted measure.

Given eigendata ``(lambda, r)`` at ``theta``, the shifted kernel picks atom
``k`` at direction ``x`` with probability proportional to
``p_k |M_k x|^theta r((M_k x)~)``. Off the grid ``r`` is interpolated and
the weights are renormalised; the renormalising factor is carried in the
walk state so that likelihood weights stay exact for the kernel actually
sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import TruncationDominates, ValidationError
from .model import ModelSpec
from .spectral import SpectralSolution
from .streams import block_sizes, spawn

__all__ = [
    "ShiftedKernel",
    "WalkState",
    "PathView",
    "Estimate",
    "step_batch",
    "shifted_step",
    "unshift_weight",
    "stationary_start",
    "stationary_start_batch",
    "dual_expectation",
]

WEIGHT_TOL = 1e-8


class ShiftedKernel:
    """One-step shifted transition at a fixed ``theta``.

    Parameters
    ----------
    spec : ModelSpec
    solution : SpectralSolution
        Eigendata at the tilt parameter.

    Attributes
    ----------
    node_weights : ndarray, shape (n_nodes, n_atoms)
        ``w_k(x) = p_k |M_k x|^theta r((M_k x)~) / (lambda r(x))`` at each
        grid node.

    Raises
    ------
    ValidationError
        If node weights fail to sum to one within ``1e-8`` or any weight
        is not strictly positive.
    """

    def __init__(self, spec: ModelSpec, solution: SpectralSolution):
        if solution.grid.dim != spec.dim:
            raise ValidationError("grid dimension does not match the model")
        self.spec = spec
        self.solution = solution
        self.theta = float(solution.theta)
        self.lam = float(solution.lam)
        self.grid = solution.grid
        self._logp = np.log(spec.probs)
        self._cum_probs = np.cumsum(spec.probs)
        self.node_weights = self._weights(self.grid.nodes) / (self.lam * solution.r[:, None])
        sums = self.node_weights.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > WEIGHT_TOL:
            raise ValidationError(f"shifted weights sum off by {np.max(np.abs(sums - 1.0)):.3g}")
        if not np.all(self.node_weights > 0):
            raise ValidationError("a shifted atom weight is not strictly positive")
        eta = solution.r * solution.l
        self._eta_cum = np.cumsum(eta / eta.sum())
        if spec.dim == 1:
            w = self.node_weights[0] / self.node_weights[0].sum()
            self._scalar_cum = np.cumsum(w)
            self._scalar_logg = np.log(spec.mats[:, 0, 0])
            self._scalar_dcorr = math.log(float(np.dot(spec.probs, spec.mats[:, 0, 0] ** self.theta)))

    def _images(self, x: np.ndarray):
        y = np.einsum("kij,nj->nki", self.spec.mats, x)
        g = self.spec.norm_of(y)
        return y / g[..., None], g

    def _weights(self, x: np.ndarray) -> np.ndarray:
        dirs, g = self._images(x)
        n, k = g.shape
        rhat = self.grid.interpolate(self.solution.r, dirs.reshape(n * k, -1)).reshape(n, k)
        return np.exp(self._logp + self.theta * np.log(g)) * rhat

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Renormalised atom probabilities at directions ``x`` (shape ``(n, K)``)."""
        a = self._weights(np.atleast_2d(x))
        return a / a.sum(axis=1, keepdims=True)

    def r_at(self, x: np.ndarray) -> np.ndarray:
        return self.solution.r_at(x)


class WalkState(NamedTuple):
    """Position of the shifted Markov random walk.

    Attributes
    ----------
    x : ndarray
        Current direction ``X_n``.
    s : float
        Log-radius ``S_n``.
    n : int
        Number of steps taken.
    log_corr : float
        Accumulated log renormalisation factor of the sampled kernel.
    """

    x: np.ndarray
    s: float
    n: int
    log_corr: float = 0.0


def step_batch(kernel: ShiftedKernel, x: np.ndarray, rng: np.random.Generator, rx: np.ndarray | None = None):
    """One shifted step for a batch of directions.

    Parameters
    ----------
    x : ndarray, shape (n, d)
        Current directions.
    rx : ndarray, optional
        Interpolated ``r`` at ``x`` if already known.

    Returns
    -------
    k : ndarray of int
        Sampled atom indices.
    x_new : ndarray, shape (n, d)
    dlog : ndarray
        ``log |M_k x|``.
    dcorr : ndarray
        ``log(sum_j p_j |M_j x|^theta r((M_j x)~)) - log r(x)``; equal to
        ``log lambda`` on grid nodes.
    rx_new : ndarray
        Interpolated ``r`` at ``x_new``.
    """
    n = x.shape[0]
    if kernel.spec.dim == 1:
        k = np.searchsorted(kernel._scalar_cum, rng.random(n), side="right")
        np.minimum(k, kernel.spec.n_atoms - 1, out=k)
        return k, np.ones((n, 1)), kernel._scalar_logg[k], np.full(n, kernel._scalar_dcorr), np.ones(n)
    dirs, g = kernel._images(x)
    kk = g.shape[1]
    rhat = kernel.grid.interpolate(kernel.solution.r, dirs.reshape(n * kk, -1)).reshape(n, kk)
    a = np.exp(kernel._logp + kernel.theta * np.log(g)) * rhat
    cum = np.cumsum(a, axis=1)
    total = cum[:, -1]
    k = (cum < (rng.random(n) * total)[:, None]).sum(axis=1)
    np.minimum(k, kk - 1, out=k)
    ar = np.arange(n)
    if rx is None:
        rx = kernel.r_at(x)
    return k, dirs[ar, k], np.log(g[ar, k]), np.log(total) - np.log(rx), rhat[ar, k]


def shifted_step(kernel: ShiftedKernel, state: WalkState, rng: np.random.Generator) -> tuple[int, WalkState]:
    """Sample one atom under the shifted kernel and advance the walk.

    The returned atom index determines both ``M`` and ``Q``.
    """
    x = np.asarray(state.x, dtype=float).reshape(1, -1)
    k, xn, dlog, dcorr, _ = step_batch(kernel, x, rng)
    return int(k[0]), WalkState(xn[0], state.s + float(dlog[0]), state.n + 1, state.log_corr + float(dcorr[0]))


def unshift_weight(kernel: ShiftedKernel, x0: np.ndarray, state: WalkState) -> float:
    """Likelihood weight ``r(x0) e^{-theta s} / r(X_n)`` times the carried correction.

    Converts expectations under the shifted path law into expectations
    under the original law. Computed in the log domain.
    """
    if state.n == 0:
        return 1.0
    r0 = float(kernel.r_at(np.asarray(x0, dtype=float).reshape(1, -1))[0])
    rn = float(kernel.r_at(np.asarray(state.x, dtype=float).reshape(1, -1))[0])
    return math.exp(math.log(r0) - kernel.theta * state.s - math.log(rn) + state.log_corr)


def stationary_start_batch(kernel: ShiftedKernel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Directions drawn from the node measure proportional to ``r * l``."""
    idx = np.searchsorted(kernel._eta_cum, rng.random(n), side="right")
    np.minimum(idx, kernel.grid.size - 1, out=idx)
    return np.array(kernel.grid.nodes[idx])


def stationary_start(kernel: ShiftedKernel, rng: np.random.Generator) -> WalkState:
    """Walk state with ``X_0`` drawn from ``r * l`` and ``S_0 = 0``."""
    return WalkState(stationary_start_batch(kernel, 1, rng)[0], 0.0, 0)


class PathView(NamedTuple):
    """Snapshot of a batch of paths passed to stop predicates and payoffs.

    ``V``, ``x`` have shape ``(m, d)``; ``s`` has shape ``(m,)``; ``n`` is
    the common step count.
    """

    V: np.ndarray
    x: np.ndarray
    s: np.ndarray
    n: int


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    mean: float
    stderr: float
    n: int
    truncated: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "truncated": self.truncated, **self.extra}


def _dual_block(kernel, v0, stop, h, n_paths, rng, max_steps):
    spec = kernel.spec
    v = np.tile(np.asarray(v0, dtype=float), (n_paths, 1))
    x = spec.direction(v)
    s = np.zeros(n_paths)
    rx = kernel.r_at(x) if spec.dim > 1 else np.ones(n_paths)
    log_lr = np.zeros(n_paths)
    out = np.zeros(n_paths)
    active = np.arange(n_paths)
    for n in range(1, max_steps + 1):
        k, x_new, dlog, dcorr, rx_new = step_batch(kernel, x, rng, rx)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        s = s + dlog
        log_lr += dcorr - kernel.theta * dlog + np.log(rx) - np.log(rx_new)
        x, rx = x_new, rx_new
        done = np.asarray(stop(PathView(v, x, s, n)), dtype=bool)
        if done.any():
            view = PathView(v[done], x[done], s[done], n)
            out[active[done]] = np.asarray(h(view), dtype=float) * np.exp(log_lr[done])
            keep = ~done
            v, x, s, rx, log_lr, active = v[keep], x[keep], s[keep], rx[keep], log_lr[keep], active[keep]
            if active.size == 0:
                break
    return out, active.size


def dual_expectation(
    kernel: ShiftedKernel,
    v0,
    stop: Callable[[PathView], np.ndarray],
    h: Callable[[PathView], np.ndarray],
    n_paths: int,
    rng: np.random.Generator,
    max_steps: int = 10_000,
    max_truncated: float = 0.01,
) -> Estimate:
    """Unshifted expectation of a stopped payoff, sampled under the shifted kernel.

    Paths of ``(V, X, S)`` are generated under the shifted kernel from
    ``V_0 = v0`` until ``stop`` first returns true (checked from step 1),
    and ``h`` at that step is multiplied by the likelihood weight.

    Parameters
    ----------
    stop : callable
        Vectorised predicate on a :class:`PathView`.
    h : callable
        Vectorised payoff on the stopped paths.
    max_steps : int
        Paths still running after this many steps contribute zero and are
        counted as truncated.

    Raises
    ------
    TruncationDominates
        If the truncated fraction exceeds ``max_truncated``.
    """
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if v0.size != kernel.spec.dim or np.any(v0 < 0) or not np.any(v0 > 0):
        raise ValidationError("v0 must be a nonzero nonnegative vector of the model dimension")
    sizes = block_sizes(n_paths)
    rngs = spawn(rng, len(sizes))
    vals, n_trunc = [], 0
    for m, g in zip(sizes, rngs):
        out, t = _dual_block(kernel, v0, stop, h, m, g, max_steps)
        vals.append(out)
        n_trunc += t
    vals = np.concatenate(vals)
    frac = n_trunc / n_paths
    if frac > max_truncated:
        raise TruncationDominates(f"{frac:.2%} of paths hit max_steps={max_steps} before stopping")
    return Estimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_paths)), n_paths, frac)
