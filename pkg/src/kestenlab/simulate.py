"""Forward simulation, cycle statistics and constant estimators.

Single-path helpers (:func:`simulate_path`, :func:`return_time`,
:func:`first_passage`) loop in Python and keep the whole trajectory.
Estimators run many paths side by side in numpy and keep only what they
need.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    RegularityNotReached,
    TruncationDominates,
    UnreachableSet,
    ValidationError,
)
from .model import (
    CycleConfig,
    ModelSpec,
    NormBallComplement,
    TargetSet,
    k_step_model,
    positivity_depth,
)
from .shifted import Estimate, ShiftedKernel, stationary_start_batch, step_batch
from .spectral import SphereGrid, make_grid, solve_alpha
from .streams import block_sizes, map_blocks, spawn

__all__ = [
    "Outcome",
    "Trajectory",
    "BackwardDirection",
    "StationarySample",
    "ConstantsReport",
    "simulate_path",
    "shifted_path",
    "return_time",
    "first_passage",
    "backward_direction",
    "estimate_absZ",
    "absz_coupled",
    "stationary_sample",
    "crude_cycle_probability",
    "estimate_C",
    "estimate_D_A",
    "overjump_samples",
    "estimate_constants",
    "draw_atoms",
]


class Outcome(str, enum.Enum):
    """Non-integer outcomes of cycle and passage times."""

    TRUNCATED = "truncated"
    ESCAPED = "escaped"


def draw_atoms(spec: ModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Atom indices drawn from the unshifted mixture."""
    k = np.searchsorted(np.cumsum(spec.probs), rng.random(n), side="right")
    return np.minimum(k, spec.n_atoms - 1)


def _check_v0(spec: ModelSpec, v0) -> np.ndarray:
    v = np.asarray(v0, dtype=float).reshape(-1)
    if v.size != spec.dim:
        raise ValidationError(f"v0 must have {spec.dim} entries")
    if np.any(v < 0) or not np.any(v > 0) or not np.all(np.isfinite(v)):
        raise ValidationError("v0 must be nonzero, finite and nonnegative")
    return v


# --------------------------------------------------------------------------
# single paths


@dataclass
class Trajectory:
    """A simulated path.

    Attributes
    ----------
    V : ndarray, shape (n+1, d)
        States of the recursion.
    x : ndarray, shape (n+1, d)
        Directions of the matrix product applied to ``x_0 = V_0 / |V_0|``.
    s : ndarray, shape (n+1,)
        Log-norms of the matrix product applied to ``x_0``.
    logZ : ndarray, shape (n+1,)
        ``log|V_n| - s_n``.
    atoms : ndarray of int, shape (n,)
        Atom used at each step.
    events : dict
        Marker name to step index, e.g. ``{"return": 3}``.
    """

    V: np.ndarray
    x: np.ndarray
    s: np.ndarray
    logZ: np.ndarray
    atoms: np.ndarray
    events: dict = field(default_factory=dict)

    def __len__(self):
        return self.V.shape[0]

    def rows(self):
        """Yield ``(step, V, s, logZ, event)`` tuples for CSV export."""
        marks = {step: name for name, step in self.events.items()}
        for i in range(len(self)):
            yield i, self.V[i], self.s[i], self.logZ[i], marks.get(i, "")


class _PathBuilder:
    def __init__(self, spec: ModelSpec, v0: np.ndarray):
        self.spec = spec
        self.V = [v0]
        x0 = v0 / spec.norm_of(v0)
        self.x = [x0]
        self.s = [0.0]
        self.logZ = [math.log(spec.norm_of(v0))]
        self.atoms = []

    def step(self, k: int, dlog: float | None = None, x_new=None):
        spec = self.spec
        m = spec.mats[k]
        v = m @ self.V[-1] + spec.qs[k]
        if x_new is None:
            y = m @ self.x[-1]
            g = float(spec.norm_of(y))
            x_new, dlog = y / g, math.log(g)
        s = self.s[-1] + dlog
        self.V.append(v)
        self.x.append(x_new)
        self.s.append(s)
        self.logZ.append(math.log(spec.norm_of(v)) - s)
        self.atoms.append(int(k))
        return v

    def build(self, events=None) -> Trajectory:
        return Trajectory(
            np.array(self.V),
            np.array(self.x),
            np.array(self.s),
            np.array(self.logZ),
            np.array(self.atoms, dtype=int),
            dict(events or {}),
        )


def _atom_source(spec, rng, atoms):
    if atoms is not None:
        it = iter(atoms)
        return lambda: next(it)
    if rng is None:
        raise ValidationError("either rng or forced atoms must be given")
    cum = np.cumsum(spec.probs)
    return lambda: min(int(np.searchsorted(cum, rng.random(), side="right")), spec.n_atoms - 1)


def simulate_path(
    spec: ModelSpec,
    v0,
    n: int,
    rng: np.random.Generator | None = None,
    atoms: Sequence[int] | None = None,
) -> Trajectory:
    """Run ``n`` steps of the recursion under the original law.

    Parameters
    ----------
    atoms : sequence of int, optional
        Forced atom indices; overrides sampling.
    """
    v = _check_v0(spec, v0)
    if atoms is not None:
        n = min(n, len(atoms))
    nxt = _atom_source(spec, rng, atoms)
    b = _PathBuilder(spec, v)
    for _ in range(n):
        b.step(nxt())
    return b.build()


def shifted_path(kernel: ShiftedKernel, v0, n: int, rng: np.random.Generator) -> Trajectory:
    """Run ``n`` steps of the recursion under the shifted kernel."""
    spec = kernel.spec
    v = _check_v0(spec, v0)
    b = _PathBuilder(spec, v)
    x = b.x[0][None, :]
    for _ in range(n):
        k, x, dlog, _, _ = step_batch(kernel, x, rng)
        b.step(int(k[0]), float(dlog[0]), x[0].copy())
    return b.build()


def return_time(
    spec: ModelSpec,
    v0,
    cycle: CycleConfig,
    rng: np.random.Generator | None = None,
    atoms: Sequence[int] | None = None,
) -> tuple[int | Outcome, Trajectory]:
    """First ``n >= 1`` with ``0 < |V_n| < r``.

    Returns :attr:`Outcome.TRUNCATED` after ``cycle.max_steps`` steps or
    when forced atoms run out.
    """
    v = _check_v0(spec, v0)
    nxt = _atom_source(spec, rng, atoms)
    b = _PathBuilder(spec, v)
    for n in range(1, cycle.max_steps + 1):
        try:
            k = nxt()
        except StopIteration:
            break
        v = b.step(k)
        if 0 < spec.norm_of(v) < cycle.r:
            return n, b.build({"return": n})
    return Outcome.TRUNCATED, b.build({"truncated": len(b.atoms)})


def first_passage(
    spec: ModelSpec,
    v0,
    u: float,
    target: TargetSet,
    rng: np.random.Generator | None = None,
    cap: int = 100_000,
    atoms: Sequence[int] | None = None,
) -> tuple[int | Outcome, Trajectory]:
    """First ``n >= 1`` with ``|V_n| > u d_A(V_n / |V_n|)``."""
    if not u > 0:
        raise ValidationError("u must be positive")
    v = _check_v0(spec, v0)
    nxt = _atom_source(spec, rng, atoms)
    b = _PathBuilder(spec, v)
    for n in range(1, cap + 1):
        try:
            k = nxt()
        except StopIteration:
            break
        v = b.step(k)
        nv = float(spec.norm_of(v))
        if nv > 0 and nv > u * float(target.gauge((v / nv)[None, :])[0]):
            return n, b.build({"passage": n})
    return Outcome.TRUNCATED, b.build({"truncated": len(b.atoms)})


def _in_set(spec: ModelSpec, target: TargetSet, V: np.ndarray, level) -> np.ndarray:
    nv = spec.norm_of(V)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = target.gauge(V / nv[:, None])
    return nv > level * g


# --------------------------------------------------------------------------
# |Z| estimators


@dataclass(frozen=True)
class BackwardDirection:
    """Direction of a transposed product ``(M_{i+1}^T ... M_{i+K}^T 1)~``.

    Attributes
    ----------
    Y : ndarray
        Unit-norm direction.
    depth : int
        Number of factors used.
    contraction_estimate : float
        Sup-change of the direction between half and full depth.
    """

    Y: np.ndarray
    depth: int
    contraction_estimate: float


def backward_direction(spec: ModelSpec, atoms: Sequence[int], depth: int = 50, tol: float = 1e-8) -> BackwardDirection:
    """Backward direction from the first ``depth`` atoms of ``atoms``.

    ``atoms[0]`` is the factor closest to the vector being paired, that is
    ``M_{i+1}``. The product is applied from the far end inwards.
    """
    atoms = list(atoms)[:depth]

    def direction(window):
        y = np.ones(spec.dim) / spec.norm_of(np.ones(spec.dim))
        for a in reversed(window):
            y = spec.mats[a].T @ y
            y = y / spec.norm_of(y)
        return y

    y = direction(atoms)
    change = float(np.max(np.abs(y - direction(atoms[: len(atoms) // 2])))) if len(atoms) > 1 else 0.0
    return BackwardDirection(y, len(atoms), change)


def _series_from_atoms(spec, v0, atoms, depth, tol, exact_tail):
    """Series value of ``|Z_N|`` for one path with atoms ``a_1..a_N``.

    Returns the value and a flag that is False when some window did not
    contract to ``tol``.
    """
    n = len(atoms)
    x = v0 / spec.norm_of(v0)
    total = float(spec.norm_of(v0))
    s = 0.0
    ok = True
    for i in range(1, n + 1):
        a = atoms[i - 1]
        y = spec.mats[a] @ x
        g = float(spec.norm_of(y))
        x = y / g
        s += math.log(g)
        q = spec.qs[a]
        if not np.any(q > 0):
            continue
        window = atoms[i : i + depth]
        bd = backward_direction(spec, window, depth, tol)
        if i + depth <= n and bd.contraction_estimate > tol:
            ok = False
        den = float(bd.Y @ x)
        if den <= 0:
            raise RegularityNotReached(f"backward direction orthogonal to X_{i}")
        total += float(bd.Y @ q) / den * math.exp(-s)
    return total, ok


def _absz_block(kernel: ShiftedKernel, v0s: np.ndarray, cycle: CycleConfig, rng, keep_atoms: bool = False):
    """Shifted cycles from ``v0s`` until escape, return to D or the step cap.

    Returns ``(absz, survived, truncated, steps, atoms)`` where ``absz`` is
    ``|V_N| e^{-S_N}`` at the stopping step ``N``.
    """
    spec = kernel.spec
    n = v0s.shape[0]
    v = v0s.copy()
    x = spec.direction(v)
    rx = kernel.r_at(x) if spec.dim > 1 else np.ones(n)
    s = np.zeros(n)
    absz = np.zeros(n)
    survived = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=int)
    active = np.arange(n)
    hist = [] if keep_atoms else None
    for step in range(1, cycle.max_steps + 1):
        k, x, dlog, _, rx = step_batch(kernel, x, rng, rx)
        if keep_atoms:
            full = np.full(n, -1)
            full[active] = k
            hist.append(full)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        s += dlog
        nv = spec.norm_of(v)
        back = nv < cycle.r
        esc = nv > cycle.escape_threshold
        done = back | esc
        if done.any():
            idx = active[done]
            steps[idx] = step
            survived[idx] = esc[done]
            absz[idx] = nv[done] * np.exp(-s[done])
            keep = ~done
            v, x, rx, s, active = v[keep], x[keep], rx[keep], s[keep], active[keep]
            if active.size == 0:
                break
    truncated = np.zeros(n, dtype=bool)
    truncated[active] = True
    atoms = np.array(hist).T if keep_atoms else None
    return absz, survived, truncated, steps, atoms


def estimate_absZ(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    v0,
    cycle: CycleConfig,
    method: str = "ratio",
    rng: np.random.Generator | None = None,
    depth: int = 50,
    tol: float = 1e-8,
) -> tuple[float, bool]:
    """One sample of ``|Z|`` and the survival indicator under the shifted kernel.

    Parameters
    ----------
    method : {"ratio", "series"}
        ``ratio`` returns ``|V_N| / e^{S_N}`` at the stopping step.
        ``series`` returns ``|v0| + sum_i <Y_{i+1}, Q_i> / (<Y_{i+1}, X_i> e^{S_i})``
        with backward directions from windows of ``depth`` factors, and falls
        back to the ratio value when a window fails to contract.
    """
    v = _check_v0(spec, v0)
    absz, surv, trunc, steps, atoms = _absz_block(kernel, v[None, :], cycle, rng, keep_atoms=(method == "series"))
    if trunc[0]:
        raise TruncationDominates("path neither escaped nor returned within max_steps")
    if method == "ratio":
        return float(absz[0]), bool(surv[0])
    if method != "series":
        raise ValueError("method must be 'ratio' or 'series'")
    path = [int(a) for a in atoms[0, : steps[0]]]
    val, ok = _series_from_atoms(spec, v, path, depth, tol, True)
    return (val if ok else float(absz[0])), bool(surv[0])


def absz_coupled(
    spec: ModelSpec,
    v0,
    n_steps: int,
    n_paths: int,
    rng: np.random.Generator,
    kernel: ShiftedKernel | None = None,
    depth: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Ratio and series values of ``|Z_N|`` on the same atom sequences.

    Paths run for a fixed ``n_steps`` under the shifted kernel when given,
    else under the original law. Backward windows are vectorised over paths
    and indices.

    Returns
    -------
    ratio, series : ndarray
    """
    v = _check_v0(spec, v0)
    V = np.tile(v, (n_paths, 1))
    x = spec.direction(V)
    s = np.zeros(n_paths)
    xs = np.empty((n_steps, n_paths, spec.dim))
    ss = np.empty((n_steps, n_paths))
    ks = np.empty((n_steps, n_paths), dtype=int)
    rx = None
    for i in range(n_steps):
        if kernel is not None:
            k, x, dlog, _, rx = step_batch(kernel, x, rng, rx)
        else:
            k = draw_atoms(spec, n_paths, rng)
            y = np.einsum("nij,nj->ni", spec.mats[k], x)
            g = spec.norm_of(y)
            x, dlog = y / g[:, None], np.log(g)
        V = np.einsum("nij,nj->ni", spec.mats[k], V) + spec.qs[k]
        s = s + dlog
        xs[i], ss[i], ks[i] = x, s, k
    ratio = spec.norm_of(V) * np.exp(-s)
    # Y[i] pairs with term i (1-based i+1): product of M^T for atoms i+1 .. i+depth
    ones = np.ones(spec.dim) / spec.norm_of(np.ones(spec.dim))
    Y = np.broadcast_to(ones, (n_steps, n_paths, spec.dim)).copy()
    mt = np.transpose(spec.mats, (0, 2, 1))
    for j in range(depth, 0, -1):
        # factor index for term i is i + j (0-based atoms array), valid when < n_steps
        valid = np.arange(n_steps) + j < n_steps
        if not valid.any():
            continue
        iv = np.nonzero(valid)[0]
        Yi = np.einsum("tnij,tnj->tni", mt[ks[iv + j]], Y[iv])
        Y[iv] = Yi / spec.norm_of(Yi)[..., None]
    den = (Y * xs).sum(axis=-1)
    if np.any(den <= 0):
        raise RegularityNotReached("backward direction orthogonal to a forward direction")
    num = (Y * spec.qs[ks]).sum(axis=-1)
    series = float(spec.norm_of(v)) + (num / den * np.exp(-ss)).sum(axis=0)
    return ratio, series


# --------------------------------------------------------------------------
# stationary sampling


@dataclass(frozen=True)
class StationarySample:
    """States of a long unshifted run recorded at visits to ``D``.

    Attributes
    ----------
    draws : ndarray, shape (m, d)
    visit_frequency : float
        Fraction of time steps spent in ``D``.
    visit_stderr : float
        Standard error of ``visit_frequency`` across independent chains.
    n_steps : int
        Total recorded steps over all chains.
    """

    draws: np.ndarray
    visit_frequency: float
    visit_stderr: float
    n_steps: int


def _burn(spec, n_chains, burn_in, rng, v_init=None):
    v = np.ones((n_chains, spec.dim)) if v_init is None else v_init
    for _ in range(burn_in):
        k = draw_atoms(spec, n_chains, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
    return v


def stationary_sample(
    spec: ModelSpec,
    cycle: CycleConfig,
    n_draws: int,
    rng: np.random.Generator,
    n_chains: int = 256,
    burn_in: int = 10_000,
    min_steps: int = 2_000,
) -> StationarySample:
    """Collect visits to ``D`` from parallel long unshifted runs.

    Each chain is burnt in for ``burn_in`` steps, then run until the pooled
    number of visits reaches ``n_draws`` (and at least ``min_steps`` steps).
    ``n_draws`` visits are then selected uniformly without replacement.
    """
    v = _burn(spec, n_chains, burn_in, rng)
    visits = []
    counts = np.zeros(n_chains)
    n_seen = 0
    steps = 0
    while steps < min_steps or n_seen < 4 * n_draws:
        k = draw_atoms(spec, n_chains, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        inside = spec.norm_of(v) < cycle.r
        counts += inside
        if inside.any():
            visits.append(v[inside])
            n_seen += int(inside.sum())
        steps += 1
        if steps > 10_000_000 // n_chains and n_seen == 0:
            raise UnreachableSet("the return set D is never visited")
    pool = np.concatenate(visits)
    pick = np.sort(rng.choice(pool.shape[0], size=min(n_draws, pool.shape[0]), replace=False))
    freq = counts / steps
    return StationarySample(
        pool[pick],
        float(freq.mean()),
        float(freq.std(ddof=1) / math.sqrt(n_chains)),
        steps * n_chains,
    )


# --------------------------------------------------------------------------
# cycles under the original law


def _crude_block(spec, v0s, u, target, r, rng, max_steps):
    n = v0s.shape[0]
    v = v0s.copy()
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        k = draw_atoms(spec, active.size, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        up = _in_set(spec, target, v, u)
        back = spec.norm_of(v) < r
        hit[active[up]] = True
        keep = ~(up | back)
        v, active = v[keep], active[keep]
        if active.size == 0:
            break
    return hit, active.size


def crude_cycle_probability(
    spec: ModelSpec,
    v0,
    u: float,
    target: TargetSet,
    cycle: CycleConfig,
    n_cycles: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> Estimate:
    """Crude Monte Carlo of ``P(T_u < tau)``.

    ``v0`` is a single start vector or an array of starts, one per cycle,
    reused cyclically.
    """
    starts = np.atleast_2d(np.asarray(v0, dtype=float))
    sizes = block_sizes(n_cycles)
    rngs = spawn(rng, len(sizes))
    offsets = np.cumsum([0] + sizes[:-1])
    tasks = [
        (spec, starts[(off + np.arange(m)) % starts.shape[0]], u, target, cycle.r, g, cycle.max_steps)
        for m, g, off in zip(sizes, rngs, offsets)
    ]
    res = map_blocks(_crude_block, tasks, workers)
    hits = np.concatenate([h for h, _ in res]).astype(float)
    trunc = sum(t for _, t in res)
    p = hits.mean()
    return Estimate(float(p), float(math.sqrt(max(p * (1 - p), 0.0) / n_cycles)), n_cycles, trunc / n_cycles)


# --------------------------------------------------------------------------
# constant estimators


def _c_block(kernel, v0s, cycle, rng):
    absz, surv, trunc, _, _ = _absz_block(kernel, v0s, cycle, rng)
    return np.where(surv, absz, 0.0), trunc


def estimate_C(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    cycle: CycleConfig,
    grid: SphereGrid | None = None,
    n_outer: int = 500,
    n_inner: int = 200,
    rng: np.random.Generator | None = None,
    sample: StationarySample | None = None,
    n_boot: int = 1000,
    max_truncated: float = 0.01,
    workers: int = 1,
) -> dict:
    """Estimate ``C = pi(D) * E_{pi_D}[r(v~) E^alpha |Z|^alpha 1{survive}]``.

    Returns
    -------
    dict
        Keys ``C``, ``stderr``, ``C_of_v`` (list of ``(v, value, stderr)``),
        ``pi_D``, ``pi_D_stderr``, ``truncated``, ``n_outer``, ``n_inner``.

    Raises
    ------
    TruncationDominates
        If more than ``max_truncated`` of the inner paths neither escaped
        nor returned.
    """
    if rng is None:
        raise ValidationError("rng is required")
    alpha = kernel.theta
    if sample is None:
        sample = stationary_sample(spec, cycle, n_outer, rng)
    outer = sample.draws[:n_outer]
    n_outer = outer.shape[0]
    starts = np.repeat(outer, n_inner, axis=0)
    sizes = block_sizes(starts.shape[0])
    rngs = spawn(rng, len(sizes))
    offsets = np.cumsum([0] + sizes[:-1])
    tasks = [(kernel, starts[off : off + m], cycle, g) for m, g, off in zip(sizes, rngs, offsets)]
    res = map_blocks(_c_block, tasks, workers)
    vals = np.concatenate([v for v, _ in res]).reshape(n_outer, n_inner)
    trunc = sum(int(t.sum()) for _, t in res)
    frac = trunc / starts.shape[0]
    if frac > max_truncated:
        raise TruncationDominates(f"{frac:.2%} of inner paths undecided")
    r_v = kernel.r_at(spec.direction(outer)) if spec.dim > 1 else np.ones(n_outer)
    per_v = r_v[:, None] * vals**alpha
    c_v = per_v.mean(axis=1)
    c_v_se = per_v.std(axis=1, ddof=1) / math.sqrt(n_inner)
    mean_cv = float(c_v.mean())
    boot_rng = spawn(rng, 1)[0]
    boot = c_v[boot_rng.integers(0, n_outer, size=(n_boot, n_outer))].mean(axis=1)
    se_cv = float(boot.std(ddof=1))
    pi_d, se_pi = sample.visit_frequency, sample.visit_stderr
    C = pi_d * mean_cv
    rel = math.sqrt((se_cv / mean_cv) ** 2 + (se_pi / pi_d) ** 2) if mean_cv > 0 else float("inf")
    return {
        "C": C,
        "stderr": C * rel,
        "C_of_v": [(outer[i].tolist(), float(c_v[i]), float(c_v_se[i])) for i in range(n_outer)],
        "mean_C_of_v": mean_cv,
        "mean_C_of_v_stderr": se_cv,
        "pi_D": pi_d,
        "pi_D_stderr": se_pi,
        "truncated": frac,
        "survival_rate": float((vals > 0).mean()),
        "n_outer": n_outer,
        "n_inner": n_inner,
    }


def _ruin_walk_block(kernel, target, x0s, log_u, rng, max_steps, cap_gauge=None):
    """Shifted walk until ``S - log d_A(X) > log u``.

    ``log_u`` is a scalar or one level per walk. Returns
    ``(x_T, overjump, log_corr, truncated_mask)``.
    """
    n = x0s.shape[0]
    log_u = np.broadcast_to(np.asarray(log_u, dtype=float), (n,)).copy()
    x = x0s.copy()
    rx = kernel.r_at(x) if kernel.spec.dim > 1 else np.ones(n)
    s = np.zeros(n)
    corr = np.zeros(n)
    out_x = np.zeros_like(x)
    out_o = np.zeros(n)
    out_c = np.zeros(n)
    active = np.arange(n)
    for _ in range(max_steps):
        _, x, dlog, dcorr, rx_new = step_batch(kernel, x, rng, rx)
        corr += dcorr
        rx = rx_new
        s += dlog
        with np.errstate(divide="ignore"):
            g = target.gauge(x)
        if cap_gauge is not None:
            g = np.minimum(g, cap_gauge)
        sa = s - np.log(g)
        done = sa > log_u
        if done.any():
            idx = active[done]
            out_x[idx] = x[done]
            out_o[idx] = sa[done] - log_u[done]
            out_c[idx] = corr[done]
            keep = ~done
            x, rx, s, corr, active, log_u = x[keep], rx[keep], s[keep], corr[keep], active[keep], log_u[keep]
            if active.size == 0:
                break
    trunc = np.zeros(n, dtype=bool)
    trunc[active] = True
    return out_x, out_o, out_c, trunc


def _ruin_value_block(kernel, target, x0s, log_u, rng, max_steps, cap_gauge, window=0.0):
    alpha = kernel.theta
    if window > 0:
        log_u = log_u + window * rng.random(x0s.shape[0])
    xt, ov, corr, tr = _ruin_walk_block(kernel, target, x0s, log_u, rng, max_steps, cap_gauge)
    with np.errstate(divide="ignore"):
        ga = target.gauge(xt)
    if cap_gauge is not None:
        ga = np.minimum(ga, cap_gauge)
    rt = kernel.r_at(xt) if kernel.spec.dim > 1 else np.ones(x0s.shape[0])
    # undecided walks contribute zero, as an infinite first passage would
    with np.errstate(over="ignore", invalid="ignore"):
        v = np.where(tr, 0.0, np.exp(-alpha * ov + corr) / (rt * ga**alpha))
    return v, int(tr.sum())


def _ruin_values(kernel, target, x0s, log_u, rng, max_steps, cap_gauge=None, max_truncated=0.01, workers=1,
                 window=0.0):
    sizes = block_sizes(x0s.shape[0])
    rngs = spawn(rng, len(sizes))
    offsets = np.cumsum([0] + sizes[:-1])
    tasks = [
        (kernel, target, x0s[off : off + m], log_u, g, max_steps, cap_gauge, window)
        for m, g, off in zip(sizes, rngs, offsets)
    ]
    res = map_blocks(_ruin_value_block, tasks, workers)
    vals = np.concatenate([v for v, _ in res])
    frac = sum(t for _, t in res) / x0s.shape[0]
    if frac > max_truncated:
        raise UnreachableSet(f"{frac:.2%} of ruin walks never reached the target set")
    return vals, frac


def typical_step(kernel: ShiftedKernel) -> float:
    """Mean of ``|log|M x||`` under the stationary shifted chain."""
    spec = kernel.spec
    w = kernel.node_weights
    eta = kernel.solution.r * kernel.solution.l
    eta = eta / eta.sum()
    y = np.einsum("kij,nj->nki", spec.mats, kernel.grid.nodes)
    step = np.abs(np.log(spec.norm_of(y)))
    return float(eta @ (w * step).sum(axis=1))


def default_log_u_ruin(kernel: ShiftedKernel, lambda_prime: float) -> float:
    """``30 * max(Lambda'(alpha), mean |log|M x||)`` under the stationary shifted chain."""
    return 30.0 * max(lambda_prime, typical_step(kernel))


def estimate_D_A(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    target: TargetSet,
    u_ruin: float | None = None,
    n_paths: int = 20_000,
    starts: Sequence | None = None,
    rng: np.random.Generator | None = None,
    lambda_prime: float | None = None,
    max_steps: int = 100_000,
    L_schedule: Sequence[float] | None = None,
    workers: int = 1,
    level_window: float | None = None,
) -> dict:
    """Ruin constant ``D_A`` from first passages of the shifted walk.

    For each start direction the walk runs until
    ``S_n - log d_A(X_n) > log u_ruin`` and the estimator averages
    ``exp(-alpha * overjump) / (r(X_T) d_A(X_T)^alpha)``.

    Each walk uses its own level ``log u_ruin + level_window * U`` with
    ``U`` uniform on ``[0, 1)``. Averaging over a window of levels has the
    same limit and removes the slow oscillation in ``log u`` that walks
    with nearly commensurate steps show. The default window is one mean
    absolute step of the shifted walk; ``0`` gives a fixed level.

    When more than 1% of walks never reach the target, the set is replaced
    by ``A_L = A union {|x| >= L}`` for an increasing schedule of ``L``
    and the sequence of estimates is reported; the last value is returned
    once successive values agree within their combined standard error.

    Returns
    -------
    dict
        Keys ``D_A``, ``stderr``, ``per_start`` (list of dicts), ``log_u``,
        ``start_agreement`` and, after a fallback, ``schedule``.
    """
    if rng is None:
        raise ValidationError("rng is required")
    if u_ruin is None:
        if lambda_prime is None:
            raise ValidationError("either u_ruin or lambda_prime is needed")
        log_u = default_log_u_ruin(kernel, lambda_prime)
    else:
        log_u = math.log(u_ruin)
    if starts is None:
        starts = [np.ones(spec.dim)]
    starts = [spec.direction(np.asarray(x, dtype=float)) for x in starts]
    window = typical_step(kernel) if level_window is None else float(level_window)
    per = max(2, n_paths // len(starts))
    rngs = spawn(rng, len(starts) + 1)

    def run(cap):
        per_start, pooled = [], []
        for x, g in zip(starts, rngs):
            vals, frac = _ruin_values(
                kernel, target, np.tile(x, (per, 1)), log_u, g, max_steps, cap, workers=workers, window=window
            )
            per_start.append({"start": x.tolist(), "D_A": float(vals.mean()),
                              "stderr": float(vals.std(ddof=1) / math.sqrt(per)), "truncated": frac})
            pooled.append(vals)
        pooled = np.concatenate(pooled)
        return float(pooled.mean()), float(pooled.std(ddof=1) / math.sqrt(pooled.size)), per_start

    report = {"log_u": log_u, "level_window": window}
    try:
        d, se, per_start = run(None)
    except UnreachableSet:
        schedule = []
        levels = list(L_schedule) if L_schedule is not None else [2.0**j for j in range(1, 13)]
        d = se = float("nan")
        per_start = []
        for L in levels:
            d_new, se_new, per_start = run(float(L))
            schedule.append({"L": float(L), "D_A": d_new, "stderr": se_new})
            stable = bool(schedule[:-1]) and abs(d_new - d) <= math.hypot(se_new, se)
            d, se = d_new, se_new
            if stable:
                break
        report["schedule"] = schedule
        report["schedule_stable"] = len(schedule) >= 2 and abs(schedule[-1]["D_A"] - schedule[-2]["D_A"]) <= math.hypot(
            schedule[-1]["stderr"], schedule[-2]["stderr"]
        )
    agree = all(
        abs(a["D_A"] - b["D_A"]) <= 3 * math.hypot(a["stderr"], b["stderr"])
        for i, a in enumerate(per_start)
        for b in per_start[i + 1 :]
    )
    report.update({"D_A": d, "stderr": se, "per_start": per_start, "start_agreement": agree})
    return report


def overjump_samples(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    target: TargetSet,
    u_levels: Sequence[float],
    n_per_level: int,
    rng: np.random.Generator,
    max_steps: int = 100_000,
    level_window: float = 0.0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Directions and overjumps at first passage of ``S^A`` over ``log u``.

    Walks start from the stationary direction law ``r * l``. With a
    positive ``level_window`` each walk uses its own level
    ``log u + level_window * U``, ``U`` uniform on ``[0, 1)``, and the
    overjump is measured from that level.

    Returns
    -------
    list of (x, overjump)
        One pair of arrays per level; ``x`` has shape ``(n, d)``.
    """
    levels = list(u_levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValidationError("u_levels must be increasing")
    out = []
    for u, g in zip(levels, spawn(rng, len(levels))):
        xs, os = [], []
        sizes = block_sizes(n_per_level)
        for m, gb in zip(sizes, spawn(g, len(sizes))):
            x0 = stationary_start_batch(kernel, m, gb)
            lu = math.log(u) + level_window * gb.random(m) if level_window > 0 else math.log(u)
            xt, ov, _, tr = _ruin_walk_block(kernel, target, x0, lu, gb, max_steps)
            xs.append(xt[~tr])
            os.append(ov[~tr])
        out.append((np.concatenate(xs), np.concatenate(os)))
    return out


# --------------------------------------------------------------------------
# report


@dataclass
class ConstantsReport:
    """Estimated constants with standard errors.

    Attributes
    ----------
    alpha, lambda_prime : float
        Root of ``lambda = 1`` and the slope of ``log lambda`` there for
        the original one-step chain.
    k : int
        Block length of the chain the estimators ran on.
    drift : float
        ``k * lambda_prime``, the drift of the chain used.
    C, C_stderr : float
    C_of_v : list
        ``(v, C(v), stderr)`` for sampled ``v``.
    D_A, D_A_stderr : float
    K_A, K_A_stderr : float
        ``C * D_A`` with a delta-method standard error.
    Theta, Theta_stderr : float
        ``alpha * drift * D_A``.
    metadata : dict
    """

    alpha: float
    lambda_prime: float
    k: int
    drift: float
    C: float
    C_stderr: float
    C_of_v: list
    D_A: float
    D_A_stderr: float
    K_A: float
    K_A_stderr: float
    Theta: float
    Theta_stderr: float
    metadata: dict = field(default_factory=dict)

    @property
    def plateau(self) -> float:
        """Predicted limit of ``u^alpha P(|V| > u)``."""
        return self.C / (self.alpha * self.drift)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda_prime": self.lambda_prime,
            "k": self.k,
            "drift": self.drift,
            "C": {"value": self.C, "stderr": self.C_stderr},
            "D_A": {"value": self.D_A, "stderr": self.D_A_stderr},
            "K_A": {"value": self.K_A, "stderr": self.K_A_stderr},
            "Theta": {"value": self.Theta, "stderr": self.Theta_stderr},
            "plateau": self.plateau,
            "C_of_v": [{"v": v, "value": c, "stderr": e} for v, c, e in self.C_of_v],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ConstantsReport":
        """Inverse of :meth:`to_dict`."""
        return cls(
            alpha=float(obj["alpha"]),
            lambda_prime=float(obj["lambda_prime"]),
            k=int(obj["k"]),
            drift=float(obj["drift"]),
            C=float(obj["C"]["value"]),
            C_stderr=float(obj["C"]["stderr"]),
            C_of_v=[(c["v"], c["value"], c["stderr"]) for c in obj.get("C_of_v", [])],
            D_A=float(obj["D_A"]["value"]),
            D_A_stderr=float(obj["D_A"]["stderr"]),
            K_A=float(obj["K_A"]["value"]),
            K_A_stderr=float(obj["K_A"]["stderr"]),
            Theta=float(obj["Theta"]["value"]),
            Theta_stderr=float(obj["Theta"]["stderr"]),
            metadata=dict(obj.get("metadata", {})),
        )


def estimate_constants(
    spec: ModelSpec,
    target: TargetSet,
    cycle: CycleConfig,
    rng: np.random.Generator,
    n_outer: int = 500,
    n_inner: int = 200,
    n_ruin: int = 20_000,
    grid: SphereGrid | None = None,
    ruin_starts: Sequence | None = None,
    workers: int = 1,
) -> tuple[ConstantsReport, ShiftedKernel]:
    """Run the full pipeline: ``alpha``, ``C``, ``D_A``, ``K_A`` and ``Theta``.

    If no single atom has a strictly positive ``Q`` the estimators run on
    the ``k``-step chain with ``k`` the smallest block length that has one.

    Returns
    -------
    report : ConstantsReport
    kernel : ShiftedKernel
        Kernel of the chain used (the ``k``-step chain when ``k > 1``).
    """
    k = positivity_depth(spec) or 1
    work = k_step_model(spec, k)
    grid = grid or make_grid(spec)
    base = solve_alpha(spec, grid)
    sol = solve_alpha(work, grid) if k > 1 else base
    kernel = ShiftedKernel(work, sol)
    r_outer, r_c, r_d = spawn(rng, 3)
    sample = stationary_sample(work, cycle, n_outer, r_outer)
    c = estimate_C(work, kernel, cycle, grid, n_outer, n_inner, r_c, sample=sample, workers=workers)
    d = estimate_D_A(
        work, kernel, target, n_paths=n_ruin, starts=ruin_starts, rng=r_d,
        lambda_prime=sol.lambda_prime, workers=workers,
    )
    C, se_c = c["C"], c["stderr"]
    D, se_d = d["D_A"], d["stderr"]
    K = C * D
    se_k = K * math.hypot(se_c / C, se_d / D) if C > 0 and D > 0 else float("nan")
    drift = k * base.lambda_prime
    theta = base.alpha * drift * D
    meta = {
        "truncated_inner": c["truncated"],
        "survival_rate": c["survival_rate"],
        "pi_D": c["pi_D"],
        "pi_D_stderr": c["pi_D_stderr"],
        "mean_C_of_v": c["mean_C_of_v"],
        "mean_C_of_v_stderr": c["mean_C_of_v_stderr"],
        "n_outer": c["n_outer"],
        "n_inner": c["n_inner"],
        "n_ruin": n_ruin,
        "log_u_ruin": d["log_u"],
        "D_A_per_start": d["per_start"],
        "D_A_start_agreement": d["start_agreement"],
        "escape_threshold": cycle.escape_threshold,
        "return_radius": cycle.r,
        "grid_size": grid.size,
    }
    if "schedule" in d:
        meta["D_A_schedule"] = d["schedule"]
    report = ConstantsReport(
        alpha=base.alpha,
        lambda_prime=base.lambda_prime,
        k=k,
        drift=drift,
        C=C,
        C_stderr=se_c,
        C_of_v=c["C_of_v"],
        D_A=D,
        D_A_stderr=se_d,
        K_A=K,
        K_A_stderr=se_k,
        Theta=theta,
        Theta_stderr=base.alpha * drift * se_d,
        metadata=meta,
    )
    return report, kernel
