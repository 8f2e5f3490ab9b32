"""Experiments on tails, first passages, maxima and conditioned paths.

Each experiment compares a brute-force simulation of the original
recursion with the prediction built from eigendata and the constants of
:mod:`kestenlab.simulate`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import InsufficientTailSamples, RejectionTooCostly, ValidationError
from .model import ModelSpec, NormBallComplement, TargetSet
from .shifted import ShiftedKernel, stationary_start_batch, step_batch
from .simulate import ConstantsReport, _burn, _in_set, draw_atoms, overjump_samples
from .streams import block_sizes, map_blocks, spawn

__all__ = [
    "TailReport",
    "PassageLawReport",
    "ConditioningWindow",
    "tail_experiment",
    "passage_law_experiment",
    "two_sample_passage",
    "extremal_index",
    "conditioned_path_experiment",
    "empirical_law_experiment",
    "renewal_identity_check",
    "passage_times",
    "histogram_tv",
]

CHAIN_GROUP = 4096
CONDITIONED_BATCH = 4
MAXIMA_GROUP = 512


def _wilson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def histogram_tv(a: np.ndarray, b_weights: np.ndarray, b_points: np.ndarray, bins: np.ndarray) -> float:
    """Total variation between a sample histogram and a weighted point histogram."""
    ha, _ = np.histogram(a, bins=bins)
    hb, _ = np.histogram(b_points, bins=bins, weights=b_weights)
    ha = ha / max(ha.sum(), 1)
    hb = hb / max(hb.sum(), 1e-300)
    return 0.5 * float(np.abs(ha - hb).sum())


def _angle(x: np.ndarray) -> np.ndarray:
    return np.arctan2(x[..., 1], x[..., 0])


# --------------------------------------------------------------------------
# tail


@dataclass
class TailReport:
    """Tail estimates of the stationary law.

    Attributes
    ----------
    u_grid : list of float
    scaled : list of float
        ``u^alpha P(|V| > u)`` per level.
    scaled_ci : list of (float, float)
        Wilson 95% interval on the raw proportion, scaled.
    scaled_stderr : list of float
        Standard error from independent chains (accounts for serial
        dependence).
    exceedances : list of int
    set_scaled : dict
        Name to ``u^alpha P(|V| > u, V~ in E)`` per level.
    predicted : float
        ``C / (alpha * drift)``.
    flatness : float
        ``(max - min) / mean`` of ``scaled``.
    plateau_ratio : float
        Mean of ``scaled`` divided by ``predicted``.
    angular_tv : float or None
        Histogram distance of ``V~`` given ``|V| > u_max`` to ``l_alpha``.
    n_samples : int
    """

    u_grid: list
    scaled: list
    scaled_ci: list
    scaled_stderr: list
    exceedances: list
    set_scaled: dict
    predicted: float
    flatness: float
    plateau_ratio: float
    angular_tv: float | None
    n_samples: int

    def to_dict(self):
        return asdict(self)


def _tail_block(n_chains, rng, spec, burn_in, steps, u, sets, keep_dirs):
    v = _burn(spec, n_chains, burn_in, rng)
    counts = np.zeros((n_chains, u.size))
    set_counts = {name: np.zeros(u.size) for name in sets}
    tail_dirs = []
    for _ in range(steps):
        k = draw_atoms(spec, n_chains, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        nv = spec.norm_of(v)
        above = nv[:, None] > u
        counts += above
        big = above[:, 0]
        if big.any():
            dirs = v[big] / nv[big, None]
            if sets:
                ab = above[big]
                for name, fn in sets.items():
                    inside = np.asarray(fn(dirs), dtype=bool)
                    set_counts[name] += (ab & inside[:, None]).sum(axis=0)
            top = above[:, -1]
            if keep_dirs and top.any():
                tail_dirs.append(v[top] / nv[top, None])
    return counts, set_counts, tail_dirs


def tail_experiment(
    spec: ModelSpec,
    constants: ConstantsReport,
    u_grid: Sequence[float],
    n_samples: int,
    rng: np.random.Generator,
    sets: dict[str, Callable[[np.ndarray], np.ndarray]] | None = None,
    kernel: ShiftedKernel | None = None,
    n_chains: int = 1 << 16,
    burn_in: int = 10_000,
    min_exceedances: int = 100,
    workers: int = 1,
) -> TailReport:
    """Estimate ``u^alpha P(|V| > u)`` from long stationary runs.

    ``n_chains`` independent chains are burnt in and then advanced until
    ``n_samples`` states have been recorded in total. Chains run in groups
    of 4096, each with its own stream; with ``workers > 1`` the functions
    in ``sets`` must be picklable.

    Raises
    ------
    InsufficientTailSamples
        If fewer than ``min_exceedances`` states exceed the largest level.
    """
    u = np.sort(np.asarray(u_grid, dtype=float))
    alpha = constants.alpha
    sets = sets or {}
    n_chains = min(n_chains, n_samples)
    steps = max(1, n_samples // n_chains)
    sizes = block_sizes(n_chains, CHAIN_GROUP)
    tasks = [
        (m, g, spec, burn_in, steps, u, sets, spec.dim > 1)
        for m, g in zip(sizes, spawn(rng, len(sizes)))
    ]
    res = map_blocks(_tail_block, tasks, workers)
    counts = np.concatenate([c for c, _, _ in res])
    set_counts = {name: sum(sc[name] for _, sc, _ in res) for name in sets}
    tail_dirs = [d for _, _, dl in res for d in dl]
    total = n_chains * steps
    exc = counts.sum(axis=0)
    if exc[-1] < min_exceedances:
        raise InsufficientTailSamples(f"only {int(exc[-1])} exceedances of u={u[-1]:g}")
    scale = u**alpha
    p = exc / total
    scaled = scale * p
    per_chain = counts / steps * scale
    se = per_chain.std(axis=0, ddof=1) / math.sqrt(n_chains)
    cis = [tuple(float(c) * s for c in _wilson(int(e), total)) for e, s in zip(exc, scale)]
    pred = constants.plateau
    ang_tv = None
    if spec.dim == 2 and kernel is not None and tail_dirs:
        d = np.concatenate(tail_dirs)
        bins = np.linspace(0.0, math.pi / 2, 41)
        ang_tv = histogram_tv(_angle(d), kernel.solution.l, _angle(kernel.grid.nodes), bins)
    elif spec.dim == 1:
        ang_tv = 0.0
    return TailReport(
        u_grid=u.tolist(),
        scaled=scaled.tolist(),
        scaled_ci=cis,
        scaled_stderr=se.tolist(),
        exceedances=exc.astype(int).tolist(),
        set_scaled={k: (scale * c / total).tolist() for k, c in set_counts.items()},
        predicted=pred,
        flatness=float((scaled.max() - scaled.min()) / scaled.mean()),
        plateau_ratio=float(scaled.mean() / pred),
        angular_tv=ang_tv,
        n_samples=total,
    )


# --------------------------------------------------------------------------
# passage law


@dataclass
class PassageLawReport:
    """Scaled first-passage times and their fit to an exponential law.

    Attributes
    ----------
    u : float
    samples : ndarray
        ``T_u / u^alpha`` per replicate.
    rate : float
        The rate tested against (``K_A``).
    fitted_rate : float
        ``1 / mean(samples)``.
    ks_statistic, ks_pvalue : float
    memoryless_gap, memoryless_stderr : float
        ``S(a+b)/S(a) - S(b)`` at ``a = b = median`` and its bootstrap
        standard error.
    memoryless_pvalue : float
    truncated : int
    """

    u: float
    samples: np.ndarray
    rate: float
    fitted_rate: float
    ks_statistic: float
    ks_pvalue: float
    memoryless_gap: float
    memoryless_stderr: float
    memoryless_pvalue: float
    truncated: int

    def to_dict(self):
        out = asdict(self)
        out["samples"] = self.samples.tolist()
        return out


def _passage_block(n, rng, spec, target, u, v0, cap):
    v = np.tile(v0, (n, 1))
    t = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    for step in range(1, cap + 1):
        k = draw_atoms(spec, active.size, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        hit = _in_set(spec, target, v, u)
        if hit.any():
            t[active[hit]] = step
            v, active = v[~hit], active[~hit]
            if active.size == 0:
                break
    return t, int(active.size)


def passage_times(
    spec: ModelSpec,
    target: TargetSet,
    u: float,
    v0,
    n: int,
    rng: np.random.Generator,
    cap: int = 10_000_000,
    workers: int = 1,
) -> tuple[np.ndarray, int]:
    """First-passage times ``T_u^A`` of ``n`` independent paths from ``v0``.

    Returns the times (``-1`` for paths still running at ``cap``) and the
    number of truncated paths.
    """
    v0 = np.asarray(v0, dtype=float).reshape(1, -1)
    sizes = block_sizes(n)
    tasks = [(m, g, spec, target, u, v0, cap) for m, g in zip(sizes, spawn(rng, len(sizes)))]
    res = map_blocks(_passage_block, tasks, workers)
    if not res:
        return np.empty(0, dtype=np.int64), 0
    return np.concatenate([t for t, _ in res]), sum(k for _, k in res)


def _memoryless(samples: np.ndarray, rng: np.random.Generator, n_boot: int = 500):
    a = float(np.median(samples))

    def gap(x):
        s_a = np.mean(x > a)
        s_2a = np.mean(x > 2 * a)
        return s_2a / s_a - s_a if s_a > 0 else 0.0

    g = gap(samples)
    idx = rng.integers(0, samples.size, size=(n_boot, samples.size))
    boots = np.array([gap(samples[i]) for i in idx])
    se = float(boots.std(ddof=1))
    pval = float(2 * stats.norm.sf(abs(g) / se)) if se > 0 else 1.0
    return float(g), se, pval


def passage_law_experiment(
    spec: ModelSpec,
    target: TargetSet,
    u: float,
    n_replicates: int,
    K_A: float,
    rng: np.random.Generator,
    v0=None,
    alpha: float = 1.0,
    cap: int = 10_000_000,
    workers: int = 1,
) -> PassageLawReport:
    """KS test of ``T_u^A / u^alpha`` against ``Exp(K_A)``.

    Replicates are independent paths started at ``v0`` (default: the
    all-ones vector).
    """
    if v0 is None:
        v0 = np.ones(spec.dim)
    r_run, r_boot = spawn(rng, 2)
    t, trunc = passage_times(spec, target, u, v0, n_replicates, r_run, cap, workers)
    x = t[t > 0] / u**alpha
    ks = stats.kstest(x, stats.expon(scale=1.0 / K_A).cdf)
    g, se, pm = _memoryless(x, r_boot)
    return PassageLawReport(
        u=float(u),
        samples=x,
        rate=float(K_A),
        fitted_rate=float(1.0 / x.mean()),
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        memoryless_gap=g,
        memoryless_stderr=se,
        memoryless_pvalue=pm,
        truncated=trunc,
    )


def two_sample_passage(a: PassageLawReport, b: PassageLawReport) -> tuple[float, float]:
    """Two-sample KS statistic and p-value between two passage samples."""
    res = stats.ks_2samp(a.samples, b.samples)
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------------------
# extremal index


def _maxima_block(n_chains, rng, spec, burn_in, per_chain, n_block, level):
    v = _burn(spec, n_chains, burn_in, rng)
    block_max_ok = np.zeros((n_chains, per_chain), dtype=bool)
    block_exc = np.zeros((n_chains, per_chain))
    for b in range(per_chain):
        ok = np.ones(n_chains, dtype=bool)
        exc = np.zeros(n_chains)
        for _ in range(n_block):
            k = draw_atoms(spec, n_chains, rng)
            v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
            above = spec.norm_of(v) > level
            ok &= ~above
            exc += above
        block_max_ok[:, b] = ok
        block_exc[:, b] = exc
    return block_max_ok, block_exc


def extremal_index(
    spec: ModelSpec,
    constants: ConstantsReport,
    n_block: int,
    n_samples: int,
    rng: np.random.Generator,
    w: float | None = None,
    n_chains: int = 4096,
    burn_in: int = 10_000,
    n_boot: int = 1000,
    min_exceedances: int = 100,
    workers: int = 1,
) -> dict:
    """Compare ``alpha * drift * D_A`` with a block-maxima estimate.

    The empirical index is
    ``-log P(max_{i<=n} |V_i| <= u_n) / (n P(|V| > u_n))`` with
    ``u_n = n^{1/alpha} w``. By default ``w = K_A^{1/alpha}`` so that the
    predicted block-maximum probability is ``e^{-1}``.

    Parameters
    ----------
    n_block : int
        Block length ``n``.
    n_samples : int
        Number of blocks.

    Returns
    -------
    dict
        ``theta_formula``, ``theta_formula_stderr``, ``theta_empirical``,
        ``stderr``, ``level``, ``p_block``, ``p_exceed``, ``n_blocks``.
    """
    alpha = constants.alpha
    if w is None:
        w = constants.K_A ** (1.0 / alpha)
    level = n_block ** (1.0 / alpha) * w
    n_chains = min(n_chains, n_samples)
    per_chain = -(-n_samples // n_chains)
    sizes = block_sizes(n_chains, MAXIMA_GROUP)
    r_run, r_boot = spawn(rng, 2)
    tasks = [
        (m, g, spec, burn_in, per_chain, n_block, level)
        for m, g in zip(sizes, spawn(r_run, len(sizes)))
    ]
    res = map_blocks(_maxima_block, tasks, workers)
    block_max_ok = np.concatenate([o for o, _ in res])
    block_exc = np.concatenate([e for _, e in res])
    ok = block_max_ok.ravel()[:n_samples]
    exc = block_exc.ravel()[:n_samples]
    if exc.sum() < min_exceedances:
        raise InsufficientTailSamples(f"only {int(exc.sum())} exceedances of the block level")

    def theta_of(okv, excv):
        p_block = okv.mean()
        p_exc = excv.mean() / n_block
        return -math.log(p_block) / (n_block * p_exc) if 0 < p_block < 1 and p_exc > 0 else float("nan")

    theta = theta_of(ok, exc)
    idx = r_boot.integers(0, ok.size, size=(n_boot, ok.size))
    boots = np.array([theta_of(ok[i], exc[i]) for i in idx])
    boots = boots[np.isfinite(boots)]
    formula = alpha * constants.drift * constants.D_A
    return {
        "theta_formula": formula,
        "theta_formula_stderr": alpha * constants.drift * constants.D_A_stderr,
        "theta_empirical": theta,
        "stderr": float(boots.std(ddof=1)),
        "level": level,
        "w": w,
        "p_block": float(ok.mean()),
        "p_exceed": float(exc.mean() / n_block),
        "n_blocks": int(ok.size),
        "n_block": int(n_block),
    }


# --------------------------------------------------------------------------
# conditioned cycles


@dataclass(frozen=True)
class ConditioningWindow:
    """Levels that define the conditioned window.

    Attributes
    ----------
    u : float
        Target level.
    epsilon_u : float
        Intermediate level, ``sqrt(u)`` by default; ``I_u`` is the first
        passage into ``epsilon_u A``.
    m : int
        Number of steps recorded after ``I_u``.
    """

    u: float
    epsilon_u: float | None = None
    m: int = 1

    def __post_init__(self):
        if self.epsilon_u is None:
            object.__setattr__(self, "epsilon_u", math.sqrt(self.u))
        if not 0 < self.epsilon_u < self.u:
            raise ValidationError("epsilon_u must lie in (0, u)")
        if self.m < 0:
            raise ValidationError("m must be nonnegative")


def _conditioned_block(spec, target, starts, u, eps, m, r, rng, incr_g, max_steps):
    """Unshifted cycles from ``starts`` kept only when ``T_u < tau``.

    Returns ``(window, T, incr_mean)`` for accepted cycles. ``window`` has
    shape ``(n_acc, m+1, d)`` and holds ``V_{I_u+j}``.
    """
    n = starts.shape[0]
    v = starts.copy()
    logn = np.log(spec.norm_of(v))
    I = np.full(n, -1)
    T = np.full(n, -1)
    buf = np.zeros((n, m + 1, spec.dim))
    incr = np.zeros(n)
    active = np.arange(n)
    acc_idx = []
    for step in range(1, max_steps + 1):
        k = draw_atoms(spec, active.size, rng)
        v = np.einsum("nij,nj->ni", spec.mats[k], v) + spec.qs[k]
        new_log = np.log(spec.norm_of(v))
        free = T[active] < 0
        if incr_g is not None:
            incr[active[free]] += incr_g(new_log[free] - logn[free])
        logn = new_log
        newly = (I[active] < 0) & _in_set(spec, target, v, eps)
        I[active[newly]] = step
        lag = step - I[active]
        rec = (I[active] >= 0) & (lag <= m)
        if rec.any():
            buf[active[rec], lag[rec]] = v[rec]
        hit = free & _in_set(spec, target, v, u)
        T[active[hit]] = step
        back = (T[active] < 0) & (spec.norm_of(v) < r)
        complete = (T[active] >= 0) & (step - I[active] >= m)
        if complete.any():
            acc_idx.append(active[complete])
        drop = back | complete
        if drop.any():
            keep = ~drop
            v, logn, active = v[keep], logn[keep], active[keep]
            if active.size == 0:
                break
    acc = np.concatenate(acc_idx) if acc_idx else np.empty(0, dtype=int)
    return buf[acc], T[acc], incr[acc] / np.maximum(T[acc], 1)


def _run_conditioned(spec, target, v0, u, eps, m, r, n_accepted, rng, incr_g=None,
                     block=1 << 16, max_steps=100_000, min_rate=1e-5, workers=1):
    """Accepted conditioned cycles, generated in fixed batches of blocks.

    Every batch spawns the same number of streams whatever ``workers`` is,
    so the accepted sample does not depend on the worker count.
    """
    starts = np.atleast_2d(np.asarray(v0, dtype=float))
    wins, Ts, incs = [], [], []
    n_acc = n_cyc = 0
    while n_acc < n_accepted:
        tasks = []
        for g in spawn(rng, CONDITIONED_BATCH):
            idx = (n_cyc + np.arange(block)) % starts.shape[0]
            tasks.append((spec, target, starts[idx], u, eps, m, r, g, incr_g, max_steps))
            n_cyc += block
        for w, T, inc in map_blocks(_conditioned_block, tasks, workers):
            wins.append(w)
            Ts.append(T)
            incs.append(inc)
            n_acc += T.size
        if n_cyc >= 1_000_000 and n_acc / n_cyc < min_rate:
            raise RejectionTooCostly(f"acceptance {n_acc / n_cyc:.2e} below {min_rate:g}")
    win = np.concatenate(wins)[:n_accepted]
    T = np.concatenate(Ts)[:n_accepted]
    inc = np.concatenate(incs)[:n_accepted]
    return win, T, inc, n_acc / n_cyc, n_cyc


def _rho_start(spec, kernel, target, n, rng, log_u=None):
    from .simulate import default_log_u_ruin, typical_step

    if spec.dim == 1:
        return np.ones((n, 1))
    if log_u is None:
        log_u = default_log_u_ruin(kernel, 0.0)
    (x, _), = overjump_samples(spec, kernel, target, [math.exp(log_u)], n, rng, level_window=typical_step(kernel))
    return x


def _shifted_windows(kernel, x0, m, rng):
    """``(X_0, e^{S_1} X_1, ..., e^{S_m} X_m)`` for starts ``x0``."""
    n, d = x0.shape
    out = np.zeros((n, m + 1, d))
    out[:, 0] = x0
    x, s, rx = x0, np.zeros(n), None
    for j in range(1, m + 1):
        _, x, dlog, _, rx = step_batch(kernel, x, rng, rx)
        s = s + dlog
        out[:, j] = np.exp(s)[:, None] * x
    return out


def _mean_se(a):
    a = np.asarray(a, dtype=float)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def conditioned_path_experiment(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    target: TargetSet,
    window: ConditioningWindow,
    tests: dict[str, Callable[[np.ndarray], np.ndarray]],
    n_accepted: int,
    rng: np.random.Generator,
    v0,
    r: float,
    n_right: int | None = None,
    workers: int = 1,
) -> dict:
    """Compare the path after ``I_u`` with the shifted walk from ``rho``.

    Parameters
    ----------
    tests : dict
        Name to a vectorised function of windows of shape ``(n, m+1, d)``.
    v0 : array_like
        Start vector, or an array of starts used cyclically.
    r : float
        Return radius of ``D``.

    Returns
    -------
    dict
        Per test: ``left``, ``left_stderr``, ``right``, ``right_stderr``,
        ``gap``, ``z``; plus ``acceptance``, ``n_cycles`` and ``samples``
        (per-test values on the accepted windows).
    """
    r_left, r_rho, r_walk = spawn(rng, 3)
    m = window.m
    win, T, _, rate, n_cyc = _run_conditioned(
        spec, target, v0, window.u, window.epsilon_u, m, r, n_accepted, r_left, workers=workers
    )
    left = win / spec.norm_of(win[:, 0])[:, None, None]
    n_right = n_right or n_accepted
    x0 = _rho_start(spec, kernel, target, n_right, r_rho)
    right = _shifted_windows(kernel, x0, m, r_walk)
    out = {"acceptance": rate, "n_cycles": n_cyc, "n_accepted": int(T.size), "n_right": int(n_right),
           "u": window.u, "epsilon_u": window.epsilon_u, "m": m, "tests": {}, "samples": {}}
    for name, g in tests.items():
        vals = np.asarray(g(left), dtype=float)
        out["samples"][name] = vals
        lm, ls = _mean_se(vals)
        rm, rs = _mean_se(g(right))
        comb = math.hypot(ls, rs)
        out["tests"][name] = {"left": lm, "left_stderr": ls, "right": rm, "right_stderr": rs,
                              "gap": lm - rm, "z": (lm - rm) / comb if comb > 0 else 0.0}
    if spec.dim == 2:
        bins = np.linspace(0.0, math.pi / 2, 21)
        la = _angle(left[:, 0])
        ra = _angle(x0)
        ha, _ = np.histogram(la, bins)
        hb, _ = np.histogram(ra, bins)
        out["angular_tv"] = 0.5 * float(np.abs(ha / ha.sum() - hb / hb.sum()).sum())
    return out


def empirical_law_experiment(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    target: TargetSet,
    u: float,
    g: Callable[[np.ndarray], np.ndarray],
    n_accepted: int,
    rng: np.random.Generator,
    v0,
    r: float,
    n_right: int = 1_000_000,
    workers: int = 1,
) -> dict:
    """Conditioned empirical mean of ``g(log|V_k| - log|V_{k-1}|)`` against ``E^alpha g(S_1)``.

    Returns
    -------
    dict
        ``left``, ``left_stderr``, ``right``, ``right_stderr``, ``gap``,
        ``gap_stderr``, ``acceptance``, ``samples`` (per-cycle mean
        increments).
    """
    r_left, r_right = spawn(rng, 2)
    _, T, inc, rate, n_cyc = _run_conditioned(
        spec, target, v0, u, 0.5 * u, 0, r, n_accepted, r_left, incr_g=g, workers=workers
    )
    lm, ls = _mean_se(inc)
    x = stationary_start_batch(kernel, n_right, r_right)
    _, _, dlog, _, _ = step_batch(kernel, x, r_right)
    rm, rs = _mean_se(g(dlog))
    return {"u": u, "left": lm, "left_stderr": ls, "right": rm, "right_stderr": rs,
            "gap": lm - rm, "gap_stderr": math.hypot(ls, rs), "acceptance": rate,
            "n_accepted": int(T.size), "n_cycles": n_cyc, "mean_T": float(T.mean()), "samples": inc}


# --------------------------------------------------------------------------
# renewal identity


def renewal_identity_check(
    spec: ModelSpec,
    kernel: ShiftedKernel,
    lambda_prime: float,
    n_paths: int,
    rng: np.random.Generator,
    phi: Callable[[np.ndarray], np.ndarray] | None = None,
    log_u: float | None = None,
    s_max: float = 40.0,
    max_steps: int = 100_000,
) -> dict:
    """Markov renewal identity with ``g(x, s) = e^{-s} 1{s >= 0} phi(x)``.

    LHS draws ``(x, s)`` from the overjump law at a high level (averaged
    over a window of one mean step, see :func:`estimate_D_A`) and sums
    ``g(X_i, S_i + s)`` along the shifted walk from ``x``, stopping once
    ``S_i + s > s_max``. RHS is ``(1 / Lambda') sum_j phi(x_j) r(x_j) l(x_j)``.
    """
    from .simulate import default_log_u_ruin, typical_step

    if phi is None:
        phi = lambda x: np.ones(x.shape[0])  # noqa: E731
    r_rho, r_walk = spawn(rng, 2)
    if log_u is None:
        log_u = default_log_u_ruin(kernel, lambda_prime)
    target = NormBallComplement(1.0)
    (x, s0), = overjump_samples(
        spec, kernel, target, [math.exp(log_u)], n_paths, r_rho, level_window=typical_step(kernel)
    )
    n = x.shape[0]
    total = np.zeros(n)
    s = s0.copy()
    active = np.arange(n)
    rx = None
    for step in range(max_steps + 1):
        total[active] += np.where(s >= 0, np.exp(-np.maximum(s, 0.0)), 0.0) * phi(x)
        keep = s <= s_max
        x, s, active = x[keep], s[keep], active[keep]
        rx = None if rx is None else rx[keep]
        if active.size == 0:
            break
        _, x, dlog, _, rx = step_batch(kernel, x, r_walk, rx)
        s = s + dlog
    lm, ls = _mean_se(total)
    sol = kernel.solution
    rhs = float(np.sum(phi(kernel.grid.nodes) * sol.r * sol.l) / lambda_prime)
    return {"lhs": lm, "lhs_stderr": ls, "rhs": rhs, "gap": lm - rhs,
            "z": (lm - rhs) / ls if ls > 0 else 0.0, "n_paths": n, "log_u": log_u, "samples": total}
