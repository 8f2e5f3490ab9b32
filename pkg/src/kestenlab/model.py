"""Model definitions, norms, target sets and hypothesis checks.

A model is a finite mixture of atoms ``(p, M, Q)`` driving the recursion
``V_n = M_n V_{n-1} + Q_n`` with nonnegative ``d x d`` matrices ``M`` and
nonnegative vectors ``Q``.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    ArithmeticDetected,
    ConfigParse,
    DegenerateQ,
    NonContractive,
    NotAllowable,
    NotPositivelyRegular,
    ValidationError,
)

__all__ = [
    "Norm",
    "vec_norm",
    "op_norm",
    "Atom",
    "ModelSpec",
    "ModelDiagnostics",
    "TargetSet",
    "NormBallComplement",
    "HalfSpace",
    "Intersection",
    "CycleConfig",
    "gauge",
    "regularity_horizon",
    "positivity_depth",
    "k_step_model",
    "validate_model",
    "load_model",
    "parse_model",
    "model_to_dict",
]

PROB_TOL = 1e-12


class Norm(str, enum.Enum):
    """Monotone norms on the nonnegative cone."""

    L1 = "l1"
    L2 = "l2"
    LINF = "linf"


def vec_norm(v: np.ndarray, norm: Norm | str = Norm.L1) -> np.ndarray:
    """Norm of ``v`` along its last axis."""
    norm = Norm(norm)
    v = np.asarray(v, dtype=float)
    if norm is Norm.L1:
        return np.abs(v).sum(axis=-1)
    if norm is Norm.L2:
        return np.sqrt((v * v).sum(axis=-1))
    return np.abs(v).max(axis=-1)


def op_norm(m: np.ndarray, norm: Norm | str = Norm.L1) -> float:
    """Operator norm of ``m`` induced by ``norm``."""
    norm = Norm(norm)
    m = np.asarray(m, dtype=float)
    if norm is Norm.L1:
        return float(np.abs(m).sum(axis=0).max())
    if norm is Norm.L2:
        return float(np.linalg.norm(m, 2))
    return float(np.abs(m).sum(axis=1).max())


@dataclass(frozen=True)
class Atom:
    """One mixture component ``(p, M, Q)``."""

    p: float
    M: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Law of ``(M, Q)`` as a finite mixture of atoms.

    Parameters
    ----------
    dim : int
        State dimension ``d``.
    atoms : sequence of Atom
        Mixture components. Probabilities must be positive and sum to one.
    norm : Norm
        Norm used for ``|x|`` and for the sphere ``{|x| = 1}``.

    Notes
    -----
    Construction checks structure only: shapes, finiteness, signs,
    probabilities and allowability of every matrix. Hypotheses that need
    computation live in :func:`validate_model`.
    """

    dim: int
    atoms: tuple[Atom, ...]
    norm: Norm = Norm.L1
    probs: np.ndarray = field(init=False, repr=False, compare=False)
    mats: np.ndarray = field(init=False, repr=False, compare=False)
    qs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ValidationError("dim must be a positive integer")
        if len(self.atoms) == 0:
            raise ValidationError("a model needs at least one atom")
        probs, mats, qs = [], [], []
        for i, atom in enumerate(self.atoms):
            p = float(atom.p)
            m = np.array(atom.M, dtype=float).reshape(d, d)
            q = np.array(atom.Q, dtype=float).reshape(d)
            if not (np.isfinite(p) and np.all(np.isfinite(m)) and np.all(np.isfinite(q))):
                raise ValidationError(f"atom {i} has non-finite entries")
            if p <= 0:
                raise ValidationError(f"atom {i} has probability {p} <= 0")
            if np.any(m < 0) or np.any(q < 0):
                raise ValidationError(f"atom {i} has negative entries")
            if np.any(m.sum(axis=0) == 0) or np.any(m.sum(axis=1) == 0):
                raise NotAllowable(f"atom {i} matrix has a zero row or column")
            m.setflags(write=False)
            q.setflags(write=False)
            probs.append(p)
            mats.append(m)
            qs.append(q)
        total = math.fsum(probs)
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(
            self, "atoms", tuple(Atom(p, m, q) for p, m, q in zip(probs, mats, qs))
        )
        arrs = (np.array(probs), np.stack(mats), np.stack(qs))
        for a in arrs:
            a.setflags(write=False)
        object.__setattr__(self, "probs", arrs[0])
        object.__setattr__(self, "mats", arrs[1])
        object.__setattr__(self, "qs", arrs[2])

    @classmethod
    def from_arrays(cls, probs, mats, qs, norm: Norm | str = Norm.L1) -> "ModelSpec":
        """Build a spec from stacked probabilities, matrices and vectors.

        Scalars are accepted for ``d = 1``.
        """
        probs = np.asarray(probs, dtype=float).ravel()
        k = probs.size
        mats = np.asarray(mats, dtype=float)
        if mats.ndim <= 1:
            mats = mats.reshape(k, 1, 1)
        d = mats.shape[-1]
        qs = np.asarray(qs, dtype=float).reshape(k, d)
        atoms = tuple(Atom(p, m, q) for p, m, q in zip(probs, mats, qs))
        return cls(dim=d, atoms=atoms, norm=Norm(norm))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def norm_of(self, v: np.ndarray) -> np.ndarray:
        """Vector norm along the last axis."""
        return vec_norm(v, self.norm)

    def direction(self, v: np.ndarray) -> np.ndarray:
        """Projection ``v / |v|`` onto the unit sphere."""
        v = np.asarray(v, dtype=float)
        return v / self.norm_of(v)[..., None]

    def __hash__(self):
        return hash((self.dim, self.norm, self.probs.tobytes(), self.mats.tobytes(), self.qs.tobytes()))

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.norm == other.norm
            and np.array_equal(self.probs, other.probs)
            and np.array_equal(self.mats, other.mats)
            and np.array_equal(self.qs, other.qs)
        )


# --------------------------------------------------------------------------
# target sets


class TargetSet:
    """Semi-cone ``A`` described by its gauge on the unit sphere."""

    def gauge(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        """Gauge ``d_A(x) = inf{t > 1 : t x in A}`` for sphere points ``x``."""
        raise NotImplementedError

    def contains(self, v: np.ndarray, norm: Norm | str = Norm.L1) -> np.ndarray:  # pragma: no cover
        """Direct membership test ``v in A`` along the last axis."""
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover
        raise NotImplementedError


@dataclass(frozen=True)
class NormBallComplement(TargetSet):
    """``A = {|x| > t}`` with ``t >= 1``."""

    t: float = 1.0

    def __post_init__(self):
        if not self.t >= 1:
            raise ValidationError("NormBallComplement level must be >= 1")

    def gauge(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(self.t))

    def contains(self, v, norm=Norm.L1):
        return vec_norm(v, norm) > self.t

    def to_dict(self):
        return {"kind": "norm_ball", "t": float(self.t)}


@dataclass(frozen=True)
class HalfSpace(TargetSet):
    """``A = {<w, x> > 1} intersected with {|x| > 1}``."""

    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(c) for c in self.w)
        if not all(np.isfinite(w)) or any(c < 0 for c in w) or not any(c > 0 for c in w):
            raise ValidationError("HalfSpace weights must be finite, nonnegative and not all zero")
        object.__setattr__(self, "w", w)

    def gauge(self, x):
        x = np.asarray(x, dtype=float)
        dot = x @ np.asarray(self.w)
        with np.errstate(divide="ignore", over="ignore"):
            inv = np.where(dot > 0, 1.0 / np.where(dot > 0, dot, 1.0), np.inf)
        return np.maximum(1.0, inv)

    def contains(self, v, norm=Norm.L1):
        v = np.asarray(v, dtype=float)
        return (v @ np.asarray(self.w) > 1.0) & (vec_norm(v, norm) > 1.0)

    def to_dict(self):
        return {"kind": "half_space", "w": list(self.w)}


@dataclass(frozen=True)
class Intersection(TargetSet):
    """Intersection of semi-cones; the gauge is the pointwise maximum."""

    sets: tuple[TargetSet, ...]

    def __post_init__(self):
        if len(self.sets) == 0:
            raise ValidationError("Intersection needs at least one set")
        object.__setattr__(self, "sets", tuple(self.sets))

    def gauge(self, x):
        return np.max(np.stack([s.gauge(x) for s in self.sets]), axis=0)

    def contains(self, v, norm=Norm.L1):
        out = self.sets[0].contains(v, norm)
        for s in self.sets[1:]:
            out = out & s.contains(v, norm)
        return out

    def to_dict(self):
        return {"kind": "intersection", "sets": [s.to_dict() for s in self.sets]}


def gauge(target: TargetSet, x) -> float | np.ndarray:
    """Evaluate ``d_A`` at a sphere point (or a stack of them).

    Returns ``inf`` where the ray through ``x`` misses ``A``.
    """
    out = target.gauge(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def _target_from_dict(obj: dict) -> TargetSet:
    kind = obj.get("kind")
    if kind == "norm_ball":
        return NormBallComplement(float(obj.get("t", 1.0)))
    if kind == "half_space":
        return HalfSpace(tuple(obj["w"]))
    if kind == "intersection":
        return Intersection(tuple(_target_from_dict(s) for s in obj["sets"]))
    raise ConfigParse(f"unknown target kind {kind!r}")


@dataclass(frozen=True)
class CycleConfig:
    """Return-set radius and cycle truncation settings.

    Parameters
    ----------
    r : float
        Radius of ``D = {0 < |v| < r}``.
    escape_threshold : float, optional
        Radius beyond which a shifted path counts as never returning.
        Defaults to ``1e4 * r``.
    max_steps : int
        Step cap for a single cycle.
    """

    r: float
    escape_threshold: float | None = None
    max_steps: int = 100_000

    def __post_init__(self):
        if not self.r > 0:
            raise ValidationError("return radius must be positive")
        if self.escape_threshold is None:
            object.__setattr__(self, "escape_threshold", 1e4 * float(self.r))
        if not self.escape_threshold > self.r:
            raise ValidationError("escape_threshold must exceed r")
        if int(self.max_steps) < 1:
            raise ValidationError("max_steps must be positive")
        object.__setattr__(self, "max_steps", int(self.max_steps))

    def to_dict(self):
        return {"r": self.r, "escape": self.escape_threshold, "max_steps": self.max_steps}


# --------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ModelDiagnostics:
    """Outcome of :func:`validate_model`.

    Attributes
    ----------
    regularity_horizon : int
        Smallest ``n`` such that some product of ``n`` atom matrices is
        strictly positive.
    positivity_depth : int
        Smallest ``k`` such that some ``k``-step additive term is strictly
        positive. ``k > 1`` means estimators run on the ``k``-step chain.
    arithmetic_flag : str
        One of ``"nonarithmetic-likely"``, ``"arithmetic-detected"``,
        ``"unknown"``.
    moment_table : dict
        ``theta -> (E||M||^theta, E|Q|^theta)``.
    lyapunov_sign : int
        Sign of the estimated derivative of the log spectral radius at 0.
    lyapunov_estimate : float
        The estimate itself.
    """

    regularity_horizon: int
    positivity_depth: int
    arithmetic_flag: str
    moment_table: dict
    lyapunov_sign: int
    lyapunov_estimate: float

    def to_dict(self):
        return {
            "regularity_horizon": self.regularity_horizon,
            "positivity_depth": self.positivity_depth,
            "arithmetic_flag": self.arithmetic_flag,
            "moment_table": {repr(k): list(v) for k, v in self.moment_table.items()},
            "lyapunov_sign": self.lyapunov_sign,
            "lyapunov_estimate": self.lyapunov_estimate,
        }


def _pattern(m: np.ndarray) -> np.ndarray:
    return np.asarray(m) > 0


def regularity_horizon(spec: ModelSpec, n_max: int = 10) -> int | None:
    """Smallest product length with a strictly positive product, or None.

    Breadth-first search over the zero patterns of products, which is exact
    because positivity of a product of nonnegative matrices depends only on
    the patterns of its factors.
    """
    pats = [_pattern(m) for m in spec.mats]
    frontier = {p.tobytes(): p for p in pats}
    for n in range(1, n_max + 1):
        if any(p.all() for p in frontier.values()):
            return n
        nxt = {}
        for p in frontier.values():
            for a in pats:
                prod = (a.astype(int) @ p.astype(int)) > 0
                nxt.setdefault(prod.tobytes(), prod)
        frontier = nxt
    return None


def positivity_depth(spec: ModelSpec, n_max: int = 10) -> int | None:
    """Smallest ``k`` with a strictly positive ``k``-step additive term.

    The ``k``-step term of atoms ``a_1..a_k`` is
    ``sum_i M_{a_k} ... M_{a_{i+1}} Q_{a_i}``.
    """
    mp = [_pattern(m).astype(int) for m in spec.mats]
    qp = [_pattern(q) for q in spec.qs]
    states = {q.tobytes(): q for q in qp}
    for k in range(1, n_max + 1):
        if any(q.all() for q in states.values()):
            return k
        nxt = {}
        for q in states.values():
            for m, qa in zip(mp, qp):
                new = ((m @ q.astype(int)) > 0) | qa
                nxt.setdefault(new.tobytes(), new)
        states = nxt
    return None


def k_step_model(spec: ModelSpec, k: int) -> ModelSpec:
    """Model of the ``k``-step chain ``V_{nk}``.

    Each atom corresponds to an ordered ``k``-tuple of original atoms with
    matrix ``M_k ... M_1`` and vector ``sum_i M_k ... M_{i+1} Q_i``.
    """
    if k == 1:
        return spec
    atoms = []
    for tup in itertools.product(range(spec.n_atoms), repeat=k):
        p = 1.0
        m = np.eye(spec.dim)
        q = np.zeros(spec.dim)
        for a in tup:
            p *= spec.probs[a]
            m = spec.mats[a] @ m
            q = spec.mats[a] @ q + spec.qs[a]
        atoms.append(Atom(p, m, q))
    # renormalise away floating drift in the product of probabilities
    total = math.fsum(a.p for a in atoms)
    atoms = tuple(Atom(a.p / total, a.M, a.Q) for a in atoms)
    return ModelSpec(spec.dim, atoms, spec.norm)


def _arithmetic_flag(spec: ModelSpec, horizon: int, max_products: int = 4096) -> str:
    """Rational-dependence heuristic on log spectral radii of positive products."""
    logs = []
    depth = horizon + 1
    while depth > 1 and spec.n_atoms**depth > max_products:
        depth -= 1
    for length in range(1, depth + 1):
        for tup in itertools.product(range(spec.n_atoms), repeat=length):
            m = np.eye(spec.dim)
            for a in tup:
                m = spec.mats[a] @ m
            if not np.all(m > 0):
                continue
            rho = float(np.max(np.abs(np.linalg.eigvals(m))))
            logs.append(math.log(rho) / length)
    vals = [v for v in logs if abs(v) > 1e-12]
    if not vals:
        return "unknown"
    base = vals[0]
    for v in vals[1:]:
        ratio = v / base
        frac = Fraction(ratio).limit_denominator(64)
        if abs(ratio - float(frac)) > 1e-9 * max(1.0, abs(ratio)):
            return "nonarithmetic-likely"
    return "arithmetic-detected"


def _lyapunov_pilot(spec: ModelSpec, n_paths: int = 256, n_steps: int = 400, burn: int = 50) -> float:
    """Estimate of the top Lyapunov exponent.

    Exact for ``d = 1``; otherwise averages ``log|M x|`` along normalised
    product paths with a fixed seed.
    """
    if spec.dim == 1:
        return float(np.dot(spec.probs, np.log(spec.mats[:, 0, 0])))
    rng = np.random.default_rng(20240229)
    cum = np.cumsum(spec.probs)
    x = np.full((n_paths, spec.dim), 1.0)
    x = spec.direction(x)
    acc = 0.0
    for step in range(n_steps):
        k = np.minimum(np.searchsorted(cum, rng.random(n_paths), side="right"), spec.n_atoms - 1)
        y = np.einsum("nij,nj->ni", spec.mats[k], x)
        g = spec.norm_of(y)
        x = y / g[:, None]
        if step >= burn:
            acc += np.log(g).mean()
    return float(acc / (n_steps - burn))


def validate_model(
    spec: ModelSpec,
    n_max: int = 10,
    theta_grid: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
) -> ModelDiagnostics:
    """Check the standing hypotheses and return diagnostics.

    Raises
    ------
    NotPositivelyRegular
        No product of at most ``n_max`` atoms is strictly positive.
    DegenerateQ
        Every ``Q`` atom is zero.
    NonContractive
        The Lyapunov exponent estimate is not negative.

    Warns
    -----
    ArithmeticDetected
        When the log spectral radii of positive products look rationally
        dependent.
    """
    if not np.any(spec.qs > 0):
        raise DegenerateQ("all Q atoms are zero")
    horizon = regularity_horizon(spec, n_max)
    if horizon is None:
        raise NotPositivelyRegular(f"no strictly positive product within {n_max} factors")
    depth = positivity_depth(spec, n_max)
    if depth is None:
        raise DegenerateQ(f"no strictly positive additive term within {n_max} steps")
    flag = _arithmetic_flag(spec, horizon)
    if flag == "arithmetic-detected":
        warnings.warn("log-norms of atom products are rationally dependent", ArithmeticDetected, stacklevel=2)
    mnorms = np.array([op_norm(m, spec.norm) for m in spec.mats])
    qnorms = spec.norm_of(spec.qs)
    table = {}
    for th in theta_grid:
        with np.errstate(divide="ignore"):
            em = float(np.dot(spec.probs, mnorms ** th))
            eq = float(np.dot(spec.probs, np.where(qnorms > 0, qnorms ** th, 0.0)))
        table[float(th)] = (em, eq)
    lyap = _lyapunov_pilot(spec)
    if not lyap < 0:
        raise NonContractive(f"Lyapunov exponent estimate {lyap:.6g} is not negative")
    return ModelDiagnostics(
        regularity_horizon=horizon,
        positivity_depth=depth,
        arithmetic_flag=flag,
        moment_table=table,
        lyapunov_sign=-1,
        lyapunov_estimate=lyap,
    )


# --------------------------------------------------------------------------
# JSON model files


def _reject_constant(name):
    raise ConfigParse(f"non-finite literal {name} is not allowed")


def _number(x: Any, what: str) -> float:
    if isinstance(x, bool):
        raise ConfigParse(f"{what}: expected a number")
    if isinstance(x, str):
        try:
            return float(Fraction(x))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigParse(f"{what}: cannot parse {x!r}") from exc
    if isinstance(x, (int, float)):
        return float(x)
    raise ConfigParse(f"{what}: expected a number, got {type(x).__name__}")


def parse_model(obj: dict) -> tuple[ModelSpec, TargetSet, CycleConfig]:
    """Build ``(spec, target, cycle)`` from a decoded model document.

    Probabilities may be given as numbers or as fraction strings like
    ``"1/3"``.
    """
    try:
        d = int(obj["dim"])
        norm = Norm(obj.get("norm", "l1"))
        atoms = []
        for i, a in enumerate(obj["atoms"]):
            p = _number(a["p"], f"atom {i} p")
            m = [_number(c, f"atom {i} M") for c in np.ravel(a["M"]).tolist()]
            q = [_number(c, f"atom {i} Q") for c in np.ravel(a["Q"]).tolist()]
            if len(m) != d * d or len(q) != d:
                raise ConfigParse(f"atom {i} has wrong shape for dim {d}")
            if any(c < 0 for c in m + q) or p < 0:
                raise ConfigParse(f"atom {i} has negative entries")
            atoms.append(Atom(p, np.array(m).reshape(d, d), np.array(q)))
        target = _target_from_dict(obj.get("target", {"kind": "norm_ball", "t": 1.0}))
        cyc = obj.get("cycle", {})
        cycle = CycleConfig(
            r=_number(cyc.get("r", 1.0), "cycle r"),
            escape_threshold=None if cyc.get("escape") is None else _number(cyc["escape"], "cycle escape"),
            max_steps=int(cyc.get("max_steps", 100_000)),
        )
    except ConfigParse:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ConfigParse(f"malformed model document: {exc}") from exc
    spec = ModelSpec(d, tuple(atoms), norm)
    return spec, target, cycle


def load_model(path: str | Path) -> tuple[ModelSpec, TargetSet, CycleConfig]:
    """Read a JSON model file.

    NaN and infinity literals are rejected.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParse(f"cannot read {path}: {exc}") from exc
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigParse(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigParse("model document must be a JSON object")
    return parse_model(obj)


def model_to_dict(spec: ModelSpec, target: TargetSet | None = None, cycle: CycleConfig | None = None) -> dict:
    """Inverse of :func:`parse_model`."""
    out = {
        "dim": spec.dim,
        "norm": spec.norm.value,
        "atoms": [
            {"p": a.p, "M": a.M.ravel().tolist(), "Q": a.Q.tolist()} for a in spec.atoms
        ],
    }
    if target is not None:
        out["target"] = target.to_dict()
    if cycle is not None:
        out["cycle"] = cycle.to_dict()
    return out
