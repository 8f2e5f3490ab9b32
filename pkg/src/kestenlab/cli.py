"""Command-line entry point ``kesten``.

Every subcommand reads a JSON model file, runs one operation and writes a
result envelope (JSON) plus, where the operation produces raw samples, a
CSV file. Exit status is 0 on success, 1 on invalid input and 2 when an
estimator fails.
"""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import io
import json
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import ArithmeticDetected, ConfigParse, EstimatorError, KestenError, UnknownCommand, ValidationError
from .extremes import (
    ConditioningWindow,
    conditioned_path_experiment,
    empirical_law_experiment,
    passage_law_experiment,
    renewal_identity_check,
    tail_experiment,
)
from .model import ModelSpec, load_model, model_to_dict, validate_model
from .shifted import ShiftedKernel
from .simulate import ConstantsReport, estimate_constants, overjump_samples, simulate_path
from .spectral import make_grid, solve_alpha, solve_eigen
from .streams import make_rng, resolve_seed

__all__ = ["ResultEnvelope", "run", "main", "dumps", "COMMANDS"]

DEFAULT_SEED = 42


# --------------------------------------------------------------------------
# serialization


def _plain(obj: Any) -> Any:
    """Convert numpy containers and scalars to JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if hasattr(obj, "value") and isinstance(obj.value, str):
        return obj.value
    return obj


def _encode(obj: Any, out: io.StringIO, indent: int, level: int) -> None:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{")
        for i, (k, v) in enumerate(obj.items()):
            out.write(("," if i else "") + pad + json.dumps(k) + ": ")
            _encode(v, out, indent, level + 1)
        out.write(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.write("[]")
            return
        out.write("[")
        for i, v in enumerate(obj):
            out.write(("," if i else "") + pad)
            _encode(v, out, indent, level + 1)
        out.write(end + "]")
    elif isinstance(obj, bool) or obj is None:
        out.write(json.dumps(obj))
    elif isinstance(obj, int):
        out.write(str(obj))
    elif isinstance(obj, float):
        # non-finite values have no JSON literal
        if not math.isfinite(obj):
            out.write("null")
        else:
            text = format(obj, ".17g")
            out.write(text if any(c in text for c in ".e") else text + ".0")
    else:
        out.write(json.dumps(obj))


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    buf = io.StringIO()
    _encode(_plain(obj), buf, indent, 0)
    return buf.getvalue() + "\n"


@dataclass
class ResultEnvelope:
    """Serialized outcome of one command.

    Attributes
    ----------
    command : str
    config_hash : str
        SHA-256 of the model document and the command parameters.
    seed : int
    wall_time : float
        Seconds spent in the command.
    payload : dict
        The module report.
    version : str
    """

    command: str
    config_hash: str
    seed: int
    wall_time: float
    payload: dict
    version: str = __version__

    def to_json(self) -> str:
        return dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ResultEnvelope":
        return cls(**json.loads(text))


def _csv_to(fh, header: list[str], rows) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format(float(c), ".17g") if isinstance(c, (float, np.floating)) else c for c in row])


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        _csv_to(fh, header, rows)


# --------------------------------------------------------------------------
# helpers


@dataclass
class _Context:
    args: argparse.Namespace
    spec: ModelSpec
    target: Any
    cycle: Any
    seed: int

    def rng(self, *key):
        return make_rng(self.seed, *key)

    @property
    def grid(self):
        return make_grid(self.spec, self.args.grid)

    def kernel(self) -> ShiftedKernel:
        return ShiftedKernel(self.spec, solve_alpha(self.spec, self.grid))

    def constants(self) -> tuple[ConstantsReport, ShiftedKernel | None]:
        a = self.args
        if getattr(a, "constants", None):
            env = ResultEnvelope.from_json(Path(a.constants).read_text())
            return ConstantsReport.from_dict(env.payload), None
        return estimate_constants(
            self.spec, self.target, self.cycle, self.rng(), n_outer=a.outer, n_inner=a.inner,
            n_ruin=a.ruin, grid=self.grid, workers=a.workers,
        )

    def v0(self):
        v = self.args.v0
        return np.ones(self.spec.dim) if v is None else np.asarray(v, dtype=float)


def _window_norm(j: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda w: np.abs(w[:, j, :]).sum(axis=1)


def _path_tests(m: int) -> dict[str, Callable[[np.ndarray], np.ndarray]]:
    """Bounded Hölder functionals of the scaled window ``(w_0, ..., w_m)``."""
    tests = {}
    if m >= 1:
        tests["min_norm1_10"] = lambda w: np.minimum(_window_norm(1)(w), 10.0)
    if m >= 2:
        tests["exp_neg_norm2"] = lambda w: np.exp(-_window_norm(2)(w))
    if m >= 3:
        tests["sqrt_min_norm3_10"] = lambda w: np.sqrt(np.minimum(_window_norm(3)(w), 10.0))
    if m == 0:
        tests["first_coordinate"] = lambda w: w[:, 0, 0]
    return tests


def _clipped_identity(clip: float) -> Callable[[np.ndarray], np.ndarray]:
    # a partial rather than a lambda so that worker processes can unpickle it
    return functools.partial(np.clip, a_min=-clip, a_max=clip)


# --------------------------------------------------------------------------
# commands; each returns (payload, csv_header, csv_rows)


def _cmd_validate(ctx: _Context):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ArithmeticDetected)
        diag = validate_model(ctx.spec, n_max=ctx.args.n_max)
    payload = diag.to_dict()
    payload["warnings"] = [str(w.message) for w in caught if issubclass(w.category, ArithmeticDetected)]
    rows = [(th, em, eq) for th, (em, eq) in diag.moment_table.items()]
    return payload, ["theta", "E_norm_M_theta", "E_norm_Q_theta"], rows


def _eigen_rows(sol):
    g = sol.grid
    header = [f"x_{i + 1}" for i in range(g.dim)] + ["r", "l", "r_star", "l_star"]
    rows = [list(g.nodes[i]) + [sol.r[i], sol.l[i], sol.r_star[i], sol.l_star[i]] for i in range(g.size)]
    return header, rows


def _cmd_spectral(ctx: _Context):
    sol = solve_eigen(ctx.spec, ctx.grid, ctx.args.theta)
    return (sol.to_dict(), *_eigen_rows(sol))


def _cmd_alpha(ctx: _Context):
    sol = solve_alpha(ctx.spec, ctx.grid, bracket=ctx.args.bracket)
    return (sol.to_dict(), *_eigen_rows(sol))


def _cmd_simulate(ctx: _Context):
    a = ctx.args
    traj = simulate_path(ctx.spec, ctx.v0(), a.steps, ctx.rng("simulate"))
    d = ctx.spec.dim
    header = ["step"] + [f"V_{i + 1}" for i in range(d)] + ["S", "logZ", "event"]
    rows = [[i, *v, s, z, ev] for i, v, s, z, ev in traj.rows()]
    if a.trace:
        _write_csv(Path(a.trace), header, rows)
    norms = ctx.spec.norm_of(traj.V)
    payload = {
        "steps": a.steps,
        "v0": traj.V[0],
        "final": traj.V[-1],
        "max_norm": float(norms.max()),
        "final_S": float(traj.s[-1]),
        "final_logZ": float(traj.logZ[-1]),
        "trace": a.trace,
    }
    return payload, header, rows


def _cmd_constants(ctx: _Context):
    rep, _ = ctx.constants()
    rows = [[*np.ravel(v), c, e] for v, c, e in rep.C_of_v]
    header = [f"v_{i + 1}" for i in range(ctx.spec.dim)] + ["C_of_v", "stderr"]
    return rep.to_dict(), header, rows


def _cmd_tail(ctx: _Context):
    a = ctx.args
    rep, kernel = ctx.constants()
    kernel = kernel or (ctx.kernel() if ctx.spec.dim > 1 else None)
    tr = tail_experiment(
        ctx.spec, rep, a.u, a.samples, ctx.rng("tail"), kernel=kernel,
        n_chains=a.chains, burn_in=a.burn_in, workers=a.workers,
    )
    payload = {"tail": tr.to_dict(), "constants": rep.to_dict()}
    rows = [
        (u, s, se, lo, hi, n)
        for u, s, se, (lo, hi), n in zip(tr.u_grid, tr.scaled, tr.scaled_stderr, tr.scaled_ci, tr.exceedances)
    ]
    return payload, ["u", "scaled", "stderr", "ci_low", "ci_high", "exceedances"], rows


def _cmd_passage_law(ctx: _Context):
    a = ctx.args
    rep, _ = ctx.constants()
    pl = passage_law_experiment(
        ctx.spec, ctx.target, a.u, a.replicates, rep.K_A, ctx.rng("passage-law"), v0=ctx.v0(),
        alpha=rep.alpha, workers=a.workers,
    )
    payload = pl.to_dict()
    samples = payload.pop("samples")
    payload["constants"] = rep.to_dict()
    return payload, ["scaled_time"], [(x,) for x in samples]


def _cmd_empirical_law(ctx: _Context):
    a = ctx.args
    res = empirical_law_experiment(
        ctx.spec, ctx.kernel(), ctx.target, a.u, _clipped_identity(a.clip), a.accepted,
        ctx.rng("empirical-law"), ctx.v0(), ctx.cycle.r, n_right=a.right, workers=a.workers,
    )
    samples = res.pop("samples")
    return res, ["mean_increment"], [(x,) for x in samples]


def _cmd_conditioned_path(ctx: _Context):
    a = ctx.args
    window = ConditioningWindow(a.u, a.epsilon, a.m)
    res = conditioned_path_experiment(
        ctx.spec, ctx.kernel(), ctx.target, window, _path_tests(a.m), a.accepted,
        ctx.rng("conditioned-path"), ctx.v0(), ctx.cycle.r, n_right=a.right, workers=a.workers,
    )
    samples = res.pop("samples")
    names = list(samples)
    return res, names, zip(*(samples[n] for n in names))


def _cmd_renewal_check(ctx: _Context):
    a = ctx.args
    sol = solve_alpha(ctx.spec, ctx.grid)
    res = renewal_identity_check(
        ctx.spec, ShiftedKernel(ctx.spec, sol), sol.lambda_prime, a.paths, ctx.rng("renewal-check"), s_max=a.s_max,
    )
    samples = res.pop("samples")
    return res, ["renewal_sum"], [(x,) for x in samples]


def _cmd_overjump(ctx: _Context):
    a = ctx.args
    levels = sorted(a.u)
    out = overjump_samples(ctx.spec, ctx.kernel(), ctx.target, levels, a.n, ctx.rng("overjump"))
    payload = {"levels": []}
    rows = []
    for u, (x, ov) in zip(levels, out):
        payload["levels"].append({
            "u": u, "n": int(ov.size), "mean_overjump": float(ov.mean()),
            "stderr": float(ov.std(ddof=1) / math.sqrt(ov.size)), "mean_direction": x.mean(axis=0),
        })
        rows += [[u, *xi, o] for xi, o in zip(x, ov)]
    header = ["u"] + [f"x_{i + 1}" for i in range(ctx.spec.dim)] + ["overjump"]
    return payload, header, rows


COMMANDS: dict[str, Callable] = {
    "validate": _cmd_validate,
    "spectral": _cmd_spectral,
    "alpha": _cmd_alpha,
    "simulate": _cmd_simulate,
    "constants": _cmd_constants,
    "tail": _cmd_tail,
    "passage-law": _cmd_passage_law,
    "empirical-law": _cmd_empirical_law,
    "conditioned-path": _cmd_conditioned_path,
    "renewal-check": _cmd_renewal_check,
    "overjump": _cmd_overjump,
}

# parameters that never change the numbers produced
_NOT_HASHED = {"out", "format", "workers", "trace", "command", "model", "seed"}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if message.startswith("argument command: invalid choice"):
            raise UnknownCommand(message)
        raise ConfigParse(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", required=True, help="JSON model file")
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("--out", default=None, help="output directory, or a .json file path")
    common.add_argument("--format", choices=("json", "csv", "both"), default="json")
    common.add_argument("--grid", type=int, default=None, help="angular grid resolution")

    consts = _Parser(add_help=False)
    consts.add_argument("--outer", type=int, default=500, help="outer stationary draws for C")
    consts.add_argument("--inner", type=int, default=200, help="inner shifted cycles per draw")
    consts.add_argument("--ruin", type=int, default=20_000, help="ruin walks for D_A")
    consts.add_argument("--constants", default=None, help="reuse the payload of a previous constants envelope")

    start = _Parser(add_help=False)
    start.add_argument("--v0", type=float, nargs="+", default=None, help="start vector (default all ones)")

    p = _Parser(prog="kesten", description="Tail constants and extremes of multivariate stochastic recurrences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common], help="check model hypotheses")
    s.add_argument("--n-max", type=int, default=10)

    s = sub.add_parser("spectral", parents=[common], help="eigendata at one theta")
    s.add_argument("--theta", type=float, required=True)

    s = sub.add_parser("alpha", parents=[common], help="tail index and drift")
    s.add_argument("--bracket", type=float, nargs=2, default=None)

    s = sub.add_parser("simulate", parents=[common, start], help="simulate one path")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--trace", default=None, help="CSV file for the path")

    sub.add_parser("constants", parents=[common, consts], help="estimate C, D_A, K_A, Theta")

    s = sub.add_parser("tail", parents=[common, consts], help="tail plateau experiment")
    s.add_argument("--u", type=float, nargs="+", default=[50.0, 100.0, 200.0, 400.0, 800.0])
    s.add_argument("--samples", type=int, default=10_000_000)
    s.add_argument("--chains", type=int, default=1 << 16)
    s.add_argument("--burn-in", type=int, default=10_000)

    s = sub.add_parser("passage-law", parents=[common, consts, start], help="exponential passage law")
    s.add_argument("--u", type=float, default=100.0)
    s.add_argument("--replicates", type=int, default=2000)

    s = sub.add_parser("empirical-law", parents=[common, start], help="conditioned increment law")
    s.add_argument("--u", type=float, default=1000.0)
    s.add_argument("--accepted", type=int, default=4000)
    s.add_argument("--right", type=int, default=1_000_000)
    s.add_argument("--clip", type=float, default=10.0)

    s = sub.add_parser("conditioned-path", parents=[common, start], help="conditioned path law")
    s.add_argument("--u", type=float, default=1000.0)
    s.add_argument("--epsilon", type=float, default=None, help="intermediate level (default sqrt(u))")
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--accepted", type=int, default=4000)
    s.add_argument("--right", type=int, default=100_000)

    s = sub.add_parser("renewal-check", parents=[common], help="Markov renewal identity")
    s.add_argument("--paths", type=int, default=100_000)
    s.add_argument("--s-max", type=float, default=40.0)

    s = sub.add_parser("overjump", parents=[common], help="overjump samples")
    s.add_argument("--u", type=float, nargs="+", default=[1e3, 1e6])
    s.add_argument("--n", type=int, default=10_000)
    return p


def _config_hash(args: argparse.Namespace, model_doc: dict) -> str:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}
    text = json.dumps({"command": args.command, "model": model_doc, "params": params}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _outputs(args: argparse.Namespace) -> tuple[Path | None, Path | None]:
    if args.out is None:
        return None, None
    out = Path(args.out)
    if out.suffix == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        return out, out.with_suffix(".csv")
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{args.command}.json", out / f"{args.command}.csv"


def execute(argv: list[str]) -> ResultEnvelope:
    """Parse ``argv``, run the command, write outputs and return the envelope.

    Raises
    ------
    KestenError
        Any validation or estimator failure.
    """
    args = _build_parser().parse_args(argv)
    spec, target, cycle = load_model(args.model)
    seed = resolve_seed(args.seed, DEFAULT_SEED)
    ctx = _Context(args, spec, target, cycle, seed)
    t0 = time.perf_counter()
    payload, header, rows = COMMANDS[args.command](ctx)
    wall = time.perf_counter() - t0
    env = ResultEnvelope(
        command=args.command,
        config_hash=_config_hash(args, model_to_dict(spec, target, cycle)),
        seed=seed,
        wall_time=wall,
        payload=_plain(payload),
    )
    json_path, csv_path = _outputs(args)
    if args.format in ("json", "both"):
        if json_path is None:
            sys.stdout.write(env.to_json())
        else:
            json_path.write_text(env.to_json())
    if args.format in ("csv", "both"):
        if csv_path is None:
            _csv_to(sys.stdout, header, rows)
        else:
            _write_csv(csv_path, header, rows)
    return env


def run(argv: list[str] | None = None) -> int:
    """Run one command and return its exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        execute(argv)
    except (ValidationError, ConfigParse, UnknownCommand) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except EstimatorError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except KestenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
