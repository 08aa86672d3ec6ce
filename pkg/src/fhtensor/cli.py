"""Command-line experiment harness.

Subcommands: ``rank-sweep``, ``exact``, ``stochastic``, ``verify`` and
``decompose``.  Every experiment is described by an ``ExperimentSpec``
(built from flags or loaded from a JSON file), hashed, and written to
``<out>/<env>/<algo>/<hash>/seed-<n>.csv`` plus ``summary.csv``.  CSVs begin
with a ``# spec_hash:`` line; wall-clock columns are only written with
``--timing`` so that repeated runs produce identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from fhtensor import exact_solver as ex
from fhtensor import stochastic as st
from fhtensor.environments import ENVIRONMENTS, config_dict, make_env
from fhtensor.errors import ConfigError, DivergenceError
from fhtensor.mdp import (
    exact_optimal_values,
    optimal_return,
    policy_improvement,
    policy_return,
    uniform_policy_return,
)
from fhtensor.tensor_core import DenseTensor, FactorSet, cp_als

OUT_ENV = "FHTENSOR_OUT"

ALGORITHMS = ("DP", "BCD-PI", "BCGD-PI", "S-BCGD-PI", "BCTD-PI", "FHQL", "LFHQL", "RANDOM",
              "TIME-AGNOSTIC-QL", "ALS")
EXACT_ALGOS = ("DP", "BCD-PI", "BCGD-PI")
STOCH_ALGOS = ("S-BCGD-PI", "BCTD-PI", "FHQL", "LFHQL", "RANDOM", "TIME-AGNOSTIC-QL")

SPEC_SCHEMA = {
    "type": "object",
    "required": ["env", "algorithm"],
    "additionalProperties": False,
    "properties": {
        "env": {"enum": sorted(ENVIRONMENTS)},
        "preset": {"enum": ["paper", "small"]},
        "env_overrides": {"type": "object"},
        "algorithm": {"enum": list(ALGORITHMS)},
        "settings": {"type": "object"},
        "ranks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out": {"type": "string"},
    },
}

PE_KEYS = {"max_sweeps", "stop_tol", "step_size", "init_scale", "warm_start", "memory_cap",
           "pi_iters", "eps1"}
ALS_KEYS = {"restarts", "iters", "tol"}
STOCH_KEYS = {f.name for f in st.StochSettings.__dataclass_fields__.values()} - {"seed", "rank"}


@dataclass
class ExperimentSpec:
    env: str
    algorithm: str
    preset: str = "small"
    env_overrides: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    ranks: list = field(default_factory=lambda: [10])
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        try:
            jsonschema.validate(doc, SPEC_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid experiment spec at {path}: {exc.message}") from None
        spec = cls(**doc)
        spec.check()
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def check(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        allowed = STOCH_KEYS if self.algorithm in STOCH_ALGOS else (
            ALS_KEYS if self.algorithm == "ALS" else PE_KEYS)
        unknown = set(self.settings) - allowed
        if unknown:
            raise ConfigError(f"settings not understood by {self.algorithm}: {sorted(unknown)}")

    def identity(self) -> dict:
        """The fields that define the experiment (seeds and output location excluded)."""
        env = make_env(self.env, self.preset, self.env_overrides)
        return {"env": self.env, "env_config": config_dict(env), "algorithm": self.algorithm,
                "settings": self.settings, "ranks": list(self.ranks)}

    def hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    spec_hash: str
    version: str
    seeds: list
    summary: list
    wall_ms: float
    failures: dict = field(default_factory=dict)


def version_string() -> str:
    try:
        return "fhtensor " + metadata.version("fhtensor")
    except metadata.PackageNotFoundError:
        return "fhtensor (unknown)"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    return str(x)


def write_csv(path: Path, spec_hash: str, header, rows, comments=()):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# spec_hash: {spec_hash}\n")
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


def read_csv(path: Path):
    """Rows of a harness CSV as dicts (comment lines skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def mean_se(values):
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _out_dir(spec: ExperimentSpec, spec_hash: str) -> Path:
    root = Path(spec.out or os.environ.get(OUT_ENV, "out"))
    return root / spec.env / spec.algorithm / spec_hash


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _save_record(out: Path, rec: RunRecord):
    (out / "run.json").write_text(json.dumps(asdict(rec), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# rank sweep


def _rank_sweep_seed(args):
    spec, seed = args
    env = make_env(spec.env, spec.preset, spec.env_overrides)
    m = env.model
    target = exact_optimal_values(m).to_tensor(m)
    restarts = int(spec.settings.get("restarts", 5))
    iters = int(spec.settings.get("iters", 300))
    tol = float(spec.settings.get("tol", 1e-10))
    rows = []
    best_prev = None
    for K in sorted(spec.ranks):
        t0 = time.perf_counter()
        best = None
        for r in range(restarts):
            init = None
            if r == 0 and best_prev is not None:
                init = _grow(best_prev, K, np.random.default_rng([seed, K]))
            res = cp_als(target, K, iters=iters, seed=[seed, K, r], tol=tol, init=init,
                         pinned_last_row=True)
            if best is None or res.nfe < best.nfe:
                best = res
        best_prev = best.factors
        rows.append((K, best.nfe, (time.perf_counter() - t0) * 1e3))
    return seed, rows


def _grow(f: FactorSet, K: int, rng) -> FactorSet:
    """Pad ``f`` to rank ``K`` with small random columns (nested warm start)."""
    extra = K - f.rank
    if extra < 0:
        return None
    facs = [np.hstack([q, rng.uniform(0, 1e-3, size=(q.shape[0], extra))]) for q in f.factors]
    return FactorSet(facs, pinned_time_row=f.pinned_time_row)


def cmd_rank_sweep(spec: ExperimentSpec, jobs=1, timing=False) -> Path:
    """Best-of-restarts ALS fit of the optimal value tensor at each rank."""
    h = spec.hash()
    out = _out_dir(spec, h)
    t0 = time.perf_counter()
    results = _map(_rank_sweep_seed, [(spec, s) for s in spec.seeds], jobs)
    header = ["rank", "nfe"] + (["wall_ms"] if timing else [])
    per_rank = {}
    for seed, rows in results:
        write_csv(out / f"seed-{seed}.csv", h, header,
                  [(K, e) + ((ms,) if timing else ()) for K, e, ms in rows])
        for K, e, _ in rows:
            per_rank.setdefault(K, []).append(e)
    summary = [(K,) + mean_se(v) + (len(v),) for K, v in sorted(per_rank.items())]
    write_csv(out / "summary.csv", h, ["rank", "nfe_mean", "nfe_se", "n_seeds"], summary)
    _save_record(out, RunRecord(h, version_string(), list(spec.seeds), summary,
                                (time.perf_counter() - t0) * 1e3))
    return out


# --------------------------------------------------------------------------
# exact (model-based) convergence


def _exact_seed(args):
    spec, seed = args
    env = make_env(spec.env, spec.preset, spec.env_overrides)
    m = env.model
    qstar = exact_optimal_values(m)
    opt = optimal_return(m)
    s = dict(spec.settings)
    pi_iters = int(s.pop("pi_iters", 10))
    eps1 = int(s.pop("eps1", 0))
    pi_rows, pe_rows = [], []
    if spec.algorithm == "DP":
        pol = policy_improvement(qstar)
        pi_rows.append((0, 0, 0.0, 0.0, policy_return(m, pol), opt, 0.0))
        return seed, pi_rows, pe_rows
    rule = ex.BCD if spec.algorithm == "BCD-PI" else ex.BCGD
    for K in spec.ranks:
        pe = ex.BCPolicyEvaluator(ex.PESettings(rank=K, seed=seed, **s), rule)
        pol, trace, _ = ex.policy_iteration(m, pe, eps1, pi_iters, seed=[seed, K], reference=qstar)
        for rec, pe_trace in zip(trace, pe.traces):
            pi_rows.append((K, rec.iteration, rec.loss, rec.nfe, policy_return(m, rec.policy), opt,
                            rec.wall_ms))
            for sw in pe_trace:
                pe_rows.append((K, rec.iteration, sw.sweep, sw.loss, sw.nfe, sw.grad_norm,
                                sw.mode_sweep_time_ms))
        pi_rows.append((K, len(trace) + 1, math.nan, math.nan, policy_return(m, pol), opt, 0.0))
    return seed, pi_rows, pe_rows


def cmd_exact(spec: ExperimentSpec, jobs=1, timing=False) -> Path:
    """Model-based policy iteration traces per rank and seed.

    ``seed-<n>.csv`` holds one row per outer iteration (the return column is
    the exact return of the policy evaluated in that iteration; the final
    row describes the returned policy).  ``seed-<n>-pe.csv`` holds the
    per-sweep policy-evaluation traces.
    """
    h = spec.hash()
    out = _out_dir(spec, h)
    t0 = time.perf_counter()
    results = _map(_exact_seed, [(spec, s) for s in spec.seeds], jobs)
    pi_header = ["rank", "iteration", "loss", "nfe", "return", "optimal_return"]
    pe_header = ["rank", "iteration", "sweep", "loss", "nfe", "grad_norm"]
    final = {}
    for seed, pi_rows, pe_rows in results:
        write_csv(out / f"seed-{seed}.csv", h, pi_header + (["wall_ms"] if timing else []),
                  [r if timing else r[:-1] for r in pi_rows])
        if pe_rows:
            write_csv(out / f"seed-{seed}-pe.csv", h,
                      pe_header + (["mode_sweep_time_ms"] if timing else []),
                      [r if timing else r[:-1] for r in pe_rows])
        last = {}
        for r in pi_rows:
            last[r[0]] = r
        for K, r in last.items():
            final.setdefault(K, []).append(r)
    summary = []
    for K, rows in sorted(final.items()):
        ret = mean_se([r[4] for r in rows])
        summary.append((K,) + ret + (rows[0][5], len(rows)))
    write_csv(out / "summary.csv", h, ["rank", "return_mean", "return_se", "optimal_return", "n_seeds"],
              summary)
    _save_record(out, RunRecord(h, version_string(), list(spec.seeds), summary,
                                (time.perf_counter() - t0) * 1e3))
    return out


# --------------------------------------------------------------------------
# stochastic learning curves


def stoch_settings(spec: ExperimentSpec, seed: int, rank: int) -> st.StochSettings:
    return st.StochSettings(seed=seed, rank=rank, **spec.settings)


def run_stochastic(env, algorithm: str, settings: st.StochSettings) -> st.LearningCurve:
    if algorithm == "BCTD-PI":
        return st.online_pi(env, settings, st.BCTD)[1]
    if algorithm == "S-BCGD-PI":
        return st.online_pi(env, settings, st.SBCGD)[1]
    if algorithm == "FHQL":
        return st.fhql(env, settings)[1]
    if algorithm == "LFHQL":
        return st.lfhql(env, settings)[1]
    if algorithm == "TIME-AGNOSTIC-QL":
        return st.time_agnostic_ql(env, settings)[1]
    if algorithm == "RANDOM":
        value = st.random_baseline(env, settings.eval_episodes, settings.seed)
        curve = st.LearningCurve(0)
        H = env.horizon
        for e in range(settings.eval_interval, settings.episodes + 1, settings.eval_interval):
            curve.eval_episode.append(e)
            curve.eval_return.append(value)
            curve.eval_transitions.append(e * H)
            curve.eval_wall_ms.append(0.0)
        return curve
    raise ConfigError(f"{algorithm} is not a stochastic algorithm")


def _stoch_seed(args):
    spec, seed = args
    env = make_env(spec.env, spec.preset, spec.env_overrides)
    settings = stoch_settings(spec, seed, spec.ranks[0])
    try:
        return seed, run_stochastic(env, spec.algorithm, settings), None
    except DivergenceError as exc:
        return seed, None, str(exc)


def cmd_stochastic(spec: ExperimentSpec, jobs=1, timing=False) -> Path:
    """Per-seed learning curves plus a mean / standard-error summary.

    A diverging seed is recorded in its CSV and excluded from the summary;
    the remaining seeds still run.
    """
    h = spec.hash()
    out = _out_dir(spec, h)
    t0 = time.perf_counter()
    results = _map(_stoch_seed, [(spec, s) for s in spec.seeds], jobs)
    header = list(st.CURVE_COLUMNS[:-1]) + (["wall_ms"] if timing else [])
    curves = {}
    failures = {}
    for seed, curve, err in results:
        if curve is None:
            failures[seed] = err
            write_csv(out / f"seed-{seed}.csv", h, header, [], comments=[f"diverged: {err}"])
            continue
        rows = []
        for e, ret, n, ms in zip(curve.eval_episode, curve.eval_return, curve.eval_transitions,
                                 curve.eval_wall_ms):
            rows.append((e, ret, n, curve.param_count) + ((ms,) if timing else ()))
        write_csv(out / f"seed-{seed}.csv", h, header, rows)
        window = int(spec.settings.get("smooth_window", 1))
        smooth = curve.smoothed_returns(window)
        write_csv(out / f"seed-{seed}-episodes.csv", h, ["episode", "return", "return_smoothed", "transitions_seen"],
                  [(i + 1, r, float(m), n)
                   for i, (r, m, n) in enumerate(zip(curve.returns, smooth, curve.transitions))])
        curves[seed] = curve
    summary = []
    if curves:
        first = next(iter(curves.values()))
        for j, e in enumerate(first.eval_episode):
            rets = [c.eval_return[j] for c in curves.values()]
            trans = [c.eval_transitions[j] for c in curves.values()]
            summary.append((e,) + mean_se(rets) + (float(np.mean(trans)), first.param_count, len(rets)))
    write_csv(out / "summary.csv", h,
              ["episode", "return_mean", "return_se", "transitions_mean", "param_count", "n_seeds"],
              summary, comments=[f"diverged seeds: {sorted(failures)}"] if failures else ())
    _save_record(out, RunRecord(h, version_string(), list(spec.seeds), summary,
                                (time.perf_counter() - t0) * 1e3, {str(k): v for k, v in failures.items()}))
    return out


# --------------------------------------------------------------------------
# verify and decompose


def cmd_verify(seed: int = 0, bcd_update=None, names=None, stream=None, build_system=None) -> int:
    """Run the invariant suite; returns the process exit code."""
    from fhtensor.verify import run_checks

    stream = stream or sys.stdout
    results = run_checks(seed, bcd_update=bcd_update, names=names, build_system=build_system)
    for r in results:
        print(r.line(), file=stream)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=stream)
    return 1 if failed else 0


def cmd_decompose(source: str, rank: int, out: Path, seed: int = 0, iters: int = 500,
                  preset: str = "small") -> float:
    """CP-decompose a tensor (``.npy`` file or an environment's optimal value tensor).

    Writes the factors as JSON to ``out`` and returns the fit NFE.
    """
    pinned = False
    if source in ENVIRONMENTS:
        m = make_env(source, preset).model
        tensor = exact_optimal_values(m).to_tensor(m)
        pinned = True
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"{source}: neither an environment name nor a file")
        tensor = DenseTensor.from_array(np.load(path))
    res = cp_als(tensor, rank, iters=iters, seed=seed, pinned_last_row=pinned)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.factors.to_json() + "\n")
    return res.nfe


# --------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _spec_from_args(args, algorithm: str) -> ExperimentSpec:
    if args.config:
        spec = ExperimentSpec.load(args.config)
    else:
        if not args.env:
            raise ConfigError("either --config or --env is required")
        spec = ExperimentSpec(env=args.env, algorithm=algorithm)
    if args.env:
        spec.env = args.env
    if args.preset:
        spec.preset = args.preset
    if getattr(args, "algo", None):
        spec.algorithm = args.algo
    elif not args.config:
        spec.algorithm = algorithm
    if getattr(args, "ranks", None):
        spec.ranks = args.ranks
    if args.seeds is not None:
        spec.seeds = args.seeds
    elif args.seed is not None:
        spec.seeds = [args.seed]
    if args.out:
        spec.out = args.out
    for key, value in (getattr(args, "set", None) or []):
        spec.settings[key] = value
    spec.check()
    return spec


def _setting(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhtensor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ranks=True):
        sp.add_argument("--config", help="JSON experiment spec")
        sp.add_argument("--env", choices=sorted(ENVIRONMENTS))
        sp.add_argument("--preset", choices=["paper", "small"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", type=_int_list)
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./out)")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--timing", action="store_true", help="add wall-clock columns")
        sp.add_argument("--set", type=_setting, action="append", metavar="KEY=VALUE",
                        help="override one solver setting")
        if ranks:
            sp.add_argument("--ranks", type=_int_list)

    common(sub.add_parser("rank-sweep", help="NFE of best-of-restarts ALS per rank"))
    sp = sub.add_parser("exact", help="model-based policy iteration")
    common(sp)
    sp.add_argument("--algo", choices=EXACT_ALGOS)
    sp = sub.add_parser("stochastic", help="learning curves from sampled transitions")
    common(sp)
    sp.add_argument("--algo", choices=STOCH_ALGOS)
    sp = sub.add_parser("verify", help="run the invariant suite")
    sp.add_argument("--seed", type=int, default=0)
    sp = sub.add_parser("decompose", help="CP-decompose a tensor")
    sp.add_argument("source", help="environment name or .npy file")
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--preset", choices=["paper", "small"], default="small")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--out", required=True, help="output JSON path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.seed)
        if args.command == "decompose":
            err = cmd_decompose(args.source, args.rank, Path(args.out), args.seed, args.iters, args.preset)
            print(f"nfe={err:.6e}")
            return 0
        default_algo = {"rank-sweep": "ALS", "exact": "BCD-PI", "stochastic": "BCTD-PI"}[args.command]
        spec = _spec_from_args(args, default_algo)
        if args.command == "rank-sweep":
            spec.algorithm = "ALS"
            if spec.ranks == [10] and not args.ranks and not args.config:
                spec.ranks = [1, 5, 10, 15, 20, 25, 40, 125]
            out = cmd_rank_sweep(spec, args.jobs, args.timing)
        elif args.command == "exact":
            if spec.algorithm not in EXACT_ALGOS:
                raise ConfigError(f"{spec.algorithm} is not a model-based algorithm")
            out = cmd_exact(spec, args.jobs, args.timing)
        else:
            if spec.algorithm not in STOCH_ALGOS:
                raise ConfigError(f"{spec.algorithm} is not a stochastic algorithm")
            out = cmd_stochastic(spec, args.jobs, args.timing)
        print(out)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
