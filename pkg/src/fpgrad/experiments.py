"""Experiment protocols behind the CLI: config validation, runners, CSV emission.

Every runner is deterministic for a fixed seed: hyperparameter samples are
drawn from tagged child streams, grid points may execute on a worker pool but
results are sorted by key before writing, and floats are emitted with 17
significant digits. The ``wall_ms`` column is written as 0 unless the config
sets ``"timings": true`` -- real timings are the one thing that would break
byte-reproducibility of the output.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bilevel import BilevelProblem, Method
from .bounds import aid_bound, aid_fp_bound, constants_for_quadratic_br, itd_bound
from .errors import ConfigError, DivergedError
from .eqm import EQM_METHODS, EqmConfig, eqm_train
from .hypergrad import Adjoint, aid, itd, itd_from_trajectory
from .lower import iterate
from .numkit import Rng, Vec
from .suite import (
    KINDS,
    LAMBDA_RANGES,
    ProblemConfig,
    gen_data,
    make_br,
    make_problem,
    reference_hypergrad,
    sample_lambdas,
)

APPROX_HEADER = ["problem", "method", "t", "k", "seed", "lambda_id", "err", "wall_ms"]


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

_REQUIRED = object()

_METHOD_NAMES = {m.value for m in (Method.ITD, Method.AID_FP, Method.AID_CG, Method.AID_CGN)}


def _check_methods(value, allowed: set[str]):
    if not isinstance(value, list) or not value:
        raise ConfigError("'methods' must be a non-empty list of method names")
    for name in value:
        if name not in allowed:
            raise ConfigError(f"unknown method {name!r}; allowed: {sorted(allowed)}")
    return value


def _check_int(name, value, lo=1):
    if not isinstance(value, int) or isinstance(value, bool) or value < lo:
        raise ConfigError(f"'{name}' must be an integer >= {lo}")
    return value


def _check_bool(name, value):
    if not isinstance(value, bool):
        raise ConfigError(f"'{name}' must be a boolean")
    return value


def _check_float(name, value, lo=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{name}' must be a number")
    value = float(value)
    if lo is not None and value <= lo:
        raise ConfigError(f"'{name}' must be > {lo}")
    return value


def _check_k_policy(name, value):
    if value == "equal_t":
        return value
    if isinstance(value, int) and not isinstance(value, bool) and value >= 1:
        return value
    raise ConfigError("'k_policy' must be \"equal_t\" or a positive integer")


def _check_grid(name, value):
    if (
        not isinstance(value, list)
        or len(value) != 3
        or any(isinstance(v, bool) for v in value)
        or not all(isinstance(v, (int, float)) for v in value)
    ):
        raise ConfigError(f"'{name}' must be [lo, hi, points]")
    lo, hi, n = float(value[0]), float(value[1]), int(value[2])
    if lo <= 0 or hi < lo or n < 1:
        raise ConfigError(f"'{name}' needs 0 < lo <= hi and points >= 1")
    return [lo, hi, n]


def _check_problem(name, value):
    if value not in KINDS:
        raise ConfigError(f"'problem' must be one of {list(KINDS)}, got {value!r}")
    return value


def _check_projects(name, value):
    if isinstance(value, bool):
        return [value]
    if isinstance(value, list) and value and all(isinstance(v, bool) for v in value):
        return value
    raise ConfigError("'project' must be a boolean or a non-empty list of booleans")


def _schema(command: str) -> dict:
    common = {
        "seed": (lambda n, v: _check_int(n, v, lo=0), 0),
        "out_path": (lambda n, v: v if isinstance(v, str) else _fail(n), None),
        "timings": (_check_bool, False),
    }
    if command == "approx-error":
        return {
            "problem": (_check_problem, _REQUIRED),
            "methods": (lambda n, v: _check_methods(v, _METHOD_NAMES), _REQUIRED),
            "t_max": (_check_int, _REQUIRED),
            "k_policy": (_check_k_policy, "equal_t"),
            "n_lambdas": (_check_int, 20),
            **common,
        }
    if command == "bilevel":
        return {
            "problem": (_check_problem, _REQUIRED),
            "methods": (lambda n, v: _check_methods(v, _METHOD_NAMES), _REQUIRED),
            "t_max": (_check_int, _REQUIRED),
            "k_policy": (_check_k_policy, "equal_t"),
            "steps": (lambda n, v: _check_int(n, v, lo=0), _REQUIRED),
            "lr_grid": (_check_grid, [1e-6, 10.0, 30]),
            "warm_start": (_check_bool, True),
            **common,
        }
    if command == "bounds":
        return {
            "problem": (_check_problem, "br"),
            "t_max": (_check_int, _REQUIRED),
            "k_policy": (_check_k_policy, "equal_t"),
            "n_lambdas": (_check_int, 1),
            **common,
        }
    if command == "eqm":
        return {
            "methods": (lambda n, v: _check_methods(v, {m.value for m in EQM_METHODS}), _REQUIRED),
            "steps": (lambda n, v: _check_int(n, v, lo=0), _REQUIRED),
            "t_max": (_check_int, 20),
            "k_policy": (_check_k_policy, "equal_t"),
            "lr_grid": (_check_grid, [1e-4, 1.0, 10]),
            "project": (_check_projects, [True, False]),
            "hidden": (_check_int, 50),
            "eps": (lambda n, v: _check_float(n, v, lo=0.0), 1e-3),
            "momentum": (lambda n, v: _check_float(n, v), 0.9),
            **common,
        }
    raise ConfigError(f"unknown command {command!r}")


def _fail(name):
    raise ConfigError(f"'{name}' must be a string")


def validate_config(command: str, raw: dict) -> dict:
    """Check one experiment config against the command's schema.

    Unknown keys are rejected; required keys must be present; defaults fill
    the rest. Returns a plain dict ready for the runner.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    schema = _schema(command)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    cfg = {}
    for key, (validator, default) in schema.items():
        if key in raw:
            cfg[key] = validator(key, raw[key])
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key '{key}'")
        else:
            cfg[key] = default
    return cfg


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRecord:
    """One approximation-error measurement."""

    problem: str
    method: str
    t: int
    k: int
    seed: int
    lambda_id: int
    err: float
    wall_ms: float


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_csv(path: str, header: list[str], rows: list[list]) -> str:
    out = Path(path)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return str(out)


def _resolve_k(k_policy, t: int) -> int:
    return t if k_policy == "equal_t" else int(k_policy)


_SOLVERS = {
    Method.AID_FP: Adjoint.FP,
    Method.AID_CG: Adjoint.CG,
    Method.AID_CGN: Adjoint.CGNORMAL,
}


def _estimate(problem: BilevelProblem, method: Method, lam: Vec, t: int, k: int) -> Vec:
    if method == Method.ITD:
        return itd(problem, lam, t).grad
    return aid(problem, lam, t, k, _SOLVERS[method])[0].grad


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class _Clock:
    """Monotonic per-row timer; reports 0 when timings are disabled."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._start = 0.0

    def start(self) -> None:
        if self.enabled:
            self._start = time.perf_counter()

    def ms(self) -> float:
        return (time.perf_counter() - self._start) * 1e3 if self.enabled else 0.0


# ---------------------------------------------------------------------------
# approx-error
# ---------------------------------------------------------------------------


def run_approx_error(cfg: dict, threads: int = 1) -> str:
    """Per-(method, t, lam) error against the problem's reference hypergradient."""
    kind = cfg["problem"]
    pconf = ProblemConfig.default(kind)
    data = gen_data(kind, cfg["seed"])
    problem = make_problem(pconf, data)
    lams = sample_lambdas(kind, cfg["n_lambdas"], Rng(cfg["seed"]).child(1), pconf)
    methods = [Method(m) for m in cfg["methods"]]

    def one_lambda(lambda_id: int) -> list[ConvergenceRecord]:
        lam = lams[lambda_id]
        reference = reference_hypergrad(problem, lam).grad
        clock = _Clock(cfg["timings"])
        records = []
        for method in methods:
            for t in range(1, cfg["t_max"] + 1):
                k = _resolve_k(cfg["k_policy"], t)
                clock.start()
                estimate = _estimate(problem, method, lam, t, k)
                wall = clock.ms()
                records.append(
                    ConvergenceRecord(
                        problem=kind,
                        method=method.value,
                        t=t,
                        k=k if method != Method.ITD else 0,
                        seed=cfg["seed"],
                        lambda_id=lambda_id,
                        err=float(np.linalg.norm(estimate - reference)),
                        wall_ms=wall,
                    )
                )
        return records

    per_lambda = _pool_map(one_lambda, range(len(lams)), threads)
    order = {m.value: i for i, m in enumerate(methods)}
    rows = sorted(
        (rec for chunk in per_lambda for rec in chunk),
        key=lambda r: (order[r.method], r.lambda_id, r.t),
    )
    return _write_csv(
        cfg["out_path"],
        APPROX_HEADER,
        [[r.problem, r.method, r.t, r.k, r.seed, r.lambda_id, r.err, r.wall_ms] for r in rows],
    )


# ---------------------------------------------------------------------------
# bilevel optimization with step-size grid search
# ---------------------------------------------------------------------------

BILEVEL_HEADER = ["problem", "method", "zeta_id", "zeta", "step", "ft", "f_true", "wall_ms"]


def _initial_lambda(kind: str, pconf: ProblemConfig) -> Vec:
    lo, hi = LAMBDA_RANGES[kind]
    if kind in ("lr", "krr"):
        return np.full(pconf.dim_lambda, 0.5 * (lo + hi))
    return np.zeros(pconf.dim_lambda)


def run_bilevel(cfg: dict, threads: int = 1) -> str:
    """Hypergradient descent lam <- lam - zeta g(lam) over a log-spaced zeta grid.

    Logs the approximate objective f_t(lam_s) per step (and the true
    objective where a closed-form fixed point exists), then selects the zeta
    with the lowest final f_t per method into a sibling summary CSV. Warm
    start reuses w_t of the previous upper iterate as the next start.
    """
    kind = cfg["problem"]
    pconf = ProblemConfig.default(kind)
    data = gen_data(kind, cfg["seed"])
    problem = make_problem(pconf, data)
    lo, hi, n_grid = cfg["lr_grid"]
    zetas = np.geomspace(lo, hi, n_grid)
    methods = [Method(m) for m in cfg["methods"]]
    t = cfg["t_max"]
    lam0 = _initial_lambda(kind, pconf)
    clamp_range = LAMBDA_RANGES[kind] if kind in ("lr", "krr") else None

    def true_objective(lam: Vec) -> float:
        if problem.exact_fixed_point is None:
            return float("nan")
        return float(problem.outer_E(problem.exact_fixed_point(lam), lam))

    def one_run(task: tuple[int, int]) -> list[list]:
        method_idx, zeta_id = task
        method = methods[method_idx]
        zeta = float(zetas[zeta_id])
        k = _resolve_k(cfg["k_policy"], t)
        clock = _Clock(cfg["timings"])
        lam = lam0.copy()
        rows: list[list] = []
        clock.start()
        traj = iterate(problem, lam, t)
        rows.append(
            [kind, method.value, zeta_id, zeta, 0,
             float(problem.outer_E(traj.final, lam)), true_objective(lam), clock.ms()]
        )
        for step in range(1, cfg["steps"] + 1):
            clock.start()
            try:
                if method == Method.ITD:
                    grad = itd_from_trajectory(problem, traj).grad
                else:
                    final = traj.final
                    grad = aid(
                        problem, lam, t, k, _SOLVERS[method], lower=lambda *_: final
                    )[0].grad
                lam = lam - zeta * grad
                if clamp_range is not None:
                    lam = np.clip(lam, clamp_range[0], clamp_range[1])
                w0 = traj.final if cfg["warm_start"] else None
                traj = iterate(problem, lam, t, w0)
            except DivergedError:
                rows.append([kind, method.value, zeta_id, zeta, step,
                             float("nan"), float("nan"), clock.ms()])
                break
            rows.append(
                [kind, method.value, zeta_id, zeta, step,
                 float(problem.outer_E(traj.final, lam)), true_objective(lam), clock.ms()]
            )
        return rows

    tasks = [(mi, zi) for mi in range(len(methods)) for zi in range(len(zetas))]
    chunks = _pool_map(one_run, tasks, threads)
    rows = [row for chunk in chunks for row in chunk]
    main_path = _write_csv(cfg["out_path"], BILEVEL_HEADER, rows)

    summary: list[list] = []
    for mi, method in enumerate(methods):
        finals = []
        for zi in range(len(zetas)):
            run_rows = chunks[mi * len(zetas) + zi]
            last = run_rows[-1]
            diverged = bool(np.isnan(last[5]))
            finals.append((last[5], zi, last[6], diverged))
        valid = [f for f in finals if not f[3]]
        pick = min(valid, key=lambda f: f[0]) if valid else min(finals, key=lambda f: f[1])
        summary.append(
            [kind, method.value, pick[1], float(zetas[pick[1]]), pick[0], pick[2], pick[3]]
        )
    _write_csv(
        str(Path(main_path).with_suffix(".summary.csv")),
        ["problem", "method", "best_zeta_id", "best_zeta", "final_ft", "final_f_true", "diverged"],
        summary,
    )
    return main_path


# ---------------------------------------------------------------------------
# bound validation
# ---------------------------------------------------------------------------

BOUNDS_HEADER = [
    "problem", "lambda_id", "t", "k",
    "err_itd", "itd_bound", "itd_valid",
    "err_aid_fp", "aid_fp_bound", "aid_fp_valid",
    "aid_bound", "wall_ms",
]


def run_bounds(cfg: dict, threads: int = 1) -> str:
    """Measured ITD / AID-FP errors next to the theorem bounds, with validity flags.

    Only biased regularization has the analytic constant bundle, so the
    command is restricted to it.
    """
    if cfg["problem"] != "br":
        raise ConfigError("bounds mode needs problem = 'br' (analytic constants)")
    data = gen_data("br", cfg["seed"])
    pconf = ProblemConfig.default("br")
    problem = make_br(data, beta=pconf.beta)
    lams = sample_lambdas("br", cfg["n_lambdas"], Rng(cfg["seed"]).child(1), pconf)

    def one_lambda(lambda_id: int) -> list[list]:
        lam = lams[lambda_id]
        constants = constants_for_quadratic_br(data.X, data.y, data.Xv, data.yv, pconf.beta, lam)
        exact = reference_hypergrad(problem, lam).grad
        clock = _Clock(cfg["timings"])
        rows = []
        for t in range(1, cfg["t_max"] + 1):
            k = _resolve_k(cfg["k_policy"], t)
            clock.start()
            err_itd = float(np.linalg.norm(itd(problem, lam, t).grad - exact))
            err_fp = float(
                np.linalg.norm(aid(problem, lam, t, k, Adjoint.FP)[0].grad - exact)
            )
            wall = clock.ms()
            b_itd = itd_bound(constants, t)
            b_fp = aid_fp_bound(constants, t, k)
            b_aid = aid_bound(constants, constants.q**t, constants.q**k)
            rows.append(
                ["br", lambda_id, t, k,
                 err_itd, b_itd, err_itd <= b_itd,
                 err_fp, b_fp, err_fp <= b_fp,
                 b_aid, wall]
            )
        return rows

    chunks = _pool_map(one_lambda, range(len(lams)), threads)
    return _write_csv(cfg["out_path"], BOUNDS_HEADER, [r for c in chunks for r in c])


# ---------------------------------------------------------------------------
# equilibrium-model sweep
# ---------------------------------------------------------------------------

EQM_RUN_HEADER = ["step", "loss", "test_acc", "grad_norm", "spectral_norm_A"]
EQM_SUMMARY_HEADER = [
    "method", "project", "lr_id", "lr", "steps_completed",
    "final_loss", "final_test_acc", "max_grad_norm", "max_spectral_norm_A", "diverged",
]


def run_eqm(cfg: dict, threads: int = 1) -> str:
    """Training sweeps over methods x projection x learning-rate grid.

    Writes one CSV per run into the output directory plus a summary.csv; the
    summary path is returned.
    """
    out_dir = Path(cfg["out_path"])
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi, n_grid = cfg["lr_grid"]
    lrs = np.geomspace(lo, hi, n_grid)
    tasks = [
        (method, project, lr_id)
        for method in cfg["methods"]
        for project in cfg["project"]
        for lr_id in range(len(lrs))
    ]

    def one_run(task: tuple[str, bool, int]):
        method, project, lr_id = task
        config = EqmConfig(
            method=Method(method),
            hidden=cfg["hidden"],
            eps=cfg["eps"],
            project=project,
            t=cfg["t_max"],
            k=_resolve_k(cfg["k_policy"], cfg["t_max"]),
            lr=float(lrs[lr_id]),
            momentum=cfg["momentum"],
            steps=cfg["steps"],
            seed=cfg["seed"],
        )
        return eqm_train(config)

    logs = _pool_map(one_run, tasks, threads)

    summary_rows = []
    for (method, project, lr_id), log in zip(tasks, logs):
        name = f"eqm_{method}_proj{'on' if project else 'off'}_lr{lr_id}.csv"
        _write_csv(
            str(out_dir / name),
            EQM_RUN_HEADER,
            [[r.step, r.loss, r.test_acc, r.grad_norm, r.spectral_norm_A] for r in log],
        )
        diverged = any(not np.isfinite(r.grad_norm) for r in log)
        summary_rows.append(
            [
                method,
                project,
                lr_id,
                float(lrs[lr_id]),
                log[-1].step,
                log[-1].loss,
                log[-1].test_acc,
                max(r.grad_norm for r in log),
                max(r.spectral_norm_A for r in log),
                diverged,
            ]
        )
    return _write_csv(str(out_dir / "summary.csv"), EQM_SUMMARY_HEADER, summary_rows)


RUNNERS = {
    "approx-error": run_approx_error,
    "bilevel": run_bilevel,
    "bounds": run_bounds,
    "eqm": run_eqm,
}
