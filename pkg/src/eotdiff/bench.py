"""Experiment runners and report files for the command-line front end.

Every runner returns a :class:`Report` whose content is a pure function of
its parameters and seed.  Wall-clock times and timestamps are kept in a
separate :class:`Timing` record so that report files are byte-reproducible.

Trial ``t`` of a run seeded with ``s`` draws from
``np.random.default_rng([s, N, t])`` and is reproducible in isolation.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .derivatives import (
    build_H,
    derivative_bundle,
    grad_eot,
    grad_eot_implicit,
    grad_sinkhorn,
    hessian_eot,
    marginal_error,
)
from .linalg import DEFAULT_ALPHA, sym_eig
from .optimize import (
    FitConfig,
    FitResult,
    fit_two_stage,
    gd_baseline,
    make_gaussian_mixture_problem,
    make_registration_problem,
)
from .oracle import FDConfig, fd_gradient, fd_hessian
from .sinkhorn import cost_derivatives, eot_distance, sinkhorn_distance, solve_ot
from .spectral import asymptotic_rates, circle_oracle, circle_points, h_spectrum

SUCCESS_THRESHOLD = 0.1


@dataclass
class Report:
    """Deterministic outcome of one command: manifest, per-row records, summary."""

    command: str
    parameters: Dict[str, Any]
    seed: int
    columns: List[str]
    records: List[Dict[str, Any]]
    summary: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__
    ok: bool = True

    @property
    def manifest(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "parameters": self.parameters,
            "seed": self.seed,
            "version": self.version,
        }


@dataclass
class Timing:
    started: str
    wall_seconds: float
    per_item_seconds: List[float] = field(default_factory=list)


def _clean(value):
    """Plain Python scalars and containers for serialization."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return value


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def report_to_json(report: Report) -> str:
    return dump_json({
        "manifest": report.manifest,
        "columns": report.columns,
        "records": report.records,
        "summary": report.summary,
    })


def _csv_cell(value) -> str:
    value = _clean(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return str(value)


def _csv_parse_cell(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _comment(tag: str, obj) -> str:
    return f"# {tag}: " + json.dumps(_clean(obj), sort_keys=True, separators=(",", ":")) + "\n"


def report_to_csv(report: Report) -> str:
    buf = io.StringIO()
    buf.write(_comment("manifest", report.manifest))
    buf.write(_comment("summary", report.summary))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.columns)
    for rec in report.records:
        writer.writerow([_csv_cell(rec.get(c, "")) for c in report.columns])
    return buf.getvalue()


def parse_json_report(text: str) -> Report:
    data = json.loads(text)
    man = data["manifest"]
    return Report(
        command=man["command"], parameters=man["parameters"], seed=man["seed"],
        columns=data["columns"], records=data["records"], summary=data["summary"],
        version=man["version"],
    )


def parse_csv_report(text: str) -> Report:
    lines = text.splitlines(keepends=True)
    meta = {}
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("# "):
            body_start = i
            break
        tag, payload = line[2:].split(": ", 1)
        meta[tag] = json.loads(payload)
    else:
        body_start = len(lines)
    rows = list(csv.reader(io.StringIO("".join(lines[body_start:]))))
    columns = rows[0] if rows else []
    records = [{c: _csv_parse_cell(v) for c, v in zip(columns, row)} for row in rows[1:]]
    man = meta["manifest"]
    return Report(
        command=man["command"], parameters=man["parameters"], seed=man["seed"],
        columns=columns, records=records, summary=meta.get("summary", {}),
        version=man["version"],
    )


def write_report(report: Report, out_dir, fmt: str = "json", timing: Optional[Timing] = None) -> Path:
    """Write ``<command>.<fmt>`` (and ``timing.json`` if given) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = report_to_csv(report)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    path = out / f"{report.command}.{fmt}"
    path.write_text(text)
    if timing is not None:
        (out / "timing.json").write_text(dump_json(timing.__dict__))
    return path


def reemit(path) -> str:
    """Parse a written report and serialize it again in the same format."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return report_to_json(parse_json_report(text))
    return report_to_csv(parse_csv_report(text))


class Stopwatch:
    def __init__(self):
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._t0 = time.perf_counter()
        self.items: List[float] = []
        self._last = self._t0

    def lap(self) -> None:
        now = time.perf_counter()
        self.items.append(now - self._last)
        self._last = now

    def timing(self) -> Timing:
        return Timing(self.started, time.perf_counter() - self._t0, self.items)


def trial_rng(seed: int, n: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, n, trial])


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / scale if scale > 0 else float(np.max(np.abs(a)))


# ---------------------------------------------------------------- grad-check

def run_grad_check(
    n: int = 10, d: int = 2, eps: float = 0.05, trials: int = 20, seed: int = 0,
    dist: str = "eot", hessian: bool = False, tol: float = 1e-12, h: float = 1e-5,
    h_hess: float = 1e-4, rtol: Optional[float] = None, hess_rtol: float = 1e-4,
    watch: Optional[Stopwatch] = None,
) -> Report:
    """Analytic derivatives against central differences on uniform-square clouds."""
    if dist not in ("eot", "sinkhorn"):
        raise ValueError(f"dist must be 'eot' or 'sinkhorn', got {dist!r}")
    if rtol is None:
        rtol = 1e-5 if dist == "eot" else 1e-4
    records = []
    for trial in range(trials):
        rng = trial_rng(seed, n, trial)
        Y = rng.uniform(size=(n, d))
        Ys = rng.uniform(size=(n, d))
        C, plan = solve_ot(Y, Ys, eps, tol=tol)
        dC, d2C = cost_derivatives(Y, Ys)
        rec = {"trial": trial, "n": n, "eps": eps, "sinkhorn_iters": plan.iterations}
        if dist == "eot":
            analytic = grad_eot(plan, dC)

            def loss(y):
                return eot_distance(solve_ot(y, Ys, eps, tol=tol)[1])

            rec["route_rel_error"] = _rel_err(grad_eot_implicit(plan, dC), analytic)
        else:
            analytic = grad_sinkhorn(plan, C, dC)

            def loss(y):
                c, p = solve_ot(y, Ys, eps, tol=tol)
                return sinkhorn_distance(c, p)

        fd = fd_gradient(loss, Y, FDConfig(h=h))
        diff = np.abs(analytic - fd) / max(float(np.max(np.abs(fd))), np.finfo(float).tiny)
        rec["max_rel_error"] = float(diff.max())
        rec["mean_rel_error"] = float(diff.mean())
        passed = rec["max_rel_error"] <= rtol
        if hessian:
            T = hessian_eot(plan, dC, d2C)

            def grad(y):
                p = solve_ot(y, Ys, eps, tol=tol)[1]
                return grad_eot(p, cost_derivatives(y, Ys)[0])

            rec["hessian_rel_error"] = _rel_err(T, fd_hessian(grad, Y, FDConfig(h=h_hess)))
            rec["hessian_asymmetry"] = float(
                np.max(np.abs(T - T.transpose(2, 3, 0, 1))) / np.max(np.abs(T))
            )
            passed = passed and rec["hessian_rel_error"] <= hess_rtol
        rec["passed"] = bool(passed)
        records.append(rec)
        if watch:
            watch.lap()
    columns = ["trial", "n", "eps", "sinkhorn_iters", "max_rel_error", "mean_rel_error"]
    if dist == "eot":
        columns.append("route_rel_error")
    if hessian:
        columns += ["hessian_rel_error", "hessian_asymmetry"]
    columns.append("passed")
    failures = sum(not r["passed"] for r in records)
    summary = {
        "trials": trials,
        "failures": failures,
        "worst_rel_error": max((r["max_rel_error"] for r in records), default=0.0),
        "rtol": rtol,
    }
    params = {"n": n, "d": d, "eps": eps, "trials": trials, "dist": dist, "hessian": hessian,
              "sinkhorn_tol": tol, "h": h, "h_hess": h_hess}
    return Report("grad-check", params, seed, columns, records, summary, ok=failures == 0)


# ------------------------------------------------------------ hessian-bench

def hessian_trial(n: int, eps: float, seed: int, trial: int, alpha: float, tol: float = 1e-9,
                  d: int = 2) -> Dict[str, Any]:
    """One symmetric self-transport Hessian and its marginal error."""
    Y = trial_rng(seed, n, trial).uniform(size=(n, d))
    _, plan = solve_ot(Y, Y, eps, tol=tol)
    dC, d2C = cost_derivatives(Y, Y)
    eig = sym_eig(build_H(plan))
    bundle = derivative_bundle(plan, dC, d2C, alpha=alpha, eig=eig)
    err = marginal_error(bundle.hessian_Y, plan.row_marginal)
    spec = h_spectrum(plan, eig=eig)
    return {
        "n": n, "eps": eps, "trial": trial,
        "marginal_error": err,
        "success": bool(err < SUCCESS_THRESHOLD),
        "retained_rank": bundle.retained_rank,
        "sinkhorn_iters": plan.iterations,
        "marginal_violation": plan.marginal_violation,
        "zero_multiplicity": spec.zero_multiplicity,
        "kernel_residual_rel": spec.kernel_residual / spec.lambda_max,
        "lambda_min_positive": spec.lambda_min_positive,
    }


def run_hessian_bench(
    n_list: Sequence[int] = (10, 20, 120), eps_list: Sequence[float] = (0.005,),
    trials: int = 100, seed: int = 0, alpha: float = DEFAULT_ALPHA, tol: float = 1e-9,
    watch: Optional[Stopwatch] = None,
) -> Report:
    """Marginal-error benchmark; failed trials are recorded, never raised."""
    records = []
    for n in n_list:
        for eps in eps_list:
            for trial in range(trials):
                records.append(hessian_trial(n, eps, seed, trial, alpha, tol))
                if watch:
                    watch.lap()
    rates = {}
    for n in n_list:
        for eps in eps_list:
            sub = [r for r in records if r["n"] == n and r["eps"] == eps]
            rates[f"n={n},eps={eps!r}"] = sum(r["success"] for r in sub) / len(sub) if sub else math.nan
    columns = ["n", "eps", "trial", "marginal_error", "success", "retained_rank", "sinkhorn_iters",
               "marginal_violation", "zero_multiplicity", "kernel_residual_rel", "lambda_min_positive"]
    params = {"n_list": list(n_list), "eps_list": list(eps_list), "trials": trials,
              "alpha": alpha, "sinkhorn_tol": tol}
    return Report("hessian-bench", params, seed, columns, records, {"success_rate": rates})


# ----------------------------------------------------------------- spectrum

def run_spectrum(
    n_list: Sequence[int] = (50, 100, 200), eps_list: Sequence[float] = (0.1, 0.01),
    dataset: str = "circle", seed: int = 0, tol: float = 1e-9,
    watch: Optional[Stopwatch] = None,
) -> Report:
    """Smallest positive eigenvalue of ``H`` over an ``(N, eps)`` grid."""
    if dataset not in ("circle", "uniform_square"):
        raise ValueError(f"unknown dataset {dataset!r}")
    records = []
    for n in n_list:
        for eps in eps_list:
            rates = asymptotic_rates(n, eps)
            if dataset == "circle":
                oracle = circle_oracle(n, eps)
                lam, kappa = oracle.lambda_min_positive, oracle.condition_number
            else:
                Y = trial_rng(seed, n, 0).uniform(size=(n, 2))
                _, plan = solve_ot(Y, Y, eps, tol=tol)
                spec = h_spectrum(plan)
                lam, kappa = spec.lambda_min_positive, spec.condition_number
            records.append({
                "n": n, "eps": eps, "lambda_min_positive": lam, "condition_number": kappa,
                "pred_large_n": rates.pred_large_N, "pred_small_eps": rates.pred_small_eps,
                "ratio_large_n": lam / rates.pred_large_N,
                "ratio_small_eps": lam / rates.pred_small_eps if rates.pred_small_eps > 0 else math.inf,
                "n_lambda": n * lam,
                "log_lambda_plus_inv_eps": math.log(lam) + 1.0 / eps if lam > 0 else -math.inf,
                "regime": rates.regime,
            })
            if watch:
                watch.lap()
    columns = ["n", "eps", "lambda_min_positive", "condition_number", "pred_large_n",
               "pred_small_eps", "ratio_large_n", "ratio_small_eps", "n_lambda",
               "log_lambda_plus_inv_eps", "regime"]
    params = {"n_list": list(n_list), "eps_list": list(eps_list), "dataset": dataset,
              "sinkhorn_tol": tol}
    return Report("spectrum", params, seed, columns, records, {"points": len(records)})


# ------------------------------------------------------------------- fits

def _trace_records(result: FitResult, method: str) -> List[Dict[str, Any]]:
    return [
        {"method": method, "iter": i, "stage": stage, "loss": loss, "theta_error": err}
        for i, (stage, loss, err) in enumerate(
            zip(result.stage_trace, result.loss_trace, result.theta_error_trace)
        )
    ]


def _fit_summary(result: FitResult) -> Dict[str, Any]:
    return {
        "theta_hat": result.theta_hat,
        "final_loss": result.loss_trace[-1],
        "theta_error": result.theta_error,
        "switched": result.switched,
        "stage_switch_iter": result.stage_switch_iter,
        "sgd_steps": result.sgd_steps,
        "newton_iters": result.newton_iters,
        "pd_fallbacks": result.pd_fallbacks,
        "grad_norm_final": result.grad_norm_final,
        "min_hessian_eig_at_switch": result.min_hessian_eig_at_switch,
        "rejected_loss": result.rejected_loss,
        "diverged": result.diverged,
    }


TRACE_COLUMNS = ["method", "iter", "stage", "loss", "theta_error"]

MIXTURE_DEFAULTS = {"n": 500, "D": 5, "d": 2, "noise_var": 0.04, "epsilon": 0.05,
                    "gd_lr": 0.001, "gd_iters": 2000}
REGISTRATION_DEFAULTS = {"sizes": "100,300,300", "noise_var": 4e-4, "epsilon": 0.005,
                         "gd_lr": 0.1, "gd_iters": 1000, "source": ""}
REGISTRATION_FIT = {"sgd_lr": 0.1, "batch_size": 500, "max_epochs": 5, "newton_lr": 0.5}


def _run_fit(command: str, problem, theta0, config: FitConfig, params: Dict[str, Any], seed: int,
             gd_lr: float, gd_iters: int, gd_only: bool, skip_gd: bool,
             watch: Optional[Stopwatch]) -> Report:
    records: List[Dict[str, Any]] = []
    summary: Dict[str, Any] = {"true_theta": problem.true_theta}
    ok = True
    if not gd_only:
        fit = fit_two_stage(problem, theta0, config)
        records += _trace_records(fit, "two-stage")
        summary["two_stage"] = _fit_summary(fit)
        ok = fit.switched and not fit.diverged
        if watch:
            watch.lap()
    if gd_only or not skip_gd:
        gd = gd_baseline(problem, theta0, gd_lr, gd_iters, config)
        records += _trace_records(gd, "gd")
        summary["gd"] = _fit_summary(gd)
        ok = ok and not gd.diverged
        if watch:
            watch.lap()
    return Report(command, params, seed, TRACE_COLUMNS, records, summary, ok=ok)


def run_shuffled_reg(settings: Optional[Dict[str, Any]] = None, seed: int = 0, gd_only: bool = False,
                     skip_gd: bool = False, watch: Optional[Stopwatch] = None) -> Report:
    """Gaussian-mixture shuffled regression: two-stage fit plus GD baseline."""
    prob_keys, fit_keys = _split_settings(settings or {}, MIXTURE_DEFAULTS)
    problem, theta0 = make_gaussian_mixture_problem(
        seed=seed, n=int(prob_keys["n"]), D=int(prob_keys["D"]), d=int(prob_keys["d"]),
        noise_var=float(prob_keys["noise_var"]), epsilon=float(prob_keys["epsilon"]),
    )
    fit_keys.setdefault("rng_seed", seed)
    config = FitConfig.from_mapping(fit_keys)
    params = {"problem": prob_keys, "fit": config.__dict__, "gd_only": gd_only, "skip_gd": skip_gd}
    return _run_fit("shuffled-reg", problem, theta0, config, params, seed,
                    float(prob_keys["gd_lr"]), int(prob_keys["gd_iters"]), gd_only, skip_gd, watch)


def run_register3d(settings: Optional[Dict[str, Any]] = None, seed: int = 0, gd_only: bool = False,
                   skip_gd: bool = False, watch: Optional[Stopwatch] = None) -> Report:
    """Registration of a rotated, scaled, shuffled 3-D cloud."""
    settings = dict(settings or {})
    for key, value in REGISTRATION_FIT.items():
        settings.setdefault(key, value)
    prob_keys, fit_keys = _split_settings(settings, REGISTRATION_DEFAULTS)
    sizes = tuple(int(s) for s in str(prob_keys["sizes"]).split(","))
    source = prob_keys["source"] or None
    problem, theta0 = make_registration_problem(
        seed=seed, source=source, sizes=sizes, noise_var=float(prob_keys["noise_var"]),
        epsilon=float(prob_keys["epsilon"]),
    )
    fit_keys.setdefault("rng_seed", seed)
    config = FitConfig.from_mapping(fit_keys)
    params = {"problem": prob_keys, "fit": config.__dict__, "gd_only": gd_only, "skip_gd": skip_gd}
    return _run_fit("register3d", problem, theta0, config, params, seed,
                    float(prob_keys["gd_lr"]), int(prob_keys["gd_iters"]), gd_only, skip_gd, watch)


def _split_settings(settings: Dict[str, Any], defaults: Dict[str, Any]):
    prob = dict(defaults)
    fit = {}
    for key, value in settings.items():
        if key in defaults:
            prob[key] = type(defaults[key])(value) if not isinstance(defaults[key], str) else str(value)
        else:
            fit[key] = value
    return prob, fit
