"""Command-line experiment runner.

``proxsmooth run config.json`` simulates data from a benchmark model, runs one
smoother, and writes ``trajectory.csv``, ``marginals.csv``, ``trace.jsonl``
and ``summary.json``. ``proxsmooth compare a/summary.json b/summary.json``
tabulates finished runs.

Exit codes: 0 converged, 2 stopped at ``max_iters``, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from proxsmooth.baseline import kalman_rts
from proxsmooth.damping import DampingConfig
from proxsmooth.errors import ParseError, ValidationError
from proxsmooth.expansions import rule_factory
from proxsmooth.fpvs import run_fpvs
from proxsmooth.hpvs import run_hpvs
from proxsmooth.models import (
    LinearGaussianModel,
    pendulum_model,
    simulate,
    stochastic_volatility_model,
)
from proxsmooth.rpvs import run_rpvs

MODELS = ("linear_gaussian", "stochastic_volatility", "pendulum")
SMOOTHERS = ("fpvs", "rpvs", "hpvs", "rts")
EXPANSIONS = ("gslr", "fourier_hermite", "exact")
QUADRATURE_KINDS = ("default", "gauss_hermite", "unscented")

MODEL_PARAMS = {
    "linear_gaussian": {"A", "b", "Q", "H", "e", "R_meas", "mu0", "Lambda0"},
    "stochastic_volatility": {"a", "q", "scale"},
    "pendulum": {"dt", "g_over_L", "q_c", "r_meas", "mu0", "Lambda0"},
}
RANDOM_WALK = dict(A=1.0, b=0.0, Q=1.0, H=1.0, e=0.0, R_meas=1.0, mu0=0.0, Lambda0=1.0)


@dataclass(frozen=True)
class QuadratureConfig:
    kind: str = "default"
    order: int | None = None


@dataclass(frozen=True)
class DampingSettings:
    """Damping fields as they appear in the config; ``epsilon=None`` means ``0.1 (T+1) d``."""

    epsilon: float | None = None
    alpha_min: float = 1e-4
    alpha_max: float = 1e6
    alpha_init: float = 1.0
    kl_rel_tol: float = 1e-2
    max_bisect: int = 60
    jitter: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: str
    horizon: int
    smoother: str
    model_params: dict = field(default_factory=dict)
    seed: int = 0
    expansion: str = "gslr"
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    damping: DampingSettings = field(default_factory=DampingSettings)
    max_iters: int = 50
    conv_tol: float = 1e-6
    output_dir: str = "run"
    record_timing: bool = False

    def to_json(self) -> dict:
        """Config echo; ``output_dir`` is left out so results do not depend on where they land."""
        d = asdict(self)
        d.pop("output_dir")
        return d


# ------------------------------------------------------------------- validation


def _check_keys(obj: dict, allowed: set[str], prefix: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ValidationError(prefix + key, "unknown key")


def _number(obj: dict, key: str, prefix: str, *, positive=False, integer=False, minimum=None, nullable=False):
    name = prefix + key
    val = obj[key]
    if val is None and nullable:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ValidationError(name, "must be a number")
    if integer and not (isinstance(val, int) or float(val).is_integer()):
        raise ValidationError(name, "must be an integer")
    if not math.isfinite(val):
        raise ValidationError(name, "must be finite")
    if positive and not val > 0:
        raise ValidationError(name, "must be > 0")
    if minimum is not None and val < minimum:
        raise ValidationError(name, f"must be >= {minimum}")
    return int(val) if integer else float(val)


def _enum(obj: dict, key: str, choices, prefix: str = "") -> str:
    val = obj[key]
    if val not in choices:
        raise ValidationError(prefix + key, f"must be one of {', '.join(choices)}")
    return val


def config_from_dict(raw: Any) -> RunConfig:
    """Validate a parsed JSON object; unknown keys anywhere are rejected."""
    if not isinstance(raw, dict):
        raise ValidationError("<root>", "config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    _check_keys(raw, top, "")
    for key in ("model", "horizon", "smoother"):
        if key not in raw:
            raise ValidationError(key, "required")
    kw: dict[str, Any] = {}
    kw["model"] = _enum(raw, "model", MODELS)
    kw["smoother"] = _enum(raw, "smoother", SMOOTHERS)
    kw["horizon"] = _number(raw, "horizon", "", integer=True, minimum=1)
    if "seed" in raw:
        kw["seed"] = _number(raw, "seed", "", integer=True, minimum=0)
    if "expansion" in raw:
        kw["expansion"] = _enum(raw, "expansion", EXPANSIONS)
    if kw.get("expansion") == "exact" and kw["model"] != "linear_gaussian":
        raise ValidationError("expansion", "exact is only available for linear_gaussian")
    if kw["smoother"] == "rts" and kw["model"] != "linear_gaussian":
        raise ValidationError("smoother", "rts needs the linear_gaussian model")
    if "max_iters" in raw:
        kw["max_iters"] = _number(raw, "max_iters", "", integer=True, minimum=0)
    if "conv_tol" in raw:
        kw["conv_tol"] = _number(raw, "conv_tol", "", positive=True)
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
            raise ValidationError("output_dir", "must be a non-empty string")
        kw["output_dir"] = raw["output_dir"]
    if "record_timing" in raw:
        if not isinstance(raw["record_timing"], bool):
            raise ValidationError("record_timing", "must be a boolean")
        kw["record_timing"] = raw["record_timing"]

    if "model_params" in raw:
        mp = raw["model_params"]
        if not isinstance(mp, dict):
            raise ValidationError("model_params", "must be an object")
        _check_keys(mp, MODEL_PARAMS[kw["model"]], "model_params.")
        kw["model_params"] = dict(mp)

    if "quadrature" in raw:
        q = raw["quadrature"]
        if not isinstance(q, dict):
            raise ValidationError("quadrature", "must be an object")
        _check_keys(q, {"kind", "order"}, "quadrature.")
        kind = _enum(q, "kind", QUADRATURE_KINDS, "quadrature.") if "kind" in q else "default"
        order = _number(q, "order", "quadrature.", integer=True, minimum=1, nullable=True) if "order" in q else None
        kw["quadrature"] = QuadratureConfig(kind, order)

    if "damping" in raw:
        d = raw["damping"]
        if not isinstance(d, dict):
            raise ValidationError("damping", "must be an object")
        _check_keys(d, {f.name for f in fields(DampingSettings)}, "damping.")
        dk: dict[str, Any] = {}
        for key in ("epsilon", "alpha_min", "alpha_max", "alpha_init", "kl_rel_tol"):
            if key in d:
                dk[key] = _number(d, key, "damping.", positive=True, nullable=key == "epsilon")
        if "max_bisect" in d:
            dk["max_bisect"] = _number(d, "max_bisect", "damping.", integer=True, minimum=1)
        if "jitter" in d:
            dk["jitter"] = _number(d, "jitter", "damping.", minimum=0.0)
        ds = DampingSettings(**dk)
        if not ds.alpha_min < ds.alpha_init < ds.alpha_max:
            raise ValidationError("damping.alpha_init", "need alpha_min < alpha_init < alpha_max")
        if not ds.kl_rel_tol < 1:
            raise ValidationError("damping.kl_rel_tol", "must be < 1")
        kw["damping"] = ds
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    """Read and validate a JSON run config.

    Raises
    ------
    ParseError
        Malformed JSON, with the line and column.
    ValidationError
        A field is unknown or out of range; ``.field`` names it.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


# --------------------------------------------------------------------- running


def build_model(cfg: RunConfig):
    p = dict(cfg.model_params)
    if cfg.model == "linear_gaussian":
        return LinearGaussianModel(
            **{("R" if k == "R_meas" else k): v for k, v in {**RANDOM_WALK, **p}.items()}
        )
    if cfg.model == "stochastic_volatility":
        return stochastic_volatility_model(**p)
    return pendulum_model(**p)


def damping_config(cfg: RunConfig, dim: int) -> DampingConfig:
    d = asdict(cfg.damping)
    if d["epsilon"] is None:
        d["epsilon"] = 0.1 * (cfg.horizon + 1) * dim
    return DampingConfig(**d)


def _fmt(x: float) -> str:
    return repr(float(x))


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _rmse(means: np.ndarray, ref: np.ndarray) -> float:
    return float(np.sqrt(np.mean((means - ref) ** 2)))


def write_marginals(path: Path, marginals) -> None:
    d = marginals[0].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"mean{i}" for i in range(d)] + [f"var{i}" for i in range(d)])
        for k, g in enumerate(marginals):
            w.writerow([k] + [_fmt(v) for v in g.mean] + [_fmt(v) for v in np.diag(g.cov)])


def run_experiment(cfg: RunConfig, quiet: bool = True) -> int:
    """Simulate, smooth and write the four output files; returns the exit code."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        model = build_model(cfg)
        traj = simulate(model, cfg.horizon, cfg.seed)
        traj.to_csv(out / "trajectory.csv")
        Y = traj.observations
        rts = kalman_rts(model, Y) if isinstance(model, LinearGaussianModel) else None
        records = []
        if cfg.smoother == "rts":
            marginals, converged, iters = rts.smoothed, True, 0
        else:
            runner = {"fpvs": run_fpvs, "rpvs": run_rpvs, "hpvs": run_hpvs}[cfg.smoother]
            res = runner(
                model,
                Y,
                method=cfg.expansion,
                rule=rule_factory(cfg.quadrature.kind, cfg.quadrature.order),
                cfg=damping_config(cfg, model.dim_x),
                max_iters=cfg.max_iters,
                conv_tol=cfg.conv_tol,
                record_timing=cfg.record_timing,
            )
            marginals, converged, iters, records = res.marginals, res.converged, res.iterations, res.records
    except Exception as exc:  # noqa: BLE001 - every failure becomes exit 1 with a record
        diag = {"error": type(exc).__name__, "message": str(exc), "config": cfg.to_json()}
        for attr in ("k", "block", "field"):
            if hasattr(exc, attr):
                diag[attr] = getattr(exc, attr)
        (out / "error.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        if not quiet:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    write_marginals(out / "marginals.csv", marginals)
    with open(out / "trace.jsonl", "w") as fh:
        for rec in records:
            row = {k: _json_float(v) if isinstance(v, float) else v for k, v in rec.as_dict().items()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    means = np.array([g.mean for g in marginals])
    betas = [r.beta for r in records]
    summary = {
        "converged": bool(converged),
        "iters": int(iters),
        "horizon": cfg.horizon,
        "smoother": cfg.smoother,
        "final_rmse_vs_truth": _rmse(means, traj.states),
        "final_rmse_vs_rts": None if rts is None else _rmse(means, np.array([g.mean for g in rts.smoothed])),
        "final_means": means.tolist(),
        "beta_trace": betas,
        "wall_ms": (time.perf_counter() - t0) * 1e3 if cfg.record_timing else None,
        "config": cfg.to_json(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not quiet:
        status = "converged" if converged else "stopped at max_iters"
        print(f"{cfg.smoother}: {status} after {iters} iterations; rmse vs truth {summary['final_rmse_vs_truth']:.4g}")
    return 0 if converged else 2


# --------------------------------------------------------------------- compare


def compare_runs(paths) -> str:
    """CSV table of finished runs, with pairwise RMSE between final means."""
    paths = list(paths)
    if len(paths) < 2:
        raise ValidationError("paths", "need at least two summaries")
    runs = []
    for p in paths:
        try:
            s = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(str(p), f"unreadable summary: {exc}") from exc
        for key in ("horizon", "final_means", "iters", "smoother"):
            if key not in s:
                raise ValidationError(f"{p}:{key}", "missing")
        runs.append(s)
    if len({s["horizon"] for s in runs}) != 1:
        raise ValidationError("horizon", "summaries have different horizons")
    if len({np.shape(s["final_means"]) for s in runs}) != 1:
        raise ValidationError("final_means", "summaries have different state dimensions")
    means = [np.asarray(s["final_means"], dtype=float) for s in runs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["run", "smoother", "iters", "converged", "rmse_vs_truth", "rmse_vs_rts", "wall_ms", "beta_min", "beta_median", "beta_max"]
        + [f"rmse_vs_run{j}" for j in range(len(runs))]
    )
    for i, (p, s) in enumerate(zip(paths, runs)):
        b = s.get("beta_trace") or []
        stats = [_fmt(np.min(b)), _fmt(np.median(b)), _fmt(np.max(b))] if b else ["", "", ""]
        w.writerow(
            [str(p), s["smoother"], s["iters"], s.get("converged")]
            + ["" if s.get(k) is None else _fmt(s[k]) for k in ("final_rmse_vs_truth", "final_rmse_vs_rts", "wall_ms")]
            + stats
            + [_fmt(_rmse(means[i], means[j])) for j in range(len(runs))]
        )
    return buf.getvalue()


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxsmooth", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("config")
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--seed", type=int, help="override the config's seed")
    run.add_argument("--quiet", action="store_true")
    cmp_ = sub.add_parser("compare", help="tabulate summary.json files as CSV")
    cmp_.add_argument("summaries", nargs="+")
    cmp_.add_argument("--output", "-o", help="write the CSV here instead of stdout")
    cmp_.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.output_dir is not None:
                cfg = replace(cfg, output_dir=args.output_dir)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            return run_experiment(cfg, quiet=args.quiet)
        table = compare_runs(args.summaries)
        if args.output:
            Path(args.output).write_text(table)
        else:
            sys.stdout.write(table)
        return 0
    except (ParseError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
