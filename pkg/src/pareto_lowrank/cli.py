"""Command-line pipeline: profile -> allocate -> compress, plus sweeps and bound checks.

Every flag can also be given in a JSON config file (``--config``); flags win.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import allocate, factorize, linalg, sensitivity, spectrum, synthetic, tensorio

log = logging.getLogger("pareto_lowrank")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4
DEFAULT_GRID_POINTS = 33


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str | None = None
    calib: str | None = None
    method: str = "als"
    eps: float | None = None
    eps_group: dict[str, float] = field(default_factory=dict)
    target_ratio: float | None = None
    tau: int = factorize.DEFAULT_TAU
    trim: float = 0.02
    jobs: int = 1
    seed: int = 0
    out: str = "out"
    grid: list[float] | None = None
    early_stop: bool = False
    toy: dict[str, Any] = field(default_factory=dict)

    # execution-only settings, kept out of the report so reruns compare byte-for-byte
    _UNECHOED = ("jobs", "out")

    def echo(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in self._UNECHOED}

    def tolerance_form(self) -> str:
        forms = [name for name, present in (
            ("eps", self.eps is not None),
            ("eps_group", bool(self.eps_group)),
            ("target_ratio", self.target_ratio is not None),
        ) if present]
        if len(forms) != 1:
            raise ConfigError(f"exactly one of --eps, --eps-group, --target-ratio is required (got {forms or 'none'})")
        return forms[0]

    def validate(self) -> None:
        if self.method not in factorize.METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        for name, val in [("eps", self.eps), *self.eps_group.items()]:
            if val is not None and not 0.0 <= val <= 1.0:
                raise ConfigError(f"tolerance {name}={val} outside [0, 1]")
        if self.target_ratio is not None and not 0.0 <= self.target_ratio < 1.0:
            raise ConfigError("target ratio must lie in [0, 1)")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if not 0.0 <= self.trim < 0.5:
            raise ConfigError("trim must lie in [0, 0.5)")
        if self.grid is not None and any(not 0.0 <= g <= 1.0 for g in self.grid):
            raise ConfigError("sweep grid values must lie in [0, 1]")


def _parse_group(items: list[str] | None) -> dict[str, float] | None:
    if not items:
        return None
    out = {}
    for item in items:
        name, sep, val = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"--eps-group expects NAME=VALUE, got {item!r}")
        try:
            out[name] = float(val)
        except ValueError:
            raise ConfigError(f"bad tolerance in {item!r}") from None
    return out


def _parse_floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def load_config(args: argparse.Namespace) -> RunConfig:
    doc: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    overrides = {
        "model": args.model,
        "calib": args.calib,
        "method": args.method,
        "eps": args.eps,
        "eps_group": _parse_group(args.eps_group),
        "target_ratio": args.target_ratio,
        "tau": args.tau,
        "trim": args.trim,
        "jobs": args.jobs,
        "seed": args.seed,
        "out": args.out,
        "grid": _parse_floats(getattr(args, "grid", None)),
        "early_stop": args.early_stop or None,
    }
    merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# --- shared steps ----------------------------------------------------------


def _load_model(cfg: RunConfig) -> list[tensorio.WeightTensor]:
    if not cfg.model:
        raise ConfigError("--model is required")
    try:
        return tensorio.read_container(cfg.model)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read model container {cfg.model}: {exc}") from exc


def _load_covariances(cfg: RunConfig) -> dict[str, tensorio.Covariance] | None:
    if cfg.method == "svd":
        return None
    if not cfg.calib:
        raise ConfigError(f"method {cfg.method!r} needs calibration data (--calib)")
    try:
        records = tensorio.read_calibration(cfg.calib)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read calibration container {cfg.calib}: {exc}") from exc
    return {name: rec.to_covariance() for name, rec in records.items()}


def _profiles(tensors, jobs: int = 1) -> list[spectrum.SpectrumProfile]:
    if jobs <= 1:
        return [spectrum.profile(t) for t in tensors]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(spectrum.profile, tensors))


def resolve_allocation(cfg: RunConfig, profiles) -> allocate.RankAllocation:
    form = cfg.tolerance_form()
    if form == "eps":
        alloc = allocate.allocate_uniform(profiles, cfg.eps)
    elif form == "eps_group":
        try:
            alloc = allocate.allocate_clustered(profiles, cfg.eps_group)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
    else:
        dense = sum(p.dense_params for p in profiles)
        budget = int(math.floor((1.0 - cfg.target_ratio) * dense))
        _, alloc = allocate.budget_to_epsilon(profiles, budget)
    zero = [n for n, r in alloc.ranks.items() if r == 0]
    if zero:
        log.warning("layers replaced by the zero map (rank 0): %s", ", ".join(zero))
    return alloc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_frontier(path: Path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "total_params", "surrogate_loss"])
        for pt in points:
            w.writerow([repr(pt.eps), pt.total_params, repr(pt.surrogate_loss)])


def _grid(cfg: RunConfig) -> list[float]:
    if cfg.grid is not None:
        return cfg.grid
    return [float(x) for x in np.linspace(0.0, 1.0, DEFAULT_GRID_POINTS)]


# --- subcommands -----------------------------------------------------------


def cmd_profile(cfg: RunConfig) -> int:
    tensors = _load_model(cfg)
    profiles = _profiles(tensors, cfg.jobs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spectrum.write_profile_csv(profiles, out / "profiles.csv")
    summary = {
        "layers": [
            {
                "name": p.layer_name,
                "group": p.group,
                "rows": p.n_rows,
                "cols": p.n_cols,
                "total_energy": p.total_energy,
                "numerical_rank": p.numerical_rank,
                "degenerate": p.degenerate,
            }
            for p in profiles
        ]
    }
    for p in profiles:
        if p.degenerate:
            log.warning("layer %s is an exact zero matrix (degenerate profile)", p.layer_name)
    env = spectrum.envelope(profiles, cfg.trim)
    with open(out / "envelope.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "lower", "upper"])
        for e, lo, hi in zip(env.grid, env.lower_values, env.upper_values):
            w.writerow([repr(float(e)), repr(float(lo)), repr(float(hi))])
    summary["envelope"] = {
        "trim_fraction": cfg.trim,
        "coverage_fraction": env.coverage_fraction,
        "retained": list(env.retained),
    }
    _write_json(out / "profile_summary.json", summary)
    return EXIT_OK


def cmd_allocate(cfg: RunConfig) -> int:
    profiles = _profiles(_load_model(cfg), cfg.jobs)
    alloc = resolve_allocation(cfg, profiles)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "allocation.json", alloc.to_report())
    return EXIT_OK


def build_report(cfg, tensors, alloc, results) -> dict:
    groups = {t.name: t.group for t in tensors}
    rows = []
    for f, trace in results:
        name = f.layer_name
        rows.append(
            {
                "name": name,
                "group": groups[name],
                "rank": alloc.ranks[name],
                "error": alloc.per_layer_error[name],
                "params": alloc.per_layer_params[name],
                "objective_init": trace.initial,
                "objective_final": trace.final,
            }
        )
    total = sum(r["params"] for r in rows)
    dense = alloc.dense_params
    return {
        "config": cfg.echo(),
        "epsilons": alloc.tolerances,
        "per_layer": rows,
        "totals": {
            "total_params": total,
            "dense_params": dense,
            "compression_ratio": 1.0 - total / dense if dense else 0.0,
            "denominator": "sum of rows*cols over compressed layers",
        },
    }


def cmd_compress(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    tensors = _load_model(cfg)
    covs = _load_covariances(cfg)
    profiles = _profiles(tensors, cfg.jobs)
    alloc = resolve_allocation(cfg, profiles)
    t1 = time.perf_counter()
    try:
        results = factorize.compress_model(tensors, covs, alloc, cfg.tau, cfg.method, cfg.jobs, cfg.early_stop)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    t2 = time.perf_counter()

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for f, _ in results:
        if f.rank == 0:
            continue  # containers hold nonempty matrices only; rank 0 is recorded in the report
        entries.append(tensorio.WeightTensor(f"{f.layer_name}.A", f.A, "factor"))
        entries.append(tensorio.WeightTensor(f"{f.layer_name}.B", f.B, "factor"))
    tensorio.write_container(entries, out / "factors")
    report = build_report(cfg, tensors, alloc, results)
    if cfg.grid is not None:
        report["frontier"] = [
            {"eps": p.eps, "total_params": p.total_params, "surrogate_loss": p.surrogate_loss}
            for p in allocate.pareto_sweep(profiles, cfg.grid)
        ]
    _write_json(out / "report.json", report)
    with open(out / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "iteration", "objective"])
        for f, trace in results:
            for i, v in enumerate(trace.values):
                w.writerow([f.layer_name, i, repr(v)])
    _write_json(out / "timings.json", {"allocate_s": t1 - t0, "factorize_s": t2 - t1, "jobs": cfg.jobs})
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    profiles = _profiles(_load_model(cfg), cfg.jobs)
    points = allocate.pareto_sweep(profiles, _grid(cfg))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_frontier(out / "frontier.csv", points)
    return EXIT_OK


TOY_DEFAULTS = {
    "widths": [8, 8, 8, 8],
    "activation": "tanh",
    "loss": "squared",
    "batch": 8,
    "scales": [1e-2, 1e-3, 1e-4],
    "perturbation": "random",
}


def _build_toy(spec: dict, seed: int):
    rng = np.random.default_rng(seed)
    pert = spec["perturbation"]
    if pert == "aligned":
        # single linear layer with linear loss; dW X is parallel to C, the equality case.
        # batch <= d_in keeps X full column rank so that pinv(X) X = I
        d_in, d_out = spec["widths"][0], spec["widths"][-1]
        batch = min(spec["batch"], d_in)
        W = rng.standard_normal((d_out, d_in))
        X1 = rng.standard_normal((d_in, batch))
        C = rng.standard_normal((d_out, batch))
        net = sensitivity.ToyNetwork([W], "identity", "linear", C)
        return net, X1, [C @ np.linalg.pinv(X1)]
    net, X1 = sensitivity.random_network(rng, spec["widths"], spec["activation"], spec["loss"], spec["batch"])
    if pert == "zero":
        D = [np.zeros_like(W) for W in net.layers]
    elif pert == "random":
        D = [rng.standard_normal(W.shape) for W in net.layers]
    else:
        raise ConfigError(f"unknown perturbation {pert!r}")
    return net, X1, D


def verify_bound_rows(spec: dict, seed: int) -> list[dict]:
    net, X1, D = _build_toy(spec, seed)
    rows = []
    for t in spec["scales"]:
        deltas = [t * d for d in D]
        dL = sensitivity.loss_delta(net, X1, deltas)
        bound = sensitivity.theorem1_bound(net, X1, deltas).bound
        tol = sensitivity.bound_tolerance(t)
        if bound == 0.0:
            ratio, ok = None, dL == 0.0
        else:
            ratio = abs(dL) / bound
            ok = ratio <= tol
        rows.append({"t": t, "delta_L": dL, "bound": bound, "ratio": ratio, "tolerance": tol, "pass": ok})
    return rows


def cmd_verify_bound(cfg: RunConfig) -> int:
    unknown = sorted(set(cfg.toy) - set(TOY_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown toy keys: {', '.join(unknown)}")
    spec = {**TOY_DEFAULTS, **cfg.toy}
    try:
        rows = verify_bound_rows(spec, cfg.seed)
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid toy network spec: {exc}") from exc
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bound.json", rows)
    print(json.dumps(rows, indent=2))
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_VERIFY


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    groups = tuple(g for g in args.groups.split(",") if g)
    model = synthetic.mixed_model(
        seed=args.seed if args.seed is not None else 0,
        n_layers=args.layers,
        n_rows=args.rows,
        n_cols=args.cols,
        groups=groups or ("default",),
        samples=args.samples,
        calib_form=args.calib_form,
    )
    out = Path(args.out or "synthetic")
    tensorio.write_container(model.tensors, out / "model")
    tensorio.write_calibration(model.calibration, out / "calib")
    return EXIT_OK


# --- entry point -----------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", help="model container directory")
    p.add_argument("--calib", help="calibration container directory")
    p.add_argument("--method", choices=factorize.METHODS)
    p.add_argument("--eps", type=float, help="uniform error tolerance in [0, 1]")
    p.add_argument("--eps-group", action="append", metavar="NAME=VAL", help="per-group tolerance (repeatable)")
    p.add_argument("--target-ratio", type=float, help="target compression ratio in [0, 1)")
    p.add_argument("--tau", type=int, help=f"ALS iterations (default {factorize.DEFAULT_TAU})")
    p.add_argument("--trim", type=float, help="outlier fraction dropped from envelopes (default 0.02)")
    p.add_argument("--jobs", type=int, help="worker threads for per-layer work")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--early-stop", action="store_true", help="stop ALS once relative improvement < 1e-9")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pareto-lowrank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("profile", "allocate", "compress", "sweep", "verify-bound"):
        p = sub.add_parser(name)
        _common(p)
        if name in ("sweep", "compress"):
            p.add_argument("--grid", help="comma-separated tolerances for the frontier sweep")
    g = sub.add_parser("gen-synthetic", help="write a seeded synthetic model and calibration set")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--layers", type=int, default=12)
    g.add_argument("--rows", type=int, default=64)
    g.add_argument("--cols", type=int, default=64)
    g.add_argument("--groups", default="default", help="comma-separated group labels, assigned round-robin")
    g.add_argument("--samples", type=int, help="calibration samples per layer (default 2*cols+8)")
    g.add_argument("--calib-form", choices=("cov", "act"), default="cov")
    return parser


COMMANDS = {
    "profile": cmd_profile,
    "allocate": cmd_allocate,
    "compress": cmd_compress,
    "sweep": cmd_sweep,
    "verify-bound": cmd_verify_bound,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (linalg.NotPositiveDefinite, linalg.SvdNotConverged, factorize.FactorizationError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
