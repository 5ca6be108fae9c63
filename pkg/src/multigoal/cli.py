"""Command line front end: CSV ingestion, commands and report emission.

Reports are JSON (default) or CSV. Both embed the schema version, the
resolved run configuration and the seed, and print floats with Python's
shortest round-trip representation. Failures exit nonzero and print a JSON
error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import posterior_summary
from .core import AreaLevelDataset
from .estimators import FitMethod, fit
from .likelihood import AdjustmentSpec, PriorSpec
from .mse import BootstrapConfig, bootstrap_mse, g_components
from .nerm import NermDesign, Psi, adjustment_gradient, curvature_h, fisher_inverse
from .nerm import shrinkage as nerm_shrinkage
from .nerm import shrinkage_gradient, shrinkage_hessian
from .verify import SimulationConfig, bias_study, theorem_study

SCHEMA_VERSION = "1"


class InputError(ValueError):
    """Malformed input file or configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def ingest_csv(path, method: str | None = None) -> AreaLevelDataset:
    """Read ``area_id,y,D,x1,...,xp`` (UTF-8, decimal point) preserving row order."""
    text = Path(path).read_text(encoding="utf-8-sig")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not any(c.strip() for c in rows[0]):
        raise InputError("no data rows")
    header = [c.strip() for c in rows[0]]
    p = len(header) - 3
    expected = ["area_id", "y", "D"] + [f"x{k}" for k in range(1, p + 1)]
    if p < 1 or header != expected:
        raise InputError(f"header must be area_id,y,D,x1,...,xp; got {','.join(header)}", line=1)
    ids, y, D, X = [], [], [], []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
        vals = []
        for name, cell in zip(header[1:], row[1:]):
            try:
                v = float(cell.strip())
            except ValueError:
                raise InputError(f"column {name}: not a number: {cell!r}", line=lineno) from None
            if not math.isfinite(v):
                raise InputError(f"column {name}: non-finite value {cell!r}", line=lineno)
            vals.append(v)
        aid = row[0].strip()
        if not aid:
            raise InputError("empty area_id", line=lineno)
        if aid in seen:
            raise InputError(f"duplicate area_id {aid!r} (first seen on line {seen[aid]})", line=lineno)
        if vals[1] <= 0:
            raise InputError(f"sampling variance D must be positive, got {vals[1]!r}", line=lineno)
        seen[aid] = lineno
        ids.append(aid)
        y.append(vals[0])
        D.append(vals[1])
        X.append(vals[2:])
    if not ids:
        raise InputError("no data rows")
    data = AreaLevelDataset(np.array(y), np.array(D), np.array(X), tuple(ids))
    if method == "mg" and data.m <= data.p + 2:
        warnings.warn(f"the multi-goal method needs m > p + 2 (m={data.m}, p={data.p})", stacklevel=2)
    return data


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, allow_nan=False)
    return str(v)


def _write_csv(report: dict, tables: dict[str, list[dict]]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version: {report['schema_version']}\n")
    buf.write(f"# command: {report['command']}\n")
    buf.write(f"# config: {json.dumps(report['config'], allow_nan=False, sort_keys=True)}\n")
    multi = len(tables) > 1
    cols: list[str] = ["table"] if multi else []
    for rows in tables.values():
        for r in rows:
            cols.extend(k for k in r if k not in cols)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for name, rows in tables.items():
        for r in rows:
            w.writerow([_cell(name if c == "table" and multi else r.get(c)) for c in cols])
    return buf.getvalue()


def emit(report: dict, fmt: str, output: str | None, tables: dict[str, list[dict]]):
    report = _clean(report)
    tables = _clean(tables)
    if fmt == "json":
        text = json.dumps({**report, **tables}, indent=1, allow_nan=False) + "\n"
    else:
        text = _write_csv(report, tables)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _report(command: str, config: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "package_version": __version__,
            "config": config, "seed": config.get("seed")}


# ---------------------------------------------------------------------------
# configuration helpers
# ---------------------------------------------------------------------------

def parse_method(name: str, s: float | None = None) -> FitMethod:
    if name == "reml":
        return FitMethod.reml()
    if name == "ml":
        return FitMethod.ml()
    if name == "mg":
        return FitMethod.multigoal()
    if name == "adj-power":
        if s is None:
            raise UsageError("method adj-power needs --s")
        return FitMethod.power(s)
    raise UsageError(f"unknown method {name!r}")


def parse_prior(name: str, s: float | None = None, weights: str | None = None, m: int | None = None) -> PriorSpec:
    if name == "flat":
        return PriorSpec.flat()
    if name == "mg":
        return PriorSpec.multigoal()
    if name == "general-mg":
        if s is None:
            raise UsageError("prior general-mg needs --s")
        return PriorSpec.general_mg(AdjustmentSpec.power(s))
    if name == "weighted-trace":
        if weights in (None, "uniform"):
            return PriorSpec.weighted_trace()
        w = np.loadtxt(weights, delimiter=",", ndmin=1)
        if m is not None and w.size != m:
            raise InputError(f"weights file has {w.size} values for {m} areas")
        return PriorSpec.weighted_trace(w)
    raise UsageError(f"unknown prior {name!r}")


def _base_config(args, **extra) -> dict:
    cfg = {"command": args.command, "input": getattr(args, "input", None), "format": args.format}
    cfg.update(extra)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    data = ingest_csv(args.input, args.method)
    method = parse_method(args.method, args.s)
    f = fit(data, method, beta_mode=args.beta_mode)
    rows = []
    for i, aid in enumerate(data.area_ids):
        row = {"area_id": aid, "A_hat": f.A_hat[i], "B_hat": f.B_hat[i], "theta_hat": f.theta_hat[i],
               "g1": None, "g2": None, "g3": None, "mse_taylor": None, "status": f.diagnostics[i].status}
        if f.A_hat[i] > 0:   # the g-components are defined on A > 0 only
            g = g_components(data, f.A_hat[i], i)
            row.update(g1=g.g1, g2=g.g2, g3=g.g3, mse_taylor=g.taylor_total)
        rows.append(row)
    cfg = _base_config(args, method=args.method, s=args.s, beta_mode=args.beta_mode)
    return _report("fit", cfg), {"results": rows}


def _bayes_rows(data, priors: dict[str, PriorSpec], rtol):
    rows = []
    for label, prior in priors.items():
        ps = posterior_summary(data, prior, rtol=rtol)
        for k, aid in enumerate(ps.area_ids):
            d = ps.diagnostics[k]
            rows.append({"area_id": aid, "prior": label, "e_b": ps.e_b[k], "v_b": ps.v_b[k],
                         "e_theta": ps.e_theta[k], "v_theta": ps.v_theta[k],
                         "node_count": d["node_count"], "normalization_log": d["normalization_log"]})
    return rows


def cmd_bayes(args):
    data = ingest_csv(args.input)
    names = args.prior or ["mg", "flat"]
    priors = {n: parse_prior(n, args.s, args.weights, data.m) for n in names}
    rows = _bayes_rows(data, priors, args.rtol)
    cfg = _base_config(args, priors=names, s=args.s, weights=args.weights, rtol=args.rtol)
    return _report("bayes", cfg), {"results": rows}


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} needs an explicit --seed")


def cmd_bootstrap(args):
    _require_seed(args)
    data = ingest_csv(args.input, args.method)
    method = parse_method(args.method, args.s)
    f = fit(data, method)
    cfg_b = BootstrapConfig(replicates=args.replicates, seed=args.seed, antithetic=args.antithetic)
    res = bootstrap_mse(data, f, cfg_b, generating=args.generating, n_jobs=args.n_jobs)
    rows = [{"area_id": aid, "A_hat": f.A_hat[k], "mse_boot": res.estimate[k],
             "mc_stderr": None if res.mc_stderr is None else res.mc_stderr[k], "failed": res.failed[k]}
            for k, aid in enumerate(res.area_ids)]
    cfg = _base_config(args, method=args.method, s=args.s, replicates=args.replicates, seed=args.seed,
                       generating=args.generating, antithetic=args.antithetic)
    return _report("bootstrap", cfg), {"results": rows}


def cmd_tables(args):
    """Per-area tables: shrinkage estimates (table_1) and MSE / posterior variances (table_2)."""
    _require_seed(args)
    data = ingest_csv(args.input, "mg")
    f = fit(data, FitMethod.multigoal())
    mg = posterior_summary(data, PriorSpec.multigoal(), rtol=args.rtol)
    flat = posterior_summary(data, PriorSpec.flat(), rtol=args.rtol)
    boot = None
    if args.replicates > 0:
        boot = bootstrap_mse(data, f, BootstrapConfig(args.replicates, args.seed), n_jobs=args.n_jobs)
    order = sorted(range(data.m), key=lambda i: (-f.B_hat[i], i))
    t1, t2 = [], []
    for i in order:
        aid = data.area_ids[i]
        t1.append({"area_id": aid, "D": data.D[i], "MGF": f.B_hat[i], "MGP": mg.e_b[i], "SHP": flat.e_b[i]})
        t2.append({"area_id": aid, "D": data.D[i],
                   "PB.MG": None if boot is None else boot.estimate[i],
                   "PB.MG_stderr": None if boot is None else boot.mc_stderr[i] if boot.mc_stderr is not None else None,
                   "MGF": g_components(data, f.A_hat[i], i).taylor_total,
                   "MGP_var": mg.v_theta[i], "SHP_var": flat.v_theta[i]})
    cfg = _base_config(args, replicates=args.replicates, seed=args.seed, rtol=args.rtol,
                       shp_stand_in="flat")
    return _report("tables", cfg), {"table_1": t1, "table_2": t2}


def cmd_simulate(args):
    try:
        spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"config is not valid JSON: {e.msg}", line=e.lineno) from None
    if not isinstance(spec, dict):
        raise InputError("config must be a JSON object")
    allowed = {"study", "simulation", "m_ladder", "s", "priors", "bootstrap_replicates", "include_records"}
    unknown = set(spec) - allowed
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    sim = spec.get("simulation", {})
    if "seed" not in sim:
        raise UsageError("simulation config needs an explicit seed")
    cfg = SimulationConfig.from_dict(sim)
    study = spec.get("study")
    if study == "bias":
        rep = bias_study(cfg, spec.get("priors", ["mg", "flat"]), spec.get("m_ladder"), n_jobs=args.n_jobs)
    elif study in ("theorem1", "theorem2", "corollary1", "properties"):
        rep = theorem_study(cfg, study, spec.get("m_ladder", [25, 50, 100, 200]), s=spec.get("s", 1.0),
                            bootstrap_replicates=spec.get("bootstrap_replicates", 0), n_jobs=args.n_jobs)
    else:
        raise InputError(f"unknown study {study!r}")
    report = _report("simulate", {"command": "simulate", "format": args.format, **spec, "seed": cfg.seed})
    report["status"] = rep.status
    report["notes"] = rep.notes
    tables = {"rows": rep.rows, "checks": rep.checks}
    if spec.get("include_records", False):
        tables["records"] = rep.records
    return report, tables


def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of numbers") from None


def cmd_nerm_grad(args):
    design = NermDesign(_floats(args.n, "--n"))
    psi = Psi(args.sigma_v2, args.sigma_e2)
    i = args.area_index
    if not 0 <= i < design.m:
        raise UsageError(f"--area-index must be in [0, {design.m - 1}]")
    n_i = design.n[i]
    row = {"area_index": i, "n_i": n_i, "B": nerm_shrinkage(psi, n_i),
           "fisher_inverse": fisher_inverse(design, psi), "shrinkage_gradient": shrinkage_gradient(psi, n_i),
           "shrinkage_hessian": shrinkage_hessian(psi, n_i), "H": curvature_h(design, psi, i)}
    if args.k is not None:
        row["k"] = _floats(args.k, "--k")
        row["adjustment_gradient"] = adjustment_gradient(design, psi, i, row["k"])
    cfg = {"command": "nerm-grad", "format": args.format, "n": design.n.tolist(),
           "sigma_v2": args.sigma_v2, "sigma_e2": args.sigma_e2, "area_index": i, "k": args.k}
    return _report("nerm-grad", cfg), {"results": [row]}


def synthetic_saipe(seed: int, m: int = 51) -> AreaLevelDataset:
    """SAIPE-shaped synthetic data: intercept plus three covariates, D log-spaced over a decade."""
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, m])))
    X = np.column_stack([np.ones(m), g.normal(0.0, 1.0, size=(m, 3))])
    beta = np.array([12.0, 2.0, -1.0, 1.5])
    D = np.geomspace(0.8, 8.0, m)[g.permutation(m)]
    A = 2.0
    theta = X @ beta + math.sqrt(A) * g.standard_normal(m)
    y = theta + np.sqrt(D) * g.standard_normal(m)
    return AreaLevelDataset(y, D, X, tuple(f"{k + 1:02d}" for k in range(m)))


def write_dataset_csv(data: AreaLevelDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["area_id", "y", "D"] + [f"x{k}" for k in range(1, data.p + 1)])
    for i, aid in enumerate(data.area_ids):
        w.writerow([aid, repr(float(data.y[i])), repr(float(data.D[i]))] + [repr(float(v)) for v in data.X[i]])
    return buf.getvalue()


def cmd_synth(args):
    _require_seed(args)
    if args.m < 6:
        raise UsageError("--m must be at least 6 (four regression columns plus m > p + 2)")
    text = write_dataset_csv(synthetic_saipe(args.seed, args.m))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return None


COMMANDS = {"fit": cmd_fit, "bayes": cmd_bayes, "bootstrap": cmd_bootstrap, "simulate": cmd_simulate,
            "nerm-grad": cmd_nerm_grad, "synth": cmd_synth, "tables": cmd_tables}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multigoal", description="Fay-Herriot multi-goal estimation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, with_input=True):
        if with_input:
            sp.add_argument("--input", required=True, help="CSV with header area_id,y,D,x1,...,xp")
        sp.add_argument("--format", choices=["json", "csv"], default="json")
        sp.add_argument("--output", help="output path (default: stdout)")

    sp = sub.add_parser("fit", help="variance estimate, EBLUP and Taylor MSE per area")
    common(sp)
    sp.add_argument("--method", choices=["ml", "reml", "adj-power", "mg"], default="mg")
    sp.add_argument("--s", type=float, help="exponent of the power adjustment")
    sp.add_argument("--beta-mode", choices=["diagonal", "per_area"], default="diagonal")

    sp = sub.add_parser("bayes", help="posterior summaries per area and prior")
    common(sp)
    sp.add_argument("--prior", action="append", choices=["flat", "mg", "general-mg", "weighted-trace"],
                    help="repeatable; default: mg and flat")
    sp.add_argument("--s", type=float, help="power exponent for general-mg")
    sp.add_argument("--weights", help="weighted-trace weights file (one comma-separated row) or 'uniform'")
    sp.add_argument("--rtol", type=float, default=1e-8, help="quadrature tolerance")

    sp = sub.add_parser("bootstrap", help="parametric bootstrap MSE per area")
    common(sp)
    sp.add_argument("--method", choices=["ml", "reml", "adj-power", "mg"], default="mg")
    sp.add_argument("--s", type=float)
    sp.add_argument("--replicates", type=int, default=10_000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--generating", choices=["per_area", "heterogeneous"], default="per_area")
    sp.add_argument("--antithetic", action="store_true")
    sp.add_argument("--n-jobs", type=int, default=1)

    sp = sub.add_parser("tables", help="per-area comparison tables of shrinkage and MSE estimates")
    common(sp)
    sp.add_argument("--replicates", type=int, default=10_000, help="bootstrap replicates (0 skips PB.MG)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rtol", type=float, default=1e-8)
    sp.add_argument("--n-jobs", type=int, default=1)

    sp = sub.add_parser("simulate", help="run a simulation study from a JSON config")
    common(sp, with_input=False)
    sp.add_argument("--config", required=True)
    sp.add_argument("--n-jobs", type=int, default=1)

    sp = sub.add_parser("nerm-grad", help="nested-error-regression formulas at one psi")
    common(sp, with_input=False)
    sp.add_argument("--n", required=True, help="comma-separated unit counts per area")
    sp.add_argument("--sigma-v2", type=float, required=True)
    sp.add_argument("--sigma-e2", type=float, required=True)
    sp.add_argument("--area-index", type=int, default=0, help="0-based area index")
    sp.add_argument("--k", help="direction for the adjustment gradient, e.g. 1,0")

    sp = sub.add_parser("synth", help="write a SAIPE-shaped synthetic CSV")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--m", type=int, default=51)
    sp.add_argument("--output")
    return p


def main(argv=None) -> int:
    """Entry point; returns the process exit code (0 success, 2 usage or input error, 1 otherwise)."""
    try:
        args = build_parser().parse_args(argv)
        out = COMMANDS[args.command](args)
        if out is not None:
            emit(out[0], args.format, args.output, out[1])
        return 0
    except SystemExit as e:   # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001  every failure becomes an error record
        code = 2 if isinstance(e, (UsageError, InputError)) else 1
        rec = {"schema_version": SCHEMA_VERSION, "error": {"type": type(e).__name__, "message": str(e)}}
        if getattr(e, "line", None) is not None:
            rec["error"]["line"] = e.line
        sys.stderr.write(json.dumps(rec) + "\n")
        return code


def main_exit():
    sys.exit(main())
