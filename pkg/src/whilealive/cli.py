"""Command-line interface: ``fit``, ``predict``, ``cv`` and ``simulate``.

Data products go to files (or stdout); warnings and errors go to stderr.
Exit status is 0 on success, 1 on I/O errors and 2 on model errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import re
import sys
import time
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .basis import FAMILY_CODES, BasisConfig
from .crossval import CvGrid, select
from .data import EventDataset, WeightScheme, read_csv, write_csv
from .estimator import CensoringSpec, FitResult, FitSpec, LinkFunction, solve
from .inference import global_wald, knot_table, predict_rate
from .simulator import SCENARIOS, ScenarioConfig, get_scenario, default_fit_spec, run_scenario, simulate_dataset

EXIT_OK, EXIT_IO, EXIT_MODEL = 0, 1, 2


class UsageError(ValueError):
    pass


# manifest ----------------------------------------------------------------------


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance record attached to every output."""

    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "version": self.version,
            "timestamp": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_time": round(time.time() - self.started, 6),
        }


def _args_config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# parsing helpers ---------------------------------------------------------------

_FORMULA = re.compile(r"^\s*(?:Surv\s*\(\s*\w+\s*,\s*\w+\s*\)\s*)?~(.*)$")


def parse_formula(formula: str) -> tuple[list[str], bool]:
    """Covariate names and intercept flag from ``Surv(time,status) ~ a + b``.

    The term ``1`` requests an intercept; there is no other expression algebra.
    """
    m = _FORMULA.match(formula)
    if not m:
        raise UsageError(f"cannot parse formula {formula!r}; expected 'Surv(time,status) ~ a + b'")
    terms = [t.strip() for t in m.group(1).split("+") if t.strip()]
    if not terms:
        raise UsageError("formula has no covariates")
    intercept = "1" in terms
    names = [t for t in terms if t != "1"]
    for t in names:
        if not re.fullmatch(r"[\w.]+", t):
            raise UsageError(f"unsupported formula term {t!r}; only plain column names are allowed")
    return names, intercept


def _floats(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(round(x)) for x in _floats(text))


def _names(text: str | None) -> tuple[str, ...] | None:
    return None if text is None else tuple(x.strip() for x in text.split(",") if x.strip())


def _load_data(args) -> EventDataset:
    data = read_csv(args.data, K=args.n_types)
    if data.cluster_mode and not args.cluster:
        data = EventDataset.from_arrays(
            data.Z,
            data.U,
            data.delta,
            data.event_subject,
            data.event_type,
            data.event_time,
            ids=list(data.ids),
            K=data.K,
            covariate_names=data.covariate_names,
        )
    elif args.cluster and not data.cluster_mode:
        raise UsageError("--cluster given but the data have no cluster column")
    if args.formula:
        names, intercept = parse_formula(args.formula)
        data = data.with_covariates(names, intercept)
    return data


def _weights(args, K: int) -> WeightScheme:
    wr = _floats(args.weights_recur)
    if wr is None:
        wr = (1.0,) * K
    if len(wr) != K:
        raise UsageError(f"--weights-recur has {len(wr)} values but the data have {K} recurrent types")
    return WeightScheme(wr, args.weight_term)


def _censoring(args, data: EventDataset) -> CensoringSpec:
    cov = _names(args.ipcw_formula)
    if cov is not None:
        missing = [c for c in cov if c not in data.covariate_names]
        if missing:
            raise UsageError(f"--ipcw-formula terms {missing} must also appear in the model formula")
    return CensoringSpec(method=args.ipcw, covariates=cov)


@contextmanager
def _output(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _write_json(obj, path: str | None) -> None:
    with _output(path) as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_rows(rows: list[dict], header: Sequence[str], path: str | None) -> None:
    with _output(path) as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _sidecar(manifest: RunManifest, path: str | None) -> None:
    if path is not None and path != "-":
        _write_json(manifest.to_dict(), f"{path}.manifest.json")


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# commands ----------------------------------------------------------------------


def fit_report(fit: FitResult, level: float = 0.95) -> dict:
    """Fit JSON with per-knot intervals and per-covariate Wald tests."""
    out = fit.to_dict()
    out["knots"] = knot_table(fit, level)
    out["wald"] = []
    for j, name in enumerate(fit.covariate_names):
        w = global_wald(fit, j)
        out["wald"].append({"covariate": name, "statistic": w.statistic, "df": w.df, "p_value": w.p_value})
    return out


def cmd_fit(args) -> int:
    manifest = RunManifest("fit", _args_config(args), args.seed, {args.data: _sha256(args.data)})
    data = _load_data(args)
    knots = _floats(args.knots)
    if not knots:
        raise UsageError("--knots is required")
    basis = BasisConfig(args.basis, knots, args.degree)
    tau = _floats(args.tau_grid) or tuple(k for k in knots if k > 0)
    spec = FitSpec(basis, tau, _weights(args, data.K), LinkFunction(args.link), _censoring(args, data))
    fit = solve(data, spec)
    report = fit_report(fit, args.level)
    report["manifest"] = manifest.to_dict()
    _write_json(report, args.out)
    if args.report:
        _write_rows(report["knots"], ["covariate", "t", "estimate", "se", "lower", "upper"], args.report)
        _sidecar(manifest, args.report)
    return EXIT_OK


def _read_newdata(path: str, names: Sequence[str]):
    """Subject ids, covariate rows and optional per-row times from a CSV.

    Long-format files are accepted; the first row of each id supplies its
    covariates.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return [], np.empty((0, len(names))), None
        pos = {h: j for j, h in enumerate(header)}
        if "id" not in pos:
            raise UsageError(f"{path}: newdata needs an id column")
        missing = [nm for nm in names if nm != "(Intercept)" and nm not in pos]
        if missing:
            raise UsageError(f"{path}: newdata lacks fitted covariates {missing}")
        per_row_t = "t" in pos
        ids, Z, ts, seen = [], [], [], set()
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            sid = row[pos["id"]].strip()
            if not per_row_t:
                if sid in seen:
                    continue
                seen.add(sid)
            ids.append(sid)
            Z.append([1.0 if nm == "(Intercept)" else float(row[pos[nm]]) for nm in names])
            if per_row_t:
                ts.append(float(row[pos["t"]]))
    return ids, np.asarray(Z, dtype=float).reshape(-1, len(names)), (np.asarray(ts) if per_row_t else None)


def cmd_predict(args) -> int:
    manifest = RunManifest(
        "predict", _args_config(args), args.seed, {p: _sha256(p) for p in (args.fit, args.newdata)}
    )
    with open(args.fit, encoding="utf-8") as fh:
        fit = FitResult.from_dict(json.load(fh))
    ids, Z, per_row_t = _read_newdata(args.newdata, fit.covariate_names)
    rows_id, rows_t, rows_z = [], [], []
    if per_row_t is not None:
        rows_id, rows_t, rows_z = ids, list(per_row_t), list(Z)
    else:
        times = _floats(args.times) or fit.spec.tau_grid
        for sid, z in zip(ids, Z):
            for t in times:
                rows_id.append(sid)
                rows_t.append(t)
                rows_z.append(z)
    last = fit.spec.basis.knots[-1]
    beyond = sorted({t for t in rows_t if t > last})
    if beyond:
        _warn(f"times {beyond} lie past the last knot {last}; the basis is clamped there")
    rows = []
    if rows_id:
        mu, lb, ub = predict_rate(fit, np.asarray(rows_z), np.asarray(rows_t, dtype=float), args.level)
        rows = [
            {"id": i, "t": float(t), "mu": float(m), "lb": float(lo), "ub": float(hi)}
            for i, t, m, lo, hi in zip(rows_id, rows_t, mu, lb, ub)
        ]
    _write_rows(rows, ["id", "t", "mu", "lb", "ub"], args.out)
    _sidecar(manifest, args.out)
    return EXIT_OK


def cmd_cv(args) -> int:
    manifest = RunManifest("cv", _args_config(args), args.seed, {args.data: _sha256(args.data)})
    data = _load_data(args)
    grid = CvGrid(
        weights=_weights(args, data.K),
        families=_names(args.basis_set),
        degrees=_ints(args.degree_vec),
        n_interior=_ints(args.n_int_vec),
        links=_names(args.link_set),
        knot_scheme=args.knot_scheme,
        K=args.folds,
        seed=args.seed if args.seed is not None else 0,
        time_range=_floats(args.time_range),
        T=args.T,
        n_stack=args.n_stack,
        censoring=_censoring(args, data),
    )
    res = select(data, grid, n_jobs=args.threads)
    for r in res.rows():
        if r["reason"]:
            _warn(f"configuration {r['index']} disqualified: {r['reason']}")
    header = ["index", "family", "degree", "n_interior", "link", "pe", "status", "reason", "selected"]
    _write_rows(res.rows(), header, args.out)
    _sidecar(manifest, args.out)
    best = res.best
    selection = {
        "selected": {"index": res.selected, **best.__dict__, "pe": float(res.pe[res.selected])},
        "tau": res.tau,
        "tau_grid": list(res.tau_grid),
        "manifest": manifest.to_dict(),
    }
    if args.selection is None:
        print(f"selected: {best.label()} (PE {res.pe[res.selected]:.6g})", file=sys.stderr)
    else:
        _write_json(selection, args.selection)
    return EXIT_OK


def _load_scenario(text: str, n: int | None, weights) -> ScenarioConfig:
    p = Path(text)
    if text.endswith(".json") or (p.exists() and p.is_file()):
        with open(p, encoding="utf-8") as fh:
            sc = ScenarioConfig.from_dict(json.load(fh))
    else:
        sc = get_scenario(text)
    over = {}
    if n is not None:
        over["n_clusters" if sc.n_clusters is not None else "n"] = n
    if weights is not None:
        over["weights"] = WeightScheme(weights[:-1], weights[-1])
    return ScenarioConfig(**{**sc.__dict__, **over}) if over else sc


def cmd_simulate(args) -> int:
    inputs = {args.scenario: _sha256(args.scenario)} if Path(args.scenario).is_file() else {}
    manifest = RunManifest("simulate", _args_config(args), args.seed, inputs)
    sc = _load_scenario(args.scenario, args.n, _floats(args.weights))
    seed = args.seed if args.seed is not None else 0
    ipcw = args.ipcw or ("cox" if sc.censoring is not None and sc.censoring.theta else "km")
    knots = _floats(args.knots) or (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
    spec = default_fit_spec(sc.weights, ipcw, knots)
    if args.emit_data:
        out_dir = Path(args.emit_data)
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in range(args.replicates):
            write_csv(simulate_dataset(sc, seed, r), out_dir / f"replicate_{r:04d}.csv")
    table = run_scenario(sc, spec, args.replicates, seed, superpop_n=args.superpop_n, n_jobs=args.threads)
    for reason in table.failure_reasons:
        _warn(reason)
    header = ["time", "coef", "true", "mean", "abias", "mcsd", "aese", "cp"]
    _write_rows(table.rows(), header, args.out)
    _sidecar(manifest, args.out)
    if args.summary:
        _write_json(
            {
                "scenario": sc.to_dict(),
                "replicates": table.replicates,
                "failures": table.failures,
                "metrics": table.rows(),
                "manifest": manifest.to_dict(),
            },
            args.summary,
        )
    return EXIT_OK


# parser ------------------------------------------------------------------------


def _common(parser, *, seed_default):
    parser.add_argument("--seed", type=int, default=seed_default, help="random seed")
    threads_default = argparse.SUPPRESS if seed_default is argparse.SUPPRESS else 1
    parser.add_argument("--threads", type=int, default=threads_default,
                        help="maximum worker processes (-1 for all cores)")


def _data_args(p):
    p.add_argument("data", help="long-format CSV: id,[cluster,]time,status,covariates...")
    p.add_argument("--formula", help="'Surv(time,status) ~ a + b'; the term 1 adds an intercept")
    p.add_argument("--n-types", type=int, help="number of recurrent event types (default: max status - 1)")
    p.add_argument("--weights-recur", help="comma-separated recurrent-type weights (default all 1)")
    p.add_argument("--weight-term", type=float, default=1.0, help="terminal-event weight")
    p.add_argument("--ipcw", choices=("km", "cox"), default="km", help="censoring model")
    p.add_argument("--ipcw-formula", help="comma-separated censoring covariates (cox only)")
    p.add_argument("--cluster", action="store_true", help="use the cluster column for robust variance and folds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="whilealive", description="While-alive loss-rate regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common(parser, seed_default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    families = sorted(set(FAMILY_CODES) | set(FAMILY_CODES.values()))

    p = sub.add_parser("fit", help="fit a stacked model and write a JSON report")
    _data_args(p)
    _common(p, seed_default=argparse.SUPPRESS)
    p.add_argument("--knots", required=True, help="comma-separated knots")
    p.add_argument("--tau-grid", help="comma-separated stacking times (default: positive knots)")
    p.add_argument("--basis", default="st", choices=families, help="basis family")
    p.add_argument("--degree", type=int, default=0, help="spline degree")
    p.add_argument("--link", default="log", choices=("log", "identity"))
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--out", help="fit JSON path (default stdout)")
    p.add_argument("--report", help="also write the per-knot interval table as CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predicted rates with intervals from a fit JSON")
    _common(p, seed_default=argparse.SUPPRESS)
    p.add_argument("fit", help="fit JSON written by 'fit'")
    p.add_argument("newdata", help="CSV with id and covariate columns, optionally t")
    p.add_argument("--times", help="comma-separated prediction times (default: stacking grid)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="cross-validated basis selection")
    _data_args(p)
    _common(p, seed_default=argparse.SUPPRESS)
    p.add_argument("--basis-set", default="bz", help="comma-separated families")
    p.add_argument("--degree-vec", default="1", help="comma-separated degrees")
    p.add_argument("--n-int-vec", default="2", help="comma-separated interior-knot counts")
    p.add_argument("--link-set", default="log", help="comma-separated links")
    p.add_argument("--knot-scheme", choices=("equidist", "quantile"), default="equidist")
    p.add_argument("--time-range", help="'lo,hi' knot range and integration window")
    p.add_argument("--K", "--folds", dest="folds", type=int, default=5, help="number of folds")
    p.add_argument("--T", type=int, default=100, help="trapezoid points for the prediction error")
    p.add_argument("--n-stack", type=int, default=20, help="size of the stacking grid")
    p.add_argument("--out", help="configuration CSV (default stdout)")
    p.add_argument("--selection", help="selection JSON path (default <out>.selection.json)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="replication study for a scenario")
    _common(p, seed_default=argparse.SUPPRESS)
    p.add_argument("--scenario", required=True, help=f"label ({', '.join(SCENARIOS)}) or scenario JSON")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--n", type=int, help="override subjects (or clusters) per replicate")
    p.add_argument("--weights", help="override weights 'w1,...,wK,wD'")
    p.add_argument("--knots", help="step-basis knots (default 1,1.5,...,4)")
    p.add_argument("--ipcw", choices=("km", "cox"), help="censoring model (default: cox if censoring depends on Z)")
    p.add_argument("--superpop-n", type=int, default=10**6, help="oracle super-population size")
    p.add_argument("--out", help="metrics CSV (default stdout)")
    p.add_argument("--summary", help="metrics JSON path")
    p.add_argument("--emit-data", help="directory for one CSV per replicate")
    p.set_defaults(func=cmd_simulate)
    return parser


def _failing_module(exc: BaseException) -> str:
    """Innermost package module in the traceback (``cli`` if none)."""
    pkg = Path(__file__).parent
    module = "cli"
    tb = exc.__traceback__
    while tb is not None:
        f = Path(tb.tb_frame.f_code.co_filename)
        if f.parent == pkg:
            module = f.stem
        tb = tb.tb_next
    return module


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "cv" and args.selection is None:
        args.selection = f"{args.out}.selection.json" if args.out and args.out != "-" else None
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError, KeyError, np.linalg.LinAlgError) as exc:
        module = _failing_module(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error [{module}]: {msg}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
