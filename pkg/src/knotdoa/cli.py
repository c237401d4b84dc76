"""Command-line front end: ``simulate``, ``detect``, ``threshold`` and ``path``.

Exit codes: 0 on success, 1 on usage errors (bad flags, malformed or
invalid JSON), 2 on numeric or solver failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from ._pathcore import SolverFailure
from .detector import detect
from .group_lasso_path import group_knots
from .lasso_path import ContractViolation, general_knots, orthogonal_knots
from .montecarlo import ExperimentConfig, McFailure, reproduce, run_experiment
from .signal_model import ArrayConfig, ConstructionError, InvalidConfigError, Snapshot, build_array_model
from .stat_tests import NullContext, NumericError, TestKind, cdf_for, testD_eigenvalues, testE_eigen_pairs
from .thresholds import invert_cdf

USAGE, NUMERIC = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})") from None


def _write(text: str, out: str | None):
    if out in (None, "-"):
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _model(d: dict):
    """Model JSON: ``mode`` plus the :class:`ArrayConfig` fields.

    ``grid-matching`` builds the orthogonal model, which carries ``G``.
    """
    d = dict(d)
    mode = d.pop("mode", "orthogonal")
    if mode not in ("orthogonal", "oversampled", "grid-matching"):
        raise UsageError(f"unknown model mode {mode!r}")
    cfg = ArrayConfig.from_dict(d)
    return mode, build_array_model(cfg, "oversampled" if mode == "oversampled" else "orthogonal")


def _sigma(text):
    if text is None or text == "estimate":
        return text
    try:
        s = float(text)
    except ValueError:
        raise UsageError("--sigma takes a positive number or 'estimate'") from None
    if not s > 0:
        raise UsageError("--sigma must be positive")
    return s


def _cmd_simulate(a) -> int:
    if a.reproduce:
        kw = {}
        if a.workers:
            kw["workers"] = a.workers
        report, diff = reproduce(a.reproduce, a.trials or 10_000, a.seed if a.seed is not None else 2024, **kw)
        text = report.to_csv()
        if a.diff:
            lines = ["S,snr_db,metric,ours,reference,delta"]
            lines += [f"{S},{snr:g},{m},{o:.6g},{p:.6g},{d:+.4f}" for S, snr, m, o, p, d in diff]
            _write("\n".join(lines) + "\n", a.diff)
    else:
        if not a.config:
            raise UsageError("simulate needs --config or --reproduce")
        d = _read_json(a.config)
        if a.trials is not None:
            d["trials"] = a.trials
        if a.seed is not None:
            d["base_seed"] = a.seed
        if a.workers:
            d["workers"] = a.workers
        cfg = ExperimentConfig.from_dict(d)
        report = run_experiment(cfg)
        text = report.to_csv()
    _write(text, a.out)
    if a.json:
        _write(report.to_json(indent=2), a.json)
    return 0


def _cmd_detect(a) -> int:
    mode, model = _model(_read_json(a.model))
    snap = Snapshot.from_dict(_read_json(a.snapshot))
    test = TestKind.parse(a.test)
    need = {"orthogonal": "orthogonal", "oversampled": "general", "grid-matching": "grid-matching"}[mode]
    if test.model_kind != need:
        raise UsageError(f"test {test.value} does not fit model mode {mode}")
    sigma = _sigma(a.sigma)
    sigma2 = None
    if sigma == "estimate":
        sigma2 = "estimate"
    elif sigma is not None:
        sigma2 = sigma**2
    if sigma2 is None and test.needs_sigma:
        raise UsageError(f"test {test.value} needs --sigma")
    if snap.b.size != model.M:
        raise UsageError(f"snapshot has {snap.b.size} samples, model has {model.M} elements")
    res = detect(model, snap.b, test, a.pc, sigma2, refit=a.refit)
    _write(res.to_json(indent=2), a.out)
    return 0


def _cmd_threshold(a) -> int:
    test = TestKind.parse(a.test)
    if not 0 <= a.s < a.m:
        raise UsageError("--s must satisfy 0 <= s < m")
    n = a.m - a.s
    ctx = NullContext(n)
    if a.model and test in (TestKind.D, TestKind.E):
        mode, model = _model(_read_json(a.model))
        active = tuple(int(i) for i in a.active.split(",")) if a.active else ()
        if test is TestKind.D:
            ctx = NullContext(n, eigen_rho=tuple(testD_eigenvalues(model, active)))
        else:
            ctx = NullContext(n, eigen_pairs=tuple(testE_eigen_pairs(model, active)))
    eta = invert_cdf(cdf_for(test, ctx), a.pc)
    _write(f"{eta:.6g}", a.out)
    return 0


def _cmd_path(a) -> int:
    mode, model = _model(_read_json(a.model))
    snap = Snapshot.from_dict(_read_json(a.snapshot))
    b = snap.b
    rows = []
    if a.group:
        if model.G is None:
            raise UsageError("--group needs an orthogonal or grid-matching model")
        for kn in group_knots(model, model.A.conj().T @ b):
            rows.append((kn.tau, kn.entering_group, kn.removed))
    else:
        path = orthogonal_knots(model, b) if model.is_orthogonal else general_knots(model, b)
        rows = [(kn.tau, kn.entering_index, kn.removed) for kn in path.knots]
    lines = ["k,tau,index,event"]
    lines += [f"{k},{tau:.9g},{i},{'remove' if rem else 'enter'}" for k, (tau, i, rem) in enumerate(rows, 1)]
    _write("\n".join(lines) + "\n", a.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="knotdoa", description="Sparse DOA detection on lasso knots.")
    p.add_argument("--version", action="version", version=f"knotdoa {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a Monte-Carlo experiment and write a CSV report")
    s.add_argument("--config", help="experiment JSON (ExperimentConfig fields)")
    s.add_argument("--reproduce", metavar="TARGET", choices=[f"table{i}" for i in range(1, 8)] + ["fig1", "fig2", "fig3"],
                   help="run a reference table or event-B curve configuration instead of --config")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", default="-")
    s.add_argument("--json", help="also write a JSON summary here")
    s.add_argument("--diff", help="with --reproduce: write the comparison with the reference values here")
    s.set_defaults(func=_cmd_simulate)

    d = sub.add_parser("detect", help="detect sources in one snapshot")
    d.add_argument("--model", required=True)
    d.add_argument("--snapshot", required=True)
    d.add_argument("--test", default="B")
    d.add_argument("--pc", type=float, default=0.99)
    d.add_argument("--sigma", help="noise standard deviation per element, or 'estimate'")
    d.add_argument("--refit", action="store_true")
    d.add_argument("--out", default="-")
    d.set_defaults(func=_cmd_detect)

    t = sub.add_parser("threshold", help="print the threshold of a test")
    t.add_argument("--test", required=True)
    t.add_argument("--m", type=int, default=8, help="number of knots (array elements or groups)")
    t.add_argument("--s", type=int, default=0, help="hypothesised number of sources")
    t.add_argument("--pc", type=float, default=0.99)
    t.add_argument("--model", help="model JSON for Test-D/Test-E eigenvalues (unit eigenvalues otherwise)")
    t.add_argument("--active", help="comma-separated active indices for --model")
    t.add_argument("--out", default="-")
    t.set_defaults(func=_cmd_threshold)

    q = sub.add_parser("path", help="print the knots of the lasso or group-lasso path")
    q.add_argument("--model", required=True)
    q.add_argument("--snapshot", required=True)
    q.add_argument("--group", action="store_true")
    q.add_argument("--out", default="-")
    q.set_defaults(func=_cmd_path)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except McFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC
    except (SolverFailure, NumericError, ConstructionError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC
    except (UsageError, ContractViolation, InvalidConfigError, KeyError, ValueError, TypeError) as exc:
        msg = exc.args[0] if exc.args else exc.__class__.__name__
        print(f"error: {msg}", file=sys.stderr)
        return USAGE

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
