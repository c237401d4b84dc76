"""Monte-Carlo reproduction of detection rates, P(B) curves and offset RMSE.

Every trial derives its own generator from ``base_seed XOR counter`` where
the counter is a splitmix64 scramble of the scenario position and the trial
number, so results do
not depend on execution order or on the number of workers. Within a trial
the source phases are drawn first (uniform on ``[0, 2 pi)``), then the noise.
All tests of one experiment see the same snapshots.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from ._pathcore import SolverFailure
from .detector import detect, score
from .lasso_path import ContractViolation
from .signal_model import ArrayConfig, ArrayModel, Scenario, build_array_model, complex_normal, source_signal
from .stat_tests import NumericError, TestKind, cdf_for, NullContext
from .thresholds import ThresholdTable, build_table, invert_cdf

__all__ = [
    "CSV_COLUMNS",
    "ExperimentConfig",
    "McFailure",
    "McReport",
    "McRow",
    "DEFAULT_PLACEMENTS",
    "TABLE_SETUPS",
    "reference_values",
    "reproduce",
    "reproduce_tables",
    "run_experiment",
    "trial_snapshot",
]

CSV_COLUMNS = ["test", "S", "snr_db", "pc_hat", "pf_hat", "pm_hat", "pb_hat", "rmse", "trials", "ci_halfwidth"]

# 0-based grid indices of the simulated sources, by model and source count
DEFAULT_PLACEMENTS = {
    "orthogonal": {1: (4,), 2: (2, 5), 3: (1, 3, 5), 4: (1, 3, 5, 6)},
    "oversampled": {1: (8,), 2: (6, 9), 3: (5, 8, 11), 4: (4, 7, 10, 13)},
    "grid-matching": {1: (4,), 2: (2, 5), 3: (1, 3, 5), 4: (0, 2, 4, 6)},
}

DEFAULT_SNR = tuple(range(5, 55, 5))

# table id -> (mode, test)
TABLE_SETUPS = {
    1: ("orthogonal", "cov-asymp"),
    2: ("orthogonal", "cov-exact"),
    3: ("orthogonal", "A"),
    4: ("orthogonal", "B"),
    5: ("orthogonal", "C"),
    6: ("oversampled", "D"),
    7: ("grid-matching", "E"),
}


class McFailure(RuntimeError):
    """More than 0.1% of the trials hit a solver or numeric failure."""

    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class ExperimentConfig:
    """One Monte-Carlo experiment.

    ``mode`` is ``orthogonal``, ``oversampled`` or ``grid-matching``.
    ``offset`` is the source offset as a fraction of the bin width
    (grid-matching only). ``placements`` defaults to the reference source
    positions for the mode.
    """

    mode: str = "orthogonal"
    M: int = 8
    N: int | None = None
    tests: tuple = ("B",)
    pc: float = 0.99
    S_values: tuple = (1,)
    snr_grid_db: tuple = (20.0,)
    trials: int = 10_000
    base_seed: int = 2024
    offset: float = 0.0
    placements: dict | None = None
    sigma: str = "known"
    scan: str = "forward"
    refit: bool = False
    workers: int = 1
    detect: bool = True

    def __post_init__(self):
        if self.mode not in DEFAULT_PLACEMENTS:
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if self.N is None:
            self.N = 2 * self.M if self.mode == "oversampled" else self.M
        self.tests = tuple(TestKind.parse(t) for t in self.tests)
        self.S_values = tuple(int(s) for s in self.S_values)
        self.snr_grid_db = tuple(float(s) for s in self.snr_grid_db)
        if self.trials < 100:
            raise ContractViolation("trials must be at least 100")
        if not self.snr_grid_db:
            raise ContractViolation("snr grid must not be empty")
        if self.sigma not in ("known", "estimate"):
            raise ContractViolation("sigma must be 'known' or 'estimate'")
        for t in self.tests:
            need = {"orthogonal": "orthogonal", "oversampled": "general", "grid-matching": "grid-matching"}[self.mode]
            if t.model_kind != need:
                raise ContractViolation(f"test {t.value} does not fit mode {self.mode}")
        if self.placements is None:
            self.placements = dict(DEFAULT_PLACEMENTS[self.mode]) if self.M == 8 else {}
        self.placements = {int(k): tuple(int(i) for i in v) for k, v in self.placements.items()}
        for s in self.S_values:
            if s not in self.placements:
                raise ContractViolation(f"no source placement for S={s}")
            if len(self.placements[s]) != s:
                raise ContractViolation(f"placement for S={s} has the wrong length")

    def model(self) -> ArrayModel:
        cfg = ArrayConfig(self.M, self.N)
        return build_array_model(cfg, "oversampled" if self.mode == "oversampled" else "orthogonal")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tests"] = [t.value for t in self.tests]
        d["placements"] = {str(k): list(v) for k, v in self.placements.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractViolation(f"unknown config fields {sorted(extra)}")
        d = dict(d)
        for key in ("tests", "S_values", "snr_grid_db"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class McRow:
    test: str
    S: int
    snr_db: float
    pc_hat: float
    pf_hat: float
    pm_hat: float
    pb_hat: float
    rmse: float
    trials: int
    ci_halfwidth: float
    failures: int = 0
    wall_time: float = 0.0
    counts: dict = field(default_factory=dict)


@dataclass
class McReport:
    config: ExperimentConfig
    rows: list
    thresholds: dict = field(default_factory=dict)
    """Per test: ``(NullContext, eta)`` for every threshold the detectors used."""

    def row(self, test, S, snr_db) -> McRow:
        test = "none" if test in (None, "none") else TestKind.parse(test).value
        for r in self.rows:
            if r.test == test and r.S == S and r.snr_db == float(snr_db):
                return r
        raise KeyError((test, S, snr_db))

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.test, r.S, _fmt(r.snr_db), _fmt(r.pc_hat), _fmt(r.pf_hat), _fmt(r.pm_hat),
                _fmt(r.pb_hat), "" if math.isnan(r.rmse) else _fmt(r.rmse), r.trials, _fmt(r.ci_halfwidth),
            ])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rows": [
                {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
                for r in self.rows
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), **kw)


def _fmt(v) -> str:
    return f"{v:.6g}"


def ci_halfwidth(p: float, n: int) -> float:
    """95% normal-approximation half width ``1.96 sqrt(p (1 - p) / n)``."""
    return 1.96 * math.sqrt(p * (1.0 - p) / n) if n else float("nan")


# ---------------------------------------------------------------------------
# trials


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _counter(si: int, ki: int, t: int) -> int:
    """Scrambled trial counter; XOR-ed with the base seed to seed one trial.

    The scramble keeps nearby base seeds from reproducing a permutation of
    the same trials, which a raw ``base_seed ^ t`` would do.
    """
    return _splitmix64((si << 48) | (ki << 32) | t)


def trial_snapshot(model: ArrayModel, indices, snr_db: float, offsets, seed: int):
    """``(Scenario, b)`` of one trial: equal powers, uniform random phases."""
    rng = np.random.default_rng(seed)
    S = len(indices)
    phases = rng.uniform(0.0, 2.0 * math.pi, S)
    scen = Scenario.equal_power(tuple(indices), snr_db, offsets=offsets if S else None, phases=phases)
    b = source_signal(model, scen) + complex_normal(rng, model.M, scen.noise_variance)
    return scen, b


def _offsets(cfg: ExperimentConfig, model: ArrayModel, S: int):
    if cfg.mode != "grid-matching" or cfg.offset == 0:
        return None
    return cfg.offset * model.cfg.bin_width


def _empty_counts():
    return {"correct": 0, "miss": 0, "false_alarm": 0, "event_b": 0, "failures": 0, "sq_err": 0.0, "n_err": 0}


def _merge(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def _orthogonal_block(cfg, model, tables, S, snr, si, ki, trials):
    """Vectorised Algorithm 1 for a block of trials on the orthogonal model.

    Mirrors :func:`knotdoa.detector.detect_orthogonal` (same statistics,
    thresholds and tie handling) without building per-trial objects.
    """
    M = model.M
    idx = cfg.placements[S]
    B = np.empty((len(trials), M), dtype=complex)
    s2 = None
    for r, t in enumerate(trials):
        scen, b = trial_snapshot(model, idx, snr, None, cfg.base_seed ^ _counter(si, ki, t))
        B[r] = b
        s2 = scen.noise_variance
    C = B @ model.A.conj()
    mag = np.abs(C)
    order = np.argsort(-mag, axis=1, kind="stable")
    taus = np.take_along_axis(mag, order, axis=1)
    truth = np.zeros(M, dtype=bool)
    truth[list(idx)] = True
    first_ok = np.all(truth[order[:, :S]], axis=1) if S else np.ones(len(trials), bool)
    out = {}
    for test in cfg.tests:
        tab = tables[test]
        nxt = np.concatenate([taus[:, 1:], np.zeros((len(trials), 1))], axis=1)
        s_hat = np.zeros(len(trials), dtype=int)
        done = np.zeros(len(trials), dtype=bool)
        if test is TestKind.C:
            s2h = taus[:, M - 1] ** 2
            ks = range(M - 1, 0, -1)
        else:
            ks = range(M, 0, -1)
        for k in ks:
            tk, tn = taus[:, k - 1], nxt[:, k - 1]
            if test is TestKind.A:
                st = tk / math.sqrt(s2 / 2.0)
            elif test is TestKind.B:
                st = (tk**2 - tn**2) / s2
            elif test is TestKind.C:
                with np.errstate(divide="ignore"):
                    st = np.where(s2h > 0, tk**2 / np.where(s2h > 0, s2h, 1.0), np.inf)
            else:
                st = tk * (tk - tn) / (s2 / 2.0)
            hit = ~done & (st >= tab.eta(k))
            s_hat[hit] = k
            done |= hit
        # support = first s_hat entries; all true iff the first s_hat of order are true
        prefix_true = np.cumprod(truth[order], axis=1).astype(bool)
        det_true = np.where(s_hat > 0, prefix_true[np.arange(len(trials)), np.maximum(s_hat - 1, 0)], True)
        correct = (s_hat == S) & det_true
        miss = (s_hat < S) & det_true
        c = _empty_counts()
        c["correct"] = int(correct.sum())
        c["miss"] = int(miss.sum())
        c["false_alarm"] = len(trials) - c["correct"] - c["miss"]
        c["event_b"] = int(first_ok.sum())
        out[test] = c
    return out


def _general_block(cfg, model, tables, S, snr, si, ki, trials):
    idx = cfg.placements[S]
    offs = _offsets(cfg, model, S)
    out = {t: _empty_counts() for t in cfg.tests}
    for t in trials:
        scen, b = trial_snapshot(model, idx, snr, offs, cfg.base_seed ^ _counter(si, ki, t))
        for test in cfg.tests:
            c = out[test]
            try:
                res = detect(model, b, test, cfg.pc, scen.noise_variance, table=tables[test],
                             scan=cfg.scan, refit=cfg.refit, min_knots=S)
            except (SolverFailure, NumericError):
                c["failures"] += 1
                continue
            sc = score(res, scen)
            c[sc.outcome] += 1
            c["event_b"] += int(sc.event_b)
            if sc.outcome == "correct" and res.offsets.size:
                truth = dict(zip(scen.source_indices, scen.offsets))
                for g, p in zip(res.support, res.offsets):
                    if math.isfinite(p):
                        c["sq_err"] += (p - truth[g]) ** 2
                        c["n_err"] += 1
    return out


def _pb_block(cfg, model, S, snr, si, ki, trials):
    """P(B) only: first ``S`` knots of the path, no detection."""
    from .group_lasso_path import iter_group_knots
    from .lasso_path import iter_general_knots

    idx = cfg.placements[S]
    offs = _offsets(cfg, model, S)
    c = _empty_counts()
    for t in trials:
        scen, b = trial_snapshot(model, idx, snr, offs, cfg.base_seed ^ _counter(si, ki, t))
        try:
            if cfg.mode == "orthogonal":
                first = np.argsort(-np.abs(model.A.conj().T @ b), kind="stable")[:S]
            elif cfg.mode == "oversampled":
                first = [k.entering_index for k in iter_general_knots(model, b, S)]
            else:
                first = [k.entering_group for k in iter_group_knots(model, model.A.conj().T @ b, S)]
        except (SolverFailure, NumericError):
            c["failures"] += 1
            continue
        c["event_b"] += int(set(int(i) for i in first) == set(idx))
    return c


def _work(args):
    cfg_dict, S, snr, si, ki, trials = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = cfg.model()
    if not cfg.detect:
        return {None: _pb_block(cfg, model, S, snr, si, ki, trials)}, {}
    tables = {t: build_table(t, model, cfg.pc, sigma_known=t is not TestKind.C) for t in cfg.tests}
    if cfg.mode == "orthogonal":
        counts = _orthogonal_block(cfg, model, tables, S, snr, si, ki, trials)
    else:
        counts = _general_block(cfg, model, tables, S, snr, si, ki, trials)
    used = {t.value: {key: (tab.contexts[key], eta) for key, eta in tab.entries.items()} for t, tab in tables.items()}
    return counts, used


def run_experiment(cfg: ExperimentConfig, progress=None) -> McReport:
    """Run every (S, SNR) point of ``cfg`` and aggregate per test.

    With ``cfg.detect = False`` only P(B) is estimated (one row with test
    ``"none"``). Raises :class:`McFailure` when more than 0.1% of the trials
    of any point fail; the partial report is attached to the exception.
    """
    rows = []
    chunks = max(1, cfg.workers) * 4
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    bad = []
    used = {}
    try:
        for si, S in enumerate(cfg.S_values):
            for ki, snr in enumerate(cfg.snr_grid_db):
                t0 = time.perf_counter()
                parts = [list(range(cfg.trials))[j::chunks] for j in range(chunks)]
                parts = [p for p in parts if p]
                jobs = [(cfg.to_dict(), S, snr, si, ki, p) for p in parts]
                out = list(pool.map(_work, jobs)) if pool else [_work(j) for j in jobs]
                results = [r for r, _ in out]
                for _, thr in out:
                    for t, entries in thr.items():
                        used.setdefault(t, {}).update(entries)
                keys = list(results[0])
                wall = time.perf_counter() - t0
                for key in keys:
                    c = _empty_counts()
                    for r in results:
                        c = _merge(c, r[key])
                    rows.append(_row(cfg, key, S, snr, c, wall))
                    if c["failures"] > 0.001 * cfg.trials:
                        bad.append((S, snr, key, c["failures"]))
                if progress:
                    progress(rows[-1])
    finally:
        if pool:
            pool.shutdown()
    report = McReport(cfg, rows, {t: list(v.values()) for t, v in used.items()})
    if bad:
        raise McFailure(f"solver failures above 0.1% at {bad}", report)
    return report


def _row(cfg, test, S, snr, c, wall) -> McRow:
    n = cfg.trials - c["failures"]
    pb = c["event_b"] / n if n else float("nan")
    if test is None:
        return McRow("none", S, snr, float("nan"), float("nan"), float("nan"), pb, float("nan"), n,
                     ci_halfwidth(pb, n), c["failures"], wall, c)
    pc = c["correct"] / n
    pm = c["miss"] / n
    pf = c["false_alarm"] / n
    rmse = math.sqrt(c["sq_err"] / c["n_err"]) if c["n_err"] else float("nan")
    return McRow(test.value, S, snr, pc, pf, pm, pb, rmse, n, ci_halfwidth(pc, n), c["failures"], wall, c)


# ---------------------------------------------------------------------------
# comparison with the bundled reference values


def reference_values() -> list:
    """Rows of the bundled reference values (tables and event-B curves)."""
    text = resources.files("knotdoa").joinpath("data/reference_values.csv").read_text()
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        r["S"] = int(r["S"])
        r["snr_db"] = float(r["snr_db"])
        r["value"] = float(r["value"])
        out.append(r)
    return out


def _table_config(which: int, trials: int, base_seed: int, S_values=None, snr=None, **kw) -> ExperimentConfig:
    mode, test = TABLE_SETUPS[which]
    S_values = S_values or ((1, 2, 3) if which == 7 else (1, 2, 3, 4))
    return ExperimentConfig(
        mode=mode, tests=(test,), S_values=tuple(S_values), snr_grid_db=tuple(snr or DEFAULT_SNR),
        trials=trials, base_seed=base_seed, offset=0.24 if mode == "grid-matching" else 0.0, **kw,
    )


def reproduce_tables(which: int, trials: int = 10_000, base_seed: int = 2024, S_values=None, snr=None, **kw):
    """Run the configuration of reference table ``which`` and diff it against the reference.

    Returns ``(report, diff)`` where ``diff`` rows hold
    ``(S, snr_db, metric, ours, ref, ours - ref)`` for ``pc`` and ``pf``.
    """
    if which not in TABLE_SETUPS:
        raise ContractViolation("table id must be 1..7")
    cfg = _table_config(which, trials, base_seed, S_values, snr, **kw)
    report = run_experiment(cfg)
    ref = {(r["S"], r["snr_db"], r["metric"]): r["value"] for r in reference_values()
           if r["source"] == f"table{which}"}
    diff = []
    for row in report.rows:
        for metric, ours in (("pc", row.pc_hat), ("pf", row.pf_hat)):
            want = ref.get((row.S, row.snr_db, metric))
            if want is not None:
                diff.append((row.S, row.snr_db, metric, ours, want, ours - want))
    return report, diff


def reproduce(target: str, trials: int = 10_000, base_seed: int = 2024, S_values=None, snr=None, **kw):
    """``table1``..``table7`` or ``fig1``..``fig3`` (P(B) curves); see :func:`reproduce_tables`."""
    if target.startswith("table"):
        return reproduce_tables(int(target[5:]), trials, base_seed, S_values, snr, **kw)
    fig = int(target[3:])
    mode = {1: "orthogonal", 2: "oversampled", 3: "grid-matching"}[fig]
    offset = kw.pop("offset", 0.24 if fig == 3 else 0.0)
    cfg = ExperimentConfig(mode=mode, tests=(), S_values=tuple(S_values or (1, 2, 3, 4)),
                           snr_grid_db=tuple(snr or DEFAULT_SNR), trials=trials, base_seed=base_seed,
                           offset=offset, detect=False, **kw)
    report = run_experiment(cfg)
    note = f"offset={offset:g}" if fig == 3 else ""
    ref = {(r["S"], r["snr_db"]): r["value"] for r in reference_values()
           if r["source"] == target and r["note"] == note}
    diff = [(r.S, r.snr_db, "pb", r.pb_hat, ref[(r.S, r.snr_db)], r.pb_hat - ref[(r.S, r.snr_db)])
            for r in report.rows if (r.S, r.snr_db) in ref]
    return report, diff
