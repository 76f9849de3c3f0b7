"""Simulation studies: bias and coverage, discrimination cells, diagnostics.

Every replicate draws its randomness from a pre-assigned child of
``SeedSequence(seed)``, so results do not depend on execution order or on the
number of worker processes.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import describe_seed, seed_sequence
from .discrimination import INDICES, csi_estimate, eed_estimate
from .em import MixtureModel, align_labels, em_fit, parameter_names, posterior_weights
from .poisson_normal import PN_CSI_TARGETS, PnTruth, pn_scenario
from .scenarios import inar_scenario

logger = logging.getLogger(__name__)

__all__ = [
    "ParameterSummary",
    "StudyReport",
    "DiagnosticResult",
    "fit_procedure",
    "run_bias_coverage_study",
    "random_assignment_diagnostic",
    "run_study_config",
    "INAR_CSI_TARGETS",
]

# oracle CSI targets per (scenario, phi, alpha): (APC, PDI)
INAR_CSI_TARGETS = {
    ("I", 1.25, 0.1): (0.976, 0.934),
    ("I", 1.25, 0.4): (0.944, 0.872),
    ("I", 3.0, 0.1): (0.922, 0.812),
    ("I", 3.0, 0.4): (0.892, 0.756),
    ("II", 1.25, 0.1): (0.900, 0.775),
    ("II", 1.25, 0.4): (0.867, 0.712),
    ("II", 3.0, 0.1): (0.828, 0.646),
    ("II", 3.0, 0.4): (0.802, 0.608),
}

Z95 = 1.959963984540054


def _fit(panel, C, fit_opts, start, seed):
    opts = dict(fit_opts or {})
    return em_fit(
        panel,
        C,
        tol=opts.get("tol", 1e-6),
        max_iter=opts.get("max_iter", 500),
        restarts=opts.get("restarts", 1 if start is not None else 20),
        seed=seed,
        use_weights=opts.get("use_weights", False),
        start=start,
        compute_se=opts.get("compute_se", True),
    )


def _start_for(truth, fit_opts):
    if (fit_opts or {}).get("start") == "truth":
        if not hasattr(truth, "model"):
            raise ValueError("start='truth' needs a truth with an INAR model")
        return truth.model
    return None


def fit_procedure(truth, fit_opts=None, C=None):
    """Procedure ``(panel, rng) -> posterior`` for :func:`eed_estimate`.

    Fits a ``C``-class model (default: the truth's class count), aligns its
    labels to the truth's mean curves and returns aligned posteriors.
    """
    C = truth.n_classes if C is None else C
    opts = dict(fit_opts or {})
    opts["compute_se"] = False
    start = _start_for(truth, opts)

    def procedure(panel, rng):
        seed = np.random.SeedSequence(int(rng.integers(2**63)))
        rep = _fit(panel, C, opts, start, seed)
        model, _ = align_labels(rep.model, truth.reference_curves(), truth.x)
        return posterior_weights(model, panel)

    return procedure


# ---------------------------------------------------------------------------
# bias / coverage


@dataclass
class ParameterSummary:
    name: str
    truth: float
    mean: float
    bias: float
    sd: float
    mean_se: float
    median_se: float
    coverage: float
    n: int


@dataclass
class StudyReport:
    label: str
    m: int
    reps: int
    seed: object
    n_ok: int
    failures: int
    parameters: list = field(default_factory=list)
    eed: dict = field(default_factory=dict)
    csi: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    estimates: np.ndarray | None = None
    ses: np.ndarray | None = None
    settings: dict = field(default_factory=dict)

    def parameter(self, name) -> ParameterSummary:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("estimates", "ses")}
        return _jsonable(d)

    def to_json(self, path):
        _atomic_write(path, json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")

    def csv_rows(self):
        for p in self.parameters:
            yield {"setting": self.label, "m": self.m, **asdict(p)}

    def to_csv(self, path):
        rows = list(self.csv_rows())
        fields = ["setting", "m"] + [f.name for f in ParameterSummary.__dataclass_fields__.values()]
        _write_csv(path, fields, rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else f"{float(v):.6g}"
    return v


def _write_csv(path, fields, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})
    os.replace(tmp, path)


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _bias_replicate(args):
    truth, m, ss, fit_opts, indices = args
    data_ss, fit_ss = ss.spawn(2)
    panel, z = truth.sample(m, np.random.default_rng(data_ss))
    try:
        rep = _fit(panel, truth.n_classes, fit_opts, _start_for(truth, fit_opts), fit_ss)
    except Exception as exc:  # replicate-level isolation
        return None, f"{type(exc).__name__}: {exc}"
    if not rep.converged:
        return None, f"not converged (criterion {rep.criterion:.3g})"
    _, perm = align_labels(rep.model, truth.reference_curves(), truth.x)
    rep = rep.aligned(perm)
    post = posterior_weights(rep.model, panel)
    disc = {}
    for name in indices:
        try:
            disc[name] = INDICES[name](z, post)
        except ValueError:
            disc[name] = float("nan")
    return (rep.model.to_vector(), rep.se, disc), None


def run_bias_coverage_study(
    truth, m: int, reps: int, seed: int = 0, fit_opts=None, indices=("apc", "pdi"), n_jobs: int = 1, label=None
) -> StudyReport:
    """Simulate, fit, align and summarise ``reps`` replicates.

    Records per-parameter bias (mean estimate minus truth), empirical SD, mean
    and median sandwich SE, and 95% Wald coverage, plus the mean empirical
    discrimination of the aligned fitted posteriors.  Replicates that raise or
    do not converge are excluded and counted in ``failures``.
    """
    t0 = time.perf_counter()
    seeds = seed_sequence(seed).spawn(reps)
    tasks = [(truth, m, ss, fit_opts, tuple(indices)) for ss in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_bias_replicate, tasks))
    else:
        results = [_bias_replicate(t) for t in tasks]
    ok = [r for r, err in results if r is not None]
    for i, (_, err) in enumerate(results):
        if err:
            logger.warning("replicate %d excluded: %s", i, err)
    C, p = truth.model.C, truth.model.p
    names = parameter_names(C, p)
    true_vec = truth.model.to_vector()
    report = StudyReport(
        label=label or "study",
        m=m,
        reps=reps,
        seed=describe_seed(seed),
        n_ok=len(ok),
        failures=reps - len(ok),
        settings={"fit": dict(fit_opts or {})},
    )
    if ok:
        est = np.array([r[0] for r in ok])
        se = np.array([r[1] for r in ok])
        hit = np.abs(est - true_vec) <= Z95 * se
        for k, name in enumerate(names):
            report.parameters.append(
                ParameterSummary(
                    name=name,
                    truth=float(true_vec[k]),
                    mean=float(est[:, k].mean()),
                    bias=float(est[:, k].mean() - true_vec[k]),
                    sd=float(est[:, k].std(ddof=1)) if len(ok) > 1 else float("nan"),
                    mean_se=float(se[:, k].mean()),
                    median_se=float(np.median(se[:, k])),
                    coverage=float(hit[:, k].mean()),
                    n=len(ok),
                )
            )
        for name in indices:
            vals = np.array([r[2][name] for r in ok])
            vals = vals[np.isfinite(vals)]
            report.eed[name] = {
                "value": float(vals.mean()) if vals.size else float("nan"),
                "mc_stderr": float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else None,
                "reps": int(vals.size),
            }
        report.estimates, report.ses = est, se
    report.runtime_s = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# random-assignment diagnostics


@dataclass
class DiagnosticResult:
    """Per-class curves averaged over random posterior assignments.

    ``autocorr[c, l - 1]`` is the lag-l autocorrelation of class c and
    ``overdispersion[c, k]`` the variance-to-mean ratio at ``times[k]``.
    ``n_missing`` counts replicates in which a class received no subjects.
    """

    times: np.ndarray
    lags: np.ndarray
    autocorr: np.ndarray
    overdispersion: np.ndarray
    reps: int
    n_missing: np.ndarray

    def rows(self):
        C = self.autocorr.shape[0]
        for c in range(C):
            for li, lag in enumerate(self.lags):
                yield {"class": c + 1, "statistic": "autocorrelation", "lag": int(lag), "time": "", "value": self.autocorr[c, li]}
            for k, t in enumerate(self.times):
                yield {"class": c + 1, "statistic": "overdispersion", "lag": "", "time": float(t), "value": self.overdispersion[c, k]}

    def to_csv(self, path):
        _write_csv(path, ["class", "statistic", "lag", "time", "value"], list(self.rows()))


def _weighted_pearson(x, y, w):
    sw = w.sum()
    if sw <= 0:
        return np.nan
    mx, my = (w @ x) / sw, (w @ y) / sw
    dx, dy = x - mx, y - my
    den = np.sqrt((w @ (dx * dx)) * (w @ (dy * dy)))
    return float((w @ (dx * dy)) / den) if den > 0 else np.nan


def _class_curves(y, tidx, mask, w, n_codes, lags):
    """Autocorrelation by lag and overdispersion by time code for one class."""
    rows = np.nonzero(mask)
    wc = w[rows[0]]
    yc = y[rows]
    codes = tidx[rows]
    sw = np.bincount(codes, weights=wc, minlength=n_codes)
    sw2 = np.bincount(codes, weights=wc * wc, minlength=n_codes)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.bincount(codes, weights=wc * yc, minlength=n_codes) / sw
        ss = np.bincount(codes, weights=wc * (yc - mean[codes]) ** 2, minlength=n_codes)
        # reliability-weight variance; equals the ddof=1 sample variance for unit weights
        var = ss / (sw - sw2 / sw)
        od = var / mean
        z = np.zeros_like(y)
        z[rows] = (yc - mean[codes]) / np.sqrt(var[codes])
    acf = np.full(len(lags), np.nan)
    for li, lag in enumerate(lags):
        if lag >= y.shape[1]:
            continue
        pm = mask[:, lag:] & mask[:, :-lag]
        pr, pc = np.nonzero(pm)
        if pr.size < 2:
            continue
        a, b = z[pr, pc], z[pr, pc + lag]
        good = np.isfinite(a) & np.isfinite(b)
        acf[li] = _weighted_pearson(a[good], b[good], w[pr[good]])
    return acf, od


def random_assignment_diagnostic(
    model: MixtureModel, panel, reps: int = 1000, seed: int = 0, max_lag: int = 3, use_weights: bool = True
) -> DiagnosticResult:
    """Class-wise autocorrelation and overdispersion under random assignment.

    Each replicate assigns every subject to a class drawn from its posterior
    row.  Within a class, counts are standardised per time code (weighted mean
    and SD) and the lag-l autocorrelation is the weighted Pearson correlation
    over all pairs of observations l ranks apart.  Overdispersion at a time
    code is the weighted variance over the weighted mean.
    """
    a = panel.arrays
    post = posterior_weights(model, panel)
    w = a.weights if use_weights else np.ones(a.y.shape[0])
    codes, tidx = np.unique(a.times[a.mask], return_inverse=True)
    tix = np.full(a.y.shape, -1, dtype=np.int64)
    tix[a.mask] = tidx
    lags = np.arange(1, max_lag + 1)
    C = model.C
    acf_sum = np.zeros((C, lags.size))
    acf_n = np.zeros((C, lags.size))
    od_sum = np.zeros((C, codes.size))
    od_n = np.zeros((C, codes.size))
    missing = np.zeros(C, dtype=int)
    rng = np.random.default_rng(seed_sequence(seed))
    cum = np.cumsum(post, axis=1)
    cum[:, -1] = 1.0
    for _ in range(reps):
        u = rng.random(post.shape[0])
        assign = (u[:, None] > cum).sum(axis=1)
        for c in range(C):
            sel = assign == c
            if not sel.any():
                missing[c] += 1
                continue
            acf, od = _class_curves(a.y[sel], tix[sel], a.mask[sel], w[sel], codes.size, lags)
            ok = np.isfinite(acf)
            acf_sum[c, ok] += acf[ok]
            acf_n[c, ok] += 1
            ok = np.isfinite(od)
            od_sum[c, ok] += od[ok]
            od_n[c, ok] += 1
    with np.errstate(invalid="ignore"):
        return DiagnosticResult(codes, lags, acf_sum / acf_n, od_sum / od_n, reps, missing)


# ---------------------------------------------------------------------------
# config-driven studies


def _cell_list(config):
    cells = []
    for s in config.get("inar", []):
        for sc in np.atleast_1d(s.get("scenario", ["I", "II"])):
            for phi in np.atleast_1d(s.get("phi", [1.25, 3.0])):
                for alpha in np.atleast_1d(s.get("alpha", [0.1, 0.4])):
                    cells.append({"family": "inar", "scenario": str(sc), "phi": float(phi), "alpha": float(alpha)})
    for s in config.get("poisson_normal", []):
        for k in np.atleast_1d(s.get("setting", [1, 2, 3, 4])):
            cells.append(
                {
                    "family": "poisson_normal",
                    "setting": int(k),
                    "reading": s.get("reading", "midpoint"),
                    "corrected": bool(s.get("corrected", True)),
                }
            )
    return cells


def _cell_label(cell):
    if cell["family"] == "inar":
        return f"inar_{cell['scenario']}_phi{cell['phi']:g}_alpha{cell['alpha']:g}"
    return f"pn_setting{cell['setting']}"


def _make_truth(cell):
    if cell["family"] == "inar":
        return inar_scenario(cell["scenario"], cell["alpha"], cell["phi"])
    return PnTruth(pn_scenario(cell["setting"], cell["reading"], cell["corrected"]))


def _target(cell, index):
    if cell["family"] == "inar":
        t = INAR_CSI_TARGETS.get((cell["scenario"], cell["phi"], cell["alpha"]))
        return None if t is None else t[0 if index == "apc" else 1]
    if index == "pdi" and cell["setting"] in (1, 2, 3, 4):
        return PN_CSI_TARGETS[cell["setting"] - 1]
    return None


def _run_cell(args):
    cell, config, seed, out_dir = args
    label = _cell_label(cell)
    tasks = set(config.get("tasks", ["csi"]))
    indices = list(config.get("indices", ["apc", "pdi"]))
    t0 = time.perf_counter()
    truth = _make_truth(cell)
    result = {"cell": cell, "label": label, "seed": seed, "csi": {}, "eed": {}, "bias": None, "diagnostics": None}
    children = seed_sequence(seed).spawn(4)
    if "csi" in tasks:
        o = config.get("csi", {})
        res = csi_estimate(truth, indices, m_mc=o.get("m_mc", 10_000), reps=o.get("reps", 20), seed=children[0])
        result["csi"] = {k: v.as_dict() for k, v in res.items()}
    if "eed" in tasks:
        o = config.get("eed", {})
        proc = fit_procedure(truth, config.get("fit"))
        ms = np.atleast_1d(o.get("m", [2000]))
        for m, ss in zip(ms, children[1].spawn(len(ms))):
            res = eed_estimate(truth, proc, indices, m=int(m), reps=o.get("reps", 25), seed=ss)
            result["eed"][str(int(m))] = {k: v.as_dict() for k, v in res.items()}
    if tasks & {"bias", "coverage"}:
        if cell["family"] != "inar":
            raise ValueError("bias/coverage studies need an INAR truth")
        o = config.get("bias", {})
        rep = run_bias_coverage_study(
            truth, int(o.get("m", 2000)), int(o.get("reps", 50)), seed=children[2], fit_opts=config.get("fit"), indices=indices, label=label
        )
        rep.seed = describe_seed(seed)
        rep.to_json(os.path.join(out_dir, f"{label}.bias.json"))
        rep.to_csv(os.path.join(out_dir, f"{label}.bias.csv"))
        result["bias"] = rep.as_dict()
    if "diagnostics" in tasks:
        if cell["family"] != "inar":
            raise ValueError("diagnostics need an INAR truth")
        o = config.get("diagnostics", {})
        ss_data, ss_fit, ss_diag = children[3].spawn(3)
        panel, _ = truth.sample(int(o.get("m", 2000)), np.random.default_rng(ss_data))
        fit = _fit(panel, truth.n_classes, {**config.get("fit", {}), "compute_se": False}, _start_for(truth, config.get("fit")), ss_fit)
        model, _ = align_labels(fit.model, truth.reference_curves(), truth.x)
        diag = random_assignment_diagnostic(model, panel, reps=int(o.get("reps", 1000)), seed=ss_diag)
        diag.to_csv(os.path.join(out_dir, f"{label}.diagnostics.csv"))
        result["diagnostics"] = {"autocorr": diag.autocorr, "overdispersion": diag.overdispersion}
    result["runtime_s"] = time.perf_counter() - t0
    return result


def _safe_cell(args):
    try:
        return _run_cell(args), None
    except Exception as exc:  # per-cell isolation
        return None, f"{type(exc).__name__}: {exc}"


def run_study_config(config: dict, out_dir: str, n_jobs: int = 1) -> dict:
    """Run every cell of a study config and write per-cell reports plus summaries.

    Returns ``{"cells": [...], "failures": [...]}``.  Each cell gets its own
    seed child so cells can run in any order or in parallel.
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = _cell_list(config)
    if not cells:
        raise ValueError("config defines no cells")
    seeds = np.random.SeedSequence(int(config.get("seed", 0))).spawn(len(cells))
    tasks = [(cell, config, ss, out_dir) for cell, ss in zip(cells, seeds)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            outcomes = list(ex.map(_safe_cell, tasks))
    else:
        outcomes = [_safe_cell(t) for t in tasks]
    done, failures = [], []
    for cell, (res, err) in zip(cells, outcomes):
        label = _cell_label(cell)
        if res is None:
            failures.append({"label": label, "error": err})
            logger.error("cell %s failed: %s", label, err)
            continue
        res["seed"] = describe_seed(res["seed"])
        _atomic_write(os.path.join(out_dir, f"{label}.json"), json.dumps(_jsonable(res), indent=2, sort_keys=True) + "\n")
        done.append(res)
    _write_summaries(done, config, out_dir)
    return {"cells": done, "failures": failures}


def _write_summaries(done, config, out_dir):
    indices = list(config.get("indices", ["apc", "pdi"]))
    rows = []
    for res in done:
        for idx in indices:
            row = {"cell": res["label"], "index": idx, "target_csi": _target(res["cell"], idx)}
            c = res["csi"].get(idx)
            if c:
                row["csi"] = c["value"]
                row["csi_mc_se"] = c["mc_stderr"] if c["mc_stderr"] is not None else "unavailable"
            for m, e in res["eed"].items():
                row[f"eed_m{m}"] = e[idx]["value"]
                se = e[idx]["mc_stderr"]
                row[f"eed_m{m}_mc_se"] = se if se is not None else "unavailable"
            rows.append(row)
    fields = ["cell", "index", "target_csi", "csi", "csi_mc_se"]
    for r in rows:
        fields += [k for k in r if k not in fields]
    _write_csv(os.path.join(out_dir, "summary.csv"), fields, rows)
    # wide layout: one row per index, one column per cell
    labels = [r["label"] for r in done]
    wide = []
    for idx in indices:
        row = {"index": idx}
        for res in done:
            c = res["csi"].get(idx)
            row[res["label"]] = c["value"] if c else ""
        wide.append(row)
    _write_csv(os.path.join(out_dir, "csi_table.csv"), ["index"] + labels, wide)
