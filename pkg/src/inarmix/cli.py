"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``discriminate``, ``study``, ``diagnose``.

Exit codes: 0 success, 1 every study cell failed, 2 usage error, 3 process
constraint violated, 4 no restart converged, 5 data or model mismatch.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys

import numpy as np

from .discrimination import INDICES, UndefinedIndexError
from .em import align_labels, em_fit, posterior_weights
from .process import ConstraintViolation, PanelData, check_constraints, design_panel
from .scenarios import InarTruth, inar_scenario
from .serialization import (
    DataError,
    ModelDocument,
    SchemaError,
    fingerprint,
    read_labels,
    read_panel_csv,
    write_labels,
    write_panel_csv,
)
from .study import random_assignment_diagnostic, run_study_config

logger = logging.getLogger("inarmix")

EXIT_OK = 0
EXIT_ALL_FAILED = 1
EXIT_USAGE = 2
EXIT_CONSTRAINT = 3
EXIT_NOT_CONVERGED = 4
EXIT_MISMATCH = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# simulate


def _truth_from_args(args) -> InarTruth:
    if args.scenario:
        alpha = 0.1 if args.alpha is None else args.alpha
        phi = 1.25 if args.phi is None else args.phi
        try:
            return inar_scenario(args.scenario, alpha, phi)
        except ValueError as exc:
            if isinstance(exc, ConstraintViolation):
                raise
            raise CliError(str(exc), EXIT_USAGE) from None
    doc = _load_doc(args.model)
    if doc.design is None:
        raise CliError(f"{args.model}: model document has no design block to simulate from", EXIT_MISMATCH)
    x, times = doc.design_x()
    model = doc.to_model()
    classes = []
    for c in model.classes:
        alpha = c.alpha if args.alpha is None else args.alpha
        gamma = c.gamma if args.phi is None else args.phi - 1.0
        try:
            classes.append(c.replace(alpha=alpha, gamma=gamma))
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
    model = type(model)(classes, model.pi)
    probe = design_panel(x, np.zeros((1, times.size), dtype=int), times)
    for k, c in enumerate(model.classes):
        report = check_constraints(c, probe)
        if not report:
            raise ConstraintViolation(f"class {k + 1}: {report.describe()}", report)
    return InarTruth(model, x, times)


def cmd_simulate(args) -> int:
    truth = _truth_from_args(args)
    rng = np.random.default_rng(args.seed)
    panel, z = truth.sample(args.subjects, rng)
    text = write_panel_csv(panel, args.out)
    design = {"times": [float(t) for t in truth.times], "x": [[float(v) for v in row] for row in truth.x]}
    doc = ModelDocument.from_model(
        truth.model,
        provenance={"seed": args.seed, "restarts": 0, "data_sha256": fingerprint(text)},
        design=design,
    )
    doc.save(f"{args.out}.truth.json")
    write_labels(f"{args.out}.labels.csv", [s.subject_id for s in panel.subjects], z)
    print(f"wrote {panel.m} subjects ({sum(s.n for s in panel.subjects)} rows) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _read_data(path, weights_col=None) -> tuple[PanelData, str]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}", EXIT_USAGE) from None
    return read_panel_csv(path, weights_col=weights_col, text=text), text


def _load_doc(path) -> ModelDocument:
    try:
        return ModelDocument.load(path)
    except SchemaError as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from None


def cmd_fit(args) -> int:
    panel, text = _read_data(args.data, args.weights_col)
    if args.classes < 1 or args.restarts < 1:
        raise CliError("--classes and --restarts must be >= 1", EXIT_USAGE)
    report = em_fit(
        panel,
        args.classes,
        tol=args.tol,
        max_iter=args.max_iter,
        restarts=args.restarts,
        seed=args.seed,
        use_weights=args.weights_col is not None,
        n_jobs=args.jobs,
    )
    doc = ModelDocument.from_fit(report, args.seed, args.restarts, fingerprint(text))
    doc.save(args.out)
    print(
        f"loglik={_fmt(report.loglik)} weighted_bic={_fmt(report.bic)} "
        f"converged={str(report.converged).lower()} iters={report.iterations}"
    )
    if not any(r.converged for r in report.restarts):
        print("error: no restart converged", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# discriminate


def _check_p(doc, panel):
    if doc.p != panel.p:
        raise CliError(f"model has p={doc.p} covariates but data has {panel.p}", EXIT_MISMATCH)


def _reference_design(truth_doc, panel):
    if truth_doc.design is not None:
        return truth_doc.design_x()[0]
    longest = max(panel.subjects, key=lambda s: s.n)
    return longest.x


def cmd_discriminate(args) -> int:
    doc = _load_doc(args.model)
    panel, _ = _read_data(args.data)
    _check_p(doc, panel)
    labels = read_labels(args.labels)
    missing = [s.subject_id for s in panel.subjects if s.subject_id not in labels]
    if missing:
        raise CliError(f"{len(missing)} subjects have no label (first: {missing[0]!r})", EXIT_MISMATCH)
    z = np.array([labels[s.subject_id] for s in panel.subjects])
    model = doc.to_model()
    if args.truth:
        truth = _load_doc(args.truth)
        if truth.C != doc.C or truth.p != doc.p:
            raise CliError("truth and model differ in C or p", EXIT_MISMATCH)
        x = _reference_design(truth, panel)
        model, _ = align_labels(model, truth.to_model().mean_curves(x), x)
    post = posterior_weights(model, panel)
    names = [n.strip() for n in args.index.split(",") if n.strip()]
    for n in names:
        if n not in INDICES:
            raise CliError(f"unknown index {n!r}; choose from {','.join(sorted(INDICES))}", EXIT_USAGE)
    rows = []
    for n in names:
        try:
            rows.append((n, INDICES[n](z, post)))
        except UndefinedIndexError as exc:
            raise CliError(str(exc), EXIT_MISMATCH) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "value"])
    for n, v in rows:
        w.writerow([n, f"{v:.6g}"])
    print(f"{'index':<6} value")
    for n, v in rows:
        print(f"{n:<6} {v:.6g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# study / diagnose


def cmd_study(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise CliError(f"{args.config}: {exc.strerror}", EXIT_USAGE) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.config}: line {exc.lineno}: {exc.msg}", EXIT_USAGE) from None
    try:
        result = run_study_config(config, args.out, n_jobs=args.jobs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    for f in result["failures"]:
        print(f"cell {f['label']} failed: {f['error']}", file=sys.stderr)
    print(f"{len(result['cells'])} cells done, {len(result['failures'])} failed; reports in {args.out}")
    return EXIT_OK if result["cells"] else EXIT_ALL_FAILED


def cmd_diagnose(args) -> int:
    doc = _load_doc(args.model)
    panel, _ = _read_data(args.data)
    _check_p(doc, panel)
    if args.replicates < 1:
        raise CliError("--replicates must be >= 1", EXIT_USAGE)
    diag = random_assignment_diagnostic(doc.to_model(), panel, reps=args.replicates, seed=args.seed, max_lag=args.max_lag)
    diag.to_csv(args.out)
    print(f"wrote diagnostics for {doc.C} classes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inarmix", description="INAR(1)-NB latent class models for longitudinal counts.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a labelled panel")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", choices=["I", "II"])
    src.add_argument("--model", help="model document with a design block")
    p.add_argument("--alpha", type=float, help="autocorrelation (overrides the model's)")
    p.add_argument("--phi", type=float, help="overdispersion phi = 1 + gamma (overrides the model's)")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a C-class model by quasi-EM")
    p.add_argument("--data", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights-col", help="column holding sampling weights")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for restarts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("discriminate", help="discrimination indices of fitted posteriors")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True, help="CSV with subject_id,class")
    p.add_argument("--index", default="apc,pdi")
    p.add_argument("--truth", help="true model document; aligns labels first")
    p.add_argument("--out", help="CSV output")
    p.set_defaults(func=cmd_discriminate)

    p = sub.add_parser("study", help="run a simulation study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("diagnose", help="random-assignment autocorrelation/overdispersion curves")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--max-lag", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConstraintViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (DataError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
