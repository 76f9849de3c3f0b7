"""Long-format panel CSV files and JSON model documents.

Panel CSV: header ``subject_id,time,y[,weight],x1..xp``; one row per
observation, rows of a subject contiguous or not, times strictly increasing
within a subject.  Floats are written with ``repr`` so that reading and
rewriting a file reproduces it byte for byte.

Model documents hold a fitted (or true) mixture, its standard errors, fit
diagnostics and provenance.  Serialisation preserves key order and float
``repr``; ``dumps(loads(text)) == text`` for any document this module wrote.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .em import FitReport, MixtureModel
from .process import ClassParams, PanelData, SubjectRecord

__all__ = [
    "SCHEMA_VERSION",
    "DataError",
    "SchemaError",
    "ModelDocument",
    "read_panel_csv",
    "write_panel_csv",
    "panel_csv_text",
    "read_labels",
    "write_labels",
    "fingerprint",
]

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed panel or labels file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        where = f"{path or '<data>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line


class SchemaError(ValueError):
    """A model document does not follow the schema."""


def _num(v: float) -> str:
    return repr(float(v))


def fingerprint(text: str | bytes) -> str:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# panel CSV


def panel_csv_text(panel: PanelData, include_weights: bool | None = None) -> str:
    """Canonical CSV text of ``panel``.

    ``include_weights`` defaults to writing the weight column only when some
    weight differs from 1.
    """
    a = panel.arrays
    if include_weights is None:
        include_weights = bool(np.any(a.weights != 1.0))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["subject_id", "time", "y"] + (["weight"] if include_weights else [])
    header += [f"x{k + 1}" for k in range(panel.p)]
    w.writerow(header)
    for s in panel.subjects:
        for j in range(s.n):
            row = [str(s.subject_id), _num(s.times[j]), str(int(s.y[j]))]
            if include_weights:
                row.append(_num(s.weight))
            row += [_num(v) for v in s.x[j]]
            w.writerow(row)
    return buf.getvalue()


def write_panel_csv(panel: PanelData, path, include_weights: bool | None = None) -> str:
    text = panel_csv_text(panel, include_weights)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return text


def read_panel_csv(path, weights_col: str | None = None, text: str | None = None) -> PanelData:
    """Parse a panel CSV file (or ``text``) into :class:`PanelData`.

    Weights come from ``weights_col`` if given (it must exist), else from a
    ``weight`` column if present, else are 1.  A subject's weight must be the
    same on all of its rows.
    """
    if text is None:
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(str(exc), path=path) from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty file", line=1, path=path) from None
    col = {name.strip(): k for k, name in enumerate(header)}
    for need in ("subject_id", "time", "y"):
        if need not in col:
            raise DataError(f"missing required column {need!r}", line=1, path=path)
    xcols = []
    while f"x{len(xcols) + 1}" in col:
        xcols.append(col[f"x{len(xcols) + 1}"])
    if not xcols:
        raise DataError("no covariate columns x1..xp", line=1, path=path)
    stray = [h for h in col if h.startswith("x") and h[1:].isdigit() and col[h] not in xcols]
    if stray:
        raise DataError(f"covariate columns not numbered consecutively from x1: {stray}", line=1, path=path)
    wname = weights_col if weights_col is not None else ("weight" if "weight" in col else None)
    if wname is not None and wname not in col:
        raise DataError(f"weights column {wname!r} not found", line=1, path=path)
    wcol = col.get(wname) if wname is not None else None

    groups: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", line=lineno, path=path)
        sid = row[col["subject_id"]]
        try:
            t = float(row[col["time"]])
        except ValueError:
            raise DataError(f"time {row[col['time']]!r} is not a number", line=lineno, path=path) from None
        try:
            y = int(row[col["y"]])
        except ValueError:
            raise DataError(f"y {row[col['y']]!r} is not an integer", line=lineno, path=path) from None
        if y < 0:
            raise DataError(f"y must be nonnegative, got {y}", line=lineno, path=path)
        try:
            x = [float(row[k]) for k in xcols]
            wt = float(row[wcol]) if wcol is not None else 1.0
        except ValueError as exc:
            raise DataError(f"non-numeric value: {exc}", line=lineno, path=path) from None
        if not all(math.isfinite(v) for v in x) or not math.isfinite(t):
            raise DataError("non-finite time or covariate", line=lineno, path=path)
        if not wt > 0 or not math.isfinite(wt):
            raise DataError(f"weight must be positive, got {wt}", line=lineno, path=path)
        g = groups.setdefault(sid, {"t": [], "y": [], "x": [], "w": wt, "line": lineno})
        if g["t"] and t <= g["t"][-1]:
            raise DataError(f"times of subject {sid!r} are not strictly increasing", line=lineno, path=path)
        if wt != g["w"]:
            raise DataError(f"subject {sid!r} has more than one weight", line=lineno, path=path)
        g["t"].append(t)
        g["y"].append(y)
        g["x"].append(x)
    if not groups:
        raise DataError("no observations", line=2, path=path)
    subjects = [SubjectRecord(sid, g["t"], g["y"], g["x"], g["w"]) for sid, g in groups.items()]
    return PanelData(subjects, p=len(xcols))


def read_labels(path) -> dict:
    """``subject_id -> class`` from a ``subject_id,class`` CSV."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(str(exc), path=path) from exc
    if not rows or [h.strip() for h in rows[0][:2]] != ["subject_id", "class"]:
        raise DataError("header must be subject_id,class", line=1, path=path)
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out[row[0]] = int(row[1])
        except (ValueError, IndexError):
            raise DataError("class must be an integer", line=lineno, path=path) from None
    return out


def write_labels(path, subject_ids, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "class"])
        for sid, z in zip(subject_ids, labels):
            w.writerow([str(sid), int(z)])


# ---------------------------------------------------------------------------
# model documents


def _opt_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class ModelDocument:
    """Serialisable mixture with fit diagnostics.

    ``design`` optionally stores common design rows (``{"times": [...],
    "x": [[...], ...]}``) so that the document can drive simulation and label
    alignment on its own.
    """

    C: int
    p: int
    classes: list
    pi: list
    se: dict = field(default_factory=dict)
    loglik: float | None = None
    weighted_bic: float | None = None
    convergence: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    design: dict | None = None
    schema_version: int = SCHEMA_VERSION

    # -- conversions ------------------------------------------------------

    @classmethod
    def from_model(cls, model: MixtureModel, **kw) -> "ModelDocument":
        classes = [
            {"beta": [float(b) for b in c.beta], "alpha": float(c.alpha), "gamma": float(c.gamma)} for c in model.classes
        ]
        return cls(C=model.C, p=model.p, classes=classes, pi=[float(v) for v in model.pi], **kw)

    @classmethod
    def from_fit(cls, report: FitReport, seed, restarts, data_fingerprint, design=None) -> "ModelDocument":
        se = {name: _opt_float(v) for name, v in zip(report.names, report.se)} if report.se is not None else {}
        return cls.from_model(
            report.model,
            se=se,
            loglik=_opt_float(report.loglik),
            weighted_bic=_opt_float(report.bic),
            convergence={
                "converged": bool(report.converged),
                "tol": float(report.tol),
                "iters": int(report.iterations),
                "criterion": _opt_float(report.criterion),
                "weighted": bool(report.weighted),
                "collapsed": [bool(v) for v in report.collapsed],
                "pseudo_inverse": bool(report.pseudo_inverse),
            },
            provenance={"seed": seed, "restarts": int(restarts), "data_sha256": data_fingerprint},
            design=design,
        )

    def to_model(self) -> MixtureModel:
        classes = [ClassParams(c["beta"], c["alpha"], c["gamma"]) for c in self.classes]
        pi = np.asarray(self.pi, dtype=float)
        return MixtureModel(classes, pi / pi.sum())

    def design_x(self):
        if not self.design:
            return None
        return np.asarray(self.design["x"], dtype=float), np.asarray(self.design["times"], dtype=float)

    # -- JSON -------------------------------------------------------------

    def as_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "C": self.C,
            "p": self.p,
            "classes": self.classes,
            "pi": self.pi,
            "se": self.se,
            "loglik": self.loglik,
            "weighted_bic": self.weighted_bic,
            "convergence": self.convergence,
            "provenance": self.provenance,
        }
        if self.design is not None:
            d["design"] = self.design
        return d

    def dumps(self) -> str:
        return json.dumps(self.as_dict(), indent=2, allow_nan=False) + "\n"

    def save(self, path) -> str:
        text = self.dumps()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return text

    @classmethod
    def loads(cls, text: str) -> "ModelDocument":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ModelDocument":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise SchemaError(str(exc)) from exc
        return cls.loads(text)

    @classmethod
    def from_dict(cls, d) -> "ModelDocument":
        if not isinstance(d, dict):
            raise SchemaError("document must be a JSON object")
        for key in ("schema_version", "C", "p", "classes", "pi"):
            if key not in d:
                raise SchemaError(f"missing key {key!r}")
        if d["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {d['schema_version']!r}")
        C, p = d["C"], d["p"]
        if not (isinstance(C, int) and C >= 1 and isinstance(p, int) and p >= 1):
            raise SchemaError("C and p must be positive integers")
        if not isinstance(d["classes"], list) or len(d["classes"]) != C:
            raise SchemaError(f"classes must be a list of {C} objects")
        for k, c in enumerate(d["classes"]):
            if not isinstance(c, dict) or set(c) != {"beta", "alpha", "gamma"}:
                raise SchemaError(f"classes[{k}] must have exactly beta, alpha, gamma")
            if not isinstance(c["beta"], list) or len(c["beta"]) != p:
                raise SchemaError(f"classes[{k}].beta must have {p} entries")
        if not isinstance(d["pi"], list) or len(d["pi"]) != C:
            raise SchemaError(f"pi must have {C} entries")
        try:
            pi_sum = math.fsum(float(v) for v in d["pi"])
        except (TypeError, ValueError):
            raise SchemaError("pi entries must be numbers") from None
        if abs(pi_sum - 1.0) > 1e-9:
            raise SchemaError(f"pi must sum to 1, got {pi_sum!r}")
        design = d.get("design")
        if design is not None:
            if not isinstance(design, dict) or set(design) != {"times", "x"}:
                raise SchemaError("design must have exactly times and x")
            if len(design["x"]) != len(design["times"]) or any(len(r) != p for r in design["x"]):
                raise SchemaError(f"design.x must have one row of {p} values per time")
        extra = set(d) - {
            "schema_version", "C", "p", "classes", "pi", "se", "loglik", "weighted_bic", "convergence", "provenance", "design",
        }
        if extra:
            raise SchemaError(f"unknown keys {sorted(extra)}")
        doc = cls(
            C=C,
            p=p,
            classes=d["classes"],
            pi=d["pi"],
            se=d.get("se", {}),
            loglik=d.get("loglik"),
            weighted_bic=d.get("weighted_bic"),
            convergence=d.get("convergence", {}),
            provenance=d.get("provenance", {}),
            design=design,
            schema_version=d["schema_version"],
        )
        try:
            doc.to_model()
        except ValueError as exc:
            raise SchemaError(f"invalid parameters: {exc}") from None
        return doc
