"""Class-discrimination indices and their Monte-Carlo expectations.

The indices score a matrix of reported class probabilities against true
labels.  Labels are 1-based class numbers; column ``c - 1`` of the probability
matrix belongs to class ``c``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.stats import rankdata

from ._rng import seed_sequence

logger = logging.getLogger(__name__)

__all__ = [
    "UndefinedIndexError",
    "DiscriminationResult",
    "c_statistic",
    "pairwise_c",
    "apc",
    "pdi",
    "apc_bruteforce",
    "pdi_bruteforce",
    "INDICES",
    "GenerativeModel",
    "csi_estimate",
    "eed_estimate",
]


class UndefinedIndexError(ValueError):
    """A class needed by the index has no subjects."""


@dataclass
class DiscriminationResult:
    index_name: str
    value: float
    mc_stderr: float | None = None
    reps: int = 1
    values: np.ndarray | None = None
    failures: int = 0

    def as_dict(self) -> dict:
        return {
            "index": self.index_name,
            "value": self.value,
            "mc_stderr": self.mc_stderr,
            "reps": self.reps,
            "failures": self.failures,
        }


def _labels(z, posterior=None):
    z = np.asarray(z).astype(int).reshape(-1)
    if posterior is not None:
        posterior = np.asarray(posterior, dtype=float)
        if posterior.shape[0] != z.shape[0]:
            raise ValueError("labels and posterior rows differ in length")
    return z, posterior


def c_statistic(z, p_hat_class1) -> float:
    """Two-class concordance with half credit for ties.

    ``z`` holds labels 1 and 2; ``p_hat_class1`` is each subject's reported
    probability of class 1.  Equals the fraction of (class-1, class-2) pairs in
    which the class-1 subject has the larger score.
    """
    z = np.asarray(z).astype(int).reshape(-1)
    s = np.asarray(p_hat_class1, dtype=float).reshape(-1)
    in1, in2 = z == 1, z == 2
    n1, n2 = int(in1.sum()), int(in2.sum())
    if n1 == 0 or n2 == 0:
        raise UndefinedIndexError("c-statistic needs subjects from both classes")
    ranks = rankdata(s[in1 | in2])
    r1 = ranks[in1[in1 | in2]].sum()
    return float((r1 - n1 * (n1 + 1) / 2.0) / (n1 * n2))


def _check_classes(z, C):
    counts = np.bincount(z, minlength=C + 1)[1:]
    if np.any(counts == 0) or z.min() < 1 or z.max() > C:
        missing = [c + 1 for c in range(C) if counts[c] == 0]
        raise UndefinedIndexError(f"classes without subjects: {missing}")
    return counts


def pairwise_c(z, posterior, k, j) -> float:
    """Concordance between classes k and j, averaged over both directions.

    Class-k subjects should outrank class-j subjects on column k, and class-j
    subjects should outrank class-k subjects on column j.
    """
    z, P = _labels(z, posterior)
    sel = (z == k) | (z == j)
    zz = np.where(z[sel] == k, 1, 2)
    return 0.5 * (c_statistic(zz, P[sel, k - 1]) + c_statistic(3 - zz, P[sel, j - 1]))


def apc(z, posterior) -> float:
    """All-pairwise c-statistic: mean of the pairwise concordances over k < j."""
    z, P = _labels(z, posterior)
    C = P.shape[1]
    _check_classes(z, C)
    if C == 1:
        return 1.0
    vals = [pairwise_c(z, P, k, j) for k, j in itertools.combinations(range(1, C + 1), 2)]
    return float(np.mean(vals))


def pdi(z, posterior) -> float:
    """Polytomous discrimination index.

    For each class c and each class-c subject i, the sum of ``g_c`` over all
    tuples containing i factors over the other classes: every other class
    contributes either a member scoring strictly below i on column c or a
    member tied with i.  Expanding ``prod_j (less_j + tied_j * x)`` gives the
    number of tuples with ``t`` tied competitors, each earning ``1/(1+t)``.
    """
    z, P = _labels(z, posterior)
    C = P.shape[1]
    counts = _check_classes(z, C)
    if C == 1:
        return 1.0
    # tuple counts by number of tied competitors, kept as exact integers in
    # floating point so that full ties give exactly 1/C
    counts_by_ties = np.zeros(C)
    for c in range(C):
        col = P[:, c]
        own = col[z == c + 1]
        poly = np.ones((own.shape[0], 1))
        for j in range(C):
            if j == c:
                continue
            other = np.sort(col[z == j + 1])
            lo = np.searchsorted(other, own, side="left")
            hi = np.searchsorted(other, own, side="right")
            nxt = np.zeros((poly.shape[0], poly.shape[1] + 1))
            nxt[:, :-1] += poly * lo[:, None]
            nxt[:, 1:] += poly * (hi - lo)[:, None]
            poly = nxt
        counts_by_ties += poly.sum(axis=0)
    n_tuples = C * float(np.prod(counts.astype(float)))
    return float(sum(k / n_tuples / (1.0 + t) for t, k in enumerate(counts_by_ties)))


def apc_bruteforce(z, posterior) -> float:
    """All-pairwise c-statistic by enumerating every cross-class pair."""
    z, P = _labels(z, posterior)
    C = P.shape[1]
    _check_classes(z, C)
    vals = []
    for k, j in itertools.combinations(range(1, C + 1), 2):
        a = np.flatnonzero(z == k)
        b = np.flatnonzero(z == j)
        s = 0.0
        for i1 in a:
            for i2 in b:
                for col, (hi, lo) in ((k - 1, (i1, i2)), (j - 1, (i2, i1))):
                    x1, x2 = P[hi, col], P[lo, col]
                    s += 1.0 if x1 > x2 else (0.5 if x1 == x2 else 0.0)
        vals.append(s / (2 * len(a) * len(b)))
    return float(np.mean(vals)) if vals else 1.0


def pdi_bruteforce(z, posterior) -> float:
    """PDI by direct enumeration of all one-per-class tuples."""
    z, P = _labels(z, posterior)
    C = P.shape[1]
    _check_classes(z, C)
    groups = [np.flatnonzero(z == c + 1) for c in range(C)]
    total, count = 0.0, 0
    for tup in itertools.product(*groups):
        count += 1
        for c in range(C):
            scores = P[list(tup), c]
            best = scores.max()
            if scores[c] == best:
                total += 1.0 / np.count_nonzero(scores == best)
    return total / (C * count)


INDICES: dict[str, Callable] = {"apc": apc, "pdi": pdi}


# ---------------------------------------------------------------------------
# Monte-Carlo expectations


class GenerativeModel(Protocol):
    """A labelled data generator with an oracle posterior evaluator."""

    n_classes: int

    def sample(self, m: int, rng: np.random.Generator):
        """Return ``(panel, labels)`` with 1-based labels."""

    def oracle_posteriors(self, panel) -> np.ndarray:
        """Posterior class probabilities under the true model and parameters."""


def _index_fns(index):
    names = [index] if isinstance(index, str) else list(index)
    for name in names:
        if name not in INDICES:
            raise ValueError(f"unknown index {name!r}; choose from {sorted(INDICES)}")
    return names


def _summarise(name, vals, failures=0):
    vals = np.asarray(vals, dtype=float)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else None
    return DiscriminationResult(
        name, float(vals.mean()), se, reps=int(vals.size), values=vals, failures=failures
    )


def _rep_seeds(seed, reps):
    return seed_sequence(seed).spawn(reps)


def csi_estimate(truth: GenerativeModel, index="pdi", m_mc=10_000, reps=20, seed=0):
    """Class separation index: expected index of the oracle posteriors.

    Each replicate draws ``m_mc`` labelled subjects from ``truth`` and scores
    the true-model posteriors.  Returns a :class:`DiscriminationResult` (or a
    dict of them when ``index`` is a list).
    """
    if not hasattr(truth, "oracle_posteriors"):
        raise TypeError("truth model has no oracle posterior evaluator")
    names = _index_fns(index)
    vals = {n: [] for n in names}
    for ss in _rep_seeds(seed, reps):
        rng = np.random.default_rng(ss)
        panel, z = truth.sample(m_mc, rng)
        post = truth.oracle_posteriors(panel)
        for n in names:
            vals[n].append(INDICES[n](z, post))
    out = {n: _summarise(n, v) for n, v in vals.items()}
    return out[index] if isinstance(index, str) else out


def eed_estimate(truth: GenerativeModel, procedure, index="pdi", m=2000, reps=20, seed=0):
    """Expected empirical discrimination of ``procedure`` at sample size ``m``.

    ``procedure(panel, rng)`` returns an (m, C) probability matrix whose
    columns are already matched to the true labels.  Replicates whose
    procedure raises are excluded and counted in ``failures``.
    """
    names = _index_fns(index)
    vals = {n: [] for n in names}
    failures = 0
    for r, ss in enumerate(_rep_seeds(seed, reps)):
        data_ss, proc_ss = ss.spawn(2)
        panel, z = truth.sample(m, np.random.default_rng(data_ss))
        try:
            post = procedure(panel, np.random.default_rng(proc_ss))
        except Exception as exc:  # replicate-level isolation
            logger.warning("EED replicate %d failed: %s", r, exc)
            failures += 1
            continue
        for n in names:
            vals[n].append(INDICES[n](z, post))
    if failures == reps:
        raise RuntimeError("every EED replicate failed")
    out = {n: _summarise(n, v, failures) for n, v in vals.items()}
    return out[index] if isinstance(index, str) else out
