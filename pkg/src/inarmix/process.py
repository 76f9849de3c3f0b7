"""INAR(1) negative binomial process for a single latent class.

Within a class, a subject's counts follow a first-order integer autoregression:
the first count is negative binomial with mean ``mu_1`` and variance
``mu_1 * (1 + gamma)``; every later count is the sum of a beta-binomial
thinning of the previous count and an independent negative binomial
innovation.  Means follow a log link, ``mu_ij = exp(x_ij' beta)``.

Thinning of ``y_prev`` uses ``Beta(lam, eta_prev - lam)`` success
probabilities and the innovation has size ``eta_curr - lam`` where
``eta = mu / gamma`` and ``lam = alpha * sqrt(mu_prev * mu_curr) / gamma``.
With this parametrisation every marginal is exactly ``NB(mu_ij, gamma)`` and
the lag-l correlation is ``alpha ** l``; for a constant mean it coincides with
``Beta(alpha * eta, (1 - alpha) * eta)`` thinning.

All probability arithmetic is done on the log scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

__all__ = [
    "ClassParams",
    "SubjectRecord",
    "PanelData",
    "PanelArrays",
    "ConstraintViolation",
    "ConstraintReport",
    "nb_logpmf",
    "betabin_logpmf",
    "transition_logpmf",
    "conditional_moments",
    "subject_loglik",
    "panel_loglik",
    "simulate_subject",
    "simulate_counts",
    "design_panel",
    "check_constraints",
    "max_alpha",
    "nb_tail_bound",
]

# NB tail mass left out when an infinite support has to be truncated
TAIL_MASS = 1e-12


class ConstraintViolation(ValueError):
    """alpha is too large for the ratio of two adjacent means."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ClassParams:
    """Parameter block of one latent class.

    Attributes
    ----------
    beta : ndarray
        Regression coefficients on the log-mean scale.
    alpha : float
        Autocorrelation, ``0 <= alpha < 1``.
    gamma : float
        Overdispersion offset, ``gamma > 0``; the scale is ``phi = 1 + gamma``.
    """

    beta: np.ndarray
    alpha: float
    gamma: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be a finite vector")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not (self.gamma > 0.0 and np.isfinite(self.gamma)):
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def phi(self) -> float:
        return 1.0 + self.gamma

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @classmethod
    def from_phi(cls, beta, alpha, phi) -> "ClassParams":
        return cls(beta, alpha, phi - 1.0)

    def replace(self, **kw) -> "ClassParams":
        d = {"beta": self.beta, "alpha": self.alpha, "gamma": self.gamma}
        d.update(kw)
        return ClassParams(**d)

    def mean_curve(self, x) -> np.ndarray:
        """Within-class means ``exp(x @ beta)`` for covariate rows ``x``."""
        return np.exp(np.asarray(x, dtype=float) @ self.beta)


@dataclass
class SubjectRecord:
    """Observed counts of one subject, ordered by time.

    The observation rank is the position in this ordering (1..n); the
    autoregression runs over consecutive ranks, so a skipped visit simply
    shortens the series.
    """

    subject_id: Hashable
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        y = np.asarray(self.y)
        if y.size and (np.any(y < 0) or np.any(np.floor(y) != y)):
            raise ValueError(f"subject {self.subject_id}: counts must be nonnegative integers")
        self.y = y.astype(np.int64).reshape(-1)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        n = self.y.shape[0]
        if n == 0:
            raise ValueError(f"subject {self.subject_id}: no observations")
        if self.times.shape[0] != n or self.x.shape[0] != n:
            raise ValueError(f"subject {self.subject_id}: times, y and x lengths differ")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"subject {self.subject_id}: times must be strictly increasing")
        self.weight = float(self.weight)
        if not self.weight > 0:
            raise ValueError(f"subject {self.subject_id}: weight must be positive")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, self.n + 1)


@dataclass
class PanelArrays:
    """Left-aligned padded view of a panel used by the vectorised kernels.

    ``y[i, :n[i]]`` holds subject i's counts in rank order; padded cells are 0
    and ``mask`` is False there.
    """

    y: np.ndarray  # (m, T) float
    x: np.ndarray  # (m, T, p)
    mask: np.ndarray  # (m, T) bool
    n: np.ndarray  # (m,) int
    weights: np.ndarray  # (m,)
    times: np.ndarray  # (m, T), nan where padded

    @cached_property
    def pair_mask(self) -> np.ndarray:
        return self.mask[:, 1:] & self.mask[:, :-1]

    @cached_property
    def log_factorial(self) -> np.ndarray:
        return gammaln(self.y + 1.0)

    @cached_property
    def transition_groups(self):
        """Transitions grouped by identical (covariates, y_prev, y_curr).

        Returns ``(rows, cols, rep_rows, rep_cols, inverse)``: every observed
        transition ``(rows[k], cols[k]) -> cols[k] + 1`` has the same log pmf
        as the representative ``inverse[k]``, for any parameter value.
        """
        rows, cols = np.nonzero(self.pair_mask)
        key = np.column_stack(
            [self.x[rows, cols], self.x[rows, cols + 1], self.y[rows, cols], self.y[rows, cols + 1]]
        )
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        return rows, cols, rows[first], cols[first], inverse.reshape(-1)

    @cached_property
    def first_groups(self):
        """``(rep_rows, inverse)`` grouping first observations by (covariates, y)."""
        key = np.column_stack([self.x[:, 0], self.y[:, 0]])
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        return first, inverse.reshape(-1)

    @cached_property
    def x_flat(self) -> np.ndarray:
        return self.x.reshape(-1, self.x.shape[2])

    @cached_property
    def ar1_structure(self):
        """``(interior, maskf, multi)`` used by the tridiagonal AR(1) kernels."""
        pos = np.arange(self.y.shape[1])[None, :]
        interior = ((pos > 0) & (pos < self.n[:, None] - 1)).astype(float)
        return interior, self.mask.astype(float), self.n >= 2

    def mu(self, beta) -> np.ndarray:
        eta = (self.x_flat @ np.asarray(beta, dtype=float)).reshape(self.y.shape)
        return np.where(self.mask, np.exp(eta), 1.0)


@dataclass
class PanelData:
    """Counts of ``m`` subjects sharing a covariate dimension ``p``."""

    subjects: list
    p: int = field(default=None)

    def __post_init__(self):
        self.subjects = list(self.subjects)
        if not self.subjects:
            raise ValueError("panel has no subjects")
        ps = {s.x.shape[1] for s in self.subjects}
        if len(ps) != 1:
            raise ValueError(f"subjects disagree on covariate dimension: {sorted(ps)}")
        (p,) = ps
        if self.p is None:
            self.p = p
        elif self.p != p:
            raise ValueError(f"declared p={self.p} but covariates have {p} columns")

    @property
    def m(self) -> int:
        return len(self.subjects)

    def __len__(self):
        return len(self.subjects)

    @property
    def weights(self) -> np.ndarray:
        return self.arrays.weights

    @cached_property
    def arrays(self) -> PanelArrays:
        m, p = self.m, self.p
        T = max(s.n for s in self.subjects)
        y = np.zeros((m, T))
        x = np.zeros((m, T, p))
        mask = np.zeros((m, T), dtype=bool)
        times = np.full((m, T), np.nan)
        n = np.empty(m, dtype=np.int64)
        w = np.empty(m)
        for i, s in enumerate(self.subjects):
            y[i, : s.n] = s.y
            x[i, : s.n] = s.x
            mask[i, : s.n] = True
            times[i, : s.n] = s.times
            n[i] = s.n
            w[i] = s.weight
        return PanelArrays(y=y, x=x, mask=mask, n=n, weights=w, times=times)

    def subset(self, index) -> "PanelData":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return PanelData([self.subjects[i] for i in index], p=self.p)

    def with_weights(self, weights) -> "PanelData":
        weights = np.broadcast_to(np.asarray(weights, dtype=float), (self.m,))
        subs = [
            SubjectRecord(s.subject_id, s.times, s.y, s.x, float(w))
            for s, w in zip(self.subjects, weights)
        ]
        return PanelData(subs, p=self.p)


# ---------------------------------------------------------------------------
# elementary distributions


def _nb_logpmf_size(k, size, gamma):
    """NB log pmf with ``size`` successes and success probability 1/(1+gamma)."""
    k = np.asarray(k, dtype=float)
    return (
        gammaln(k + size)
        - gammaln(size)
        - gammaln(k + 1.0)
        - size * np.log1p(gamma)
        + k * (np.log(gamma) - np.log1p(gamma))
    )


def nb_logpmf(k, mu, gamma):
    """Log pmf of the negative binomial with mean ``mu`` and variance ``mu*(1+gamma)``."""
    mu = np.asarray(mu, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(mu <= 0) or np.any(gamma <= 0):
        raise ValueError("nb_logpmf requires mu > 0 and gamma > 0")
    k = np.asarray(k)
    if np.any(k < 0):
        raise ValueError("nb_logpmf requires k >= 0")
    out = _nb_logpmf_size(k, mu / gamma, gamma)
    return out if np.ndim(out) else float(out)


def nb_tail_bound(mu, gamma, tail=TAIL_MASS) -> int:
    """Smallest K with P(Y > K) < ``tail`` for ``Y ~ NB(mu, mu*(1+gamma))``."""
    size = np.max(np.asarray(mu, dtype=float)) / gamma
    k = int(stats.nbinom.isf(tail, size, 1.0 / (1.0 + gamma)))
    while stats.nbinom.sf(k, size, 1.0 / (1.0 + gamma)) >= tail:
        k += 1
    return k


def _betabin_logpmf(k, n, a, b):
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    return (
        gammaln(n + 1.0)
        - gammaln(k + 1.0)
        - gammaln(n - k + 1.0)
        + gammaln(k + a)
        + gammaln(n - k + b)
        - gammaln(n + a + b)
        - gammaln(a)
        - gammaln(b)
        + gammaln(a + b)
    )


def betabin_logpmf(k, n, a, b):
    """Log pmf of the beta-binomial: Binomial(n, q) mixed over q ~ Beta(a, b)."""
    k_arr, n_arr = np.asarray(k), np.asarray(n)
    if np.any(k_arr < 0) or np.any(k_arr > n_arr):
        raise ValueError("betabin_logpmf requires 0 <= k <= n")
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise ValueError("betabin_logpmf requires a, b > 0")
    out = _betabin_logpmf(k_arr, n_arr, a, b)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# constraints


@dataclass
class ConstraintReport:
    """Outcome of :func:`check_constraints`.

    ``subject`` and ``rank`` locate the binding transition (``rank`` is the
    1-based rank of the later observation); ``bound`` is the smallest ratio
    ``min(mu_prev/mu, mu/mu_prev)`` found and ``alpha**2`` must stay below it.
    """

    ok: bool
    alpha: float
    bound: float
    subject: Hashable = None
    rank: int | None = None

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return f"ok: alpha^2={self.alpha ** 2:.6g} < {self.bound:.6g}"
        return (
            f"constraint violated at subject {self.subject!r}, ranks "
            f"({self.rank - 1}, {self.rank}): alpha^2={self.alpha ** 2:.6g} "
            f">= min mean ratio {self.bound:.6g}"
        )


def _ratio_bound(mu, pair_mask):
    """Per-transition ``min(mu_prev/mu, mu/mu_prev)``; 1 where no transition."""
    lr = np.abs(np.log(mu[:, 1:]) - np.log(mu[:, :-1]))
    return np.where(pair_mask, np.exp(-lr), 1.0)


def max_alpha(beta, arrays: PanelArrays) -> float:
    """Supremum of admissible alpha for ``beta`` on the given panel."""
    if arrays.y.shape[1] < 2:
        return 1.0
    bound = _ratio_bound(arrays.mu(beta), arrays.pair_mask)
    return float(np.sqrt(bound.min())) if bound.size else 1.0


def check_constraints(params: ClassParams, designs) -> ConstraintReport:
    """Check ``alpha^2 < min(mu_{j-1}/mu_j, mu_j/mu_{j-1})`` on every transition.

    ``designs`` is a :class:`PanelData` (or its :class:`PanelArrays`).
    """
    arrays = designs.arrays if isinstance(designs, PanelData) else designs
    a2 = params.alpha ** 2
    if arrays.y.shape[1] < 2 or not arrays.pair_mask.any():
        return ConstraintReport(True, params.alpha, 1.0)
    bound = _ratio_bound(arrays.mu(params.beta), arrays.pair_mask)
    flat = int(np.argmin(bound))
    i, j = np.unravel_index(flat, bound.shape)
    b = float(bound[i, j])
    if params.alpha == 0.0 or a2 < b:
        return ConstraintReport(True, params.alpha, b)
    sid = designs.subjects[i].subject_id if isinstance(designs, PanelData) else int(i)
    return ConstraintReport(False, params.alpha, b, subject=sid, rank=int(j) + 2)


def _require(params, mu_prev, mu_curr):
    if params.alpha == 0.0:
        return
    r = np.minimum(mu_prev / mu_curr, mu_curr / mu_prev)
    if np.any(params.alpha ** 2 >= r):
        rep = ConstraintReport(False, params.alpha, float(np.min(r)))
        raise ConstraintViolation(
            f"alpha^2={params.alpha ** 2:.6g} >= mean ratio {float(np.min(r)):.6g}", rep
        )


# ---------------------------------------------------------------------------
# transitions


def _thinning_shapes(mu_prev, mu_curr, params):
    """(lam, eta_prev, eta_curr): thinning Beta(lam, eta_prev-lam), innovation size eta_curr-lam."""
    g = params.gamma
    lam = params.alpha * np.sqrt(mu_prev * mu_curr) / g
    return lam, mu_prev / g, mu_curr / g


def transition_logpmf(y_curr, y_prev, mu_curr, mu_prev, params: ClassParams) -> float:
    """log P(y_curr | y_prev) as a convolution of thinning and innovation pmfs."""
    if y_curr < 0 or y_prev < 0:
        raise ValueError("counts must be nonnegative")
    _require(params, mu_prev, mu_curr)
    lam, eta_prev, eta_curr = _thinning_shapes(mu_prev, mu_curr, params)
    if lam == 0.0 or y_prev == 0:
        return float(_nb_logpmf_size(y_curr, eta_curr - lam, params.gamma))
    k = np.arange(min(y_curr, y_prev) + 1)
    terms = _betabin_logpmf(k, y_prev, lam, eta_prev - lam) + _nb_logpmf_size(
        y_curr - k, eta_curr - lam, params.gamma
    )
    return float(logsumexp(terms))


def conditional_moments(y_prev, mu_curr, mu_prev, params: ClassParams):
    """Mean and variance of ``y_curr`` given ``y_prev``.

    With ``lam = alpha*sqrt(mu_curr/mu_prev)`` the mean is
    ``mu_curr - lam*mu_prev + lam*y_prev`` and the variance is the innovation
    variance ``(mu_curr - lam*mu_prev)*phi`` plus the beta-binomial variance
    ``y_prev*lam*(1-lam)*(eta_prev + y_prev)/(1 + eta_prev)``.  Both reduce to
    ``mu*(1-lam) + lam*y_prev`` and ``mu*(1-lam)*phi + ...`` for a constant mean.
    """
    _require(params, mu_prev, mu_curr)
    lam = params.alpha * np.sqrt(mu_curr / mu_prev)
    eta_prev = mu_prev / params.gamma
    innov = mu_curr - lam * mu_prev
    mean = innov + lam * y_prev
    var = innov * params.phi + y_prev * lam * (1.0 - lam) * (eta_prev + y_prev) / (1.0 + eta_prev)
    return float(mean), float(var)


def subject_loglik(subject: SubjectRecord, params: ClassParams) -> float:
    """log p(y_i; theta) over consecutive ranks (reference, unvectorised)."""
    mu = params.mean_curve(subject.x)
    y = subject.y
    out = float(_nb_logpmf_size(y[0], mu[0] / params.gamma, params.gamma))
    for j in range(1, subject.n):
        out += transition_logpmf(int(y[j]), int(y[j - 1]), mu[j], mu[j - 1], params)
    return out


def _transition_matrix_logpmf(y_curr, y_prev, mu_curr, mu_prev, params):
    """Vectorised transition log pmf over equally shaped arrays."""
    g = params.gamma
    lam, eta_prev, eta_curr = _thinning_shapes(mu_prev, mu_curr, params)
    r_innov = eta_curr - lam
    if params.alpha == 0.0:
        return _nb_logpmf_size(y_curr, r_innov, g)
    kmax = int(np.minimum(y_curr, y_prev).max(initial=0))
    k = np.arange(kmax + 1, dtype=float)
    yc, yp = y_curr[..., None], y_prev[..., None]
    valid = k <= np.minimum(yc, yp)
    kk = np.where(valid, k, 0.0)
    lam_, a2 = lam[..., None], (eta_prev - lam)[..., None]
    # thinning: beta-binomial(y_prev, lam, eta_prev - lam)
    bb = (
        gammaln(yp + 1.0)
        - gammaln(kk + 1.0)
        - gammaln(yp - kk + 1.0)
        + gammaln(kk + lam_)
        + gammaln(yp - kk + a2)
        - gammaln(yp + eta_prev[..., None])
        - gammaln(lam_)
        - gammaln(a2)
        + gammaln(eta_prev[..., None])
    )
    # y_prev == 0 leaves only k = 0 with probability 1
    bb = np.where(yp == 0, 0.0, bb)
    rem = yc - kk
    nb = _nb_logpmf_size(rem, r_innov[..., None], g)
    terms = np.where(valid, bb + nb, -np.inf)
    return logsumexp(terms, axis=-1)


def panel_loglik(panel, params: ClassParams) -> np.ndarray:
    """Per-subject within-class log-likelihoods, shape (m,)."""
    a = panel.arrays if isinstance(panel, PanelData) else panel
    mu = a.mu(params.beta)
    if params.alpha > 0 and a.pair_mask.any():
        bound = _ratio_bound(mu, a.pair_mask).min()
        if params.alpha ** 2 >= bound:
            raise ConstraintViolation(
                f"alpha^2={params.alpha ** 2:.6g} >= mean ratio {bound:.6g}",
                ConstraintReport(False, params.alpha, float(bound)),
            )
    g = params.gamma
    first, inv0 = a.first_groups
    out = _nb_logpmf_size(a.y[first, 0], mu[first, 0] / g, g)[inv0]
    if a.y.shape[1] > 1 and a.pair_mask.any():
        rows, _, rr, rc, inv = a.transition_groups
        lp = _transition_matrix_logpmf(a.y[rr, rc + 1], a.y[rr, rc], mu[rr, rc + 1], mu[rr, rc], params)
        out = out + np.bincount(rows, weights=lp[inv], minlength=a.y.shape[0])
    return out


# ---------------------------------------------------------------------------
# simulation


def _nb_draw(rng, size, gamma):
    size = np.asarray(size, dtype=float)
    out = np.zeros(size.shape, dtype=np.int64)
    pos = size > 0
    out[pos] = rng.negative_binomial(size[pos], 1.0 / (1.0 + gamma))
    return out


def simulate_counts(mu, params: ClassParams, rng) -> np.ndarray:
    """Draw count paths for each row of ``mu`` (shape (m, n)) from the process."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    m, n = mu.shape
    g = params.gamma
    y = np.empty((m, n), dtype=np.int64)
    y[:, 0] = _nb_draw(rng, mu[:, 0] / g, g)
    for j in range(1, n):
        _require(params, mu[:, j - 1], mu[:, j])
        lam, eta_prev, eta_curr = _thinning_shapes(mu[:, j - 1], mu[:, j], params)
        if params.alpha > 0:
            q = rng.beta(lam, eta_prev - lam)
            h = rng.binomial(y[:, j - 1], q)
        else:
            h = np.zeros(m, dtype=np.int64)
        y[:, j] = h + _nb_draw(rng, eta_curr - lam, g)
    return y


def simulate_subject(x, params: ClassParams, rng, times=None, subject_id=0, weight=1.0) -> SubjectRecord:
    """Draw one subject with covariate rows ``x`` (one per rank)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = simulate_counts(params.mean_curve(x)[None, :], params, rng)[0]
    if times is None:
        times = np.arange(1, x.shape[0] + 1, dtype=float)
    return SubjectRecord(subject_id, times, y, x, weight)


def design_panel(x, y, times, ids: Sequence | None = None, weights=None) -> PanelData:
    """Build a balanced panel from a shared design ``x`` (n, p) and counts (m, n)."""
    y = np.asarray(y)
    m = y.shape[0]
    ids = range(1, m + 1) if ids is None else ids
    weights = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    subs = [SubjectRecord(sid, times, y[i], x, weights[i]) for i, sid in enumerate(ids)]
    return PanelData(subs, p=np.atleast_2d(x).shape[1])
