"""Poisson counts with class-specific normal random intercepts and slopes.

Within class c, subject i has ``log lambda_ij = b0 + b1 t_j + a0 + a1 t_j``
with ``(a0, a1)`` bivariate normal:

    Var(a0) = s0 + h^2 s1,  Var(a1) = s1,  Cov(a0, a1) = -h s1,

so that ``Var(a0 + a1 t) = s0 + s1 (t - h)^2``.  The centring constant ``h``
is the midpoint of the time grid by default, or ``(T - 1) / 2`` with T the
number of time points under the ``"literal"`` reading.

Marginal class likelihoods are integrated by adaptive tensor Gauss-Hermite
quadrature (recentred at each subject's posterior mode and whitened by the
Cholesky factor of the inverse Hessian), with a node-doubling self-check.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln, logsumexp

from .process import PanelData, SubjectRecord, design_panel
from .scenarios import draw_labels

__all__ = [
    "PN_SETTINGS",
    "PN_CSI_TARGETS",
    "PN_CORRECTIONS",
    "PnScenario",
    "PnTruth",
    "QuadratureError",
    "pn_scenario",
    "simulate_pn_subject",
    "pn_class_loglik",
    "pn_class_loglik_mc",
    "pn_oracle_posteriors",
    "quadratic_design",
]

# columns: settings 1..4; rows per class (b0, b1, s0, s1, pi)
PN_SETTINGS = {
    "beta0": ((-0.90, -0.90, -0.90, -9.00), (1.55, 1.55, 1.55, 1.3), (-0.40, -0.65, -0.65, -0.7), (1.40, 1.25, 1.25, 1.00)),
    "beta1": ((-0.35,) * 4, (-2.10,) * 4, (1.90, 2.00, 2.00, 1.75), (-0.05,) * 4),
    "sigma0_sq": ((0.30, 0.40, 0.85, 1.50), (0.08, 0.15, 0.35, 1.00), (0.10, 0.20, 0.60, 1.25), (0.06, 0.10, 0.35, 1.00)),
    "sigma1_sq": ((0.125, 0.20, 0.50, 0.70), (0.05, 0.075, 0.25, 0.50), (0.06, 0.075, 0.25, 0.55), (0.04, 0.04, 0.30, 0.45)),
    "pi": (0.50, 0.25, 0.15, 0.10),
}
PN_CSI_TARGETS = (0.957, 0.842, 0.765, 0.633)
PN_N_TIMES = (8, 5, 5, 5)

GH_NODES = 20
GH_CHECK_TOL = 1e-6


class QuadratureError(RuntimeError):
    """Node doubling changed a log-likelihood by more than the tolerance."""

    def __init__(self, message, max_diff=None, subject=None):
        super().__init__(message)
        self.max_diff = max_diff
        self.subject = subject


def quadratic_design(times) -> np.ndarray:
    """Rows ``(1, t, t^2)``."""
    t = np.asarray(times, dtype=float)
    return np.column_stack([np.ones_like(t), t, t * t])


@dataclass(frozen=True)
class PnScenario:
    beta0: np.ndarray
    beta1: np.ndarray
    sigma0_sq: np.ndarray
    sigma1_sq: np.ndarray
    pi: np.ndarray
    times: np.ndarray
    centre: float

    def __post_init__(self):
        for name in ("beta0", "beta1", "sigma0_sq", "sigma1_sq", "pi", "times"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        C = self.pi.size
        if any(getattr(self, k).size != C for k in ("beta0", "beta1", "sigma0_sq", "sigma1_sq")):
            raise ValueError("per-class parameter vectors differ in length")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must lie on the simplex")
        for c in range(C):
            if np.any(np.linalg.eigvalsh(self.cov(c)) <= 0):
                raise ValueError(f"random-effect covariance of class {c + 1} is not positive definite")

    @property
    def n_classes(self) -> int:
        return self.pi.size

    def cov(self, c: int) -> np.ndarray:
        s0, s1, h = self.sigma0_sq[c], self.sigma1_sq[c], self.centre
        return np.array([[s0 + h * h * s1, -h * s1], [-h * s1, s1]])

    def marginal_log_mean(self, c: int, t=None) -> np.ndarray:
        """``log E(Y | t, class c)``: quadratic in t."""
        t = self.times if t is None else np.asarray(t, dtype=float)
        v = self.sigma0_sq[c] + self.sigma1_sq[c] * (t - self.centre) ** 2
        return self.beta0[c] + self.beta1[c] * t + 0.5 * v

    def reference_curves(self) -> np.ndarray:
        return np.exp(np.array([self.marginal_log_mean(c) for c in range(self.n_classes)]))


# registry values replaced by default: (setting, key, class index) -> value
PN_CORRECTIONS = {(4, "beta0", 0): -0.90}


def pn_scenario(setting: int, reading: str = "midpoint", corrected: bool = True) -> PnScenario:
    """Poisson-Normal registry setting ``1..4`` (in decreasing separation).

    ``reading`` picks the centring constant: ``"midpoint"`` uses the midpoint
    of the time grid, ``"literal"`` uses (T - 1)/2 with T the number of time
    points.  ``corrected`` applies :data:`PN_CORRECTIONS` to the registry.
    """
    if setting not in (1, 2, 3, 4):
        raise ValueError("setting must be 1, 2, 3 or 4")
    k = setting - 1
    T = PN_N_TIMES[k]
    times = np.arange(1, T + 1) / (9.0 if T == 8 else 6.0)
    if reading == "literal":
        centre = (T - 1) / 2.0
    elif reading == "midpoint":
        centre = 0.5 * (times[0] + times[-1])
    else:
        raise ValueError("reading must be 'literal' or 'midpoint'")
    keys = ("beta0", "beta1", "sigma0_sq", "sigma1_sq")
    col = {key: np.array([row[k] for row in PN_SETTINGS[key]]) for key in keys}
    if corrected:
        for (st, key, c), val in PN_CORRECTIONS.items():
            if st == setting:
                col[key][c] = val
    return PnScenario(pi=np.array(PN_SETTINGS["pi"]), times=times, centre=centre, **col)


def _draw_effects(scenario, c, size, rng):
    L = np.linalg.cholesky(scenario.cov(c))
    return rng.standard_normal((size, 2)) @ L.T


def simulate_pn_subject(scenario: PnScenario, c: int, rng, subject_id=0) -> SubjectRecord:
    """One subject of (0-based) class ``c`` on the scenario's time grid."""
    a0, a1 = _draw_effects(scenario, c, 1, rng)[0]
    t = scenario.times
    lam = np.exp(scenario.beta0[c] + scenario.beta1[c] * t + a0 + a1 * t)
    return SubjectRecord(subject_id, t, rng.poisson(lam), quadratic_design(t))


def _simulate_counts(scenario, labels, rng):
    t = scenario.times
    y = np.zeros((labels.size, t.size), dtype=np.int64)
    for c in range(scenario.n_classes):
        rows = np.flatnonzero(labels == c + 1)
        if rows.size:
            a = _draw_effects(scenario, c, rows.size, rng)
            eta = scenario.beta0[c] + scenario.beta1[c] * t + a[:, [0]] + a[:, [1]] * t
            y[rows] = rng.poisson(np.exp(eta))
    return y


# ---------------------------------------------------------------------------
# marginal likelihoods


def _gh_grid(k):
    x, w = hermgauss(k)
    z = np.sqrt(2.0) * x
    lw = np.log(w / np.sqrt(np.pi))
    zz = np.stack(np.meshgrid(z, z, indexing="ij"), axis=-1).reshape(-1, 2)
    return zz, (lw[:, None] + lw[None, :]).reshape(-1)


def _time_groups(panel):
    a = panel.arrays
    key = np.where(a.mask, a.times, np.inf)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    return a, uniq, inv.reshape(-1)


def _subject_terms(a, scenario, c):
    """Per subject: the node-independent part, sum(y) and sum(y t)."""
    t = np.where(a.mask, a.times, 0.0)
    y = a.y
    const = (y * (scenario.beta0[c] + scenario.beta1[c] * t)).sum(axis=1) - np.where(
        a.mask, gammaln(y + 1.0), 0.0
    ).sum(axis=1)
    return const, y.sum(axis=1), (y * t).sum(axis=1)


def _posterior_modes(y, t, mask, base, prec, max_iter=100, tol=1e-10):
    """Modes and Hessians of ``log Poisson(y | a) + log N(a; 0, prec^-1)`` per subject."""
    m = y.shape[0]
    a = np.zeros((m, 2))
    for _ in range(max_iter):
        lam = np.where(mask, np.exp(base + a[:, [0]] + a[:, [1]] * t), 0.0)
        r = np.where(mask, y - lam, 0.0)
        grad = np.column_stack([r.sum(axis=1), (r * t).sum(axis=1)]) - a @ prec
        s0, s1, s2 = lam.sum(axis=1), (lam * t).sum(axis=1), (lam * t * t).sum(axis=1)
        h00, h01, h11 = s0 + prec[0, 0], s1 + prec[0, 1], s2 + prec[1, 1]
        det = h00 * h11 - h01 * h01
        step = np.column_stack([h11 * grad[:, 0] - h01 * grad[:, 1], h00 * grad[:, 1] - h01 * grad[:, 0]]) / det[:, None]
        # the objective is strictly concave; cap the step to keep exp() finite early on
        big = np.abs(step).max(axis=1, keepdims=True)
        a = a + step * np.minimum(1.0, 2.0 / np.maximum(big, 1e-300))
        if np.max(np.abs(step)) < tol:
            break
    lam = np.where(mask, np.exp(base + a[:, [0]] + a[:, [1]] * t), 0.0)
    s0, s1, s2 = lam.sum(axis=1), (lam * t).sum(axis=1), (lam * t * t).sum(axis=1)
    return a, np.stack([[s0 + prec[0, 0], s1 + prec[0, 1]], [s1 + prec[0, 1], s2 + prec[1, 1]]], axis=-1).transpose(1, 0, 2)


def _adaptive_gh(y, t, mask, base, cov, nodes):
    """log of ``int prod_j Poisson(y_j; exp(base_j + a0 + a1 t_j)) N(a; 0, cov) da``.

    Omits the ``-sum log y_j!`` and ``sum y_j base_j`` terms.
    """
    prec = np.linalg.inv(cov)
    _, logdet_cov = np.linalg.slogdet(cov)
    mode, hess = _posterior_modes(y, t, mask, base, prec)
    # S S' = hess^{-1}; closed form 2x2 Cholesky of the inverse
    det = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] ** 2
    v00, v01, v11 = hess[:, 1, 1] / det, -hess[:, 0, 1] / det, hess[:, 0, 0] / det
    l00 = np.sqrt(v00)
    l10 = v01 / l00
    l11 = np.sqrt(v11 - l10 ** 2)
    z, lw = _gh_grid(nodes)
    a0 = mode[:, [0]] + l00[:, None] * z[None, :, 0]
    a1 = mode[:, [1]] + l10[:, None] * z[None, :, 0] + l11[:, None] * z[None, :, 1]
    sy = np.where(mask, y, 0.0).sum(axis=1)
    syt = np.where(mask, y * t, 0.0).sum(axis=1)
    s = np.zeros_like(a0)
    for j in range(y.shape[1]):
        s += np.where(mask[:, [j]], np.exp(base[:, [j]] + a0 + a1 * t[:, [j]]), 0.0)
    loglik = a0 * sy[:, None] + a1 * syt[:, None] - s
    quad = prec[0, 0] * a0 ** 2 + 2 * prec[0, 1] * a0 * a1 + prec[1, 1] * a1 ** 2
    log_prior = -0.5 * quad - np.log(2 * np.pi) - 0.5 * logdet_cov
    log_phi_z = -0.5 * (z ** 2).sum(axis=1) - np.log(2 * np.pi)
    terms = loglik + log_prior - log_phi_z[None, :] + lw[None, :]
    return logsumexp(terms, axis=1) + np.log(l00 * l11)


def _class_loglik(a, scenario, c, nodes, rows=None, block=2000):
    rows = np.arange(a.y.shape[0]) if rows is None else rows
    const, _, _ = _subject_terms(a, scenario, c)
    t_all = np.where(a.mask, a.times, 0.0)
    out = np.empty(rows.size)
    cov = scenario.cov(c)
    for s in range(0, rows.size, block):
        r = rows[s : s + block]
        t = t_all[r]
        base = scenario.beta0[c] + scenario.beta1[c] * t
        out[s : s + block] = const[r] + _adaptive_gh(a.y[r], t, a.mask[r], base, cov, nodes)
    return out


CHECK_SUBJECTS = 500


def pn_class_loglik(scenario: PnScenario, panel: PanelData, nodes: int = GH_NODES, check: bool = True):
    """(m, C) marginal log-likelihoods by adaptive tensor Gauss-Hermite.

    Each subject's integrand is recentred at its posterior mode and whitened
    by the Cholesky factor of the inverse Hessian there.  With ``check`` the
    integral is recomputed with twice as many nodes per axis on up to
    ``CHECK_SUBJECTS`` evenly spaced subjects, and :class:`QuadratureError`
    is raised if any value moves by more than ``GH_CHECK_TOL``.
    """
    a = panel.arrays
    m = a.y.shape[0]
    out = np.empty((m, scenario.n_classes))
    probe = np.unique(np.linspace(0, m - 1, min(m, CHECK_SUBJECTS)).astype(int))
    for c in range(scenario.n_classes):
        out[:, c] = _class_loglik(a, scenario, c, nodes)
        if check:
            fine = _class_loglik(a, scenario, c, 2 * nodes, rows=probe)
            diff = np.abs(fine - out[probe, c])
            worst = int(np.argmax(diff))
            if diff[worst] > GH_CHECK_TOL:
                sid = panel.subjects[probe[worst]].subject_id
                raise QuadratureError(
                    f"class {c + 1}: {nodes} vs {2 * nodes} nodes differ by {diff[worst]:.3g} at subject {sid!r}",
                    max_diff=float(diff[worst]),
                    subject=sid,
                )
    return out


def pn_class_loglik_mc(scenario: PnScenario, panel: PanelData, draws: int, rng, chunk: int = 250_000):
    """Monte-Carlo marginal log-likelihoods and their standard errors, each (m, C).

    Uses plain draws of the random effects shared across subjects; the
    standard error is the delta-method s.e. of the log of the sample mean.
    """
    a, uniq, inv = _time_groups(panel)
    m, C = a.y.shape[0], scenario.n_classes
    est, se = np.empty((m, C)), np.empty((m, C))
    for c in range(C):
        const, sy, syt = _subject_terms(a, scenario, c)
        eff = _draw_effects(scenario, c, draws, rng)
        for i in range(m):
            row = uniq[inv[i]]
            t = row[np.isfinite(row)]
            base = scenario.beta0[c] + scenario.beta1[c] * t
            ll = np.empty(draws)
            for s in range(0, draws, chunk):
                e = eff[s : s + chunk]
                ll[s : s + chunk] = (
                    e[:, 0] * sy[i] + e[:, 1] * syt[i] - np.exp(base[None, :] + e[:, [0]] + e[:, [1]] * t).sum(axis=1)
                )
            shift = ll.max()
            v = np.exp(ll - shift)
            mean = v.mean()
            est[i, c] = const[i] + shift + np.log(mean)
            se[i, c] = v.std(ddof=1) / np.sqrt(draws) / mean
    return est, se


def pn_oracle_posteriors(scenario: PnScenario, panel: PanelData, nodes: int = GH_NODES, check: bool = True):
    """Posterior class probabilities under the true Poisson-Normal model."""
    lw = pn_class_loglik(scenario, panel, nodes, check) + np.log(scenario.pi)
    return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))


@dataclass
class PnTruth:
    """Labelled Poisson-Normal generator; panels carry a quadratic design."""

    scenario: PnScenario
    nodes: int = GH_NODES
    check: bool = True

    @property
    def n_classes(self) -> int:
        return self.scenario.n_classes

    @property
    def x(self) -> np.ndarray:
        return quadratic_design(self.scenario.times)

    @property
    def times(self) -> np.ndarray:
        return self.scenario.times

    def reference_curves(self) -> np.ndarray:
        return self.scenario.reference_curves()

    def sample(self, m: int, rng):
        z = draw_labels(self.scenario.pi, m, rng)
        y = _simulate_counts(self.scenario, z, rng)
        return design_panel(self.x, y, self.scenario.times), z

    def oracle_posteriors(self, panel) -> np.ndarray:
        return pn_oracle_posteriors(self.scenario, panel, self.nodes, self.check)

    def with_options(self, **kw) -> "PnTruth":
        return replace(self, **kw)
