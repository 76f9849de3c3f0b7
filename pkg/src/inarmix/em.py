"""Quasi-EM fitting of INAR(1)-NB latent class models.

The E-step computes posterior class probabilities; the M-step updates the
mixture proportions in closed form and solves each class's posterior-weighted
estimating equation.  Convergence is declared when the stacked estimating
function ``G`` (estimating functions weighted by the posteriors, plus the
posterior-minus-proportion block) is small relative to the total weight.
Alpha and phi components that point past a parameter bound the class already
sits on are left out of that check.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._rng import seed_sequence
from .estimating import (
    ALPHA_CAP,
    ALPHA_EPS,
    EE_TOL,
    PHI_FLOOR,
    poisson_deviance,
    poisson_irls,
    score_contributions,
    solve_weighted_ee,
)
from .process import ClassParams, PanelData, max_alpha, panel_loglik

logger = logging.getLogger(__name__)

__all__ = [
    "MixtureModel",
    "FitReport",
    "RestartInfo",
    "SandwichResult",
    "posterior_weights",
    "loglik_matrix",
    "mixture_loglik",
    "em_fit",
    "em_run",
    "initialize",
    "stacked_g",
    "g_contributions",
    "sandwich_covariance",
    "align_labels",
    "weighted_bic",
    "parameter_names",
]

OUTER_TOL = 1e-6
MAX_ITER = 500
PI_FLOOR = 1e-8
COLLAPSE_ITERS = 10
# initial cluster fits with |log mean| beyond this are treated as diverged
MAX_LOG_MEAN = 15.0


@dataclass
class MixtureModel:
    """Class parameter blocks and mixture proportions."""

    classes: list
    pi: np.ndarray

    def __post_init__(self):
        self.classes = list(self.classes)
        self.pi = np.asarray(self.pi, dtype=float).reshape(-1)
        if len(self.classes) < 1:
            raise ValueError("a mixture needs at least one class")
        if self.pi.shape[0] != len(self.classes):
            raise ValueError("pi and classes differ in length")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"pi must be positive and sum to 1, got {self.pi}")
        if len({c.p for c in self.classes}) != 1:
            raise ValueError("classes disagree on covariate dimension")

    @property
    def C(self) -> int:
        return len(self.classes)

    @property
    def p(self) -> int:
        return self.classes[0].p

    @property
    def n_params(self) -> int:
        return (self.p + 3) * self.C - 1

    def to_vector(self) -> np.ndarray:
        """``(beta_1, alpha_1, gamma_1, ..., beta_C, alpha_C, gamma_C, pi_1..pi_{C-1})``."""
        parts = [np.concatenate([c.beta, [c.alpha, c.gamma]]) for c in self.classes]
        parts.append(self.pi[:-1])
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, C, p) -> "MixtureModel":
        vec = np.asarray(vec, dtype=float)
        k = p + 2
        classes = [
            ClassParams(vec[c * k : c * k + p], vec[c * k + p], vec[c * k + p + 1]) for c in range(C)
        ]
        head = vec[C * k :]
        pi = np.append(head, 1.0 - head.sum())
        return cls(classes, pi)

    def permute(self, perm) -> "MixtureModel":
        """Model whose class ``c`` is this model's class ``perm[c]``."""
        perm = list(perm)
        return MixtureModel([self.classes[s] for s in perm], self.pi[perm])

    def mean_curves(self, x) -> np.ndarray:
        """(C, n) matrix of class means on covariate rows ``x``."""
        return np.array([c.mean_curve(x) for c in self.classes])


def parameter_names(C: int, p: int) -> list:
    names = []
    for c in range(1, C + 1):
        names += [f"class{c}.beta{k}" for k in range(p)]
        names += [f"class{c}.alpha", f"class{c}.gamma"]
    names += [f"pi{c}" for c in range(1, C)]
    return names


def _vector_perm(perm, C, p):
    """Index map that reorders a parameter vector to match ``model.permute(perm)``."""
    k = p + 2
    idx = [s * k + j for s in perm for j in range(k)]
    if C > 1:
        # the dropped last proportion cannot be permuted; callers recompute it
        idx += [C * k + s for s in perm if s < C - 1]
    return np.asarray(idx)


def loglik_matrix(model: MixtureModel, panel) -> np.ndarray:
    """(m, C) within-class log-likelihoods."""
    return np.column_stack([panel_loglik(panel, c) for c in model.classes])


def _posterior_from_loglik(ll, pi):
    lw = ll + np.log(pi)
    return np.exp(lw - logsumexp(lw, axis=1, keepdims=True)), logsumexp(lw, axis=1)


def posterior_weights(model: MixtureModel, panel) -> np.ndarray:
    """Posterior class-membership probabilities, (m, C), rows summing to one."""
    return _posterior_from_loglik(loglik_matrix(model, panel), model.pi)[0]


def mixture_loglik(model: MixtureModel, panel, weights=None) -> float:
    """``sum_i v_i log sum_c pi_c p_i(y_i; theta_c)``."""
    ll = logsumexp(loglik_matrix(model, panel) + np.log(model.pi), axis=1)
    return float(ll.sum() if weights is None else np.asarray(weights) @ ll)


def _g_from(model, panel, post):
    blocks = [post[:, [c]] * score_contributions(panel, th) for c, th in enumerate(model.classes)]
    blocks.append(post[:, :-1] - model.pi[:-1])
    return np.hstack(blocks)


def _projected(model, panel, gsum):
    """Zero the alpha/gamma components of ``gsum`` whose root lies past a bound.

    A class with alpha clamped at 0 (or at its cap) or phi at the floor cannot
    move further in that direction, so its outward-pointing score is not a
    failure to converge.
    """
    out = np.array(gsum, dtype=float)
    k = model.p + 2
    for c, th in enumerate(model.classes):
        ja, jg = c * k + model.p, c * k + model.p + 1
        cap = max(min(max_alpha(th.beta, panel.arrays), ALPHA_CAP) - ALPHA_EPS, 0.0)
        if (th.alpha <= 0.0 and out[ja] < 0.0) or (th.alpha >= cap and out[ja] > 0.0):
            out[ja] = 0.0
        if th.phi <= PHI_FLOOR and out[jg] < 0.0:
            out[jg] = 0.0
    return out


def g_contributions(model: MixtureModel, panel) -> np.ndarray:
    """Per-subject stacked estimating functions ``G_i``, shape (m, (p+3)C - 1)."""
    return _g_from(model, panel, posterior_weights(model, panel))


def stacked_g(model: MixtureModel, panel, weights=None) -> np.ndarray:
    """``sum_i v_i G_i`` (``v_i = 1`` when ``weights`` is None)."""
    g = g_contributions(model, panel)
    return g.sum(axis=0) if weights is None else np.asarray(weights) @ g


def weighted_bic(model: MixtureModel, panel, weights=None) -> float:
    """``-2 sum_i v_i log p(y_i) + ((p+3)C - 1) log(sum_i v_i)``."""
    v = np.ones(len(panel)) if weights is None else np.asarray(weights, dtype=float)
    return -2.0 * mixture_loglik(model, panel, v) + model.n_params * np.log(v.sum())


# ---------------------------------------------------------------------------
# initialisation


def _pearson_phi(panel, beta, index):
    a = panel.arrays
    mu = a.mu(beta)[index]
    e2 = np.where(a.mask[index], (a.y[index] - mu) ** 2 / mu, 0.0)
    return max(float(e2.sum() / a.n[index].sum()), 1.05)


def initialize(panel: PanelData, C: int, rng, max_retries: int = 20) -> MixtureModel:
    """Starting values from deviance clustering of Poisson fits.

    Draws C subjects as cluster centres and fits a Poisson regression to each,
    assigns every subject to the centre of smallest Poisson deviance, refits
    each cluster, and repeats the assignment/refit twice more.  Proportions are
    the cluster shares and each class block solves the cluster's unweighted
    estimating equation.
    """
    m, p = panel.m, panel.p
    a = panel.arrays
    if C == 1:
        labels = np.zeros(m, dtype=int)
        betas = [poisson_irls(panel)]
    else:
        eligible = np.flatnonzero(a.n >= p)
        if eligible.size < C:
            raise ValueError(f"need at least {C} subjects with >= {p} observations")
        for attempt in range(max_retries):
            centres = rng.choice(eligible, size=C, replace=False)
            try:
                betas = [poisson_irls(panel.subset([i]), max_iter=50) for i in centres]
            except np.linalg.LinAlgError:
                continue
            ok = True
            for _ in range(3):
                dev = np.column_stack([poisson_deviance(panel, b) for b in betas])
                labels = np.argmin(dev, axis=1)
                if np.bincount(labels, minlength=C).min() == 0:
                    ok = False
                    break
                try:
                    betas = [poisson_irls(panel.subset(labels == c), max_iter=50) for c in range(C)]
                except np.linalg.LinAlgError:
                    ok = False
                    break
                # a cluster of (nearly) all-zero series has no finite Poisson fit
                if max(np.abs(a.x[a.mask] @ b).max() for b in betas) > MAX_LOG_MEAN:
                    ok = False
                    break
            if ok:
                break
        else:
            raise RuntimeError(f"initialisation failed {max_retries} times (empty or diverged cluster)")
    pi = np.bincount(labels, minlength=C) / m
    classes = []
    for c in range(C):
        idx = labels == c
        start = ClassParams.from_phi(betas[c], 0.0, _pearson_phi(panel, betas[c], idx))
        state = solve_weighted_ee(panel, idx.astype(float), start)
        classes.append(state.params)
    return MixtureModel(classes, pi)


# ---------------------------------------------------------------------------
# the quasi-EM iteration


@dataclass
class RestartInfo:
    restart: int
    seed_entropy: int
    spawn_key: tuple
    loglik: float
    criterion: float
    iterations: int
    converged: bool
    error: str | None = None


@dataclass
class SandwichResult:
    cov: np.ndarray
    se: np.ndarray
    names: list
    pseudo_inverse: bool = False


@dataclass
class FitReport:
    model: MixtureModel
    loglik: float
    bic: float
    converged: bool
    iterations: int
    criterion: float
    tol: float
    trace: list = field(default_factory=list)
    loglik_trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    se: np.ndarray | None = None
    cov: np.ndarray | None = None
    names: list = field(default_factory=list)
    collapsed: list = field(default_factory=list)
    frozen: list = field(default_factory=list)
    pseudo_inverse: bool = False
    weighted: bool = False
    permutation: np.ndarray | None = None

    @property
    def se_dict(self) -> dict:
        if self.se is None:
            return {}
        return dict(zip(self.names, (float(s) for s in self.se)))

    def aligned(self, perm) -> "FitReport":
        """Copy with classes reordered so new class c is old class ``perm[c]``."""
        perm = list(perm)
        C, p = self.model.C, self.model.p
        model = self.model.permute(perm)
        se, cov = self.se, self.cov
        if cov is not None:
            cov = _permute_cov(cov, perm, C, p)
            se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        out = FitReport(**{**self.__dict__, "model": model, "se": se, "cov": cov})
        out.collapsed = [self.collapsed[s] for s in perm] if self.collapsed else []
        out.frozen = [self.frozen[s] for s in perm] if self.frozen else []
        out.permutation = np.asarray(perm)
        return out


def _permute_cov(cov, perm, C, p):
    """Covariance of the reordered parameter vector.

    The proportion block keeps ``C - 1`` free entries, so the new vector is a
    linear map of the old one (``pi_C = 1 - sum``) and the covariance follows.
    """
    d = (p + 3) * C - 1
    k = p + 2
    J = np.zeros((d, d))
    for new, old in enumerate(perm):
        for j in range(k):
            J[new * k + j, old * k + j] = 1.0
    for new, old in enumerate(perm[:-1]):
        row = C * k + new
        if old < C - 1:
            J[row, C * k + old] = 1.0
        else:
            J[row, C * k :] = -1.0
    return J @ cov @ J.T


def em_run(panel: PanelData, start: MixtureModel, weights=None, tol=OUTER_TOL, max_iter=MAX_ITER):
    """Iterate quasi-EM from ``start``; returns a :class:`FitReport` without SEs."""
    v = np.ones(len(panel)) if weights is None else np.asarray(weights, dtype=float)
    V = v.sum()
    model = start
    C = model.C
    trace, ll_trace = [], []
    at_floor = np.zeros(C, dtype=int)
    collapsed = [False] * C
    frozen = [False] * C
    converged = False
    it = 0
    crit = np.inf
    ll = -np.inf
    for it in range(max_iter + 1):
        llm = loglik_matrix(model, panel)
        post, row_ll = _posterior_from_loglik(llm, model.pi)
        ll = float(v @ row_ll)
        crit = float(np.max(np.abs(_projected(model, panel, v @ _g_from(model, panel, post)))) / V)
        trace.append(crit)
        ll_trace.append(ll)
        if crit <= tol:
            converged = True
            break
        if it == max_iter:
            break
        vw = v[:, None] * post
        pi = vw.sum(axis=0) / V
        pinned = pi <= PI_FLOOR
        pi = np.maximum(pi, PI_FLOOR)
        pi /= pi.sum()
        at_floor = np.where(pinned, at_floor + 1, 0)
        # inexact M-step: solve the class equations only a little past the
        # current outer criterion; the fixed point is unchanged
        inner_tol = max(min(EE_TOL, tol * 1e-2), 1e-2 * crit)
        classes = []
        for c, th in enumerate(model.classes):
            state = solve_weighted_ee(panel, vw[:, c], th, tol=inner_tol)
            frozen[c] = frozen[c] or state.frozen
            collapsed[c] = collapsed[c] or bool(at_floor[c] >= COLLAPSE_ITERS) or state.frozen
            classes.append(state.params)
        model = MixtureModel(classes, pi)
    bic = -2.0 * ll + model.n_params * np.log(V)
    return FitReport(
        model=model,
        loglik=ll,
        bic=float(bic),
        converged=converged,
        iterations=it,
        criterion=crit,
        tol=tol,
        trace=trace,
        loglik_trace=ll_trace,
        names=parameter_names(C, model.p),
        collapsed=collapsed,
        frozen=frozen,
        weighted=weights is not None,
    )


def _restart_task(args):
    panel, C, ss, weights, tol, max_iter, start = args
    rng = np.random.default_rng(ss)
    try:
        init = start if start is not None else initialize(panel, C, rng)
        return em_run(panel, init, weights, tol, max_iter), None
    except Exception as exc:  # a failed restart must not sink the others
        return None, f"{type(exc).__name__}: {exc}"


def em_fit(
    panel: PanelData,
    C: int,
    tol: float = OUTER_TOL,
    max_iter: int = MAX_ITER,
    restarts: int = 20,
    seed: int | np.random.SeedSequence = 0,
    use_weights: bool = False,
    start: MixtureModel | None = None,
    compute_se: bool = True,
    n_jobs: int = 1,
) -> FitReport:
    """Fit a C-class model, keeping the best of ``restarts`` initialisations.

    Restart ``r`` uses the r-th child of ``SeedSequence(seed)``, so results
    do not depend on ``n_jobs``.  With ``start`` given, every restart begins
    there (useful with ``restarts=1``).  The best run is the converged run with
    the highest (weighted) log-likelihood, or the best run overall if none
    converged.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    weights = panel.weights if use_weights else None
    seeds = seed_sequence(seed).spawn(restarts)
    tasks = [(panel, C, ss, weights, tol, max_iter, start) for ss in seeds]
    if n_jobs > 1 and restarts > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_restart_task, tasks))
    else:
        results = [_restart_task(t) for t in tasks]

    infos, best, best_key = [], None, None
    for r, ((rep, err), ss) in enumerate(zip(results, seeds)):
        if rep is None:
            infos.append(RestartInfo(r, ss.entropy, tuple(ss.spawn_key), float("nan"), float("nan"), 0, False, err))
            continue
        infos.append(
            RestartInfo(r, ss.entropy, tuple(ss.spawn_key), rep.loglik, rep.criterion, rep.iterations, rep.converged)
        )
        key = (rep.converged, rep.loglik)
        if best is None or key > best_key:
            best, best_key = rep, key
    if best is None:
        raise RuntimeError("every restart failed: " + "; ".join(i.error for i in infos))
    best.restarts = infos
    if compute_se:
        sw = sandwich_covariance(best.model, panel, weights)
        best.cov, best.se, best.pseudo_inverse = sw.cov, sw.se, sw.pseudo_inverse
    return best


# ---------------------------------------------------------------------------
# inference and post-processing


def sandwich_covariance(model: MixtureModel, panel, weights=None, rel_step=1e-5) -> SandwichResult:
    """Sandwich covariance ``B^{-1} M B^{-T}`` of the full parameter vector.

    ``B`` is a central-difference Jacobian of ``sum_i v_i G_i`` and
    ``M = sum_i v_i^2 G_i G_i'``; with unit weights this is
    ``(mean DG)^{-1} (mean G G') (mean DG)^{-T} / m``.
    """
    v = np.ones(len(panel)) if weights is None else np.asarray(weights, dtype=float)
    C, p = model.C, model.p
    psi = model.to_vector()
    d = psi.size
    g = g_contributions(model, panel)
    M = (g * (v ** 2)[:, None]).T @ g

    def total(vec):
        return v @ g_contributions(MixtureModel.from_vector(vec, C, p), panel)

    k = p + 2
    B = np.empty((d, d))
    base = None
    for j in range(d):
        h = rel_step * (1.0 + abs(psi[j]))
        lo_ok = hi_ok = True
        if j < C * k and j % k == p:  # 0 <= alpha < alpha_max
            amax = max_alpha(psi[j - p : j], panel.arrays)
            lo_ok = psi[j] - h >= 0.0
            hi_ok = psi[j] + h < amax
            if not (lo_ok or hi_ok):
                h = 0.5 * max(amax - psi[j], psi[j])
                lo_ok, hi_ok = psi[j] - h >= 0.0, psi[j] + h < amax
        elif j < C * k and j % k == p + 1:  # gamma > 0
            lo_ok = psi[j] - h > 0.0
        up, dn = psi.copy(), psi.copy()
        up[j] += h
        dn[j] -= h
        if lo_ok and hi_ok:
            B[:, j] = (total(up) - total(dn)) / (2.0 * h)
            continue
        if base is None:
            base = total(psi)
        if hi_ok:
            B[:, j] = (total(up) - base) / h
        elif lo_ok:
            B[:, j] = (base - total(dn)) / h
        else:
            B[:, j] = 0.0
    pinv = False
    if np.linalg.cond(B) > 1e12:
        warnings.warn("sandwich bread is numerically singular; using a pseudo-inverse", RuntimeWarning)
        Binv = np.linalg.pinv(B)
        pinv = True
    else:
        Binv = np.linalg.inv(B)
    cov = Binv @ M @ Binv.T
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return SandwichResult(cov, se, parameter_names(C, p), pinv)


def align_labels(model: MixtureModel, reference_curves, x):
    """Reorder classes to best match reference mean curves.

    ``reference_curves`` is a (C, n) array of true class means on the common
    covariate rows ``x`` (n, p).  Minimises ``sum_c ||mu_c - muhat_S(c)||^2``
    over all permutations S and returns ``(model.permute(S), S)``.
    """
    ref = np.asarray(reference_curves, dtype=float)
    est = model.mean_curves(x)
    C = model.C
    if ref.shape[0] != C:
        raise ValueError("reference and model have different numbers of classes")
    if C > 8:
        raise ValueError("exhaustive label alignment supports at most 8 classes")
    cost = ((ref[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(C)):
        s = cost[np.arange(C), perm].sum()
        if s < best_cost:
            best, best_cost = perm, s
    perm = np.asarray(best)
    return model.permute(perm), perm
