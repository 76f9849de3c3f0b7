"""Registries of simulation truths and labelled data generators.

Two families are provided: INAR(1)-NB mixtures with linear log-mean curves
(scenarios ``"I"`` and ``"II"``), and Poisson log-linear models with bivariate
normal random intercepts and slopes (see :mod:`inarmix.poisson_normal`).
Each generator exposes ``sample(m, rng) -> (panel, labels)`` with 1-based
labels and ``oracle_posteriors(panel)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .em import MixtureModel, posterior_weights
from .process import (
    ClassParams,
    ConstraintViolation,
    check_constraints,
    design_panel,
    simulate_counts,
)

__all__ = [
    "INAR_PI",
    "INAR_BETAS",
    "INAR_TIMES",
    "InarScenario",
    "InarTruth",
    "inar_scenario",
    "linear_design",
    "draw_labels",
]

INAR_PI = (0.50, 0.25, 0.15, 0.10)

# (intercepts, slopes) per class
INAR_BETAS = {
    "I": ((-0.4, 1.5, 0.0, 1.4), (-0.1, -0.7, 0.65, 0.0)),
    "II": ((-0.4, 1.4, 0.0, 1.2), (-0.1, -1.0, 0.9, 0.0)),
}

INAR_TIMES = {
    "I": tuple(j / 4 for j in range(1, 9)),
    "II": tuple(j / 4 for j in range(1, 6)),
}


def linear_design(times) -> np.ndarray:
    """Rows ``(1, t_j)``."""
    t = np.asarray(times, dtype=float)
    return np.column_stack([np.ones_like(t), t])


def draw_labels(pi, m, rng) -> np.ndarray:
    """Independent 1-based class labels with probabilities ``pi``."""
    return rng.choice(len(pi), size=m, p=np.asarray(pi, dtype=float)) + 1


@dataclass(frozen=True)
class InarScenario:
    id: str
    alpha: float
    phi: float
    betas: np.ndarray  # (C, 2)
    pi: np.ndarray
    times: np.ndarray


@dataclass
class InarTruth:
    """A labelled INAR(1)-NB mixture on a design shared by all subjects."""

    model: MixtureModel
    x: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        if self.x.shape[0] != self.times.shape[0]:
            raise ValueError("design rows and times differ in length")

    @property
    def n_classes(self) -> int:
        return self.model.C

    def reference_curves(self) -> np.ndarray:
        return self.model.mean_curves(self.x)

    def simulate(self, labels, rng):
        """Counts (m, n) for given 1-based ``labels``."""
        labels = np.asarray(labels)
        y = np.zeros((labels.size, self.times.size), dtype=np.int64)
        for c, th in enumerate(self.model.classes):
            rows = np.flatnonzero(labels == c + 1)
            if rows.size:
                mu = np.broadcast_to(th.mean_curve(self.x), (rows.size, self.times.size))
                y[rows] = simulate_counts(mu, th, rng)
        return y

    def sample(self, m: int, rng):
        z = draw_labels(self.model.pi, m, rng)
        y = self.simulate(z, rng)
        return design_panel(self.x, y, self.times), z

    def oracle_posteriors(self, panel) -> np.ndarray:
        return posterior_weights(self.model, panel)


def inar_scenario(id: str, alpha: float, phi: float) -> InarTruth:
    """Four-class INAR truth with ``log mu = b0 + b1 t`` for registry ``id``.

    Raises :class:`inarmix.process.ConstraintViolation` if ``alpha`` is too
    large for some class's mean curve.
    """
    key = str(id).upper()
    if key not in INAR_BETAS:
        raise ValueError(f"unknown scenario {id!r}; choose I or II")
    b0, b1 = INAR_BETAS[key]
    times = np.asarray(INAR_TIMES[key])
    x = linear_design(times)
    classes = [ClassParams.from_phi((a, b), alpha, phi) for a, b in zip(b0, b1)]
    model = MixtureModel(classes, np.asarray(INAR_PI))
    truth = InarTruth(model, x, times)
    probe = design_panel(x, np.zeros((1, times.size), dtype=int), times)
    for th in classes:
        report = check_constraints(th, probe)
        if not report:
            raise ConstraintViolation(report.describe(), report)
    return truth


def scenario_info(truth: InarTruth, id: str) -> InarScenario:
    th = truth.model.classes
    return InarScenario(
        id=id,
        alpha=th[0].alpha,
        phi=th[0].phi,
        betas=np.array([c.beta for c in th]),
        pi=truth.model.pi.copy(),
        times=truth.times.copy(),
    )
