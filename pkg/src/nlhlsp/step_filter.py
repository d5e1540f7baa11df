"""Per-level step filter, model reductions, and nullspace trust-region updates.

A filter is a list of (infeasibility h, objective norm g) pairs; a candidate
step is acceptable when it improves on every stored pair by the beta/gamma
margins.  Acceptance additionally requires sufficient actual-vs-predicted
reduction unless the predicted reduction is nonpositive, in which case the
point itself enters the filter (h-type iteration).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class TrustRegionStall(RuntimeError):
    """The trust-region radius collapsed without an acceptable step."""


@dataclass
class Filter:
    """Domination-pruned list of (h, g) pairs guarding one priority level.

    The margins satisfy 0 < gamma < beta < 1; construction seeds the entry
    (u, -inf), which caps the admissible infeasibility at u.
    """

    level: int
    beta: float = 0.99
    gamma: float = 1e-4
    cap: float = 1e4
    entries: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.gamma < self.beta < 1.0:
            raise ValueError("filter margins must satisfy 0 < gamma < beta < 1")
        if not self.entries:
            self.entries.append((float(self.cap), -np.inf))

    def reset(self) -> None:
        self.entries = [(float(self.cap), -np.inf)]

    def set_cap(self, cap: float) -> None:
        """Move the infeasibility cap entry (u, -inf)."""
        self.entries = [e for e in self.entries if not np.isneginf(e[1])]
        self.cap = float(cap)
        self.entries.append((float(cap), -np.inf))


def filter_acceptable(f: Filter, h: float, g: float) -> bool:
    """True iff (h, g) improves on every stored pair by the margins."""
    for hj, gj in f.entries:
        if not (h <= f.beta * hj or g + f.gamma <= gj):
            return False
    return True


def filter_add(f: Filter, h: float, g: float) -> Filter:
    """Insert (h, g), removing every entry it (weakly) dominates."""
    f.entries = [(hj, gj) for hj, gj in f.entries if not (h <= hj and g <= gj)]
    f.entries.append((float(h), float(g)))
    return f


def _quad_reduction(a, b, dx) -> float:
    if a is None or a.shape[0] == 0:
        return 0.0
    adx = a @ dx
    return float(2.0 * b @ adx - adx @ adx)


def reductions(level, dx: np.ndarray, f_plus_now: float, f_plus_cand: float) -> tuple[float, float]:
    """Predicted and actual squared-norm reduction of one level.

    The predicted reduction expands the level's quadratic model
    ``|b|^2 - |A dx - b|^2`` over both equality (including curvature-factor
    rows) and inequality blocks; the actual reduction compares the squared
    task residual norms at the current point and at the candidate.
    """
    dq = _quad_reduction(level.a_eq, level.b_eq, dx)
    dq += _quad_reduction(level.a_ineq, level.b_ineq, dx)
    df = float(f_plus_now**2 - f_plus_cand**2)
    return dq, df


def step_filter_iterate(
    f: Filter,
    h: float,
    g: float,
    dq: float,
    df: float,
    rho: float,
    rho_max: float,
    sigma_suff: float = 0.1,
    rho_min: float = 1e-14,
) -> tuple[bool, float]:
    """One accept/reject decision with the matching radius update.

    Accepts iff (h, g) is filter-acceptable and the sufficient-reduction
    test ``df >= sigma_suff * dq`` holds whenever ``dq > 0``.  Acceptance
    doubles the radius up to ``rho_max`` and records h-type points
    (``dq <= 0``) in the filter; rejection halves the radius.
    """
    accepted = filter_acceptable(f, h, g) and not (dq > 0.0 and df < sigma_suff * dq)
    if accepted:
        if dq <= 0.0:
            filter_add(f, h, g)
        return True, min(rho_max, 2.0 * rho)
    rho_new = rho / 2.0
    if rho_new < rho_min:
        raise TrustRegionStall(
            f"level {f.level}: trust region collapsed below {rho_min:g}"
        )
    return False, rho_new


def nstra_update(
    rho_l: float,
    rho_j: float,
    kappa: float,
    chi: float,
    accepted: bool,
    inertia_count: int,
    inertia_threshold: int = 2,
) -> tuple[float, int]:
    """Trust-region update for a level below the one the filter is driving.

    Rejection applies ``rho_j <- max(rho_l/kappa, max(chi^2, rho_j/2))``;
    acceptance grows the radius only after ``inertia_threshold`` consecutive
    acceptances and never above ``rho_l``.  Returns the new radius and the
    updated consecutive-acceptance count.
    """
    if not accepted:
        return max(rho_l / kappa, max(chi**2, rho_j / 2.0)), 0
    inertia_count += 1
    if inertia_count >= inertia_threshold:
        return min(rho_l, 2.0 * rho_j), inertia_count
    return rho_j, inertia_count
