"""Thresholding on the biomarker itself when VE_- is declared monotone.

When VE_- is nondecreasing in w, filling strata with the worst-case risk in
order of increasing w is the same as filling them in order of increasing
VE_-, but the parameter stays pathwise differentiable when several biomarker
values share the threshold efficacy.  For a decreasing curve the orientation
is flipped so low-efficacy strata (high w) are filled first.

Monotonicity is an assumption supplied by the user; nothing here checks it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bridge import Bridge, BridgeEstimate, WorstCaseAllocation

DIRECTIONS = ("increasing", "decreasing")


@dataclass(frozen=True)
class MonotoneAllocation:
    theta_w_hat: float
    eta_hat: float
    direction: str
    case: str
    allocation: WorstCaseAllocation

    def beta(self, w):
        return self.allocation.beta_at(w)


def _check(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def solve_allocation_monotone(mu, bridge: Bridge, direction="increasing") -> MonotoneAllocation:
    """Scan the distinct observed biomarker values instead of the VE_- values."""
    _check(direction)
    alloc = bridge.solve_allocation(mu, monotone=direction)
    return MonotoneAllocation(alloc.theta, alloc.eta, direction, alloc.case, alloc)


def phi_estimate_monotone(mu, bridge: Bridge, direction="increasing") -> BridgeEstimate:
    """Estimate with interior-case gradients using ``VE_-(theta_w)`` as multiplier."""
    _check(direction)
    return bridge.estimate(mu, monotone=direction)


def is_strictly_monotone(bridge: Bridge, direction="increasing") -> bool:
    """Whether the fitted VE_- is strictly monotone across the distinct engine points."""
    _check(direction)
    w = bridge.w
    ve = bridge.ve()[0]
    order = np.argsort(w, kind="stable")
    uw, first = np.unique(w[order], return_index=True)
    vals = ve[order][first]
    d = np.diff(vals)
    return bool(np.all(d > 0) if direction == "increasing" else np.all(d < 0))
