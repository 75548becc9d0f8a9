"""Performance-drop computation and the four-regime classification.

Drops are measured in accuracy percentage points: the drop after unlearning
and the residual drop after relearning, each on the forget and retain
tasks. Reversibility and catastrophicity are thresholded independently,
with an explicit indeterminate band instead of a single hard cut.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["RegimeThresholds", "RegimeVerdict", "compute_deltas", "classify"]

REVERSIBLE = "reversible"
IRREVERSIBLE = "irreversible"
CATASTROPHIC = "catastrophic"
NON_CATASTROPHIC = "non-catastrophic"
INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class RegimeThresholds:
    """Percentage-point cuts for the regime axes. Values between the
    near-zero band and the decision threshold classify as indeterminate."""

    catastrophic_drop: float = 20.0
    irreversible_residual: float = 10.0
    near_zero_band: float = 3.0

    def validate(self) -> None:
        if min(self.catastrophic_drop, self.irreversible_residual, self.near_zero_band) < 0:
            raise ValueError("thresholds must be >= 0")
        if self.near_zero_band >= self.irreversible_residual:
            raise ValueError("near_zero_band must be < irreversible_residual")
        if self.near_zero_band >= self.catastrophic_drop:
            raise ValueError("near_zero_band must be < catastrophic_drop")


@dataclass(frozen=True)
class RegimeVerdict:
    du_forget: float
    du_retain: float
    dr_forget: float
    dr_retain: float
    reversibility: str
    catastrophicity: str
    label: str


def compute_deltas(e_theta0: float, e_theta_u: float, e_theta_r: float) -> tuple[float, float]:
    """(drop after unlearning, residual drop after relearning) for one task,
    all metrics on the same percentage scale."""
    return e_theta0 - e_theta_u, e_theta0 - e_theta_r


def classify(
    du_forget: float,
    du_retain: float,
    dr_forget: float,
    dr_retain: float,
    thresholds: RegimeThresholds = RegimeThresholds(),
) -> RegimeVerdict:
    """Classify one run.

    Catastrophic needs a large drop on BOTH tasks during unlearning;
    non-catastrophic needs the retain drop inside the near-zero band.
    Reversible needs the residual forget drop inside the band; irreversible
    needs it above the residual threshold. Anything between bands is
    indeterminate.
    """
    thresholds.validate()
    if du_retain >= thresholds.catastrophic_drop and du_forget >= thresholds.catastrophic_drop:
        catastrophicity = CATASTROPHIC
    elif du_retain <= thresholds.near_zero_band:
        catastrophicity = NON_CATASTROPHIC
    else:
        catastrophicity = INDETERMINATE
    if dr_forget <= thresholds.near_zero_band:
        reversibility = REVERSIBLE
    elif dr_forget >= thresholds.irreversible_residual:
        reversibility = IRREVERSIBLE
    else:
        reversibility = INDETERMINATE
    return RegimeVerdict(
        du_forget=du_forget,
        du_retain=du_retain,
        dr_forget=dr_forget,
        dr_retain=dr_retain,
        reversibility=reversibility,
        catastrophicity=catastrophicity,
        label=f"{reversibility},{catastrophicity}",
    )
