"""Annotation-cost model: what a smaller labeled fraction saves.

A :class:`CostSpec` describes one labeling effort (how many images, reading
seconds per image, clinician hourly wage).  Given the fraction of labels a
strategy actually needs to match a reference, :func:`cost_savings` converts
the skipped annotations into clinician-hours and dollars.

Rounding: saved sample counts round half-up to whole images; hours and
dollars are kept at full precision (display layers round).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["CostSpec", "CostReport", "cost_savings"]


@dataclass(frozen=True)
class CostSpec:
    """Inputs of one annotation effort.

    ``cost_per_image`` defaults to ``hourly_wage * seconds_per_image / 3600``;
    an explicitly stated value (e.g. copied from a published table) is
    accepted when within 5% of the derived one, and flagged via
    :meth:`consistency_note` when it strays past 1%.
    """

    name: str
    image_count: int
    seconds_per_image: float
    hourly_wage: float
    cost_per_image: float | None = None

    def __post_init__(self):
        if self.image_count <= 0:
            raise ValueError("image_count must be positive")
        if self.seconds_per_image <= 0 or self.hourly_wage <= 0:
            raise ValueError("seconds_per_image and hourly_wage must be positive")
        if self.cost_per_image is not None:
            derived = self.derived_cost_per_image()
            if abs(self.cost_per_image - derived) / derived > 0.05:
                raise ValueError(
                    f"stated cost_per_image {self.cost_per_image} is more than 5% away "
                    f"from wage*seconds/3600 = {derived:.4f}"
                )

    def derived_cost_per_image(self) -> float:
        return self.hourly_wage * self.seconds_per_image / 3600.0

    def resolved_cost_per_image(self) -> float:
        return self.cost_per_image if self.cost_per_image is not None else self.derived_cost_per_image()

    def consistency_note(self) -> str | None:
        """Human-readable flag when the stated per-image cost disagrees with
        the wage-derived one by more than 1% (surfaced in reports)."""
        if self.cost_per_image is None:
            return None
        derived = self.derived_cost_per_image()
        rel = abs(self.cost_per_image - derived) / derived
        if rel <= 0.01:
            return None
        return (
            f"{self.name}: stated cost/image {self.cost_per_image:.2f} differs from "
            f"wage-derived {derived:.2f} by {100 * rel:.1f}%"
        )

    def total_hours(self) -> float:
        return self.image_count * self.seconds_per_image / 3600.0

    def total_dollars(self) -> float:
        return self.image_count * self.resolved_cost_per_image()


@dataclass(frozen=True)
class CostReport:
    spec_name: str
    fraction_needed: float
    samples_saved: int
    hours_saved: float
    dollars_saved: float
    hours_total: float
    dollars_total: float


def cost_savings(spec: CostSpec, fraction_needed: float) -> CostReport:
    """Savings from labeling only ``fraction_needed`` of the images.

    samples_saved = round(count * (1 - fraction)); hours and dollars scale
    linearly from the per-image figures.
    """
    if not 0.0 <= fraction_needed <= 1.0:
        raise ValueError(f"fraction_needed must be in [0, 1], got {fraction_needed}")
    saved = int(math.floor(spec.image_count * (1.0 - fraction_needed) + 0.5))
    per_image = spec.resolved_cost_per_image()
    return CostReport(
        spec_name=spec.name,
        fraction_needed=fraction_needed,
        samples_saved=saved,
        hours_saved=saved * spec.seconds_per_image / 3600.0,
        dollars_saved=saved * per_image,
        hours_total=spec.total_hours(),
        dollars_total=spec.total_dollars(),
    )
