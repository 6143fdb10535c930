"""Fault injection: kill a set of processes at a chosen benchmark step.

Victims stop executing at the step boundary (the first victim reaching it
takes the whole set down), their node-local checkpoint storage is marked
lost, and survivors observe PeerFailed on any contact with them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidStep


@dataclass
class FaultPlan:
    step: int
    victims: set[int]
    iterations: int = 0     # when known, validates step < iterations

    def __post_init__(self):
        self.victims = set(self.victims)
        if not self.victims:
            raise InvalidStep("fault plan needs at least one victim")
        if self.step < 0:
            raise InvalidStep(f"negative fault step {self.step}")
        if self.iterations and self.step >= self.iterations:
            raise InvalidStep(
                f"fault step {self.step} >= iterations {self.iterations}")


def install(rt, plan: FaultPlan, iterations: int | None = None) -> FaultPlan:
    """Validate a plan against the run length and arm the runtime with it."""
    if iterations is not None:
        plan = FaultPlan(plan.step, plan.victims, iterations)
    bad = [v for v in plan.victims if v < 0 or v >= rt.n]
    if bad:
        raise InvalidStep(f"victims {bad} outside process range 0..{rt.n - 1}")
    rt.fault_plan = plan
    return plan
