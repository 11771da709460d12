"""Numerical verification lab for the singular porous-medium (fast diffusion)
equation: solver, solution-adapted space-time cylinder geometry, coverings of
gradient level sets, and empirical inequality suites."""

from .grid import (
    Cylinder,
    EmptyIntersection,
    ModelParams,
    NegativeBase,
    ScalarField,
    SpaceTimeGrid,
    TimeConvention,
    ZeroWeight,
    cylinder_integral,
    cylinder_mean,
    cylinder_measure,
    discrete_gradient_of_power,
    grad_energy_field,
    weighted_slice_mean,
)
from .solver import (
    CflViolation,
    InvalidExponent,
    LinearSolveDiverged,
    SolverConfig,
    StructureField,
    StructureKind,
    barenblatt,
    barenblatt_field,
    barenblatt_trace,
    solve,
    step,
    weak_residual,
)

__version__ = "0.1.0"
