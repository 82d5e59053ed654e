"""Safety filtering for ellipsoidal rigid bodies via moving separating hyperplanes."""

from ellipsoid_shield.geometry import (
    BodyVelocity,
    EllipsoidShape,
    Pose,
    ShapedBody,
    ellipsoid_value,
    rotation_exp,
    shaped_matrix,
    vee,
    wedge,
)
from ellipsoid_shield.oracle import min_distance
from ellipsoid_shield.scenarios import (
    ScenarioFormatError,
    build_scenario,
    bundled_names,
    load_scenario,
)
from ellipsoid_shield.separation import PairGeometry, grad_z, h_dot, maximize_h
from ellipsoid_shield.simulator import (
    Scenario,
    ScenarioError,
    SimulationError,
    TrajectoryLog,
    run,
    step,
    warm_start,
)

__version__ = "0.1.0"

__all__ = [
    "BodyVelocity",
    "EllipsoidShape",
    "PairGeometry",
    "Pose",
    "Scenario",
    "ScenarioError",
    "ScenarioFormatError",
    "ShapedBody",
    "SimulationError",
    "TrajectoryLog",
    "build_scenario",
    "bundled_names",
    "ellipsoid_value",
    "grad_z",
    "h_dot",
    "load_scenario",
    "maximize_h",
    "min_distance",
    "rotation_exp",
    "run",
    "shaped_matrix",
    "step",
    "vee",
    "warm_start",
    "wedge",
    "__version__",
]
