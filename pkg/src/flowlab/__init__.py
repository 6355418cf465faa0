"""flowlab: simulation and statistical verification of stochastic flows
of diffeomorphisms on the flat torus.

Core layers: trig-polynomial vector fields with exact derivatives
(fields), counter-based two-sided Brownian paths (noise), shared-noise
n-point/tangent integration (flow, kernels), particle measures
(measures), estimator suites (analysis, experiments), pullback machinery
for the dissipative case (dissipative) and the flowlab CLI (cli).
"""

from .fields import (FieldExpr, RankReport, TrigCoefficient, VectorFieldSet,
                     bracket_span_rank, check_projective_hypoellipticity,
                     eval_expr, lie_bracket, make_field_set)
from .flow import (FunctionalSpec, LiftedPoint, MultiPointState, Trajectory,
                   center_functional, displacement_functional, evolve, step)
from .measures import (ParticleMeasure, ball_measure, curve_measure,
                       displacement_sample, from_points, grid_measure,
                       observable_average, p_energy, pushforward)
from .noise import NoisePath, make_path
from .trig import TrigPoly

__version__ = "0.1.0"

__all__ = [
    "FieldExpr", "FunctionalSpec", "LiftedPoint", "MultiPointState",
    "NoisePath", "ParticleMeasure", "RankReport", "Trajectory",
    "TrigCoefficient", "TrigPoly", "VectorFieldSet", "__version__",
    "ball_measure", "bracket_span_rank", "center_functional",
    "check_projective_hypoellipticity", "curve_measure",
    "displacement_functional", "displacement_sample", "eval_expr", "evolve",
    "from_points", "grid_measure", "lie_bracket", "make_field_set",
    "make_path", "observable_average", "p_energy", "pushforward", "step",
]
