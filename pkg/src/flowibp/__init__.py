"""Monte Carlo verification lab for stochastic-flow gradient formulas and
integration-by-parts identities on a small catalog of embedded manifolds."""

from .errors import (BadWindow, DegenerateWeight, FlowIbpError, GridMismatch,
                     InsufficientData, NonFiniteSample, NotGradientSystem,
                     NumericBlowup, StepTooLarge, UnboundedVolume, ZeroVector)
from .estimators import (GradientEstimate, IbpReport, bismut_gradient,
                         crn_fd_gradient, damped_ibp, free_damped_ibp,
                         free_ibp, function_ibp_check, girsanov_derivative,
                         girsanov_invariance, gradient_pair, pathspace_ibp,
                         rate_averaging_check, thalmaier_gradient,
                         weighted_gradient)
from .flow import (BrownianDraw, FlowPath, TimeGrid, antidevelopment_increments,
                   damped_transport, girsanov_log_density,
                   perturbed_cylinder_points, restart_flow, simulate_flow,
                   variation_flow)
from .functionals import (CylFunctional, DeterministicCm, OccupationCm,
                          VectorFieldProcess, cm_eval, eval_derivative,
                          eval_functional, ito_divergence, make_cm_process,
                          make_functional, make_vector_field, make_weight,
                          pushforward_values)
from .geometry import (ManifoldSpec, divergence, make_manifold,
                       project_to_manifold, ricci_sharp, riemannian_volume,
                       tangent_frame, tangent_project, transport_step,
                       uniform_sample)
from .stats import McAccumulator, RngPolicy, paired_z
from .systems import SdeSystem, default_direction, default_start, make_system

__version__ = "0.1.0"
