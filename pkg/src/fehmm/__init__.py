"""Two-scale finite element homogenization of hyperelastic solids.

Micro problems on representative volume elements attached to macro
quadrature points supply homogenized stress and stiffness to a macro
Newton iteration; the package provides both the nested and the alternating
two-level solution scheme, convergence-rate verification against reference
solutions, and a command-line front end.
"""

from .errors import (ConstraintRedundancy, DegenerateElement, FehmmError,
                     MeshError, NoConvergence, NonPhysicalDeformation,
                     PairingError, SingularSystem)
from .fem_core import (Assembler, AssembledSystem, ConstraintSet, SaddleFactor,
                       assemble, element_kernel, newton_solve, shape_eval,
                       solve_saddle)
from .material import (DeformationState, LameParams, Material, StressTangent,
                       homogeneous, lame_from_engineering, linear_elastic,
                       neo_hookean, strain_energy, two_phase)
from .mesh import (Mesh, PeriodicPairing, PhaseGrid, generate_structured,
                   mesh_from_phase_grid, pair_periodic_nodes, read_phase_grid,
                   refine_uniform, write_phase_grid)
from .micro_rve import (LINEAR_DISPLACEMENT, PERIODIC, RveProblem, RveState,
                        TransformationMatrix, average_deformation_gradient,
                        build_constraints, build_transformation_matrix,
                        linearize_macro, macro_element_stiffness, macro_stress,
                        micro_newton_step, solve_micro)
from .two_scale import (ALTERNATING, NESTED, LoadSpec, MacroProblem,
                        SolveTrace, SolverConfig, TwoScaleSolver, TwoScaleState,
                        apply_load_step, cantilever_constraints,
                        max_nodal_displacement, run_alternating, run_nested,
                        tip_load_vector)
from .verify import (ConvergenceStudy, ErrorReport, ReferenceCache,
                     SpeedupReport, antiperiodicity_residual, error_norms,
                     hill_mandel_residual, macro_convergence_study,
                     micro_convergence_study, resolved_mesh,
                     single_scale_oracle, speedup_report)

__version__ = "0.1.0"
