"""Micro problems attached to macro quadrature points.

Each macro quadrature point owns an RVE: a square micro mesh coupled to the
linearized macro displacement through constraint rows (periodic pairing plus
pinned corners, or a fully pinned boundary for linear-displacement coupling).
This module builds those constraints, runs the micro Newton iteration on the
saddle-point system, volume-averages deformation and stress, and compresses
the micro stiffness onto the macro element dofs through the transformation
matrix of unit-displacement responses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import material as mat
from .errors import ConstraintRedundancy, NoConvergence
from .fem_core import (Assembler, ConstraintSet, SaddleFactor,
                       difference_constraints, dirichlet_constraints,
                       stack_constraints)
from .mesh import Mesh, PeriodicPairing, pair_periodic_nodes

PERIODIC = "periodic"
LINEAR_DISPLACEMENT = "linear-displacement"
COUPLINGS = (PERIODIC, LINEAR_DISPLACEMENT)


def linearize_macro(u0, grad, coords, center) -> np.ndarray:
    """Affine displacement field u0 + H (y - c) sampled at micro nodes.

    ``grad`` is the macro displacement gradient H_ij = du_i/dx_j at the
    quadrature point; the constant part is kept (it carries no strain).
    """
    rel = np.asarray(coords, dtype=float) - np.asarray(center, dtype=float)
    return np.asarray(u0, dtype=float) + rel @ np.asarray(grad, dtype=float).T


def build_constraints(pairing: PeriodicPairing, coupling: str, dbar,
                      boundary_nodes=None, ndof: int | None = None) -> ConstraintSet:
    """Constraint set G d = b coupling the RVE to the affine field ``dbar``.

    Periodic coupling pins the 4 corners to the affine values and adds one
    difference row per paired dof; linear-displacement coupling pins every
    boundary node.  ``dbar`` has shape (n_nodes, 2).
    """
    dbar = np.asarray(dbar, dtype=float)
    if ndof is None:
        ndof = 2 * len(dbar)
    if coupling == LINEAR_DISPLACEMENT:
        if boundary_nodes is None:
            raise ValueError("linear-displacement coupling needs boundary nodes")
        nodes = np.asarray(boundary_nodes, dtype=np.int64)
        dofs = np.empty(2 * len(nodes), dtype=np.int64)
        dofs[0::2] = 2 * nodes
        dofs[1::2] = 2 * nodes + 1
        cs = dirichlet_constraints(dofs, dbar[nodes].ravel(), ndof)
        _check_rank_structure(cs)
        return cs
    if coupling != PERIODIC:
        raise ValueError(f"unknown coupling {coupling!r}")
    c = pairing.corners
    cdofs = np.empty(8, dtype=np.int64)
    cdofs[0::2] = 2 * c
    cdofs[1::2] = 2 * c + 1
    dirich = dirichlet_constraints(cdofs, dbar[c].ravel(), ndof)
    p, q = pairing.pairs[:, 0], pairing.pairs[:, 1]
    dof_pairs = np.empty((2 * len(p), 2), dtype=np.int64)
    dof_pairs[0::2, 0] = 2 * p
    dof_pairs[0::2, 1] = 2 * q
    dof_pairs[1::2, 0] = 2 * p + 1
    dof_pairs[1::2, 1] = 2 * q + 1
    vals = (dbar[q] - dbar[p]).ravel()
    diffs = difference_constraints(dof_pairs, vals, ndof)
    cs = stack_constraints(dirich, diffs)
    _check_rank_structure(cs)
    return cs


def _check_rank_structure(cs: ConstraintSet):
    """Rows here have disjoint leading supports; duplicates mean redundancy."""
    G = cs.G.tocsr()
    first = G.indices[G.indptr[:-1]]
    if len(np.unique(first)) != len(first):
        dup = np.flatnonzero(np.bincount(first) > 1)
        raise ConstraintRedundancy(f"redundant constraint rows on dofs {dup.tolist()}")


@dataclass
class RveState:
    """State of one quadrature point's micro problem."""

    D: np.ndarray
    Lam: np.ndarray
    fluct: np.ndarray
    macro_u0: np.ndarray
    macro_H: np.ndarray
    b: np.ndarray
    qp_weight: float
    res_scale: float = 0.0
    last_rel: float = 1.0
    asym: float = 0.0

    @property
    def macro_F(self) -> np.ndarray:
        F = np.eye(3)
        F[:2, :2] += self.macro_H
        return F

    def copy(self) -> "RveState":
        return RveState(D=self.D.copy(), Lam=self.Lam.copy(), fluct=self.fluct.copy(),
                        macro_u0=self.macro_u0.copy(), macro_H=self.macro_H.copy(),
                        b=self.b.copy(), qp_weight=self.qp_weight,
                        res_scale=self.res_scale, last_rel=self.last_rel,
                        asym=self.asym)


@dataclass
class TransformationMatrix:
    """Micro responses to macro unit-displacement states.

    Column 2*I + i holds the micro displacement vector driven by shape
    function N_I acting in direction x_i; T compresses the micro stiffness
    onto macro element dofs via T^T K T.
    """

    T: np.ndarray
    columns: tuple = field(default=())


class RveProblem:
    """Shared, immutable description of the micro problem at every qp.

    Holds the micro mesh, assembler, pairing and the constraint matrix
    structure; per-qp data lives in RveState.  For fully linear materials the
    tangent is constant, so one saddle factorization is cached and shared.
    """

    def __init__(self, micro_mesh: Mesh, material: mat.Material,
                 coupling: str = PERIODIC):
        if coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling {coupling!r}")
        lo, hi = micro_mesh.bbox
        span = hi - lo
        if abs(span[0] - span[1]) > 1e-9 * span[0] or lo[0] != 0.0 or lo[1] != 0.0:
            raise ValueError("RVE mesh must span [0, delta]^2")
        self.mesh = micro_mesh
        self.material = material
        self.coupling = coupling
        self.delta = float(span[0])
        self.center = np.array([0.5 * self.delta, 0.5 * self.delta])
        self.assembler = Assembler(micro_mesh, material)
        self.volume = self.assembler.volume
        self.pairing = pair_periodic_nodes(micro_mesh, self.delta)
        tol = self.pairing.tolerance
        x, y = micro_mesh.nodes[:, 0], micro_mesh.nodes[:, 1]
        on_edge = ((np.abs(x) < tol) | (np.abs(x - self.delta) < tol)
                   | (np.abs(y) < tol) | (np.abs(y - self.delta) < tol))
        self.boundary_nodes = np.flatnonzero(on_edge)
        zero = np.zeros((micro_mesh.n_nodes, 2))
        self.constraints = build_constraints(self.pairing, coupling, zero,
                                             boundary_nodes=self.boundary_nodes,
                                             ndof=micro_mesh.ndof)
        # force scale floor: residuals below this count as converged noise
        mu_max = max(p.mu for p in material.phases.values())
        self.res_floor = 1e-12 * mu_max * self.delta
        self._linear_factor = None
        self._linear_K = None
        self._linear_f0 = None

    # -- constraint data -----------------------------------------------------

    def affine_values(self, u0, H) -> np.ndarray:
        return linearize_macro(u0, H, self.mesh.nodes, self.center)

    def constraint_rhs(self, affine) -> np.ndarray:
        if self.coupling == LINEAR_DISPLACEMENT:
            return affine[self.boundary_nodes].ravel()
        c = self.pairing.corners
        p, q = self.pairing.pairs[:, 0], self.pairing.pairs[:, 1]
        return np.concatenate([affine[c].ravel(), (affine[q] - affine[p]).ravel()])

    def make_state(self, qp_weight: float) -> RveState:
        n = self.mesh.ndof
        return RveState(D=np.zeros(n), Lam=np.zeros(self.constraints.n_rows),
                        fluct=np.zeros(n), macro_u0=np.zeros(2),
                        macro_H=np.zeros((2, 2)),
                        b=np.zeros(self.constraints.n_rows), qp_weight=qp_weight)

    def update_macro(self, state: RveState, u0, H) -> None:
        """Impose new macro data: refresh constraints, warm-start from the
        stored fluctuation superimposed on the new affine field."""
        state.macro_u0 = np.asarray(u0, dtype=float).copy()
        state.macro_H = np.asarray(H, dtype=float).copy()
        affine = self.affine_values(state.macro_u0, state.macro_H)
        state.b = self.constraint_rhs(affine)
        state.D = affine.ravel() + state.fluct

    def store_fluctuation(self, state: RveState) -> None:
        affine = self.affine_values(state.macro_u0, state.macro_H)
        state.fluct = state.D - affine.ravel()

    def constraint_set(self, state: RveState) -> ConstraintSet:
        return ConstraintSet(G=self.constraints.G, b=state.b)

    # -- assembly and factorization -----------------------------------------

    def assemble(self, state: RveState):
        """Internal force, tangent and qp fields at the current micro state."""
        if self.material.is_linear and self._linear_K is not None:
            K = self._linear_K
            F2, H, Sv, S33, Cv, psi = self.assembler.qp_fields(state.D)
            B = self.assembler._b_matrices(F2)
            f = self.assembler._scatter_vector(
                np.einsum("eq,eqai,eqa->ei", self.assembler.detJw, B, Sv))
            return f, K, (F2, Sv, S33)
        f, K = self.assembler.force_and_tangent(state.D)
        F2, H, Sv, S33, Cv, psi = self.assembler.qp_fields(state.D)
        if self.material.is_linear:
            self._linear_K = K
        return f, K, (F2, Sv, S33)

    def factorize(self, K) -> SaddleFactor:
        if self.material.is_linear:
            if self._linear_factor is None:
                self._linear_factor = SaddleFactor(K, self.constraints)
            return self._linear_factor
        return SaddleFactor(K, self.constraints)

    def residual(self, state: RveState, f_int) -> tuple[np.ndarray, np.ndarray]:
        R = f_int + self.constraints.G.T @ state.Lam
        gap = state.b - self.constraints.G @ state.D
        return R, gap

    def _note_residual(self, state: RveState, rnorm: float) -> float:
        state.res_scale = max(state.res_scale, rnorm, self.res_floor)
        state.last_rel = 0.0 if rnorm <= self.noise_floor(state) \
            else rnorm / state.res_scale
        return state.last_rel

    def noise_floor(self, state: RveState) -> float:
        """Absolute residual level treated as converged noise."""
        return max(self.res_floor, 1e-12 * state.res_scale)

    def converged(self, state: RveState, rnorm: float, tol: float) -> bool:
        """Equilibrium at the load-step force scale (used by the alternating
        scheme's joint criterion and the end-of-step check)."""
        return rnorm <= max(tol * state.res_scale, self.noise_floor(state))

    def gap_tol(self, state: RveState) -> float:
        return 1e-10 * (1.0 + float(np.abs(state.b).max(initial=0.0)))


def micro_newton_step(problem: RveProblem, state: RveState):
    """One assemble + saddle solve + update.

    Returns (state, residual norm), the norm taken before the update with
    R = F_int + G^T Lam.
    """
    f_int, K, _ = problem.assemble(state)
    R, gap = problem.residual(state, f_int)
    rnorm = float(np.linalg.norm(R))
    problem._note_residual(state, rnorm)
    factor = problem.factorize(K)
    dD, dLam = factor.solve(-R, gap)
    state.D += dD
    state.Lam += dLam
    return state, rnorm


def solve_micro(problem: RveProblem, state: RveState, tol: float = 1e-10,
                max_iter: int = 30):
    """Newton iteration until the residual drops below tol relative to the
    first residual of this call.

    A state that is already in equilibrium (residual at the noise floor)
    converges with zero iterations, so warm restarts are free.  Stores the
    converged fluctuation field.  Returns (state, info) with the final
    assembled tangent in ``info`` for reuse by the stiffness transfer.
    """
    history = []
    gap_tol = problem.gap_tol(state)
    floor = problem.noise_floor(state)
    norm0 = None
    for it in range(max_iter + 1):
        f_int, K, fields = problem.assemble(state)
        R, gap = problem.residual(state, f_int)
        rnorm = float(np.linalg.norm(R))
        history.append(rnorm)
        problem._note_residual(state, rnorm)
        if norm0 is None:
            norm0 = max(rnorm, floor)
        gap_ok = float(np.abs(gap).max(initial=0.0)) <= gap_tol
        if gap_ok and (rnorm <= tol * norm0 or rnorm <= floor):
            problem.store_fluctuation(state)
            return state, MicroInfo(n_solves=it, history=history, K=K,
                                    f_int=f_int, fields=fields)
        if it == max_iter:
            break
        factor = problem.factorize(K)
        dD, dLam = factor.solve(-R, gap)
        state.D += dD
        state.Lam += dLam
    raise NoConvergence(
        f"micro Newton did not reach tol {tol:g} in {max_iter} iterations", history)


@dataclass
class MicroInfo:
    n_solves: int
    history: list
    K: object
    f_int: np.ndarray
    fields: tuple


def average_deformation_gradient(problem: RveProblem, state: RveState) -> np.ndarray:
    """Volume average of F, plane-strain embedded (third axis identity)."""
    F2, _, _, _, _, _ = problem.assembler.qp_fields(state.D)
    avg2 = np.einsum("eq,eqij->ij", problem.assembler.detJw, F2) / problem.volume
    F = np.eye(3)
    F[:2, :2] = avg2
    return F


def macro_stress(problem: RveProblem, state: RveState, fields=None):
    """Homogenized second Piola-Kirchhoff stress at the macro point.

    Averages the first Piola-Kirchhoff field and pulls it back with the
    averaged deformation gradient; the in-plane part is symmetrized for the
    macro weak form and the asymmetry norm is recorded on the state as a
    diagnostic.  Returns (S 3x3, in-plane Voigt (S11, S22, S12)).
    """
    if fields is None:
        F2, _, Sv, S33, _, _ = problem.assembler.qp_fields(state.D)
    else:
        F2, Sv, S33 = fields
    S2 = np.empty(Sv.shape[:-1] + (2, 2))
    S2[..., 0, 0] = Sv[..., 0]
    S2[..., 1, 1] = Sv[..., 1]
    S2[..., 0, 1] = Sv[..., 2]
    S2[..., 1, 0] = Sv[..., 2]
    P2 = np.einsum("...ik,...kj->...ij", F2, S2)
    w = problem.assembler.detJw
    avgP2 = np.einsum("eq,eqij->ij", w, P2) / problem.volume
    avgP33 = float((w * S33).sum()) / problem.volume  # F33 = 1
    avgF2 = np.einsum("eq,eqij->ij", w, F2) / problem.volume
    SH2 = np.linalg.solve(avgF2, avgP2)
    asym = float(np.abs(SH2 - SH2.T).max())
    denom = max(float(np.abs(SH2).max()), 1e-300)
    state.asym = asym / denom
    SH2 = 0.5 * (SH2 + SH2.T)
    S = np.zeros((3, 3))
    S[:2, :2] = SH2
    S[2, 2] = avgP33
    return S, np.array([SH2[0, 0], SH2[1, 1], SH2[0, 1]])


def unit_state_fields(problem: RveProblem, macro_N, macro_grads) -> np.ndarray:
    """Affine micro fields of the macro unit-displacement states.

    Returns (ndof, 2*nen); column 2*I + i samples shape function N_I acting
    in direction x_i, linearized at the quadrature point.
    """
    rel = problem.mesh.nodes - problem.center           # (n, 2)
    s = macro_N[None, :] + rel @ np.asarray(macro_grads, dtype=float).T  # (n, nen)
    n_nodes, nen = s.shape
    cols = np.zeros((2 * n_nodes, 2 * nen))
    for i in range(2):
        cols[i::2, i::2] = s
    return cols


def build_transformation_matrix(problem: RveProblem, K, macro_N, macro_grads,
                                factor: SaddleFactor | None = None) -> TransformationMatrix:
    """Solve the unit-state systems on the current tangent and collect columns."""
    cols = unit_state_fields(problem, macro_N, macro_grads)
    G = problem.constraints.G
    Gv = np.column_stack([problem.constraint_rhs(cols[:, j].reshape(-1, 2))
                          for j in range(cols.shape[1])])
    if factor is None:
        factor = problem.factorize(K)
    F = np.zeros((problem.mesh.ndof, cols.shape[1]))
    X, _ = factor.solve_many(F, Gv)
    return TransformationMatrix(T=X)


def macro_element_stiffness(transforms, tangents, weights, volume) -> np.ndarray:
    """Macro element tangent sum_l (w_l / |K_delta|) T_l^T K_l T_l.

    The congruence of the symmetric micro tangent is symmetric analytically;
    solver roundoff in the columns of T is removed by symmetrizing.
    """
    k = None
    for T, K, w in zip(transforms, tangents, weights):
        A = T.T if isinstance(T, TransformationMatrix) else T
        contrib = (w / volume) * (A.T @ (K @ A))
        k = contrib if k is None else k + contrib
    return 0.5 * (k + k.T)
