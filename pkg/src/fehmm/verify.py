"""Verification harness: error norms, convergence rates, energy diagnostics.

Error norms compare a coarse solution against a reference on a finer mesh of
the same nested refinement chain; convergence studies fit slopes of
log(error) against log(mesh size) along micro or macro refinement.  The
Hill-Mandel residual probes the energetic admissibility of converged RVE
states, and a single-scale solver on microstructure-resolving meshes serves
as an independent reference for homogenization quality.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import material as mat
from .errors import FehmmError
from .fem_core import Assembler, ConstraintSet, SaddleFactor, newton_solve, shape_eval
from .mesh import QUAD4, Mesh, PhaseGrid, mesh_from_phase_grid, refine_uniform
from .micro_rve import PERIODIC, RveProblem, RveState, linearize_macro
from .two_scale import (LoadSpec, MacroProblem, SolverConfig, TwoScaleSolver,
                        cantilever_constraints, tip_load_vector)

MICRO_AXIS = "micro"
MACRO_AXIS = "macro"


# -- point location and prolongation on structured meshes --------------------


def locate_points(mesh: Mesh, pts):
    """Element ids and reference coordinates of points in a structured mesh."""
    if mesh.grid is None:
        raise FehmmError("point location requires a structured mesh")
    nx, ny = mesh.grid
    lo, hi = mesh.bbox
    dx = (hi[0] - lo[0]) / nx
    dy = (hi[1] - lo[1]) / ny
    pts = np.asarray(pts, dtype=float)
    ix = np.clip(((pts[:, 0] - lo[0]) / dx).astype(int), 0, nx - 1)
    iy = np.clip(((pts[:, 1] - lo[1]) / dy).astype(int), 0, ny - 1)
    fx = (pts[:, 0] - lo[0]) / dx - ix
    fy = (pts[:, 1] - lo[1]) / dy - iy
    cell = iy * nx + ix
    if mesh.kind == QUAD4:
        xi = np.column_stack([2.0 * fx - 1.0, 2.0 * fy - 1.0])
        return cell, xi
    lower = fy <= fx + 1e-12
    elem = 2 * cell + np.where(lower, 0, 1)
    xi = np.empty_like(pts)
    xi[lower, 1] = fy[lower]
    xi[lower, 0] = fx[lower] - fy[lower]
    up = ~lower
    xi[up, 0] = fx[up]
    xi[up, 1] = fy[up] - fx[up]
    return elem, xi


def evaluate_field(mesh: Mesh, d, pts, gradient: bool = False):
    """Nodal field (and optionally its gradient) at arbitrary points."""
    elem, xi = locate_points(mesh, pts)
    vals = np.empty((len(pts), 2))
    grads = np.empty((len(pts), 2, 2)) if gradient else None
    dn = np.asarray(d, dtype=float).reshape(-1, 2)
    coords = mesh.nodes[mesh.elems]
    for k in range(len(pts)):
        N, dN = shape_eval(mesh.kind, xi[k])
        de = dn[mesh.elems[elem[k]]]
        vals[k] = N @ de
        if gradient:
            jac = np.einsum("ni,nj->ij", dN, coords[elem[k]])
            g = dN @ np.linalg.inv(jac)
            grads[k] = de.T @ g
    return (vals, grads) if gradient else vals


# -- error norms --------------------------------------------------------------


@dataclass
class ErrorReport:
    """Norms of one solution level against the reference."""

    l2: float
    h1: float
    energy: float
    param: float


def error_norms(u_coarse, mesh_coarse: Mesh, u_ref, mesh_ref: Mesh,
                K_ref=None, param: float = 0.0) -> ErrorReport:
    """L2, H1 and tangent-energy norms of the difference field.

    The coarse field is prolonged to the reference mesh through its own shape
    functions (meshes must belong to one nested refinement chain).  The H1
    error is reported as the symmetric-gradient (strain) seminorm: on the
    clamped space it is norm-equivalent to the full H1 norm by Korn and
    Poincare, and unlike the raw gradient seminorm it is not polluted by the
    large rigid-rotation content of bending error fields.  The energy norm
    is sqrt(e^T K_ref e) with K_ref the tangential stiffness of the
    converged reference state; it is skipped (0.0) when K_ref is None.
    """
    ref = Assembler(mesh_ref, mat.homogeneous(law="linear", kinematics="small",
                                              E=1.0, nu=0.0))
    same = mesh_coarse.n_nodes == mesh_ref.n_nodes and \
        mesh_coarse.grid == mesh_ref.grid
    if same:
        e_nodal = (np.asarray(u_coarse, dtype=float)
                   - np.asarray(u_ref, dtype=float))
    else:
        vals = evaluate_field(mesh_coarse, u_coarse, mesh_ref.nodes)
        e_nodal = vals.ravel() - np.asarray(u_ref, dtype=float)
    eH = ref.disp_gradients(e_nodal)
    en = e_nodal.reshape(-1, 2)[mesh_ref.elems]
    eqp = np.einsum("qn,enk->eqk", ref.kernel.N, en)
    w = ref.detJw
    l2sq = float(np.einsum("eq,eqk,eqk->", w, eqp, eqp))
    sym = 0.5 * (eH + np.swapaxes(eH, -1, -2))
    semi = float(np.einsum("eq,eqij,eqij->", w, sym, sym))
    energy = 0.0
    if K_ref is not None:
        energy = float(np.sqrt(max(e_nodal @ (K_ref @ e_nodal), 0.0)))
    return ErrorReport(l2=float(np.sqrt(l2sq)), h1=float(np.sqrt(semi)),
                       energy=energy, param=param)


def fit_slope(params, errors, floor: float = 0.0):
    """Least-squares slope of log(error) vs log(param), with R^2.

    Levels with error within 10x of ``floor`` are excluded (tolerance floor).
    """
    p = np.asarray(params, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = e > 10.0 * floor
    p, e = p[keep], e[keep]
    if len(p) < 2:
        return float("nan"), float("nan")
    x, y = np.log(p), np.log(e)
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    ybar = y.mean()
    sst = float(((y - ybar) ** 2).sum())
    ssr = float(res[0]) if len(res) else float(((A @ coef - y) ** 2).sum())
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    return float(coef[0]), r2


@dataclass
class ConvergenceStudy:
    axis: str
    levels: list = field(default_factory=list)     # ErrorReport per level
    slopes: dict = field(default_factory=dict)     # norm -> fitted slope
    r2: dict = field(default_factory=dict)
    reference: str = ""

    def fit(self, floor: float = 0.0):
        params = [lv.param for lv in self.levels]
        for norm in ("l2", "h1", "energy"):
            errs = [getattr(lv, norm) for lv in self.levels]
            self.slopes[norm], self.r2[norm] = fit_slope(params, errs, floor)
        return self


def _solve_hmm(macro_mesh, micro_mesh, material, load, config, coupling):
    rve = RveProblem(micro_mesh, material, coupling=coupling)
    problem = MacroProblem(mesh=macro_mesh, material=material, rve=rve, load=load)
    solver = TwoScaleSolver(problem, config)
    state, trace = solver.run()
    return state, trace, solver


def micro_convergence_study(macro_mesh: Mesh, grid: PhaseGrid, delta: float,
                            material: mat.Material, load: LoadSpec,
                            n_levels: int = 4, ref_extra: int = 2,
                            config: SolverConfig | None = None,
                            coupling: str = PERIODIC,
                            micro_kind: str = QUAD4) -> ConvergenceStudy:
    """Macro-solution error against the finest-micro reference, fixed macro mesh."""
    if n_levels < 3:
        raise ValueError(">=3 levels required for a slope fit")
    config = config or SolverConfig(scheme="nested", n_load_steps=1)
    meshes = [mesh_from_phase_grid(grid, delta, micro_kind)]
    for _ in range(n_levels - 1 + ref_extra):
        meshes.append(refine_uniform(meshes[-1]))
    ref_mesh = meshes[-1]
    ref_state, _, ref_solver = _solve_hmm(macro_mesh, ref_mesh, material, load,
                                          config, coupling)
    K_ref = ref_solver.macro_tangent(ref_state)
    study = ConvergenceStudy(axis=MICRO_AXIS,
                             reference=f"micro h=delta/{ref_mesh.grid[0]}")
    for lvl in range(n_levels):
        st, _, _ = _solve_hmm(macro_mesh, meshes[lvl], material, load, config,
                              coupling)
        h = delta / meshes[lvl].grid[0]
        study.levels.append(error_norms(st.D, macro_mesh, ref_state.D,
                                        macro_mesh, K_ref=K_ref, param=h))
    ref_norm = error_norms(np.zeros_like(ref_state.D), macro_mesh, ref_state.D,
                           macro_mesh, K_ref=K_ref, param=0.0)
    study.fit(floor=config.macro_tol * ref_norm.l2)
    return study


def macro_convergence_study(macro_base: Mesh, micro_mesh: Mesh,
                            material: mat.Material, load: LoadSpec,
                            n_levels: int = 4, ref_extra: int = 2,
                            config: SolverConfig | None = None,
                            coupling: str = PERIODIC) -> ConvergenceStudy:
    """Macro-refinement error against a reference on the finest macro mesh."""
    if n_levels < 3:
        raise ValueError(">=3 levels required for a slope fit")
    config = config or SolverConfig(scheme="nested", n_load_steps=1)
    meshes = [macro_base]
    for _ in range(n_levels - 1 + ref_extra):
        meshes.append(refine_uniform(meshes[-1]))
    ref_mesh = meshes[-1]
    ref_state, _, ref_solver = _solve_hmm(ref_mesh, micro_mesh, material, load,
                                          config, coupling)
    K_ref = ref_solver.macro_tangent(ref_state)
    lo, hi = macro_base.bbox
    study = ConvergenceStudy(axis=MACRO_AXIS,
                             reference=f"macro {ref_mesh.grid[0]}x{ref_mesh.grid[1]}")
    for lvl in range(n_levels):
        st, _, _ = _solve_hmm(meshes[lvl], micro_mesh, material, load, config,
                              coupling)
        H = (hi[0] - lo[0]) / meshes[lvl].grid[0]
        study.levels.append(error_norms(st.D, meshes[lvl], ref_state.D,
                                        ref_mesh, K_ref=K_ref, param=H))
    ref_norm = error_norms(np.zeros_like(ref_state.D), ref_mesh, ref_state.D,
                           ref_mesh, K_ref=K_ref, param=0.0)
    study.fit(floor=config.macro_tol * ref_norm.l2)
    return study


# -- energetic diagnostics ----------------------------------------------------


def hill_mandel_residual(problem: RveProblem, state: RveState,
                         scale: float = 1e-6,
                         constraints: ConstraintSet | None = None) -> float:
    """Stress-power mismatch of the converged RVE under probe increments.

    For each in-plane unit tensor e_i x e_j (scaled), the constrained micro
    response dF is computed on the current tangent and the macro power
    <P> : dF_macro is compared with the averaged micro power <P : dF>.
    Passing explicit ``constraints`` (e.g. corner pins only) gives the
    negative control of an energetically inadmissible coupling.
    """
    assembler = problem.assembler
    f_int, K, fields = problem.assemble(state)
    F2, Sv, S33 = fields
    S2 = np.empty(Sv.shape[:-1] + (2, 2))
    S2[..., 0, 0] = Sv[..., 0]
    S2[..., 1, 1] = Sv[..., 1]
    S2[..., 0, 1] = Sv[..., 2]
    S2[..., 1, 0] = Sv[..., 2]
    P2 = np.einsum("...ik,...kj->...ij", F2, S2)
    w = assembler.detJw
    avgP = np.einsum("eq,eqij->ij", w, P2) / problem.volume
    if constraints is None:
        G = problem.constraints.G
        factor = problem.factorize(K)
        def rhs_for(aff):
            return problem.constraint_rhs(aff)
    else:
        G = constraints.G
        factor = SaddleFactor(K, constraints)
        rows_nodes = np.asarray(constraints.G.indices[constraints.G.indptr[:-1]])
        def rhs_for(aff):
            return aff.ravel()[rows_nodes]
    worst = 0.0
    floor = 1e-12 * float(np.abs(avgP).max() + 1.0)
    for i in range(2):
        for j in range(2):
            dF = np.zeros((2, 2))
            dF[i, j] = scale
            aff = linearize_macro(np.zeros(2), dF, problem.mesh.nodes, problem.center)
            dD, _ = factor.solve(np.zeros(problem.mesh.ndof), rhs_for(aff))
            dH = assembler.disp_gradients(dD)
            lhs = float(np.einsum("ij,ij->", avgP, dF))
            rhs = float(np.einsum("eq,eqij,eqij->", w, P2, dH)) / problem.volume
            worst = max(worst, abs(lhs - rhs) / (abs(lhs) + floor))
    return worst


def antiperiodicity_residual(problem: RveProblem, state: RveState) -> float:
    """Largest violation of traction antiperiodicity at converged PBC states.

    At equilibrium the boundary reactions equal -F_int; paired nodes must
    carry opposite forces.  Returns max ||f(p) + f(q)|| over pairs, scaled by
    the multiplier norm.
    """
    f_int, _, _ = problem.assemble(state)
    fn = f_int.reshape(-1, 2)
    p, q = problem.pairing.pairs[:, 0], problem.pairing.pairs[:, 1]
    viol = np.linalg.norm(fn[p] + fn[q], axis=1)
    scale = max(float(np.linalg.norm(state.Lam)), 1e-300)
    return float(viol.max(initial=0.0)) / scale


# -- single-scale oracle -------------------------------------------------------


def resolved_mesh(grid: PhaseGrid, epsilon: float, cells_x: int, cells_y: int,
                  kind: str = QUAD4) -> Mesh:
    """Macro domain of cells_x x cells_y microstructure cells, fully resolved."""
    a = grid.as_array()
    tiled = np.tile(a, (cells_y, cells_x))
    big = PhaseGrid(tiled.shape[1], tiled.shape[0], tiled.ravel().copy())
    m = mesh_from_phase_grid(big, 1.0, kind)
    nodes = m.nodes * np.array([cells_x * epsilon / 1.0, cells_y * epsilon / 1.0])
    # mesh_from_phase_grid spans [0,1]^2; rescale to the physical domain
    return Mesh(nodes, m.elems.copy(), m.kind, m.phase.copy(), grid=m.grid)


def single_scale_oracle(mesh: Mesh, material: mat.Material, load: LoadSpec,
                        n_load_steps: int = 1, tol: float = 1e-10,
                        max_iter: int = 30):
    """One-scale nonlinear FEM reference on a resolved cantilever mesh."""
    assembler = Assembler(mesh, material)
    f_unit = tip_load_vector(mesh, load)
    d = np.zeros(mesh.ndof)
    lam = None
    hist = []
    for s in range(1, n_load_steps + 1):
        factor = s / n_load_steps
        cs = cantilever_constraints(mesh, load, factor)
        d, lam, h = newton_solve(assembler, cs, factor * f_unit, tol=tol,
                                 max_iter=max_iter, d0=d, lam0=lam)
        hist.append(h)
    return d, hist


# -- scheme comparison ---------------------------------------------------------


@dataclass
class SpeedupRow:
    step: int
    iters_nested: int
    iters_alternating: int
    t_nested: float
    t_alternating: float
    u_nested: float
    u_alternating: float


@dataclass
class SpeedupReport:
    rows: list
    total_nested: float
    total_alternating: float
    factor: float
    u_max_agree: bool
    max_iter_delta: int


def speedup_report(trace_nested, trace_alternating,
                   u_tol: float = 1e-6) -> SpeedupReport:
    """Per-step and total time ratios of the two schemes on one problem."""
    if trace_nested.scheme != "nested" or trace_alternating.scheme != "alternating":
        raise ValueError("expected one nested and one alternating trace")
    if len(trace_nested.steps) != len(trace_alternating.steps):
        raise ValueError("traces cover different load step counts")
    rows = []
    agree = True
    max_delta = 0
    for sn, sa in zip(trace_nested.steps, trace_alternating.steps):
        if abs(sn.load_factor - sa.load_factor) > 1e-12:
            raise ValueError("traces cover different load factors")
        rel = abs(sn.u_max - sa.u_max) / max(abs(sn.u_max), 1e-300)
        agree = agree and rel <= u_tol
        max_delta = max(max_delta, sa.n_macro_solves - sn.n_macro_solves)
        rows.append(SpeedupRow(step=sn.step, iters_nested=sn.n_macro_solves,
                               iters_alternating=sa.n_macro_solves,
                               t_nested=sn.step_time, t_alternating=sa.step_time,
                               u_nested=sn.u_max, u_alternating=sa.u_max))
    tn = sum(r.t_nested for r in rows)
    ta = sum(r.t_alternating for r in rows)
    return SpeedupReport(rows=rows, total_nested=tn, total_alternating=ta,
                         factor=tn / ta if ta > 0 else float("nan"),
                         u_max_agree=agree, max_iter_delta=max_delta)


# -- reference cache -----------------------------------------------------------


class ReferenceCache:
    """Disk cache of reference displacement fields keyed by a content hash."""

    FORMAT = "fehmm-ref 1"

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def key(self, payload: str) -> str:
        return hashlib.sha256(payload.encode()).hexdigest()[:24]

    def path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.ref")

    def save(self, key: str, d) -> str:
        p = self.path(key)
        d = np.asarray(d, dtype=float)
        with open(p, "w") as f:
            f.write(f"{self.FORMAT} {len(d)}\n")
            for v in d:
                f.write(f"{float(v)!r}\n")
        return p

    def load(self, key: str):
        p = self.path(key)
        if not os.path.exists(p):
            return None
        with open(p) as f:
            header = f.readline().split()
            if " ".join(header[:2]) != self.FORMAT:
                raise FehmmError(f"unknown reference format in {p}")
            n = int(header[2])
            vals = np.array([float(f.readline()) for _ in range(n)])
        return vals
