"""Two-level Newton orchestration: load stepping and the two staggered schemes.

The nested (standard) scheme fully converges every micro problem inside each
macro iteration; the alternating (novel) scheme performs exactly one micro
Newton iteration per macro iteration and requires the joint macro/micro
residual criterion at convergence.  Both finish each load step with a final
micro pass so that balance holds on both scales, and both record residual
histories, micro iteration counts and wall-clock timings.

One macro iteration is one cycle of: update the affine micro data from the
current macro displacement, iterate the micro problems, transfer stress and
stiffness up, evaluate the macro residual, and (unless converged) solve the
macro saddle-point system.  Macro iteration counts below are counts of macro
solves.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonPhysicalDeformation
from .fem_core import (Assembler, ConstraintSet, SaddleFactor,
                       dirichlet_constraints, stack_constraints)
from .material import Material
from .mesh import Mesh
from .micro_rve import (RveProblem, RveState, build_transformation_matrix,
                        macro_stress, solve_micro)

NESTED = "nested"
ALTERNATING = "alternating"
SCHEMES = (NESTED, ALTERNATING)

FORCE = "force"
DISPLACEMENT = "displacement"


@dataclass
class SolverConfig:
    scheme: str = NESTED
    n_load_steps: int = 4
    macro_tol: float = 1e-8
    micro_tol: float = 1e-10
    max_macro_iter: int = 30
    max_micro_iter: int = 30
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (0.0 < self.macro_tol < 1.0 and 0.0 < self.micro_tol < 1.0):
            raise ValueError("tolerances must lie in (0, 1)")
        if min(self.n_load_steps, self.max_macro_iter, self.max_micro_iter) < 1:
            raise ValueError("counts must be >= 1")


@dataclass
class LoadSpec:
    """Tip loading of the cantilever: a -y line load (N/mm per unit
    thickness) or a prescribed -y displacement (mm) at the free end."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in (FORCE, DISPLACEMENT):
            raise ValueError(f"unknown load mode {self.mode!r}")


@dataclass
class MacroProblem:
    """Cantilever macro domain with one RVE description for all qps.

    The mesh spans [0, length] x [0, height]; the edge x = 0 is clamped and
    the load acts on the edge x = length.
    """

    mesh: Mesh
    material: Material
    rve: RveProblem
    load: LoadSpec


@dataclass
class TwoScaleState:
    D: np.ndarray
    Lam: np.ndarray
    rves: list
    load_factor: float = 0.0
    step: int = 0

    def copy(self) -> "TwoScaleState":
        return TwoScaleState(D=self.D.copy(), Lam=self.Lam.copy(),
                             rves=[r.copy() for r in self.rves],
                             load_factor=self.load_factor, step=self.step)


@dataclass
class StepTrace:
    step: int
    load_factor: float
    residuals: list = field(default_factory=list)   # relative macro residuals
    micro_iters: list = field(default_factory=list)  # micro solves per macro iteration
    iter_times: list = field(default_factory=list)
    n_macro_solves: int = 0
    u_max: float = 0.0
    step_time: float = 0.0
    polish_iters: int = 0
    final_micro_rel: float = 0.0


@dataclass
class SolveTrace:
    scheme: str
    steps: list = field(default_factory=list)
    total_time: float = 0.0

    @property
    def total_micro_iters(self) -> int:
        return sum(sum(s.micro_iters) + s.polish_iters for s in self.steps)


def max_nodal_displacement(mesh: Mesh, D) -> tuple[float, int]:
    """Largest Euclidean nodal displacement norm and its node index."""
    norms = np.linalg.norm(np.asarray(D, dtype=float).reshape(-1, 2), axis=1)
    i = int(np.argmax(norms))
    return float(norms[i]), i


def apply_load_step(state: TwoScaleState, step_index: int, config: SolverConfig):
    """Set the load factor of the given 1-based step (equal increments)."""
    if not 1 <= step_index <= config.n_load_steps:
        raise ValueError("step index out of range")
    state.step = step_index
    state.load_factor = step_index / config.n_load_steps
    return state


def clamp_and_tip_nodes(mesh: Mesh):
    """Node sets of the clamped edge (x = min) and the loaded edge (x = max)."""
    lo, hi = mesh.bbox
    tol = 1e-9 * float(max(hi - lo))
    clamp = np.flatnonzero(np.abs(mesh.nodes[:, 0] - lo[0]) < tol)
    tip = np.flatnonzero(np.abs(mesh.nodes[:, 0] - hi[0]) < tol)
    return clamp, tip


def tip_load_vector(mesh: Mesh, load: LoadSpec) -> np.ndarray:
    """Consistent nodal forces of the full -y line load on the edge x = max.

    The load value is a force per unit edge length and unit thickness; zero
    vector under displacement control.
    """
    f = np.zeros(mesh.ndof)
    if load.mode != FORCE:
        return f
    _, tip = clamp_and_tip_nodes(mesh)
    nodes = tip[np.argsort(mesh.nodes[tip, 1])]
    seg = np.diff(mesh.nodes[nodes, 1])
    trib = np.zeros(len(nodes))
    trib[:-1] += 0.5 * seg
    trib[1:] += 0.5 * seg
    f[2 * nodes + 1] = -load.value * trib
    return f


def cantilever_constraints(mesh: Mesh, load: LoadSpec, load_factor: float) -> ConstraintSet:
    """Clamped edge, plus prescribed tip u_y rows under displacement control."""
    clamp, tip = clamp_and_tip_nodes(mesh)
    cdofs = np.sort(np.concatenate([2 * clamp, 2 * clamp + 1]))
    cs = dirichlet_constraints(cdofs, np.zeros(len(cdofs)), mesh.ndof)
    if load.mode == DISPLACEMENT:
        tdofs = 2 * tip + 1
        vals = np.full(len(tdofs), -load_factor * load.value)
        cs = stack_constraints(cs, dirichlet_constraints(tdofs, vals, mesh.ndof))
    return cs


class TwoScaleSolver:
    """Runs one problem under one configuration and collects the trace."""

    def __init__(self, problem: MacroProblem, config: SolverConfig):
        self.problem = problem
        self.config = config
        self.macro = Assembler(problem.mesh, problem.material)
        mesh = problem.mesh
        lo, hi = mesh.bbox
        self.f_unit = tip_load_vector(mesh, problem.load)
        nq = self.macro.kernel.nqp
        self.qp_index = [(e, q) for e in range(mesh.n_elems) for q in range(nq)]
        mu1 = problem.material.phases[1].mu
        ref = float(np.linalg.norm(self.f_unit))
        self.res_floor = 1e-10 * (ref if ref > 0 else mu1 * (hi[1] - lo[1]))

    def _constraints(self, load_factor: float) -> ConstraintSet:
        return cantilever_constraints(self.problem.mesh, self.problem.load, load_factor)

    def initial_state(self) -> TwoScaleState:
        rves = [self.problem.rve.make_state(float(self.macro.detJw[e, q]))
                for e, q in self.qp_index]
        return TwoScaleState(D=np.zeros(self.problem.mesh.ndof),
                             Lam=np.zeros(0), rves=rves)

    # -- per-qp work ----------------------------------------------------------

    def _macro_point_data(self, D):
        de = D.reshape(-1, 2)[self.problem.mesh.elems]
        u_qp = np.einsum("qn,enk->eqk", self.macro.kernel.N, de)
        H_qp = self.macro.disp_gradients(D)
        return u_qp, H_qp

    def _qp_cycle(self, rstate: RveState, u0, H, N, grads, scheme):
        """Micro stage plus transfer for one quadrature point.

        Returns (stress Voigt, stiffness contribution, micro solves)."""
        rve = self.problem.rve
        rve.update_macro(rstate, u0, H)
        if scheme == NESTED:
            _, info = solve_micro(rve, rstate, tol=self.config.micro_tol,
                                  max_iter=self.config.max_micro_iter)
            f_int, K, fields = info.f_int, info.K, info.fields
            n_solves = info.n_solves
        else:
            f_int, K, fields = rve.assemble(rstate)
            R, gap = rve.residual(rstate, f_int)
            rnorm = float(np.linalg.norm(R))
            rve._note_residual(rstate, rnorm)
            gap_ok = float(np.abs(gap).max(initial=0.0)) <= rve.gap_tol(rstate)
            if gap_ok and rve.converged(rstate, rnorm, self.config.micro_tol):
                # already balanced, the single iteration would be a no-op
                rve.store_fluctuation(rstate)
                n_solves = 0
            else:
                factor = rve.factorize(K)
                dD, dLam = factor.solve(-R, gap)
                rstate.D += dD
                rstate.Lam += dLam
                rve.store_fluctuation(rstate)
                n_solves = 1
                f_int, K, fields = rve.assemble(rstate)
                R, _ = rve.residual(rstate, f_int)
                rve._note_residual(rstate, float(np.linalg.norm(R)))
        _, Sv = macro_stress(rve, rstate, fields)
        factor = rve.factorize(K)
        tm = build_transformation_matrix(rve, K, N, grads, factor=factor).T
        k_contrib = (rstate.qp_weight / rve.volume) * (tm.T @ (K @ tm))
        k_contrib = 0.5 * (k_contrib + k_contrib.T)
        return Sv, k_contrib, n_solves

    def _micro_sweep(self, state: TwoScaleState, scheme: str):
        """Run all qp cycles; returns per-qp stress, macro element matrices
        and the total micro solve count."""
        u_qp, H_qp = self._macro_point_data(state.D)
        mesh = self.problem.mesh
        nq = self.macro.kernel.nqp
        nen = self.macro.kernel.nen
        Sv_all = np.zeros((mesh.n_elems, nq, 3))
        k_el = np.zeros((mesh.n_elems, 2 * nen, 2 * nen))

        def work(idx):
            e, q = self.qp_index[idx]
            return self._qp_cycle(state.rves[idx], u_qp[e, q], H_qp[e, q],
                                  self.macro.kernel.N[q], self.macro.grads[e, q],
                                  scheme)

        if self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as ex:
                results = list(ex.map(work, range(len(self.qp_index))))
        else:
            results = [work(i) for i in range(len(self.qp_index))]

        total = 0
        for idx, (Sv, kc, n) in enumerate(results):
            e, q = self.qp_index[idx]
            Sv_all[e, q] = Sv
            k_el[e] += kc
            total += n
        return Sv_all, k_el, total

    def _polish(self, state: TwoScaleState):
        """Final micro pass of a load step: re-converge every RVE at the final
        macro displacement and refresh the homogenized stress."""
        u_qp, H_qp = self._macro_point_data(state.D)
        total = 0
        worst = 0.0
        for idx, (e, q) in enumerate(self.qp_index):
            r = state.rves[idx]
            self.problem.rve.update_macro(r, u_qp[e, q], H_qp[e, q])
            _, info = solve_micro(self.problem.rve, r, tol=self.config.micro_tol,
                                  max_iter=self.config.max_micro_iter)
            macro_stress(self.problem.rve, r, info.fields)
            total += info.n_solves
            worst = max(worst, r.last_rel)
        return total, worst

    def macro_tangent(self, state: TwoScaleState):
        """Homogenized macro tangential stiffness at a (converged) state."""
        _, k_el, _ = self._micro_sweep(state, NESTED)
        return self.macro.scatter_matrices(k_el)

    # -- load step ------------------------------------------------------------

    def _run_step(self, state: TwoScaleState, load_factor: float, step_id: int) -> StepTrace:
        cfg = self.config
        tr = StepTrace(step=step_id, load_factor=load_factor)
        t_step = time.perf_counter()
        f_ext = load_factor * self.f_unit
        cs = self._constraints(load_factor)
        lam = state.Lam if state.Lam.shape == (cs.n_rows,) else np.zeros(cs.n_rows)
        abs_res = []
        norm0 = None
        for it in range(cfg.max_macro_iter + 1):
            t_it = time.perf_counter()
            Sv_all, k_el, micro_n = self._micro_sweep(state, cfg.scheme)
            f_int = self.macro.force_from_stress(state.D, Sv_all)
            R = f_int - f_ext + cs.G.T @ lam
            gap = cs.b - cs.G @ state.D
            rnorm = float(np.linalg.norm(R))
            abs_res.append(rnorm)
            tr.micro_iters.append(micro_n)
            if norm0 is None and rnorm > self.res_floor:
                norm0 = rnorm
            gap_ok = float(np.abs(gap).max(initial=0.0)) <= 1e-10 * (
                1.0 + float(np.abs(cs.b).max(initial=0.0)))
            micro_ok = (cfg.scheme == NESTED
                        or all(r.last_rel <= cfg.micro_tol for r in state.rves))
            small = (rnorm <= self.res_floor if norm0 is None
                     else rnorm <= cfg.macro_tol * norm0)
            if small and gap_ok and micro_ok:
                tr.iter_times.append(time.perf_counter() - t_it)
                break
            if it == cfg.max_macro_iter:
                tr.residuals = _relative(abs_res, norm0)
                raise NoConvergence(
                    f"macro Newton did not reach tol {cfg.macro_tol:g} "
                    f"in {cfg.max_macro_iter} iterations", tr.residuals)
            K = self.macro.scatter_matrices(k_el)
            factor = SaddleFactor(K, cs)
            dD, dLam = factor.solve(-R, gap)
            state.D += dD
            lam = lam + dLam
            tr.n_macro_solves += 1
            tr.iter_times.append(time.perf_counter() - t_it)
        state.Lam = lam
        tr.polish_iters, tr.final_micro_rel = self._polish(state)
        tr.residuals = _relative(abs_res, norm0)
        tr.u_max, _ = max_nodal_displacement(self.problem.mesh, state.D)
        tr.step_time = time.perf_counter() - t_step
        return tr

    def run(self, state: TwoScaleState | None = None):
        cfg = self.config
        state = self.initial_state() if state is None else state
        trace = SolveTrace(scheme=cfg.scheme)
        t0 = time.perf_counter()
        pending = [s / cfg.n_load_steps for s in range(1, cfg.n_load_steps + 1)]
        halvings = 0
        step_id = 0
        while pending:
            target = pending[0]
            snapshot = state.copy()
            step_id += 1
            try:
                tr = self._run_step(state, target, step_id)
            except NonPhysicalDeformation:
                if halvings >= 3:
                    raise NoConvergence(
                        "load step kept failing after 3 halvings", [])
                halvings += 1
                step_id -= 1
                state = snapshot
                midpoint = 0.5 * (state.load_factor + target)
                pending.insert(0, midpoint)
                continue
            halvings = 0
            pending.pop(0)
            state.load_factor = target
            state.step = step_id
            trace.steps.append(tr)
        trace.total_time = time.perf_counter() - t0
        return state, trace


def _relative(abs_res, norm0):
    if norm0 is None or norm0 <= 0.0:
        return [0.0 for _ in abs_res]
    return [r / norm0 for r in abs_res]


def run_nested(problem: MacroProblem, config: SolverConfig):
    """Standard scheme: fully converged micro problems per macro iteration."""
    if config.scheme != NESTED:
        raise ValueError("config.scheme must be 'nested'")
    return TwoScaleSolver(problem, config).run()


def run_alternating(problem: MacroProblem, config: SolverConfig):
    """Novel scheme: exactly one micro iteration per macro iteration."""
    if config.scheme != ALTERNATING:
        raise ValueError("config.scheme must be 'alternating'")
    return TwoScaleSolver(problem, config).run()
