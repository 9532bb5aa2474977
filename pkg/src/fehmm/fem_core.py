"""Single-scale total-Lagrangian finite element machinery.

Plane-strain continuum elements (bilinear quads with 2x2 Gauss quadrature,
linear triangles with one point), Green-Lagrange kinematics, internal force
and tangential stiffness with material and initial-stress parts, vectorized
global assembly, and a direct solver for the constrained saddle-point system

    [K  G^T] [dD  ]   [f]
    [G   0 ] [dLam] = [g]

with a sparse LU factorization that is reused across right-hand sides.

Dof numbering is node-major with interleaved components: dof(n, i) = 2n + i.
Assembly always runs in ascending element order, so residual histories are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import material as mat
from .errors import DegenerateElement, NoConvergence, NonPhysicalDeformation, SingularSystem
from .mesh import QUAD4, TRI3, Mesh

_G = 1.0 / np.sqrt(3.0)
_QUAD_QP = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_QUAD_W = np.ones(4)
_TRI_QP = np.array([[1.0 / 3.0, 1.0 / 3.0]])
_TRI_W = np.array([0.5])


def shape_eval(kind: str, xi) -> tuple[np.ndarray, np.ndarray]:
    """Shape function values and reference gradients at one point.

    Returns (N, dN) with N of shape (nen,) and dN of shape (nen, 2).
    """
    x, y = float(xi[0]), float(xi[1])
    if kind == QUAD4:
        sx = np.array([-1.0, 1.0, 1.0, -1.0])
        sy = np.array([-1.0, -1.0, 1.0, 1.0])
        N = 0.25 * (1.0 + sx * x) * (1.0 + sy * y)
        dN = np.column_stack([0.25 * sx * (1.0 + sy * y),
                              0.25 * sy * (1.0 + sx * x)])
        return N, dN
    if kind == TRI3:
        N = np.array([1.0 - x - y, x, y])
        dN = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return N, dN
    raise ValueError(f"unknown element kind {kind!r}")


@dataclass(frozen=True)
class ElementKernel:
    """Quadrature rule plus tabulated shape data for one element kind."""

    kind: str
    qp: np.ndarray      # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,)
    N: np.ndarray        # (nq, nen)
    dN: np.ndarray       # (nq, nen, 2)

    @property
    def nen(self) -> int:
        return self.N.shape[1]

    @property
    def nqp(self) -> int:
        return len(self.weights)


def element_kernel(kind: str) -> ElementKernel:
    qp, w = (_QUAD_QP, _QUAD_W) if kind == QUAD4 else (_TRI_QP, _TRI_W)
    if kind not in (QUAD4, TRI3):
        raise ValueError(f"unknown element kind {kind!r}")
    N = np.empty((len(qp), 4 if kind == QUAD4 else 3))
    dN = np.empty((len(qp), N.shape[1], 2))
    for q, x in enumerate(qp):
        N[q], dN[q] = shape_eval(kind, x)
    return ElementKernel(kind=kind, qp=qp, weights=w, N=N, dN=dN)


@dataclass
class AssembledSystem:
    """Global tangential stiffness and residual (internal - external force)."""

    K: sp.csr_matrix
    R: np.ndarray
    ndof: int


@dataclass
class ConstraintSet:
    """Linear constraints G d = b.

    Rows are either single-entry Dirichlet rows or two-entry difference rows
    with coefficients -1/+1; both keep G at full row rank by construction.
    """

    G: sp.csr_matrix
    b: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]


def dirichlet_constraints(dofs, values, ndof) -> ConstraintSet:
    dofs = np.asarray(dofs, dtype=np.int64)
    m = len(dofs)
    G = sp.csr_matrix((np.ones(m), (np.arange(m), dofs)), shape=(m, ndof))
    return ConstraintSet(G=G, b=np.asarray(values, dtype=float).copy())


def difference_constraints(dof_pairs, values, ndof) -> ConstraintSet:
    """Rows enforcing d[q] - d[p] = value for pairs (p, q)."""
    dof_pairs = np.asarray(dof_pairs, dtype=np.int64)
    m = len(dof_pairs)
    rows = np.repeat(np.arange(m), 2)
    cols = dof_pairs.ravel()
    data = np.tile([-1.0, 1.0], m)
    G = sp.csr_matrix((data, (rows, cols)), shape=(m, ndof))
    return ConstraintSet(G=G, b=np.asarray(values, dtype=float).copy())


def stack_constraints(*sets: ConstraintSet) -> ConstraintSet:
    G = sp.vstack([s.G for s in sets], format="csr")
    b = np.concatenate([s.b for s in sets])
    return ConstraintSet(G=G, b=b)


class Assembler:
    """Vectorized force/stiffness assembly for one mesh and material.

    Reference geometry (Jacobians, physical shape gradients, quadrature
    volumes) is computed once; per-call work depends only on the current
    displacement vector.
    """

    def __init__(self, mesh: Mesh, material: mat.Material):
        self.mesh = mesh
        self.material = material
        self.kernel = element_kernel(mesh.kind)
        k = self.kernel
        coords = mesh.nodes[mesh.elems]                      # (e, nen, 2)
        jac = np.einsum("qni,enj->eqij", k.dN, coords)       # (e, nq, 2, 2)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        if np.any(det <= 0):
            e, q = np.argwhere(det <= 0)[0]
            raise DegenerateElement(f"non-positive Jacobian in element {e} at qp {q}")
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1] / det
        inv[..., 1, 1] = jac[..., 0, 0] / det
        inv[..., 0, 1] = -jac[..., 0, 1] / det
        inv[..., 1, 0] = -jac[..., 1, 0] / det
        # physical gradients g[e, q, n, j] = dN_n/dx_j
        self.grads = np.einsum("qni,eqij->eqnj", k.dN, inv)
        self.detJw = det * k.weights[None, :]                # (e, nq)
        self.volume = float(self.detJw.sum())
        nen = k.nen
        edofs = np.empty((mesh.n_elems, 2 * nen), dtype=np.int64)
        edofs[:, 0::2] = 2 * mesh.elems
        edofs[:, 1::2] = 2 * mesh.elems + 1
        self.edofs = edofs
        self._rows = np.repeat(edofs, 2 * nen, axis=1).ravel()
        self._cols = np.tile(edofs, (1, 2 * nen)).ravel()
        self._lam, self._mu = material.lame_arrays(mesh.phase)
        self.ndof = mesh.ndof

    # -- kinematics ---------------------------------------------------------

    def disp_gradients(self, d) -> np.ndarray:
        """Displacement gradient H[e, q, i, j] = du_i/dX_j."""
        de = d.reshape(-1, 2)[self.mesh.elems]               # (e, nen, 2)
        return np.einsum("eqnj,eni->eqij", self.grads, de)

    def qp_fields(self, d):
        """Per-qp in-plane F, stress Voigt (S11, S22, S12), S33 and energy."""
        H = self.disp_gradients(d)
        lam = self._lam[:, None]
        mu = self._mu[:, None]
        if self.material.kinematics == mat.SMALL:
            F2 = np.broadcast_to(np.eye(2), H.shape).copy()
            Sv, S33, Cv, psi = mat.small_strain_batch(H, lam, mu)
        else:
            F2 = np.broadcast_to(np.eye(2), H.shape) + H
            if self.material.law == mat.NEO_HOOKEAN:
                Sv, S33, Cv, psi = mat.nh_batch(F2, lam, mu)
            else:
                Sv, S33, Cv, psi = mat.svk_batch(F2, lam, mu)
        return F2, H, Sv, S33, Cv, psi

    def _b_matrices(self, F2):
        """Strain-displacement operators B[e, q, a, 2n+k] at every qp."""
        g = self.grads
        e, q, n, _ = g.shape
        B = np.empty((e, q, 3, 2 * n))
        b0 = np.einsum("eqn,eqk->eqnk", g[..., 0], F2[..., 0])
        b1 = np.einsum("eqn,eqk->eqnk", g[..., 1], F2[..., 1])
        b2 = (np.einsum("eqn,eqk->eqnk", g[..., 1], F2[..., 0])
              + np.einsum("eqn,eqk->eqnk", g[..., 0], F2[..., 1]))
        B[:, :, 0, :] = b0.reshape(e, q, 2 * n)
        B[:, :, 1, :] = b1.reshape(e, q, 2 * n)
        B[:, :, 2, :] = b2.reshape(e, q, 2 * n)
        return B

    # -- global quantities --------------------------------------------------

    def internal_force(self, d) -> np.ndarray:
        f_el, _ = self._force_elements(d)
        return self._scatter_vector(f_el)

    def _force_elements(self, d):
        F2, H, Sv, S33, Cv, psi = self.qp_fields(d)
        B = self._b_matrices(F2)
        f_el = np.einsum("eq,eqai,eqa->ei", self.detJw, B, Sv)
        return f_el, (F2, Sv, S33, Cv, B)

    def force_and_tangent(self, d):
        """Internal force vector and assembled tangential stiffness."""
        f_el, (F2, Sv, S33, Cv, B) = self._force_elements(d)
        k_el = np.einsum("eq,eqai,eqab,eqbj->eij", self.detJw, B, Cv, B)
        if self.material.kinematics == mat.FINITE:
            S2 = np.empty(Sv.shape[:-1] + (2, 2))
            S2[..., 0, 0] = Sv[..., 0]
            S2[..., 1, 1] = Sv[..., 1]
            S2[..., 0, 1] = Sv[..., 2]
            S2[..., 1, 0] = Sv[..., 2]
            shat = np.einsum("eq,eqna,eqab,eqmb->enm", self.detJw, self.grads, S2, self.grads)
            e, n = shat.shape[0], shat.shape[1]
            k_el += np.einsum("enm,kl->enkml", shat, np.eye(2)).reshape(e, 2 * n, 2 * n)
        return self._scatter_vector(f_el), self.scatter_matrices(k_el)

    def force_from_stress(self, d, Sv_ext) -> np.ndarray:
        """Internal force for an externally supplied per-qp stress field."""
        if self.material.kinematics == mat.SMALL:
            F2 = np.broadcast_to(np.eye(2), self.grads.shape[:2] + (2, 2))
        else:
            F2 = np.broadcast_to(np.eye(2), self.grads.shape[:2] + (2, 2)) + self.disp_gradients(d)
        B = self._b_matrices(np.ascontiguousarray(F2))
        f_el = np.einsum("eq,eqai,eqa->ei", self.detJw, B, Sv_ext)
        return self._scatter_vector(f_el)

    def energy(self, d) -> float:
        _, _, _, _, _, psi = self.qp_fields(d)
        return float((self.detJw * psi).sum())

    def scatter_matrices(self, k_el) -> sp.csr_matrix:
        K = sp.coo_matrix((k_el.ravel(), (self._rows, self._cols)),
                          shape=(self.ndof, self.ndof))
        return K.tocsr()

    def _scatter_vector(self, f_el) -> np.ndarray:
        f = np.zeros(self.ndof)
        np.add.at(f, self.edofs.ravel(), f_el.ravel())
        return f


# -- single-element wrappers (tests and diagnostics) ------------------------


def _single_element_mesh(kind, coords, phase=1):
    nen = len(coords)
    return Mesh(np.asarray(coords, dtype=float),
                np.arange(nen, dtype=np.int64)[None, :], kind,
                np.array([phase], dtype=np.int64))


def deformation_gradient(kind, coords, d_el, xi) -> mat.DeformationState:
    """Deformation state from element nodal displacements at point xi."""
    _, dN = shape_eval(kind, xi)
    jac = np.einsum("ni,nj->ij", dN, np.asarray(coords, dtype=float))
    det = np.linalg.det(jac)
    if abs(det) < 1e-14:
        raise DegenerateElement("singular element Jacobian")
    g = dN @ np.linalg.inv(jac)
    H = np.asarray(d_el, dtype=float).reshape(-1, 2).T @ g
    F = np.eye(2) + H
    return mat.DeformationState.from_deformation_gradient(F)


def element_internal_force(kind, coords, d_el, m: mat.Material, phase=1) -> np.ndarray:
    a = Assembler(_single_element_mesh(kind, coords, phase), m)
    return a.internal_force(np.asarray(d_el, dtype=float))


def element_tangent(kind, coords, d_el, m: mat.Material, phase=1) -> np.ndarray:
    a = Assembler(_single_element_mesh(kind, coords, phase), m)
    _, K = a.force_and_tangent(np.asarray(d_el, dtype=float))
    return K.toarray()


def assemble(mesh: Mesh, d, m: mat.Material, f_ext=None) -> AssembledSystem:
    """One-shot global assembly; solvers should hold an Assembler instead."""
    a = Assembler(mesh, m)
    f_int, K = a.force_and_tangent(np.asarray(d, dtype=float))
    R = f_int if f_ext is None else f_int - f_ext
    return AssembledSystem(K=K, R=R, ndof=a.ndof)


# -- saddle-point solver -----------------------------------------------------


class SaddleFactor:
    """LU factorization of the constrained system, reusable across solves.

    Constraint rows are scaled by a characteristic stiffness before
    factorization; multipliers are returned in unscaled (force) units.
    Every solve is residual-checked and refined once if needed.
    """

    def __init__(self, K: sp.spmatrix, constraints: ConstraintSet):
        self.K = K.tocsr()
        self.G = constraints.G
        self.n = K.shape[0]
        self.m = self.G.shape[0]
        diag = np.abs(self.K.diagonal())
        self.kappa = float(diag.mean()) if diag.size and diag.mean() > 0 else 1.0
        A = sp.bmat([[self.K, self.kappa * self.G.T],
                     [self.kappa * self.G, None]], format="csc")
        try:
            self.lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A",
                                diag_pivot_thresh=0.1,
                                options={"SymmetricMode": True})
        except RuntimeError as err:
            raise SingularSystem(f"saddle factorization failed: {err}") from err

    def _solve_raw(self, rhs):
        out = self.lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SingularSystem("factorization produced non-finite solution")
        return out

    def solve(self, f, g):
        """Solve K x + G^T lam = f, G x = g. Returns (x, lam)."""
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        rhs = np.concatenate([f, self.kappa * g])
        sol = self._solve_raw(rhs)
        x, y = sol[:self.n], sol[self.n:]
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        for _ in range(2):
            r1 = f - self.K @ x - self.kappa * (self.G.T @ y)
            r2 = self.kappa * g - self.kappa * (self.G @ x)
            res = np.sqrt(np.linalg.norm(r1) ** 2 + np.linalg.norm(r2) ** 2)
            if res <= 1e-12 * scale:
                break
            corr = self._solve_raw(np.concatenate([r1, r2]))
            x = x + corr[:self.n]
            y = y + corr[self.n:]
        else:
            r1 = f - self.K @ x - self.kappa * (self.G.T @ y)
            r2 = self.kappa * g - self.kappa * (self.G @ x)
            res = np.sqrt(np.linalg.norm(r1) ** 2 + np.linalg.norm(r2) ** 2)
            if res > 1e-10 * scale:
                raise SingularSystem(
                    f"saddle solve residual {res / scale:.3e} after refinement")
        return x, self.kappa * y

    def solve_many(self, F, Gv):
        """Column-wise solves: F (n, k) force blocks, Gv (m, k) constraint blocks."""
        rhs = np.vstack([F, self.kappa * Gv])
        sol = self._solve_raw(rhs)
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("factorization produced non-finite solution")
        X, Y = sol[:self.n], sol[self.n:]
        # one refinement pass keeps multi-RHS solves at direct-solver accuracy
        R1 = F - self.K @ X - self.kappa * (self.G.T @ Y)
        R2 = self.kappa * Gv - self.kappa * (self.G @ X)
        corr = self._solve_raw(np.vstack([R1, R2]))
        return X + corr[:self.n], self.kappa * (Y + corr[self.n:])


def solve_saddle(K: sp.spmatrix, constraints: ConstraintSet, rhs):
    """One-shot constrained solve; returns (solution, multipliers)."""
    if constraints.n_rows == 0:
        x = spla.spsolve(K.tocsc(), np.asarray(rhs, dtype=float))
        return x, np.zeros(0)
    return SaddleFactor(K, constraints).solve(rhs, constraints.b)


# -- generic Newton driver ---------------------------------------------------


def newton_solve(assembler: Assembler, constraints: ConstraintSet, f_ext,
                 tol: float = 1e-10, max_iter: int = 30, d0=None, lam0=None,
                 res_scale: float | None = None):
    """Newton iteration for one load stage of a constrained problem.

    The residual is F_int - F_ext + G^T Lam; convergence requires
    ||R|| <= tol * scale with scale the larger of the first residual norm
    and ``res_scale``.  Returns (d, lam, history of absolute norms).
    """
    d = np.zeros(assembler.ndof) if d0 is None else np.asarray(d0, dtype=float).copy()
    lam = np.zeros(constraints.n_rows) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    f_ext = np.zeros(assembler.ndof) if f_ext is None else np.asarray(f_ext, dtype=float)
    history = []
    scale = res_scale if res_scale else 0.0
    for _ in range(max_iter + 1):
        f_int, K = assembler.force_and_tangent(d)
        R = f_int - f_ext + constraints.G.T @ lam
        gap = constraints.b - constraints.G @ d
        rnorm = float(np.linalg.norm(R))
        history.append(rnorm)
        scale = max(scale, rnorm, 1e-300)
        if rnorm <= tol * scale and float(np.linalg.norm(gap, ord=np.inf)) <= 1e-10 * (
                1.0 + float(np.linalg.norm(constraints.b, ord=np.inf))):
            return d, lam, history
        if len(history) > max_iter:
            break
        factor = SaddleFactor(K, constraints)
        dd, dl = factor.solve(-R, gap)
        d += dd
        lam += dl
    raise NoConvergence(f"Newton failed to reach tol {tol:g} in {max_iter} iterations",
                        history)
