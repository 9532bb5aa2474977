"""Constitutive kernels in the reference configuration.

Two laws share one interface, both returning the second Piola-Kirchhoff
stress and the material tangent as functions of the right Cauchy-Green
tensor:

* compressible neo-Hookean hyperelasticity,
* St. Venant-Kirchhoff elasticity (stress linear in Green-Lagrange strain,
  constant tangent), the standard reading of "linear elasticity with
  geometric nonlinearity".

Stress and tangent are produced in full 3D with Voigt ordering
(11, 22, 33, 12, 13, 23) and the factor-2 convention on shear strains.
Plane-strain reduction happens in the element kernels, which consume the
in-plane components only.

Batched variants of the kernels operate on stacked in-plane deformation
gradients; they are the hot path of element assembly and are verified
against the scalar formulas in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPhysicalDeformation

NEO_HOOKEAN = "neo-hookean"
LINEAR = "linear"
_LAWS = (NEO_HOOKEAN, LINEAR)

FINITE = "finite"
SMALL = "small"

#: Voigt index pairs, order (11, 22, 33, 12, 13, 23).
VOIGT = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class LameParams:
    """Lame parameters in N/mm^2."""

    lam: float
    mu: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("shear modulus must be positive")
        if self.lam <= -2.0 / 3.0 * self.mu:
            raise ValueError("lambda must exceed -2/3 mu")


def lame_from_engineering(E: float, nu: float) -> LameParams:
    """Convert Young's modulus and Poisson ratio to Lame parameters.

    Raises ValueError outside -1 < nu < 0.5 (nu = 0.5 is incompressible and
    unsupported).
    """
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError("Poisson ratio must satisfy -1 < nu < 0.5 "
                         "(incompressible limit unsupported)")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return LameParams(lam, mu)


@dataclass(frozen=True)
class DeformationState:
    """Deformation measures at one quadrature point, plane-strain embedded.

    F is the 3x3 deformation gradient (F33 = 1, zero out-of-plane shear for
    2D states), C = F^T F, J = det F and E = (C - I)/2.
    """

    F: np.ndarray
    C: np.ndarray
    J: float
    E: np.ndarray

    @classmethod
    def from_deformation_gradient(cls, F) -> "DeformationState":
        F = np.asarray(F, dtype=float)
        if F.shape == (2, 2):
            F3 = np.eye(3)
            F3[:2, :2] = F
            F = F3
        J = float(np.linalg.det(F))
        if J <= 0:
            raise NonPhysicalDeformation(f"det F = {J:.3e} <= 0")
        C = F.T @ F
        return cls(F=F, C=C, J=J, E=0.5 * (C - np.eye(3)))


@dataclass(frozen=True)
class StressTangent:
    """Second Piola-Kirchhoff stress (3x3) and material tangent (6x6 Voigt)."""

    S: np.ndarray
    CC: np.ndarray


def _voigt_tangent_from_tensor(CC4):
    # fill the upper triangle and mirror: major symmetry holds exactly
    M = np.empty((6, 6))
    for a, (i, j) in enumerate(VOIGT):
        for b, (k, l) in enumerate(VOIGT):
            if b >= a:
                M[a, b] = CC4[i, j, k, l]
            else:
                M[a, b] = M[b, a]
    return M


def neo_hookean(state: DeformationState, p: LameParams) -> StressTangent:
    """Neo-Hookean stress and tangent.

    S = lam/2 (J^2 - 1) C^-1 + mu (I - C^-1) and the tangent follows from
    CC = 4 d^2 psi / dC dC with dC^-1/dC = -1/2 (Ci_ik Ci_jl + Ci_jk Ci_il).
    """
    if state.J <= 0:
        raise NonPhysicalDeformation(f"det F = {state.J:.3e} <= 0")
    lam, mu = p.lam, p.mu
    J2 = state.J ** 2
    Ci = np.linalg.inv(state.C)
    S = 0.5 * lam * (J2 - 1.0) * Ci + mu * (np.eye(3) - Ci)
    A = -0.5 * (np.einsum("ik,jl->ijkl", Ci, Ci) + np.einsum("jk,il->ijkl", Ci, Ci))
    CC4 = (lam * (J2 - 1.0) - 2.0 * mu) * A + lam * J2 * np.einsum("ij,kl->ijkl", Ci, Ci)
    return StressTangent(S=S, CC=_voigt_tangent_from_tensor(CC4))


def linear_elastic(state: DeformationState, p: LameParams) -> StressTangent:
    """St. Venant-Kirchhoff stress S = lam tr(E) I + 2 mu E, constant tangent."""
    lam, mu = p.lam, p.mu
    S = lam * np.trace(state.E) * np.eye(3) + 2.0 * mu * state.E
    I = np.eye(3)
    CC4 = (lam * np.einsum("ij,kl->ijkl", I, I)
           + mu * (np.einsum("ik,jl->ijkl", I, I) + np.einsum("il,jk->ijkl", I, I)))
    return StressTangent(S=S, CC=_voigt_tangent_from_tensor(CC4))


def strain_energy(state: DeformationState, p: LameParams,
                  law: str = NEO_HOOKEAN) -> float:
    """Strain energy density in N/mm^2; zero at C = I for both laws."""
    lam, mu = p.lam, p.mu
    if law == NEO_HOOKEAN:
        if state.J <= 0:
            raise NonPhysicalDeformation(f"det F = {state.J:.3e} <= 0")
        return (0.25 * lam * (state.J ** 2 - 1.0)
                - (0.5 * lam + mu) * np.log(state.J)
                + 0.5 * mu * (np.trace(state.C) - 3.0))
    if law == LINEAR:
        E = state.E
        return 0.5 * lam * np.trace(E) ** 2 + mu * float(np.einsum("ij,ij->", E, E))
    raise ValueError(f"unknown law {law!r}")


def evaluate(state: DeformationState, p: LameParams, law: str) -> StressTangent:
    if law == NEO_HOOKEAN:
        return neo_hookean(state, p)
    if law == LINEAR:
        return linear_elastic(state, p)
    raise ValueError(f"unknown law {law!r}")


@dataclass(frozen=True)
class Material:
    """Constitutive selector plus per-phase parameters.

    kinematics ``"finite"`` uses the Green-Lagrange strain of the full
    deformation gradient; ``"small"`` linearizes the kinematics (E = sym
    grad u, no geometric stiffness), which together with the linear law
    gives the fully linear problem.
    """

    law: str
    phases: dict
    kinematics: str = FINITE

    def __post_init__(self):
        if self.law not in _LAWS:
            raise ValueError(f"unknown law {self.law!r}")
        if self.kinematics not in (FINITE, SMALL):
            raise ValueError(f"unknown kinematics {self.kinematics!r}")
        if self.law == NEO_HOOKEAN and self.kinematics == SMALL:
            raise ValueError("neo-Hookean law requires finite kinematics")
        for pid in (1, 2):
            if pid not in self.phases:
                raise ValueError(f"missing parameters for phase {pid}")

    @property
    def is_linear(self) -> bool:
        """True when stress depends linearly on displacement (constant tangent)."""
        return self.law == LINEAR and self.kinematics == SMALL

    def lame_arrays(self, phase_ids):
        lam = np.array([self.phases[int(p)].lam for p in phase_ids])
        mu = np.array([self.phases[int(p)].mu for p in phase_ids])
        return lam, mu


def two_phase(law: str = NEO_HOOKEAN, kinematics: str = FINITE,
              E1: float = 100_000.0, nu1: float = 0.2,
              E2: float = 40_000.0, nu2: float = 0.2) -> Material:
    """Benchmark material: stiff phase 1, soft phase 2, equal Poisson ratio."""
    return Material(law=law, kinematics=kinematics,
                    phases={1: lame_from_engineering(E1, nu1),
                            2: lame_from_engineering(E2, nu2)})


def homogeneous(law: str = NEO_HOOKEAN, kinematics: str = FINITE,
                E: float = 100_000.0, nu: float = 0.2) -> Material:
    """Single-phase material (both phase ids map to the same parameters)."""
    p = lame_from_engineering(E, nu)
    return Material(law=law, kinematics=kinematics, phases={1: p, 2: p})


# ---------------------------------------------------------------------------
# batched kernels on stacked in-plane states
#
# Shapes: F2 (..., 2, 2) in-plane deformation gradient with an implied
# F33 = 1.  Outputs: Sv (..., 3) in-plane stress (S11, S22, S12), S33 (...,),
# Cv (..., 3, 3) in-plane Voigt tangent for (11, 22, 12) with factor-2
# shear strain, psi (...,) energy density.
# ---------------------------------------------------------------------------


def nh_batch(F2, lam, mu):
    """Neo-Hookean on stacked in-plane deformation gradients."""
    detF = F2[..., 0, 0] * F2[..., 1, 1] - F2[..., 0, 1] * F2[..., 1, 0]
    if np.any(detF <= 0):
        raise NonPhysicalDeformation("det F <= 0 at a quadrature point")
    C11 = F2[..., 0, 0] ** 2 + F2[..., 1, 0] ** 2
    C22 = F2[..., 0, 1] ** 2 + F2[..., 1, 1] ** 2
    C12 = F2[..., 0, 0] * F2[..., 0, 1] + F2[..., 1, 0] * F2[..., 1, 1]
    J2 = detF ** 2
    # inverse of the in-plane C block; the 33 block of C^-1 is 1
    i11 = C22 / J2
    i22 = C11 / J2
    i12 = -C12 / J2
    a = 0.5 * lam * (J2 - 1.0)
    Sv = np.stack([a * i11 + mu * (1.0 - i11),
                   a * i22 + mu * (1.0 - i22),
                   a * i12 - mu * i12], axis=-1)
    S33 = a
    c = lam * (J2 - 1.0) - 2.0 * mu
    b = lam * J2
    Cv = np.empty(F2.shape[:-2] + (3, 3))
    Cv[..., 0, 0] = -c * i11 * i11 + b * i11 * i11
    Cv[..., 1, 1] = -c * i22 * i22 + b * i22 * i22
    Cv[..., 0, 1] = -c * i12 * i12 + b * i11 * i22
    Cv[..., 0, 2] = -c * i11 * i12 + b * i11 * i12
    Cv[..., 1, 2] = -c * i22 * i12 + b * i22 * i12
    Cv[..., 2, 2] = -0.5 * c * (i11 * i22 + i12 * i12) + b * i12 * i12
    Cv[..., 1, 0] = Cv[..., 0, 1]
    Cv[..., 2, 0] = Cv[..., 0, 2]
    Cv[..., 2, 1] = Cv[..., 1, 2]
    psi = 0.25 * lam * (J2 - 1.0) - (0.5 * lam + mu) * 0.5 * np.log(J2) \
        + 0.5 * mu * (C11 + C22 - 2.0)
    return Sv, S33, Cv, psi


def svk_batch(F2, lam, mu):
    """St. Venant-Kirchhoff on stacked in-plane deformation gradients."""
    E11 = 0.5 * (F2[..., 0, 0] ** 2 + F2[..., 1, 0] ** 2 - 1.0)
    E22 = 0.5 * (F2[..., 0, 1] ** 2 + F2[..., 1, 1] ** 2 - 1.0)
    E12 = 0.5 * (F2[..., 0, 0] * F2[..., 0, 1] + F2[..., 1, 0] * F2[..., 1, 1])
    return _linear_stress(E11, E22, E12, lam, mu)


def small_strain_batch(H, lam, mu):
    """Linear law on stacked displacement gradients (small kinematics)."""
    E11 = H[..., 0, 0]
    E22 = H[..., 1, 1]
    E12 = 0.5 * (H[..., 0, 1] + H[..., 1, 0])
    return _linear_stress(E11, E22, E12, lam, mu)


def _linear_stress(E11, E22, E12, lam, mu):
    tr = E11 + E22  # E33 = 0 in plane strain
    Sv = np.stack([lam * tr + 2.0 * mu * E11,
                   lam * tr + 2.0 * mu * E22,
                   2.0 * mu * E12], axis=-1)
    S33 = lam * tr
    Cv = np.zeros(E11.shape + (3, 3))
    Cv[..., 0, 0] = lam + 2.0 * mu
    Cv[..., 1, 1] = lam + 2.0 * mu
    Cv[..., 0, 1] = lam
    Cv[..., 1, 0] = lam
    Cv[..., 2, 2] = mu
    psi = 0.5 * lam * tr ** 2 + mu * (E11 ** 2 + E22 ** 2 + 2.0 * E12 ** 2)
    return Sv, S33, Cv, psi
