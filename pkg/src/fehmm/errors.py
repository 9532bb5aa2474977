"""Exception types shared across the package."""


class FehmmError(Exception):
    """Base class for solver errors."""


class MeshError(FehmmError):
    """Invalid mesh construction or unsupported mesh operation."""


class PairingError(FehmmError):
    """Periodic boundary-node matching failed."""


class NonPhysicalDeformation(FehmmError):
    """Deformation gradient with non-positive Jacobian (J <= 0)."""


class DegenerateElement(FehmmError):
    """Element reference-to-physical map is singular."""


class SingularSystem(FehmmError):
    """Direct factorization of a linear system failed or is unreliable."""


class ConstraintRedundancy(FehmmError):
    """Constraint matrix is rank deficient."""


class NoConvergence(FehmmError):
    """Newton iteration exhausted its budget.

    Carries the residual history for diagnosis.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
