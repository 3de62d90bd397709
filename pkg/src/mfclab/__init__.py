"""mfclab: numerical laboratory for linear-convex mean-field control.

Particle simulation of controlled McKean-Vlasov dynamics, a coupled
forward-backward solver with a Riccati oracle for the scalar LQ family,
exact discrete-adjoint control gradients with a certified projected
gradient descent, and convergence-rate experiment harnesses.
"""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
