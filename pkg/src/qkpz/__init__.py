"""ASEP(q,j) and ASIP(q,k) simulation, the microscopic Gartner transform, and
checks of convergence to the stochastic heat equation."""
from .qcore import Model, QParameters, ScalingParameters, drift_constant, q_number, weak_asymmetry

__version__ = "0.1.0"

__all__ = ["Model", "QParameters", "ScalingParameters", "drift_constant", "q_number",
           "weak_asymmetry", "__version__"]
