"""Heat kernels of the Laplacian perturbed by a nonlocal jump operator.

Modules: ``coefficients`` (jump intensities b), ``kernels`` (Gaussian and
stable reference kernels), ``nonlocal_op`` (quadrature for S^b),
``duhamel`` (parametrix series tables), ``oracle`` (Fourier inversion),
``estimates`` (executable inequality checks), ``process_sim`` (Monte Carlo)
and ``cli``.
"""
from .coefficients import Coefficient, ModelParams, make_coefficient
from .duhamel import KernelTable, SpaceTimeGrid, build_series, build_to_time

__all__ = ["Coefficient", "ModelParams", "make_coefficient", "KernelTable", "SpaceTimeGrid",
           "build_series", "build_to_time"]
__version__ = "0.1.0"
