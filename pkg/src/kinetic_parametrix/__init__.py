"""Kinetic Langevin toolkit: homogeneous-group calculus, Gaussian kernels, parametrix series,
backward solver, SDE simulation, Wasserstein tools and group mollifiers."""
from . import (backward_solver, drift_fields, gaussian_kernel, langevin_sim, lie_group, measure_tools,
               mollifier, parametrix, test_functions)
from .drift_fields import DriftField, make_field
from .gaussian_kernel import CovarianceConvention
from .parametrix import ParametrixConfig, eval_p, integrate_p
from .langevin_sim import SimConfig, euler_maruyama, localized_solve

__version__ = "0.1.0"
