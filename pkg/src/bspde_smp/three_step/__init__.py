"""Decoupling-field scheme for the coupled forward-backward system."""

from .grid import (GridConfig, PdeSolution, decoupled_drift, inject_exact, pde_residual,
                   read_grid, residual_field, solve_decoupling_pde)
from .kernel import KernelQuadConfig, block_a, gamma0_kernel, picard_kernel_step, solve_by_kernel
from .scheme import FbspdeSolution, run_three_step
from .spec import BUILTIN_SPECS, FbspdeSpec, constant_spec, example_e_frozen, manufactured, spec_from_name

__all__ = [
    "BUILTIN_SPECS", "FbspdeSolution", "FbspdeSpec", "GridConfig", "KernelQuadConfig", "PdeSolution",
    "block_a", "constant_spec", "decoupled_drift", "example_e_frozen", "gamma0_kernel", "inject_exact",
    "manufactured", "pde_residual", "picard_kernel_step", "read_grid", "residual_field", "run_three_step",
    "solve_by_kernel", "solve_decoupling_pde", "spec_from_name",
]
