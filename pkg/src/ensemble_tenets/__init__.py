"""Lattice checks of the classical-electrodynamics tenets for ensemble currents.

Submodules: ``tensor_core`` (grids, tensors, tenet residuals), ``kg`` and
``dirac`` (wave equations in external potentials), ``classical_limit``,
``manybody``, ``bell``, ``spectra`` and ``harness`` (config-driven runs).
"""

__version__ = "0.1.0"
