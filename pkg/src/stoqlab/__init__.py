"""
stoqlab: a desk-scale laboratory for stochastic quantum mechanics and
stochastic electrodynamics.

Modules
-------
core      parameters, grids, fields, grid calculus, random streams
quantum   Schroedinger-like solver and the fields derived from psi
dynamics  residuals of the SQM dynamical equations
samplers  Nelson and Brownian trajectory ensembles and their estimators
zpf       zero-point field, Braffort-Marshall oscillator, power balance
config    flat dotted-key scenario configs
scenarios scenario runners and manifests
verify    the acceptance suite
"""
__version__ = "0.1.0"

from .core import (ComplexField, Grid1D, PhysicalParams, RandomStreamSpec, ScalarField,
                   derivative, integrate, laplacian)

__all__ = ["__version__", "PhysicalParams", "Grid1D", "ScalarField", "ComplexField",
           "RandomStreamSpec", "derivative", "laplacian", "integrate"]
