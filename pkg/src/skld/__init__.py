"""Spectral-Galerkin toolkit for the damped stochastic wave equation and its small-mass limit.

Submodules
----------
spectral        eigenbasis, Sobolev norms, propagators, nonlinearities
noise           counter-based Gaussian increments
dynamics        exponential integrators, skeleton equations, coupled small-mass runs
action          action functionals, minimum energies, mollifier
quasipotential  minimum action method and the small-mass ladder
exit            Monte Carlo exit times and places
cli             ``skld`` command line runner
"""

__version__ = "0.1.0"
