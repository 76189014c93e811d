"""nrmkit: normalized random measures, NGG posteriors, slice sampling and
dependency operators, with quadrature and Monte Carlo cross-checks built in.
"""

__version__ = "0.1.0"
