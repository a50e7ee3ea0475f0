"""Random-subspace Frank-Wolfe toolkit.

Projection-free solvers that replace the full-space linear minimization
oracle by exact oracles over random low-dimensional affine sections of the
feasible set, plus the statistical machinery to validate the section
efficiency and spectral compression quantities the method relies on.
"""

__version__ = "0.1.0"
