"""Mean-field statistics of deep batch-normalized networks.

Submodules: ``specfun`` (Gegenbauer polynomials, arccosine kernels),
``nonlin`` (activation descriptors and Gegenbauer projections), ``kernels``
(V-transforms), ``fixed_point``, ``eigen``, ``mcsim`` (Monte Carlo) and
``cli``.
"""
__version__ = "0.1.0"
