"""contraction-kit: learn, synthesize, and certify contraction metrics for
control-affine nonlinear tracking.

Submodules
----------
numerics   symmetric eigensolver, RK4/Euler-Maruyama, quadrature, RNG streams
systems    benchmark systems (pvtol, scalar, lti), annihilators, targets
netmetric  dual-metric and controller networks with exact gradients
losses     sampled definiteness penalties and the training loss
training   dataset sampling and the gradient-descent loop
cvstem     constant-metric convex synthesis and the path-integral controller
certify    bound constants, error envelopes, and trajectory certificates
cli        the ``contraction-kit`` command line
"""

from ._backend import BACKEND_NAME, available_backends

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "available_backends", "__version__"]
