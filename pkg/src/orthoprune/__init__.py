"""Structured filter pruning with orthonormality-regularized training.

The package is organized as:

- ``engine``      taped reverse-mode tensors on numpy
- ``models``      plain / residual / depth-separable conv families
- ``ortho``       Gram-deviation regularizer and spectra diagnostics
- ``importance``  filter importance metrics and group estimates
- ``pruning``     ratio schedules, victim selection, exact surgery
- ``training``    optimizers, train loop, iterative pipeline, early tickets
- ``experiments`` estimator reliability and redundancy measurements
- ``data``        synthetic blob task and raw binary image loading
- ``config``      run configuration files and manifests
- ``cli``         command line entry points
"""

__version__ = "0.1.0"
