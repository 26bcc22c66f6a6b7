"""Recurrent switching dynamical systems with invertible flow emissions.

Library layout:

- ``nnet``     small dense networks with hand-written reverse-mode gradients
- ``rmsm``     the recurrent Markov switching prior (exact inference, gradients)
- ``flow``     invertible emission maps (affine couplings + LU mixing)
- ``trainer``  exact-likelihood training loop
- ``theory``   executable identifiability condition checks and recovery
- ``datagen``  synthetic benchmark generators and the dataset file format
- ``metrics``  ground-truth alignment metrics (MCC, regime F1)
- ``cli``      the ``rsds`` command-line entry point
"""

from rsds.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    DivergenceError,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DataFormatError",
    "DivergenceError",
]

__version__ = "0.1.0"
