"""Test-time controllable multi-task recommendation via generated adapters.

Pipeline: train a sequential backbone, farm preference-conditioned adapters,
train a conditional diffusion generator over their parameters, then steer the
deployed model by generating adapters from preference weights on demand.
"""

__version__ = "0.1.0"

from .kernels import IMPL as KERNEL_IMPL  # noqa: F401
