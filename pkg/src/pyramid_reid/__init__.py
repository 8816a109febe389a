"""Dual-branch person re-identification toolkit.

A ResNet global branch and a lightweight bidirectional feature-pyramid
branch share one backbone; attention blocks, a spectral orthogonality
penalty and a batch-hard triplet objective shape the joint embedding used
for query/gallery retrieval.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config  # noqa: F401
from .model import ReidModel, parameter_table  # noqa: F401
