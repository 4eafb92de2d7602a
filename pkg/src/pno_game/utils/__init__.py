"""
Utilities package: artifact files, config validation, logging and seeding.
"""

from .file_ops import ArtifactManager
from .logging_setup import configure_logging
from .seeding import seed_everything
from .validator import ConfigValidator

__all__ = ["ArtifactManager", "ConfigValidator", "configure_logging", "seed_everything"]
