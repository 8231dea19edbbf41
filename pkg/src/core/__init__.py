"""
Core module initialization
"""

from .errors import LabError
from .logging_setup import configure_logging
from .seeding import derive_seed, seed_everything
