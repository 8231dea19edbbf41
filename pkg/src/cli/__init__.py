"""
CLI module initialization
"""

from .commands import COMMANDS, dispatch
from .stages import RunLayout
