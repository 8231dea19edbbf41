"""
Decenter alignment lab: simulated active alignment with domain adaptation
Main package initialization
"""

__version__ = "1.0"
__author__ = "Alignment Lab Team"
