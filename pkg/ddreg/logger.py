"""
Logging setup and shared logger for the ddreg package.
"""

import logging

# Set up a shared logger for the ddreg package
logger = logging.getLogger("ddreg")
