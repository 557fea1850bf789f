"""Bit-exact fixed-point layer.

``arith`` holds formats and primitives; ``pipeline`` runs the whole
classifier on integers and is imported explicitly to avoid import cycles.
"""

from .arith import *  # noqa: F401,F403
from .arith import __all__  # noqa: F401
