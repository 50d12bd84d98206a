"""quiclab: a desk-scale testbed for QUIC connection coalescing measurements."""

from .scenario import AccessProfile, builtin_profiles
from .visit import ProtocolCombo, VisitRecord

__all__ = ["AccessProfile", "builtin_profiles", "ProtocolCombo", "VisitRecord"]
__version__ = "0.1.0"
