"""Numerical laboratory for the Ricci-DeTurck flow from rough metrics glued to flat space."""

__version__ = "0.1.0"
