"""Multicomponent coagulation on the composition lattice.

Deterministic and stochastic simulation of the discrete coagulation system,
plus diagnostics for directional localization and self-similar profiles.
"""

from __future__ import annotations

__version__ = "0.1.0"
