"""Shadowing of pseudotrajectories for polynomial ODEs with grow-up."""
from __future__ import annotations

from .polyfield import *  # noqa: F401,F403
from .compactify import *  # noqa: F401,F403
from .flow import *  # noqa: F401,F403
from .pseudo import *  # noqa: F401,F403
from .hyperbolic import *  # noqa: F401,F403
from .shadow import *  # noqa: F401,F403
from . import compactify, flow, hyperbolic, polyfield, pseudo, shadow

__version__ = "0.1.0"

__all__ = (
    polyfield.__all__ + compactify.__all__ + flow.__all__ + pseudo.__all__
    + hyperbolic.__all__ + shadow.__all__
)
