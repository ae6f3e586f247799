"""Exact simulation and analysis of neighbor-averaging flocking dynamics."""
from .numerics import EXACT, Field, parse_rational
from .dynamics import (
    LAZY_WALK,
    VICSEK,
    Configuration,
    HysteresisRule,
    Network,
    PerturbationEvent,
    build_network,
    run,
    step,
    transition,
)

__all__ = [
    "EXACT", "Field", "parse_rational", "LAZY_WALK", "VICSEK", "Configuration",
    "HysteresisRule", "Network", "PerturbationEvent", "build_network", "run", "step", "transition",
]
__version__ = "0.1.0"
